use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::TaskFamily;
use crate::error::Result;
use crate::model::{RegressionBatch, ScalarBatch};

pub const AMPLITUDE_RANGE: (f64, f64) = (0.1, 5.0);
pub const PHASE_RANGE: (f64, f64) = (0.0, PI);
pub const INPUT_RANGE: (f64, f64) = (-5.0, 5.0);

/// `y = A·sin(x + φ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinusoidTask {
    pub amplitude: f64,
    pub phase: f64,
}

impl SinusoidTask {
    pub fn eval(&self, x: f64) -> f64 {
        self.amplitude * (x + self.phase).sin()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SinusoidFamily;

impl TaskFamily for SinusoidFamily {
    type Task = SinusoidTask;
    type Batch = RegressionBatch;

    fn sample_task_with(&self, rng: &mut ChaCha8Rng, _index: u64) -> SinusoidTask {
        SinusoidTask {
            amplitude: rng.gen_range(AMPLITUDE_RANGE.0..=AMPLITUDE_RANGE.1),
            phase: rng.gen_range(PHASE_RANGE.0..=PHASE_RANGE.1),
        }
    }

    fn sample_batch(&self, task: &SinusoidTask, k: usize, rng: &mut ChaCha8Rng) -> Result<RegressionBatch> {
        let x: Vec<f64> = (0..k)
            .map(|_| rng.gen_range(INPUT_RANGE.0..=INPUT_RANGE.1))
            .collect();
        let y = x.iter().map(|&v| task.eval(v)).collect();
        Ok(RegressionBatch { x, y })
    }
}

/// Scalar task with optimum `center`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticTask {
    pub center: f64,
}

/// Centers uniform in `[-1, 1]`; samples are `center + noise·U(−1, 1)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct QuadraticFamily {
    pub noise: f64,
}

impl TaskFamily for QuadraticFamily {
    type Task = QuadraticTask;
    type Batch = ScalarBatch;

    fn sample_task_with(&self, rng: &mut ChaCha8Rng, _index: u64) -> QuadraticTask {
        QuadraticTask {
            center: rng.gen_range(-1.0..=1.0),
        }
    }

    fn sample_batch(&self, task: &QuadraticTask, k: usize, rng: &mut ChaCha8Rng) -> Result<ScalarBatch> {
        let samples = (0..k)
            .map(|_| {
                if self.noise > 0.0 {
                    task.center + self.noise * rng.gen_range(-1.0..=1.0)
                } else {
                    task.center
                }
            })
            .collect();
        Ok(ScalarBatch { samples })
    }
}
