//! Small learners for numeric task families.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::learner::Learner;
use crate::params::{Bound, ParamSet};
use crate::tensor::{Graph, Tensor, Var};

/// Scalar samples; the loss of `θ` is `mean_j (θ − y_j)²`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarBatch {
    pub samples: Vec<f64>,
}

/// One-parameter quadratic learner. The minimizer of a batch's loss is the
/// sample mean, and every quantity of the meta-learning loop has a closed
/// form, which makes it the reference problem for the meta gradient.
#[derive(Debug, Clone, Default)]
pub struct Quadratic {
    /// Initial value of `theta`.
    pub init: f64,
}

impl Learner for Quadratic {
    type Batch = ScalarBatch;

    fn loss(&self, g: &mut Graph, params: &Bound, batch: &ScalarBatch, _train: bool) -> Result<Var> {
        if batch.samples.is_empty() {
            return Err(Error::DegenerateBatch("no samples".into()));
        }
        let theta = params.get("theta")?;
        let y = g.constant(Tensor::vector(batch.samples.clone()));
        // theta is a one-element tensor, so it broadcasts against the samples
        let diff = g.sub(y, theta)?;
        let sq = g.mul(diff, diff)?;
        Ok(g.mean(sq))
    }

    fn init_params(&self, _seed: u64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("theta", Tensor::vector(vec![self.init])).unwrap();
        p
    }
}

/// Inputs and targets of a 1-D regression problem.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionBatch {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Fully connected ReLU network `1 → hidden… → 1` trained with mean
/// squared error.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Vec<usize>,
}

impl Default for Mlp {
    fn default() -> Self {
        Self {
            hidden: vec![40, 40],
        }
    }
}

impl Mlp {
    fn widths(&self) -> Vec<usize> {
        std::iter::once(1)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect()
    }

    /// Network output `[n × 1]` for inputs `x`.
    pub fn forward(&self, g: &mut Graph, params: &Bound, x: &[f64]) -> Result<Var> {
        let widths = self.widths();
        let mut h = g.constant(Tensor::new(vec![x.len(), 1], x.to_vec())?);
        for l in 0..widths.len() - 1 {
            let w = params.get(&format!("l{l}.w"))?;
            let b = params.get(&format!("l{l}.b"))?;
            let z = g.matmul(h, w)?;
            h = g.add_row(z, b)?;
            if l + 2 < widths.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

impl Learner for Mlp {
    type Batch = RegressionBatch;

    fn loss(&self, g: &mut Graph, params: &Bound, batch: &RegressionBatch, _train: bool) -> Result<Var> {
        if batch.x.is_empty() || batch.x.len() != batch.y.len() {
            return Err(Error::DegenerateBatch(format!(
                "{} inputs for {} targets",
                batch.x.len(),
                batch.y.len()
            )));
        }
        let pred = self.forward(g, params, &batch.x)?;
        let y = g.constant(Tensor::new(vec![batch.y.len(), 1], batch.y.clone())?);
        let diff = g.sub(pred, y)?;
        let sq = g.mul(diff, diff)?;
        Ok(g.mean(sq))
    }

    fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = self.widths();
        let mut p = ParamSet::new();
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let s = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-s..=s)).collect();
            p.insert(format!("l{l}.w"), Tensor::new(vec![fan_in, fan_out], data).unwrap())
                .unwrap();
            p.insert(format!("l{l}.b"), Tensor::zeros(&[fan_out])).unwrap();
        }
        p
    }
}
