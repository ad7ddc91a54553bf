use crate::error::{Error, Result};

/// Per-step importance weights of the multi-step loss as a function of the
/// outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightSchedule {
    /// Every non-final weight starts at `1/N` and decays linearly by
    /// `decay` per outer iteration down to `floor`; the final step takes
    /// the remainder.
    Annealed {
        n_steps: usize,
        decay: f64,
        floor: f64,
    },
    /// The same weights at every iteration.
    Fixed(Vec<f64>),
}

impl WeightSchedule {
    pub fn annealed(n_steps: usize, decay: f64, floor: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(decay >= 0.0 && decay.is_finite()) {
            return Err(Error::Config(format!("schedule decay must be non-negative, got {decay}")));
        }
        let uniform = 1.0 / n_steps as f64;
        if !(floor > 0.0 && floor <= uniform) {
            return Err(Error::Config(format!(
                "schedule floor must lie in (0, 1/N] = (0, {uniform}], got {floor}"
            )));
        }
        Ok(Self::Annealed {
            n_steps,
            decay,
            floor,
        })
    }

    /// Decay that would bring the early weights to zero at 80% of training,
    /// floor `0.03/N`; the floor is therefore hit slightly earlier.
    pub fn default_for(n_steps: usize, n_outer_iters: usize) -> Result<Self> {
        let n = n_steps.max(1) as f64;
        let decay = 1.0 / (0.8 * n_outer_iters.max(1) as f64 * n);
        Self::annealed(n_steps, decay, 0.03 / n)
    }

    pub fn fixed(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("schedule weights must be non-negative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("schedule weights sum to {sum}, not 1")));
        }
        Ok(Self::Fixed(weights))
    }

    /// All weight on the final step: the plain MAML objective.
    pub fn last_only(n_steps: usize) -> Self {
        let mut w = vec![0.0; n_steps.max(1)];
        *w.last_mut().unwrap() = 1.0;
        Self::Fixed(w)
    }

    pub fn uniform(n_steps: usize) -> Self {
        let n = n_steps.max(1);
        Self::Fixed(vec![1.0 / n as f64; n])
    }

    pub fn n_steps(&self) -> usize {
        match self {
            Self::Annealed { n_steps, .. } => *n_steps,
            Self::Fixed(w) => w.len(),
        }
    }

    /// Weights in step order at outer iteration `t`.
    pub fn weights_at(&self, t: usize) -> Vec<f64> {
        match self {
            Self::Fixed(w) => w.clone(),
            Self::Annealed {
                n_steps,
                decay,
                floor,
            } => {
                let uniform = 1.0 / *n_steps as f64;
                let early = floor.max(uniform - t as f64 * decay);
                let mut w = vec![early; n_steps - 1];
                let rest: f64 = w.iter().sum();
                w.push(1.0 - rest);
                w
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_uniform() {
        let s = WeightSchedule::annealed(3, 0.37, 0.01).unwrap();
        for w in s.weights_at(0) {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn one_iteration_of_decay() {
        let s = WeightSchedule::annealed(3, 0.1, 0.01).unwrap();
        let w = s.weights_at(1);
        // 1/3 - 0.1 = 0.2333..., remainder 1 - 2·0.2333... = 0.5333...
        let early = 1.0 / 3.0 - 0.1;
        assert!((w[0] - early).abs() < 1e-15);
        assert!((w[1] - early).abs() < 1e-15);
        assert!((w[2] - (1.0 - 2.0 * early)).abs() < 1e-15);
        assert!((w[0] - 0.233_333_333_333_333_3).abs() < 1e-12);
        assert!((w[2] - 0.533_333_333_333_333_3).abs() < 1e-12);
    }

    #[test]
    fn saturates_at_floor() {
        let s = WeightSchedule::annealed(3, 0.1, 0.01).unwrap();
        let w = s.weights_at(1_000_000);
        assert_eq!(w[0], 0.01);
        assert_eq!(w[1], 0.01);
        assert!((w[2] - 0.98).abs() < 1e-15);
    }

    #[test]
    fn default_reaches_floor_near_eighty_percent() {
        let s = WeightSchedule::default_for(5, 1000).unwrap();
        let WeightSchedule::Annealed { floor, .. } = s else { panic!() };
        assert!((floor - 0.006).abs() < 1e-15);
        // 0.2 − t/4000 meets 0.006 at t = 776
        assert!(s.weights_at(775)[0] > floor);
        assert_eq!(s.weights_at(777)[0], floor);
        assert_eq!(s.weights_at(800)[0], floor);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(WeightSchedule::annealed(0, 0.1, 0.01).is_err());
        assert!(WeightSchedule::annealed(3, -0.1, 0.01).is_err());
        assert!(WeightSchedule::annealed(3, 0.1, 0.0).is_err());
        assert!(WeightSchedule::annealed(3, 0.1, 0.5).is_err());
        assert!(WeightSchedule::fixed(vec![0.5, 0.6]).is_err());
        assert!(WeightSchedule::fixed(vec![]).is_err());
    }

    #[test]
    fn single_step_is_all_weight() {
        let s = WeightSchedule::annealed(1, 0.5, 1.0).unwrap();
        assert_eq!(s.weights_at(0), vec![1.0]);
        assert_eq!(s.weights_at(10), vec![1.0]);
    }
}
