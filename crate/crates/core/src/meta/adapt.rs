//! Inner-loop adaptation and the per-step target losses.

use crate::error::{Error, Result};
use crate::learner::{check_finite, eval_loss, loss_and_grad, Learner};
use crate::params::ParamSet;
use crate::tasks::mix;
use crate::tensor::{Graph, Var};

/// Inner-loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerConfig {
    /// Number of SGD steps on the support set.
    pub n_steps: usize,
    /// SGD step size.
    pub inner_lr: f64,
    /// Also score the unadapted parameters on the target set, giving
    /// `n_steps + 1` target losses instead of `n_steps`.
    pub include_step_zero: bool,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self {
            n_steps: 5,
            inner_lr: 0.01,
            include_step_zero: false,
        }
    }
}

impl InnerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("inner.n_steps must be at least 1".into()));
        }
        // zero is allowed: it reduces every method to the unadapted loss
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return Err(Error::Config(format!(
                "inner.alpha must be a non-negative number, got {}",
                self.inner_lr
            )));
        }
        Ok(())
    }

    /// Number of target losses per episode.
    pub fn n_target_losses(&self) -> usize {
        self.n_steps + usize::from(self.include_step_zero)
    }
}

/// Parameters after each inner step and the support loss that produced
/// each update.
#[derive(Debug, Clone)]
pub struct AdaptTrajectory {
    /// `θ_0` (a copy of the starting point) followed by `θ_1 … θ_N`.
    pub params: Vec<ParamSet>,
    /// `L^S_0 … L^S_{N-1}`; entry `i` is the loss at `θ_i`.
    pub support_losses: Vec<f64>,
    /// Support gradients at `θ_0 … θ_{N-1}`.
    pub support_grads: Vec<ParamSet>,
}

impl AdaptTrajectory {
    /// `θ_1 … θ_N`.
    pub fn adapted(&self) -> &[ParamSet] {
        &self.params[1..]
    }

    pub fn last(&self) -> &ParamSet {
        self.params.last().expect("trajectory is never empty")
    }

    pub fn n_steps(&self) -> usize {
        self.params.len() - 1
    }

    /// Parameters whose target loss enters the outer objective.
    pub fn evaluation_points(&self, include_step_zero: bool) -> &[ParamSet] {
        if include_step_zero {
            &self.params
        } else {
            self.adapted()
        }
    }
}

/// `N` plain SGD steps on the support loss, starting from a copy of
/// `params`: `θ_i = θ_{i−1} − α ∇L^S(θ_{i−1})`.
pub fn inner_adapt<L: Learner>(
    learner: &L,
    params: &ParamSet,
    support: &L::Batch,
    cfg: &InnerConfig,
    dropout_seed: u64,
) -> Result<AdaptTrajectory> {
    cfg.validate()?;
    let mut traj = AdaptTrajectory {
        params: Vec::with_capacity(cfg.n_steps + 1),
        support_losses: Vec::with_capacity(cfg.n_steps),
        support_grads: Vec::with_capacity(cfg.n_steps),
    };
    traj.params.push(params.clone());
    for step in 0..cfg.n_steps {
        let current = traj.params.last().unwrap();
        let (loss, grad) = loss_and_grad(learner, current, support, true, mix(dropout_seed, step as u64))?;
        check_finite(loss, step)?;
        if !grad.all_finite() {
            return Err(Error::Divergence {
                step,
                episode: None,
            });
        }
        let next = current.sgd_step(&grad, cfg.inner_lr)?;
        traj.support_losses.push(loss);
        traj.support_grads.push(grad);
        traj.params.push(next);
    }
    Ok(traj)
}

/// Target loss at each adapted parameter set, `L^T_i = L(θ_i, target)`,
/// with dropout disabled.
pub fn per_step_target_losses<L: Learner>(
    learner: &L,
    trajectory: &AdaptTrajectory,
    target: &L::Batch,
    include_step_zero: bool,
) -> Result<Vec<f64>> {
    if trajectory.n_steps() == 0 {
        return Err(Error::Contract("empty adaptation trajectory".into()));
    }
    trajectory
        .evaluation_points(include_step_zero)
        .iter()
        .enumerate()
        .map(|(i, p)| check_finite(eval_loss(learner, p, target)?, i))
        .collect()
}

fn check_weights(n_losses: usize, weights: &[f64]) -> Result<()> {
    if n_losses != weights.len() {
        return Err(Error::Contract(format!(
            "{n_losses} losses but {} weights",
            weights.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("weights sum to {sum}, not 1")));
    }
    Ok(())
}

/// Weighted multi-step loss `Σ w_i L_i`, recorded so gradients flow into
/// every term.
pub fn msl_combine(g: &mut Graph, losses: &[Var], weights: &[f64]) -> Result<Var> {
    check_weights(losses.len(), weights)?;
    g.weighted_sum(losses, weights)
}

/// Value-only counterpart of [`msl_combine`].
pub fn msl_combine_values(losses: &[f64], weights: &[f64]) -> Result<f64> {
    check_weights(losses.len(), weights)?;
    Ok(losses.iter().zip(weights).map(|(l, w)| w * l).sum())
}
