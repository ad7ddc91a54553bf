//! First-order outer gradients for plain MAML and the multi-step loss.

use rayon::prelude::*;

use super::adapt::{inner_adapt, msl_combine_values, InnerConfig};
use crate::error::{Error, Result};
use crate::learner::{check_finite, eval_loss, loss_and_grad, Learner};
use crate::params::ParamSet;
use crate::tasks::{mix, Episode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Gradient of the final-step target loss only.
    Maml,
    /// Weighted sum of per-step target-loss gradients.
    Msl,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Maml => "maml",
            Mode::Msl => "msl",
        }
    }

    /// Weights actually applied in this mode: `maml` ignores the schedule
    /// and puts everything on the final step.
    pub fn effective_weights(self, scheduled: &[f64]) -> Vec<f64> {
        match self {
            Mode::Msl => scheduled.to_vec(),
            Mode::Maml => {
                let mut w = vec![0.0; scheduled.len().max(1)];
                *w.last_mut().unwrap() = 1.0;
                w
            }
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maml" => Ok(Mode::Maml),
            "msl" => Ok(Mode::Msl),
            other => Err(Error::Config(format!("unknown mode {other:?}, expected maml or msl"))),
        }
    }
}

/// Averaged meta-gradient of one meta-batch.
#[derive(Debug, Clone)]
pub struct OuterGrad {
    pub grad: ParamSet,
    /// Combined loss, averaged over episodes.
    pub outer_loss: f64,
    /// Target loss after each inner step, averaged over episodes.
    pub step_losses: Vec<f64>,
    /// Weights the combination used.
    pub weights: Vec<f64>,
}

struct EpisodeGrad {
    grad: ParamSet,
    loss: f64,
    step_losses: Vec<f64>,
}

fn episode_grad<L: Learner>(
    learner: &L,
    params: &ParamSet,
    episode: &Episode<L::Batch>,
    inner: &InnerConfig,
    weights: &[f64],
    seed: u64,
) -> Result<EpisodeGrad> {
    let traj = inner_adapt(learner, params, &episode.support, inner, seed)?;
    let points = traj.evaluation_points(inner.include_step_zero);
    if points.len() != weights.len() {
        return Err(Error::Contract(format!(
            "{} target losses but {} weights",
            points.len(),
            weights.len()
        )));
    }
    let mut grad = params.zeros_like();
    let mut step_losses = Vec::with_capacity(points.len());
    for (i, (theta_i, &w)) in points.iter().zip(weights).enumerate() {
        // zero-weight steps contribute nothing; skipping them keeps a
        // one-hot weighting bit-identical to the plain final-step gradient
        let loss = if w == 0.0 {
            eval_loss(learner, theta_i, &episode.target)?
        } else {
            let (loss, g) = loss_and_grad(learner, theta_i, &episode.target, false, 0)?;
            if !g.all_finite() {
                return Err(Error::Divergence { step: i, episode: None });
            }
            grad.add_scaled(&g, w)?;
            loss
        };
        step_losses.push(check_finite(loss, i)?);
    }
    let loss = msl_combine_values(&step_losses, weights)?;
    Ok(EpisodeGrad {
        grad,
        loss,
        step_losses,
    })
}

/// First-order meta-gradient over `episodes`.
///
/// Each `∇L^T_i` is taken at `θ_i` with the adapted parameters as leaves and
/// accumulated onto `θ` by name. Episode results are reduced in episode
/// order, so the value does not depend on `parallel`.
pub fn outer_grad<L: Learner>(
    learner: &L,
    params: &ParamSet,
    episodes: &[Episode<L::Batch>],
    inner: &InnerConfig,
    scheduled_weights: &[f64],
    mode: Mode,
    seed: u64,
    parallel: bool,
) -> Result<OuterGrad> {
    if episodes.is_empty() {
        return Err(Error::Contract("outer_grad needs at least one episode".into()));
    }
    let weights = mode.effective_weights(scheduled_weights);
    let run = |(k, ep): (usize, &Episode<L::Batch>)| {
        episode_grad(learner, params, ep, inner, &weights, mix(seed, k as u64)).map_err(|e| e.in_episode(k))
    };
    let per_episode: Vec<Result<EpisodeGrad>> = if parallel {
        episodes.par_iter().enumerate().map(run).collect()
    } else {
        episodes.iter().enumerate().map(run).collect()
    };

    let mut grad = params.zeros_like();
    let mut outer_loss = 0.0;
    let mut step_losses = vec![0.0; weights.len()];
    for r in per_episode {
        let e = r?;
        grad.add_scaled(&e.grad, 1.0)?;
        outer_loss += e.loss;
        for (acc, l) in step_losses.iter_mut().zip(&e.step_losses) {
            *acc += l;
        }
    }
    let inv = 1.0 / episodes.len() as f64;
    grad.scale(inv);
    step_losses.iter_mut().for_each(|l| *l *= inv);
    Ok(OuterGrad {
        grad,
        outer_loss: outer_loss * inv,
        step_losses,
        weights,
    })
}
