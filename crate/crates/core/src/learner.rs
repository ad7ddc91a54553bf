use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Graph, Var};

/// Anything that maps parameters and a batch to a scalar differentiable
/// loss. The meta-learning loop is written against this trait only.
pub trait Learner: Sync {
    type Batch: Sync + Send;

    /// Records the loss of `batch` under `params` into `g`. With `train`
    /// false every stochastic layer is disabled.
    fn loss(&self, g: &mut Graph, params: &Bound, batch: &Self::Batch, train: bool) -> Result<Var>;

    /// Fresh parameters, deterministic in `seed`.
    fn init_params(&self, seed: u64) -> ParamSet;
}

/// Loss value and per-parameter gradient, computed in an isolated
/// recording with `params` as its leaves.
pub fn loss_and_grad<L: Learner>(
    learner: &L,
    params: &ParamSet,
    batch: &L::Batch,
    train: bool,
    dropout_seed: u64,
) -> Result<(f64, ParamSet)> {
    let mut g = Graph::with_seed(dropout_seed);
    let bound = params.bind(&mut g);
    let root = learner.loss(&mut g, &bound, batch, train)?;
    let value = g.value(root).item()?;
    let store = g.backward(root)?;
    Ok((value, bound.grads(&g, &store)))
}

/// Loss value only, dropout disabled.
pub fn eval_loss<L: Learner>(learner: &L, params: &ParamSet, batch: &L::Batch) -> Result<f64> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let root = learner.loss(&mut g, &bound, batch, false)?;
    g.value(root).item()
}

pub(crate) fn check_finite(value: f64, step: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Divergence {
            step,
            episode: None,
        })
    }
}
