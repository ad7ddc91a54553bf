//! Central finite differences, used as an independent check on
//! [`Graph::backward`](super::Graph::backward).

use crate::error::{Error, Result};
use crate::params::ParamSet;

/// Central-difference gradient estimate of `loss_fn` at `params`, one entry
/// at a time: `(f(θ + h·e) − f(θ − h·e)) / 2h`.
pub fn finite_diff_grad<F>(mut loss_fn: F, params: &ParamSet, step: f64) -> Result<ParamSet>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let mut grad = params.zeros_like();
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in &names {
        let n = params.get(name).map_or(0, |t| t.numel());
        for i in 0..n {
            let orig = params.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let plus = loss_fn(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let minus = loss_fn(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            grad.get_mut(name).unwrap().data_mut()[i] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(grad)
}

/// Central differences for selected `(parameter name, flat index)` entries
/// only; for models too large to probe every coordinate.
pub fn finite_diff_entries<F>(mut loss_fn: F, params: &ParamSet, entries: &[(String, usize)], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = params.clone();
    entries
        .iter()
        .map(|(name, i)| {
            let t = probe
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))?;
            if *i >= t.numel() {
                return Err(Error::Contract(format!("{name} has no entry {i}")));
            }
            let orig = t.data()[*i];
            t.data_mut()[*i] = orig + step;
            let plus = loss_fn(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[*i] = orig - step;
            let minus = loss_fn(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[*i] = orig;
            Ok((plus - minus) / (2.0 * step))
        })
        .collect()
}

/// Largest violation of `|a − b| ≤ max(rel · max(|a|, |b|), floor)` over all
/// entries; zero or negative means the two gradients agree.
pub fn max_grad_violation(analytic: &ParamSet, numeric: &ParamSet, rel: f64, floor: f64) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for ((_, a), (_, b)) in analytic.iter().zip(numeric.iter()) {
        for (&x, &y) in a.data().iter().zip(b.data()) {
            let allowed = (rel * x.abs().max(y.abs())).max(floor);
            worst = worst.max((x - y).abs() - allowed);
        }
    }
    worst
}
