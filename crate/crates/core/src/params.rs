//! Named parameter collections.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Graph, GradStore, Tensor, Var};

/// Ordered name → tensor map. Iteration follows insertion order, so any
/// vectorized update over a `ParamSet` is reproducible.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a new parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Contract(format!(
                "parameter sets differ in size: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.entries.iter().zip(&other.entries) {
            if ka != kb {
                return Err(Error::Contract(format!("parameter order differs: {ka} vs {kb}")));
            }
            if va.shape() != vb.shape() {
                return Err(Error::dim("param_layout", va.shape(), vb.shape()));
            }
        }
        Ok(())
    }

    /// `self - step * grad`, entry by entry.
    pub fn sgd_step(&self, grad: &ParamSet, step: f64) -> Result<ParamSet> {
        self.check_layout(grad)?;
        let mut out = self.clone();
        for ((_, p), (_, g)) in out.entries.iter_mut().zip(&grad.entries) {
            for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                *x -= step * d;
            }
        }
        Ok(out)
    }

    /// `self += scale * other`, entry by entry.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) -> Result<()> {
        self.check_layout(other)?;
        for ((_, p), (_, o)) in self.entries.iter_mut().zip(&other.entries) {
            for (x, d) in p.data_mut().iter_mut().zip(o.data()) {
                *x += scale * d;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.entries.values_mut() {
            for x in t.data_mut() {
                *x *= c;
            }
        }
    }

    /// Largest absolute entry-wise difference.
    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64> {
        self.check_layout(other)?;
        Ok(self
            .entries
            .values()
            .zip(other.entries.values())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max))
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.check_layout(other).is_ok()
            && self.entries.values().zip(other.entries.values()).all(|(a, b)| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    /// Records every parameter as a differentiable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), g.param(v.clone())))
                .collect(),
        }
    }

    /// Records every parameter as a constant; for inference only.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), g.constant(v.clone())))
                .collect(),
        }
    }
}

/// Parameters recorded into a graph, addressable by name.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    /// Gradients by parameter name, zeros where the root does not depend on
    /// a parameter.
    pub fn grads(&self, g: &Graph, store: &GradStore) -> ParamSet {
        ParamSet {
            entries: self
                .vars
                .iter()
                .map(|(k, &v)| (k.clone(), store.get_or_zeros(g, v)))
                .collect(),
        }
    }
}
