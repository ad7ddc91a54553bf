use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Stateful first-order optimizer over a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Option<ParamSet>,
    v: Option<ParamSet>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("outer.meta_lr must be non-negative, got {lr}")));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = kind {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::Config("adam needs betas in [0, 1) and eps > 0".into()));
            }
        }
        Ok(Self {
            kind,
            lr,
            m: None,
            v: None,
            t: 0,
        })
    }

    pub fn step(&mut self, params: &mut ParamSet, grad: &ParamSet) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => params.add_scaled(grad, -self.lr),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let m = self.m.get_or_insert_with(|| params.zeros_like());
                let v = self.v.get_or_insert_with(|| params.zeros_like());
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for (name, p) in params.iter_mut() {
                    let g = grad
                        .get(name)
                        .ok_or_else(|| Error::Contract(format!("gradient missing {name}")))?;
                    let m = m.get_mut(name).unwrap().data_mut();
                    let v = v.get_mut(name).unwrap().data_mut();
                    if g.data().len() != p.data().len() {
                        return Err(Error::dim("adam", p.shape(), g.shape()));
                    }
                    for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let mh = *mi / c1;
                        let vh = *vi / c2;
                        *x -= self.lr * mh / (vh.sqrt() + eps);
                    }
                }
                Ok(())
            }
        }
    }
}
