//! SGD with momentum and Adam.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const SGD_MOMENTUM: f64 = 0.9;
pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::config(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// Per-parameter state is keyed by `ParamId` and created on first use.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
    steps: i32,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    fn slot<'s>(slots: &'s mut Vec<Option<Tensor<T>>>, id: ParamId, shape: &[usize]) -> &'s mut Tensor<T> {
        if slots.len() <= id.index() {
            slots.resize(id.index() + 1, None);
        }
        slots[id.index()].get_or_insert_with(|| Tensor::zeros(shape))
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) -> Result<()> {
        self.steps += 1;
        let lr = T::of(self.lr);
        for (id, g) in grads {
            let shape = g.shape().to_vec();
            if store.value(*id).shape() != shape.as_slice() {
                return Err(Error::shape(format!("gradient shape {shape:?} does not match its parameter")));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    let mu = T::of(SGD_MOMENTUM);
                    let v = Self::slot(&mut self.first, *id, &shape);
                    for (v, &g) in v.data_mut().iter_mut().zip(g.data()) {
                        *v = mu * *v + g;
                    }
                    let v = v.clone();
                    for (p, &v) in store.value_mut(*id).data_mut().iter_mut().zip(v.data()) {
                        *p = *p - lr * v;
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (T::of(ADAM_BETAS.0), T::of(ADAM_BETAS.1));
                    let c1 = T::of(1.0 - ADAM_BETAS.0.powi(self.steps));
                    let c2 = T::of(1.0 - ADAM_BETAS.1.powi(self.steps));
                    let eps = T::of(ADAM_EPS);
                    let m = Self::slot(&mut self.first, *id, &shape);
                    for (m, &g) in m.data_mut().iter_mut().zip(g.data()) {
                        *m = b1 * *m + (T::one() - b1) * g;
                    }
                    let m = m.clone();
                    let v = Self::slot(&mut self.second, *id, &shape);
                    for (v, &g) in v.data_mut().iter_mut().zip(g.data()) {
                        *v = b2 * *v + (T::one() - b2) * g * g;
                    }
                    let p = store.value_mut(*id).data_mut();
                    for ((p, &m), &v) in p.iter_mut().zip(m.data()).zip(v.data()) {
                        *p = *p - lr * (m / c1) / ((v / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamRole;

    fn store(x: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new(0);
        let id = s.add("x", ParamRole::LinearWeight, Tensor::scalar(x));
        (s, id)
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let (mut s, id) = store(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        opt.step(&mut s, &[(id, Tensor::scalar(1.0))]).unwrap();
        assert!((s.value(id).item() - 0.9).abs() < 1e-15);
        opt.step(&mut s, &[(id, Tensor::scalar(1.0))]).unwrap();
        // velocity 1.9
        assert!((s.value(id).item() - 0.71).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let (mut s, id) = store(0.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01);
        opt.step(&mut s, &[(id, Tensor::scalar(3.0))]).unwrap();
        assert!((s.value(id).item() + 0.01).abs() < 1e-9);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let (mut s, id) = store(0.25);
            let mut opt = Optimizer::new(kind, 0.0);
            opt.step(&mut s, &[(id, Tensor::scalar(-2.0))]).unwrap();
            assert_eq!(s.value(id).item(), 0.25);
        }
    }
}
