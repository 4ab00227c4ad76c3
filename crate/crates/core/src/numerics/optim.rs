use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::params::ParamSet;
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    /// Exact weighted-mean steps; only meaningful for dictionary training.
    Lloyd,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "lloyd" => Ok(OptimizerKind::Lloyd),
            _ => Err(Error::InvalidArgument(format!(
                "unknown optimizer '{s}' (expected sgd, adam or lloyd)"
            ))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Lloyd => "lloyd",
        })
    }
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Plain SGD or Adam over the gradients stored in a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T: Real> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update from the gradients accumulated in `params`.
    pub fn update(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        self.step += 1;
        let lr = T::of(self.lr);
        let (b1, b2, eps) = (T::of(BETA1), T::of(BETA2), T::of(EPSILON));
        let c1 = T::of(1.0 - BETA1.powi(self.step as i32));
        let c2 = T::of(1.0 - BETA2.powi(self.step as i32));
        for (name, p, g) in params.iter_with_grads_mut() {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
            match self.kind {
                OptimizerKind::Sgd | OptimizerKind::Lloyd => {
                    p.data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(p, &g)| *p -= lr * g);
                }
                OptimizerKind::Adam => {
                    let m = self
                        .m
                        .entry(name.to_string())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self
                        .v
                        .entry(name.to_string())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    let it = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut().zip(v.data_mut()));
                    for ((p, &g), (m, v)) in it {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        let mh = *m / c1;
                        let vh = *v / c2;
                        *p -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
