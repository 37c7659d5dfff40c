//! SGD with momentum and Adam, with a per-group learning rate: parameters
//! under `flow.` use the (typically much weaker) flow rate.

use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::Params;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "sgd-momentum")]
    SgdMomentum,
    #[serde(rename = "adam")]
    Adam,
}

pub const SGD_MOMENTUM: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    /// Completed update count (Adam bias correction uses step+1).
    pub step: u64,
    pub moments: BTreeMap<String, Tensor<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer { kind, step: 0, moments: BTreeMap::new() }
    }

    pub fn from_state(
        kind: OptimizerKind,
        step: u64,
        moments: BTreeMap<String, Tensor<f32>>,
    ) -> Self {
        Optimizer { kind, step, moments }
    }

    /// One update over every gradient; `lr_for` maps a parameter name to
    /// its learning rate.
    pub fn apply(
        &mut self,
        params: &mut Params<f32>,
        grads: &BTreeMap<String, Tensor<f32>>,
        lr_for: impl Fn(&str) -> f64,
    ) -> Result<()> {
        let t = self.step + 1;
        for (name, grad) in grads {
            let lr = lr_for(name);
            if lr <= 0.0 {
                return Err(Error::config(format!("non-positive learning rate for `{name}`")));
            }
            let param = params
                .get_mut(name)
                .ok_or_else(|| Error::usage(format!("gradient for unknown parameter `{name}`")))?;
            if param.shape() != grad.shape() {
                return Err(Error::config(format!(
                    "gradient shape {:?} != parameter shape {:?} for `{name}`",
                    grad.shape(),
                    param.shape()
                )));
            }
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    let m = self.moments
                        .entry(format!("m/{name}"))
                        .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
                    let md = m.data_mut();
                    let pd = param.data_mut();
                    let gd = grad.data();
                    let mu = SGD_MOMENTUM as f32;
                    let lr = lr as f32;
                    for i in 0..gd.len() {
                        md[i] = mu * md[i] + gd[i];
                        pd[i] -= lr * md[i];
                    }
                }
                OptimizerKind::Adam => {
                    // split borrows: take both moment tensors out, put back
                    let mut m = self
                        .moments
                        .remove(&format!("m/{name}"))
                        .unwrap_or_else(|| Tensor::zeros(grad.shape().to_vec()));
                    let mut v = self
                        .moments
                        .remove(&format!("v/{name}"))
                        .unwrap_or_else(|| Tensor::zeros(grad.shape().to_vec()));
                    let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
                    let bc1 = 1.0 - (ADAM_BETA1).powi(t as i32);
                    let bc2 = 1.0 - (ADAM_BETA2).powi(t as i32);
                    let lr = lr as f32;
                    let eps = ADAM_EPS as f32;
                    let md = m.data_mut();
                    let vd = v.data_mut();
                    let pd = param.data_mut();
                    let gd = grad.data();
                    for i in 0..gd.len() {
                        md[i] = b1 * md[i] + (1.0 - b1) * gd[i];
                        vd[i] = b2 * vd[i] + (1.0 - b2) * gd[i] * gd[i];
                        let mhat = md[i] / bc1 as f32;
                        let vhat = vd[i] / bc2 as f32;
                        pd[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                    self.moments.insert(format!("m/{name}"), m);
                    self.moments.insert(format!("v/{name}"), v);
                }
            }
        }
        self.step = t;
        Ok(())
    }
}
