//! The four first-order optimizers swept in the experiments, with
//! per-parameter state and the phase-boundary state reset.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Network;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Rmsprop,
    Adam,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum_mu: f64,
    #[serde(default = "default_rho")]
    pub rmsprop_rho: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_rho() -> f64 {
    0.99
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        OptimizerConfig {
            kind,
            lr,
            momentum_mu: default_momentum(),
            rmsprop_rho: default_rho(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| (0.0..1.0).contains(&x);
        if !(self.lr > 0.0)
            || !(self.eps > 0.0)
            || !in_unit(self.momentum_mu)
            || !in_unit(self.rmsprop_rho)
            || !in_unit(self.adam_beta1)
            || !in_unit(self.adam_beta2)
        {
            return Err(Error::Config(format!(
                "optimizer hyperparameters out of range: lr={} mu={} rho={} beta1={} beta2={} eps={}",
                self.lr, self.momentum_mu, self.rmsprop_rho, self.adam_beta1, self.adam_beta2, self.eps
            )));
        }
        Ok(())
    }
}

/// Per-parameter accumulator slots plus the step counter. Slot tensors mirror
/// parameter shapes exactly (stored flat, in parameter traversal order).
pub struct OptimizerState<E: Scalar> {
    pub step_count: u64,
    /// First moment / velocity, one buffer per parameter tensor.
    pub first: Vec<Vec<E>>,
    /// Second moment, one buffer per parameter tensor.
    pub second: Vec<Vec<E>>,
}

impl<E: Scalar> OptimizerState<E> {
    pub fn new(net: &Network<E>) -> Self {
        let mut shapes = Vec::new();
        net.for_each_param(&mut |_, t| shapes.push(t.numel()));
        OptimizerState {
            step_count: 0,
            first: shapes.iter().map(|&n| vec![E::zero(); n]).collect(),
            second: shapes.iter().map(|&n| vec![E::zero(); n]).collect(),
        }
    }

    /// Zeroes all slots and the step counter; parameters are untouched.
    pub fn reset(&mut self) {
        self.step_count = 0;
        for s in self.first.iter_mut().chain(self.second.iter_mut()) {
            s.iter_mut().for_each(|v| *v = E::zero());
        }
    }
}

/// One in-place parameter update from the gradients populated by the last
/// backward pass. Increments `step_count` by one.
pub fn step<E: Scalar>(
    net: &mut Network<E>,
    state: &mut OptimizerState<E>,
    config: &OptimizerConfig,
) -> Result<()> {
    config.validate()?;
    let mut missing: Option<u8> = None;
    net.for_each_param(&mut |gid, t| {
        if t.grad.is_none() {
            missing = missing.or(Some(gid));
        }
    });
    if let Some(gid) = missing {
        return Err(Error::Contract(format!(
            "parameter group {gid} is missing its gradient; run backward before step"
        )));
    }

    state.step_count += 1;
    let t = state.step_count;
    let lr = E::from_f64(config.lr);
    let eps = E::from_f64(config.eps);

    let mut idx = 0;
    let first = &mut state.first;
    let second = &mut state.second;
    match config.kind {
        OptimizerKind::Sgd => {
            net.for_each_param_mut(&mut |_, p| {
                let g = p.grad.as_ref().unwrap().clone();
                for (w, gv) in p.data.iter_mut().zip(g) {
                    *w = *w - lr * gv;
                }
            });
        }
        OptimizerKind::Momentum => {
            let mu = E::from_f64(config.momentum_mu);
            net.for_each_param_mut(&mut |_, p| {
                let g = p.grad.as_ref().unwrap().clone();
                let v = &mut first[idx];
                for ((w, gv), vi) in p.data.iter_mut().zip(g).zip(v.iter_mut()) {
                    *vi = mu * *vi + gv;
                    *w = *w - lr * *vi;
                }
                idx += 1;
            });
        }
        OptimizerKind::Rmsprop => {
            let rho = E::from_f64(config.rmsprop_rho);
            let one_m_rho = E::one() - rho;
            net.for_each_param_mut(&mut |_, p| {
                let g = p.grad.as_ref().unwrap().clone();
                let s = &mut second[idx];
                for ((w, gv), si) in p.data.iter_mut().zip(g).zip(s.iter_mut()) {
                    *si = rho * *si + one_m_rho * gv * gv;
                    *w = *w - lr * gv / (si.sqrt() + eps);
                }
                idx += 1;
            });
        }
        OptimizerKind::Adam => {
            let b1 = E::from_f64(config.adam_beta1);
            let b2 = E::from_f64(config.adam_beta2);
            let c1 = E::one() - E::from_f64(config.adam_beta1.powi(t as i32));
            let c2 = E::one() - E::from_f64(config.adam_beta2.powi(t as i32));
            net.for_each_param_mut(&mut |_, p| {
                let g = p.grad.as_ref().unwrap().clone();
                let m = &mut first[idx];
                let v = &mut second[idx];
                for (((w, gv), mi), vi) in p
                    .data
                    .iter_mut()
                    .zip(g)
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    *mi = b1 * *mi + (E::one() - b1) * gv;
                    *vi = b2 * *vi + (E::one() - b2) * gv * gv;
                    let m_hat = *mi / c1;
                    let v_hat = *vi / c2;
                    *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
                }
                idx += 1;
            });
        }
    }
    Ok(())
}
