//! AdamW with decoupled weight decay, and the warmup/decay schedule.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments for every parameter, plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn check(&self, store: &ParamStore) -> Result<()> {
        let ok = self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .iter()
                .all(|(id, _, t)| self.m[id.0].shape() == t.shape() && self.v[id.0].shape() == t.shape());
        if !ok {
            return Err(Error::usage("optimizer state does not match the parameters"));
        }
        Ok(())
    }
}

impl AdamW {
    /// One bias-corrected update at learning rate `lr`. Parameters flagged for
    /// decay are first shrunk by `1 - lr * weight_decay`.
    pub fn step(&self, store: &mut ParamStore, grads: &[Tensor], state: &mut OptimizerState, lr: f64) -> Result<()> {
        state.check(store)?;
        if grads.len() != store.len() {
            return Err(Error::usage(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            let g = &grads[id.0];
            if g.shape() != store.get(id).shape() {
                return Err(Error::usage(format!(
                    "gradient shape mismatch for `{}`",
                    store.name(id)
                )));
            }
            if !g.is_finite() {
                return Err(Error::Numeric {
                    op: "adamw",
                    detail: format!("non-finite gradient for `{}`", store.name(id)),
                });
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in ids {
            let shrink = if store.decays(id) {
                1.0 - lr * self.weight_decay
            } else {
                1.0
            };
            let g = grads[id.0].data();
            let m = state.m[id.0].data_mut();
            let v = state.v[id.0].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p[i] = p[i] * shrink - lr * update;
            }
        }
        Ok(())
    }
}

/// Linear ramp from 0 to `peak` over the first `floor(warmup_fraction *
/// total)` steps, then linear decay to 0 at `total`.
pub fn lr_at(step: u64, total: u64, peak: f64, warmup_fraction: f64) -> Result<f64> {
    if step > total {
        return Err(Error::usage(format!("step {step} is past the schedule end {total}")));
    }
    let warmup = (warmup_fraction * total as f64).floor() as u64;
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    if total == warmup {
        return Ok(peak);
    }
    Ok(peak * (total - step) as f64 / (total - warmup) as f64)
}
