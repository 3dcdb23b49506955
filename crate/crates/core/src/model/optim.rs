//! Adam optimizer, learning-rate schedule, and the batched training step.

use super::{loss_and_grads, LossBreakdown, ModelParams};
use crate::error::{Error, Result};
use crate::patching::{MaskPlan, PatchGrid};
use crate::scalar::Scalar;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Optimizer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// The learning rate is divided by ten every this many epochs.
    pub decay_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 3e-3, beta1: 0.9, beta2: 0.95, eps: 1e-8, decay_every: 50 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b.is_finite() && (0.0..1.0).contains(&b)) {
                return Err(Error::config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::config("eps must be positive"));
        }
        if self.decay_every == 0 {
            return Err(Error::config("decay_every must be positive"));
        }
        Ok(())
    }
}

/// Stepped decay: lr * 0.1^(epoch / decay_every).
pub fn lr_at_epoch(cfg: &OptimConfig, epoch: usize) -> f64 {
    cfg.lr * 0.1f64.powi((epoch / cfg.decay_every) as i32)
}

/// Adam with parameter-shaped first and second moment estimates. Update
/// arithmetic runs in f64 regardless of the model scalar type.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: OptimConfig,
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: OptimConfig, params: &ModelParams<T>) -> Result<Self> {
        cfg.validate()?;
        Ok(Adam { cfg, m: params.zeros_like(), v: params.zeros_like(), t: 0 })
    }

    /// One bias-corrected update in place.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>, lr: f64) -> Result<()> {
        if params.cfg != grads.cfg {
            return Err(Error::precondition("gradient shape does not match parameters"));
        }
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let eps = self.cfg.eps;
        let mut pv = params.tensor_slices_mut();
        let gv = grads.tensor_slices();
        let mut mv = self.m.tensor_slices_mut();
        let mut vv = self.v.tensor_slices_mut();
        for i in 0..pv.len() {
            debug_assert_eq!(pv[i].0, gv[i].0);
            let g = gv[i].1;
            let (p, m, v) = (&mut *pv[i].1, &mut *mv[i].1, &mut *vv[i].1);
            for j in 0..g.len() {
                let gj = g[j].to_real();
                let mj = b1 * m[j].to_real() + (1.0 - b1) * gj;
                let vj = b2 * v[j].to_real() + (1.0 - b2) * gj * gj;
                m[j] = T::from_real(mj);
                v[j] = T::from_real(vj);
                let delta = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
                p[j] = T::from_real(p[j].to_real() - delta);
            }
        }
        Ok(())
    }
}

/// One training case: an image with its patch grid and mask plan.
pub struct BatchItem<'a, T> {
    pub image: &'a Array2<T>,
    pub grid: &'a PatchGrid,
    pub plan: &'a MaskPlan,
}

/// One optimizer step on a batch: per-case gradients are averaged in batch
/// order, then applied with the given learning rate. Returns the per-case
/// losses. A non-finite loss aborts with a divergence error before the
/// parameters are touched.
pub fn train_step<T: Scalar>(
    params: &mut ModelParams<T>,
    opt: &mut Adam<T>,
    lr: f64,
    batch: &[BatchItem<T>],
) -> Result<Vec<LossBreakdown>> {
    if batch.is_empty() {
        return Err(Error::argument("empty batch"));
    }
    let inv = T::from_real(1.0 / batch.len() as f64);
    let mut g_mean = params.zeros_like();
    let mut losses = Vec::with_capacity(batch.len());
    for item in batch {
        let (loss, g) = loss_and_grads(params, item.image, item.grid, item.plan)?;
        if !loss.total.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss {}", loss.total)));
        }
        losses.push(loss);
        let mut acc = g_mean.tensor_slices_mut();
        for (dst, (_, src)) in acc.iter_mut().zip(g.tensor_slices()) {
            for (d, s) in dst.1.iter_mut().zip(src.iter()) {
                *d += *s * inv;
            }
        }
    }
    opt.step(params, &g_mean, lr)?;
    Ok(losses)
}
