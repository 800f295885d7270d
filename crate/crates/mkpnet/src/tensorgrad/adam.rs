//! Adam optimizer over [`ParamSet`] groups.
//!
//! Moments and the bias-correction step count are kept per parameter, so
//! steps on disjoint parameter groups commute bit-exactly.

use std::collections::BTreeMap;

use super::param::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Slot {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

#[derive(Debug, Clone)]
pub struct OptimState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global step counter (bookkeeping; bias correction uses per-slot `t`).
    pub step: u64,
    slots: BTreeMap<String, Slot>,
}

impl OptimState {
    pub fn new(lr: f32) -> Self {
        OptimState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, slots: BTreeMap::new() }
    }

    /// Applies one Adam update to every parameter whose group is listed in
    /// `groups`, then zeroes those gradients. Parameters outside the subset
    /// are untouched.
    pub fn step_groups(&mut self, ps: &mut ParamSet, groups: &[&str]) -> Result<()> {
        self.step += 1;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for p in ps.iter_mut() {
            if !groups.contains(&p.group()) {
                continue;
            }
            let grad = p.grad.take().ok_or_else(|| {
                Error::Invalid(format!("optimizer step on {} with no gradient", p.name))
            })?;
            let n = p.value.numel();
            let slot = self.slots.entry(p.name.clone()).or_insert_with(|| Slot {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            slot.t += 1;
            let bc1 = 1.0 - b1.powi(slot.t as i32);
            let bc2 = 1.0 - b2.powi(slot.t as i32);
            for i in 0..n {
                let g = grad[i];
                slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
                slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                let upd = lr * mhat / (vhat.sqrt() + eps);
                if !upd.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite Adam update for {}[{i}] at step {}",
                        p.name, self.step
                    )));
                }
                p.value.data[i] -= upd;
            }
        }
        Ok(())
    }
}

/// Scales gradients of the listed groups so their global L2 norm is at most
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(ps: &mut ParamSet, groups: &[&str], max_norm: f32) -> f32 {
    let mut sq = 0.0f64;
    for p in ps.iter() {
        if groups.contains(&p.group()) {
            if let Some(g) = &p.grad {
                sq += g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
            }
        }
    }
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in ps.iter_mut() {
            if groups.contains(&p.group()) {
                if let Some(g) = &mut p.grad {
                    for v in g.iter_mut() {
                        *v *= s;
                    }
                }
            }
        }
    }
    norm
}
