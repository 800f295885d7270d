//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side runs on the f64 replay of the recorded tape, so the
//! comparison is not dominated by f32 rounding of the forward pass.

use super::graph::{Graph, Tensor, TensorId};
use crate::error::{Error, Result};

/// Relative error as used throughout: |a - n| / max(1e-8, |a| + |n|).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Checks analytic gradients of `loss` w.r.t. the given leaves against
/// central differences of the f64 tape replay. Returns the max relative
/// error over all coordinates. `backward` must not have run yet.
pub fn check_graph(g: &mut Graph, loss: TensorId, leaves: &[TensorId], h: f64) -> Result<f64> {
    g.backward(loss)?;
    let mut worst = 0.0f64;
    for &leaf in leaves {
        let n = g.value(leaf).numel();
        let analytic: Vec<f64> = match g.grad(leaf) {
            Some(gr) => gr.iter().map(|&v| v as f64).collect(),
            None => vec![0.0; n],
        };
        let base: Vec<f64> = g.value(leaf).data.iter().map(|&v| v as f64).collect();
        for i in 0..n {
            let mut plus = base.clone();
            plus[i] += h;
            let fp = g.replay_f64(loss, &[(leaf, plus)]);
            let mut minus = base.clone();
            minus[i] -= h;
            let fm = g.replay_f64(loss, &[(leaf, minus)]);
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    Ok(worst)
}

/// Gradient check for a scalar-valued tensor function. `f` receives a fresh
/// graph and the leaf id of `x` and must return the scalar output id. It is
/// called twice to detect non-determinism before the check runs.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, TensorId) -> Result<TensorId>,
{
    let run = |require: bool| -> Result<(Graph, TensorId, TensorId)> {
        let mut g = Graph::new();
        let xid = g.leaf(x.clone(), require)?;
        let out = f(&mut g, xid)?;
        Ok((g, xid, out))
    };
    let (g1, _, o1) = run(true)?;
    let (g2, _, o2) = run(true)?;
    if g1.value(o1).data != g2.value(o2).data {
        return Err(Error::Invalid(
            "grad_check requires a deterministic function; two forward passes differ".into(),
        ));
    }
    let (mut g, xid, out) = run(true)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Invalid("grad_check target must be scalar".into()));
    }
    check_graph(&mut g, out, &[xid], h)
}
