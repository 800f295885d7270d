//! Coarse category adaptor: the 4-way top-level relation classifier and the
//! coarse label embedding table, both shared between ERE and DRR.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorgrad::{Binder, Graph, ParamSet, Rng, Tensor, TensorId};

/// Top-level relation categories shared by both tasks, with fixed ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CoarseLabel {
    Temporal,
    Contingency,
    Comparison,
    Expansion,
}

pub const NUM_COARSE: usize = 4;

impl CoarseLabel {
    pub const ALL: [CoarseLabel; 4] = [
        CoarseLabel::Temporal,
        CoarseLabel::Contingency,
        CoarseLabel::Comparison,
        CoarseLabel::Expansion,
    ];

    pub fn id(self) -> usize {
        match self {
            CoarseLabel::Temporal => 0,
            CoarseLabel::Contingency => 1,
            CoarseLabel::Comparison => 2,
            CoarseLabel::Expansion => 3,
        }
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("coarse label id {id} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            CoarseLabel::Temporal => "Temporal",
            CoarseLabel::Contingency => "Contingency",
            CoarseLabel::Comparison => "Comparison",
            CoarseLabel::Expansion => "Expansion",
        }
    }
}

/// Builds the θ^Coarse parameters: classifier over `[h_cls; h_z]` (or
/// `h_cls` alone when the semantic adaptor is disabled) and the 4 × d_c
/// label embedding table.
pub fn init_params(ps: &mut ParamSet, in_dim: usize, d_c: usize, rng: &mut Rng) -> Result<()> {
    ps.add(
        "coarse.cls.w",
        Tensor::new(vec![in_dim, NUM_COARSE], rng.normal_vec(in_dim * NUM_COARSE, 0.02))?,
    )?;
    ps.add("coarse.cls.b", Tensor::zeros(vec![NUM_COARSE]))?;
    ps.add(
        "coarse.emb",
        Tensor::new(vec![NUM_COARSE, d_c], rng.normal_vec(NUM_COARSE * d_c, 0.02))?,
    )?;
    Ok(())
}

/// Coarse logits from the concatenated `[h_cls; h_z]` features (graph node,
/// rank-1 of length 4). Softmax is applied by the caller where needed.
pub fn coarse_logits(
    g: &mut Graph,
    binder: &mut Binder,
    ps: &ParamSet,
    features: TensorId,
) -> Result<TensorId> {
    let w = binder.bind(g, ps, "coarse.cls.w")?;
    let b = binder.bind(g, ps, "coarse.cls.b")?;
    g.affine(features, w, b)
}

/// Probability distribution over the four coarse labels.
pub fn classify_coarse(
    g: &mut Graph,
    binder: &mut Binder,
    ps: &ParamSet,
    features: TensorId,
) -> Result<TensorId> {
    let logits = coarse_logits(g, binder, ps, features)?;
    g.softmax(logits)
}

/// Embedding row for a coarse label (differentiable lookup).
pub fn embed_coarse(
    g: &mut Graph,
    binder: &mut Binder,
    ps: &ParamSet,
    label: CoarseLabel,
) -> Result<TensorId> {
    let table = binder.bind(g, ps, "coarse.emb")?;
    let rows = g.embedding(table, &[label.id()])?;
    g.row(rows, 0)
}

/// Deterministic argmax with ties broken toward the lowest label id.
pub fn argmax_label(probs: &[f32]) -> CoarseLabel {
    let mut best = 0;
    for i in 1..probs.len().min(NUM_COARSE) {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    CoarseLabel::from_id(best).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(in_dim: usize) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut rng = Rng::seeded(7);
        init_params(&mut ps, in_dim, 8, &mut rng).unwrap();
        ps
    }

    #[test]
    fn zero_weights_give_uniform_distribution() {
        let mut ps = setup(6);
        for name in ["coarse.cls.w", "coarse.cls.b"] {
            let p = ps.get_mut(name).unwrap();
            p.value.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let mut b = Binder::new();
        let x = g.constant(Tensor::new(vec![6], vec![0.3; 6]).unwrap()).unwrap();
        let probs = classify_coarse(&mut g, &mut b, &ps, x).unwrap();
        for &p in &g.value(probs).data {
            assert!((p - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let ps = setup(6);
        let mut rng = Rng::seeded(3);
        for _ in 0..20 {
            let mut g = Graph::new();
            let mut b = Binder::new();
            let x = g
                .constant(Tensor::new(vec![6], rng.normal_vec(6, 1.0)).unwrap())
                .unwrap();
            let probs = classify_coarse(&mut g, &mut b, &ps, x).unwrap();
            let s: f32 = g.value(probs).data.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn argmax_invariant_under_logit_shift() {
        let ps = setup(6);
        let mut g = Graph::new();
        let mut b = Binder::new();
        let x = g.constant(Tensor::new(vec![6], vec![0.5, -0.2, 1.0, 0.0, -1.0, 0.3]).unwrap()).unwrap();
        let logits = coarse_logits(&mut g, &mut b, &ps, x).unwrap();
        let shifted = g.add_const(logits, 3.5).unwrap();
        let p1 = g.softmax(logits).unwrap();
        let p2 = g.softmax(shifted).unwrap();
        assert_eq!(
            argmax_label(&g.value(p1).data),
            argmax_label(&g.value(p2).data)
        );
    }

    #[test]
    fn embed_returns_table_row() {
        let ps = setup(6);
        let mut g = Graph::new();
        let mut b = Binder::new();
        let e = embed_coarse(&mut g, &mut b, &ps, CoarseLabel::Temporal).unwrap();
        let row = &ps.get("coarse.emb").unwrap().value.data[0..8];
        assert_eq!(g.value(e).data, row);
    }

    #[test]
    fn fine_loss_gradient_reaches_only_used_row() {
        let mut ps = setup(6);
        let mut g = Graph::new();
        let mut b = Binder::new();
        let e = embed_coarse(&mut g, &mut b, &ps, CoarseLabel::Comparison).unwrap();
        let loss = g.sum(e).unwrap();
        g.backward(loss).unwrap();
        b.harvest(&g, &mut ps);
        let grad = ps.get("coarse.emb").unwrap().grad.as_ref().unwrap();
        for (i, &v) in grad.iter().enumerate() {
            let row = i / 8;
            if row == CoarseLabel::Comparison.id() {
                assert_eq!(v, 1.0);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn argmax_tie_breaks_to_lowest_id() {
        assert_eq!(argmax_label(&[0.25, 0.25, 0.25, 0.25]), CoarseLabel::Temporal);
        assert_eq!(argmax_label(&[0.1, 0.4, 0.4, 0.1]), CoarseLabel::Contingency);
    }
}
