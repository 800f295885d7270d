//! Property tests for the pure data-and-metrics layer.

use std::collections::BTreeMap;

use proptest::prelude::*;

use mkpnet::coarse::CoarseLabel;
use mkpnet::data::{cap_per_category, default_task_specs, InstancePair, Task};
use mkpnet::encoder::{tokenize_pair, Vocab, CLS};
use mkpnet::evalx::{accuracy, macro_f1, micro_f1};
use mkpnet::semantic::{kl_closed_form, GaussianParams};

fn label_vec(max_label: usize, len: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec((0..max_label).prop_map(|i| format!("L{i}")), len..=len)
}

proptest! {
    #[test]
    fn metrics_stay_in_unit_interval(
        n in 1usize..40,
        seed_a in 0usize..5,
        seed_b in 0usize..5,
    ) {
        let gold: Vec<String> = (0..n).map(|i| format!("L{}", (i + seed_a) % 4)).collect();
        let pred: Vec<String> = (0..n).map(|i| format!("L{}", (i * 3 + seed_b) % 4)).collect();
        for m in [accuracy(&gold, &pred).unwrap(),
                  macro_f1(&gold, &pred).unwrap(),
                  micro_f1(&gold, &pred).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn perfect_agreement_scores_one((gold, _) in label_vec(4, 10).prop_map(|v| (v.clone(), v))) {
        prop_assert_eq!(accuracy(&gold, &gold).unwrap(), 1.0);
        prop_assert_eq!(macro_f1(&gold, &gold).unwrap(), 1.0);
        prop_assert_eq!(micro_f1(&gold, &gold).unwrap(), 1.0);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(
        mu_q in prop::collection::vec(-3.0f32..3.0, 3),
        lv_q in prop::collection::vec(-2.0f32..2.0, 3),
        mu_p in prop::collection::vec(-3.0f32..3.0, 3),
        lv_p in prop::collection::vec(-2.0f32..2.0, 3),
    ) {
        let q = GaussianParams { mu: mu_q, log_var: lv_q };
        let p = GaussianParams { mu: mu_p, log_var: lv_p };
        prop_assert!(kl_closed_form(&q, &p).unwrap() >= -1e-9);
        prop_assert!(kl_closed_form(&q, &q).unwrap().abs() < 1e-9);
    }

    #[test]
    fn capping_respects_cap_and_keeps_order(
        confs in prop::collection::vec(1.0f64..10.0, 1..30),
        cap in 1usize..5,
    ) {
        let specs = default_task_specs();
        let data: Vec<InstancePair> = confs
            .iter()
            .enumerate()
            .map(|(i, &c)| InstancePair {
                id: format!("p{i:03}"),
                task: Task::Ere,
                arg1: "a b".into(),
                arg2: "c d".into(),
                fine_label: specs.ere.fine_labels[i % 3].clone(),
                coarse_label: CoarseLabel::Temporal,
                connective: None,
                confidence: Some(c),
                extra: BTreeMap::new(),
            })
            .collect();
        let capped = cap_per_category(&data, cap).unwrap();
        let mut per_label: BTreeMap<&str, usize> = BTreeMap::new();
        for p in &capped {
            *per_label.entry(p.fine_label.as_str()).or_insert(0) += 1;
        }
        for (&_, &count) in &per_label {
            prop_assert!(count <= cap);
        }
        // Survivors keep their original relative order.
        let positions: Vec<usize> = capped
            .iter()
            .map(|p| data.iter().position(|d| d.id == p.id).unwrap())
            .collect();
        prop_assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn tokenization_fits_budget_and_leads_with_cls(
        w1 in prop::collection::vec("[a-z]{1,8}", 1..20),
        w2 in prop::collection::vec("[a-z]{1,8}", 1..20),
        max_len in 8usize..40,
    ) {
        let arg1 = w1.join(" ");
        let arg2 = w2.join(" ");
        let vocab = Vocab::build([arg1.clone(), arg2.clone()].into_iter(), 512);
        let tok = tokenize_pair(&arg1, &arg2, &vocab, max_len).unwrap();
        prop_assert!(tok.token_ids.len() <= max_len);
        prop_assert_eq!(tok.token_ids[0], CLS);
        prop_assert_eq!(tok.token_ids.len(), tok.segment_ids.len());
        prop_assert_eq!(tok.token_ids.len(), tok.attention_mask.len());
        prop_assert!(tok.segment_ids.iter().all(|&s| s <= 1));
        prop_assert!(tok.attention_mask.iter().all(|&m| m == 1));
    }
}
