//! Evaluation: accuracy and F1 metrics, approximate-randomization
//! significance testing, and the ablation grid harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{InstancePair, SynthData, Task};
use crate::encoder::Vocab;
use crate::error::{Error, Result};
use crate::model::{AblationConfig, Model, ModelConfig};
use crate::tensorgrad::Rng;
use crate::trainer::{train, TrainerConfig};

// ---- metrics ---------------------------------------------------------------

fn check_lengths(gold: &[String], pred: &[String]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::Invalid(format!(
            "gold and prediction lengths differ ({} vs {})",
            gold.len(),
            pred.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Invalid("cannot score an empty prediction set".into()));
    }
    Ok(())
}

pub fn accuracy(gold: &[String], pred: &[String]) -> Result<f64> {
    check_lengths(gold, pred)?;
    let correct = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
    Ok(correct as f64 / gold.len() as f64)
}

/// Unweighted mean of per-class F1 over every label appearing in gold or
/// predictions. Classes with zero precision+recall contribute 0.
pub fn macro_f1(gold: &[String], pred: &[String]) -> Result<f64> {
    check_lengths(gold, pred)?;
    let mut counts: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new(); // tp, fp, fn
    for (g, p) in gold.iter().zip(pred) {
        counts.entry(g).or_default();
        counts.entry(p).or_default();
        if g == p {
            counts.get_mut(g.as_str()).unwrap().0 += 1;
        } else {
            counts.get_mut(p.as_str()).unwrap().1 += 1;
            counts.get_mut(g.as_str()).unwrap().2 += 1;
        }
    }
    let mut total = 0.0;
    for &(tp, fp, fn_) in counts.values() {
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            total += 2.0 * tp as f64 / denom as f64;
        }
    }
    Ok(total / counts.len() as f64)
}

/// Micro-averaged F1 (pooled true/false positives). For single-label
/// classification this coincides with accuracy, but it is computed from the
/// pooled counts rather than assumed.
pub fn micro_f1(gold: &[String], pred: &[String]) -> Result<f64> {
    check_lengths(gold, pred)?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (g, p) in gold.iter().zip(pred) {
        if g == p {
            tp += 1;
        } else {
            fp += 1;
            fn_ += 1;
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 })
}

/// Two-sided approximate randomization test on the accuracy difference
/// between two systems scored against the same gold labels. Returns the
/// p-value `(exceed_count + 1) / (iterations + 1)`; identical predictions
/// give p = 1.0.
pub fn significance(
    gold: &[String],
    pred_a: &[String],
    pred_b: &[String],
    iterations: usize,
    seed: u64,
) -> Result<f64> {
    check_lengths(gold, pred_a)?;
    check_lengths(gold, pred_b)?;
    if iterations < 1000 {
        return Err(Error::Invalid(format!(
            "significance test needs at least 1000 iterations, got {iterations}"
        )));
    }
    let a: Vec<u8> = gold.iter().zip(pred_a).map(|(g, p)| (g == p) as u8).collect();
    let b: Vec<u8> = gold.iter().zip(pred_b).map(|(g, p)| (g == p) as u8).collect();
    let n = gold.len() as f64;
    let observed = (a.iter().map(|&x| x as f64).sum::<f64>()
        - b.iter().map(|&x| x as f64).sum::<f64>())
    .abs()
        / n;
    let mut rng = Rng::seeded(seed);
    let mut exceed = 0usize;
    for _ in 0..iterations {
        let mut diff = 0i64;
        for i in 0..a.len() {
            let (x, y) = if rng.uniform() < 0.5 { (a[i], b[i]) } else { (b[i], a[i]) };
            diff += x as i64 - y as i64;
        }
        if (diff.abs() as f64 / n) >= observed - 1e-12 {
            exceed += 1;
        }
    }
    Ok((exceed + 1) as f64 / (iterations + 1) as f64)
}

// ---- model evaluation ------------------------------------------------------

/// Metrics for one model on one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub coarse_accuracy: Option<f64>,
    pub coarse_macro_f1: Option<f64>,
    /// Predicted fine labels, instance order preserved.
    pub predictions: Vec<String>,
}

pub fn evaluate(model: &Model, data: &[InstancePair]) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    let gold: Vec<String> = data.iter().map(|p| p.fine_label.clone()).collect();
    let mut pred = Vec::with_capacity(data.len());
    let mut coarse_gold = Vec::new();
    let mut coarse_pred = Vec::new();
    for pair in data {
        let p = model.predict(pair)?;
        pred.push(p.fine_label);
        if let Some(c) = p.coarse_label {
            coarse_gold.push(pair.coarse_label.name().to_string());
            coarse_pred.push(c.name().to_string());
        }
    }
    let (coarse_accuracy, coarse_macro_f1) = if coarse_pred.is_empty() {
        (None, None)
    } else {
        (
            Some(accuracy(&coarse_gold, &coarse_pred)?),
            Some(macro_f1(&coarse_gold, &coarse_pred)?),
        )
    };
    Ok(EvalResult {
        n: data.len(),
        accuracy: accuracy(&gold, &pred)?,
        macro_f1: macro_f1(&gold, &pred)?,
        micro_f1: micro_f1(&gold, &pred)?,
        coarse_accuracy,
        coarse_macro_f1,
        predictions: pred,
    })
}

// ---- ablation grid ---------------------------------------------------------

/// The fixed ablation grid. `w/o SA*` re-evaluates the `w/o SA` model with
/// gold coarse labels at test time, so it trains nothing new.
pub const GRID: [(&str, AblationConfig); 7] = [
    (
        "bert-cls",
        AblationConfig {
            use_semantic: false,
            use_coarse: false,
            use_projection: false,
            gold_coarse_at_test: false,
        },
    ),
    (
        "w/o KP",
        AblationConfig {
            use_semantic: true,
            use_coarse: true,
            use_projection: false,
            gold_coarse_at_test: false,
        },
    ),
    (
        "w/o SA & CA",
        AblationConfig {
            use_semantic: false,
            use_coarse: false,
            use_projection: true,
            gold_coarse_at_test: false,
        },
    ),
    (
        "w/o CA",
        AblationConfig {
            use_semantic: true,
            use_coarse: false,
            use_projection: true,
            gold_coarse_at_test: false,
        },
    ),
    (
        "w/o SA",
        AblationConfig {
            use_semantic: false,
            use_coarse: true,
            use_projection: true,
            gold_coarse_at_test: false,
        },
    ),
    (
        "full",
        AblationConfig {
            use_semantic: true,
            use_coarse: true,
            use_projection: true,
            gold_coarse_at_test: false,
        },
    ),
    (
        "w/o SA*",
        AblationConfig {
            use_semantic: false,
            use_coarse: true,
            use_projection: true,
            gold_coarse_at_test: true,
        },
    ),
];

/// Baseline row that the per-row deltas are measured against.
pub const BASELINE_CONFIG: &str = "w/o KP";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub coarse_accuracy: Option<f64>,
    pub coarse_macro_f1: Option<f64>,
    pub delta_accuracy: f64,
    pub delta_macro_f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub task: Task,
    pub rows: Vec<AblationRow>,
}

fn train_and_eval_config(
    ablation: AblationConfig,
    model_cfg: &ModelConfig,
    trainer_cfg: &TrainerConfig,
    data: &SynthData,
    vocab: &Vocab,
    init_seed: u64,
) -> Result<(Model, EvalResult)> {
    let mut model = Model::new(
        *model_cfg,
        ablation,
        data.specs.clone(),
        vocab.clone(),
        init_seed,
    )?;
    train(&mut model, &data.ere, &data.drr, trainer_cfg, None)?;
    let test = match trainer_cfg.target_task {
        Task::Ere => &data.ere.test,
        Task::Drr => &data.drr.test,
    };
    let result = evaluate(&model, test)?;
    Ok((model, result))
}

/// Trains and evaluates every grid configuration on the target task's test
/// split. Six trainings run (the starred oracle row reuses the `w/o SA`
/// model); rows come back in grid order with deltas against the `w/o KP`
/// baseline. `jobs > 1` trains independent configurations on that many
/// threads; results are identical either way.
pub fn ablation_grid(
    model_cfg: &ModelConfig,
    trainer_cfg: &TrainerConfig,
    data: &SynthData,
    init_seed: u64,
    jobs: usize,
) -> Result<AblationReport> {
    if jobs == 0 {
        return Err(Error::Invalid("jobs must be >= 1".into()));
    }
    let vocab = Vocab::build(
        data.ere
            .train
            .iter()
            .chain(&data.drr.train)
            .flat_map(|p| [p.arg1.clone(), p.arg2.clone()]),
        model_cfg.vocab_cap,
    );

    // All rows except the starred oracle train their own model.
    let trained: Vec<(&str, AblationConfig)> =
        GRID.iter().filter(|(name, _)| !name.ends_with('*')).cloned().collect();

    let mut results: BTreeMap<&str, (Model, EvalResult)> = BTreeMap::new();
    if jobs == 1 {
        for (name, ablation) in &trained {
            let r = train_and_eval_config(
                *ablation, model_cfg, trainer_cfg, data, &vocab, init_seed,
            )?;
            results.insert(name, r);
        }
    } else {
        let outputs = std::thread::scope(|scope| {
            let handles: Vec<_> = trained
                .chunks(trained.len().div_ceil(jobs))
                .map(|chunk| {
                    let vocab = &vocab;
                    scope.spawn(move || {
                        chunk
                            .iter()
                            .map(|(name, ablation)| {
                                train_and_eval_config(
                                    *ablation, model_cfg, trainer_cfg, data, vocab, init_seed,
                                )
                                .map(|r| (*name, r))
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation worker panicked"))
                .collect::<Result<Vec<_>>>()
        })?;
        for batch in outputs {
            for (name, r) in batch {
                results.insert(name, r);
            }
        }
    }

    let test = match trainer_cfg.target_task {
        Task::Ere => &data.ere.test,
        Task::Drr => &data.drr.test,
    };
    let baseline = &results[BASELINE_CONFIG].1;
    let (base_acc, base_f1) = (baseline.accuracy, baseline.macro_f1);

    let mut rows = Vec::with_capacity(GRID.len());
    for (name, ablation) in &GRID {
        let eval = if name.ends_with('*') {
            // Oracle evaluation of the matching trained model.
            let base_name = name.trim_end_matches('*').trim_end();
            let (model, _) = results.get(base_name).ok_or_else(|| {
                Error::Invalid(format!("oracle row {name} has no trained base {base_name}"))
            })?;
            let oracle = Model {
                cfg: model.cfg,
                ablation: *ablation,
                specs: model.specs.clone(),
                vocab: model.vocab.clone(),
                params: model.params.clone(),
            };
            oracle.ablation.validate()?;
            evaluate(&oracle, test)?
        } else {
            results[name].1.clone()
        };
        rows.push(AblationRow {
            config: name.to_string(),
            accuracy: eval.accuracy,
            macro_f1: eval.macro_f1,
            coarse_accuracy: eval.coarse_accuracy,
            coarse_macro_f1: eval.coarse_macro_f1,
            delta_accuracy: eval.accuracy - base_acc,
            delta_macro_f1: eval.macro_f1 - base_f1,
        });
    }
    Ok(AblationReport { task: trainer_cfg.target_task, rows })
}

impl AblationReport {
    /// Tab-separated table: header plus one row per configuration.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "config\taccuracy\tmacro_f1\tcoarse_accuracy\tcoarse_macro_f1\tdelta_accuracy\tdelta_macro_f1\n",
        );
        let opt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "-".to_string(),
        };
        for r in &self.rows {
            writeln!(
                out,
                "{}\t{:.4}\t{:.4}\t{}\t{}\t{:+.4}\t{:+.4}",
                r.config,
                r.accuracy,
                r.macro_f1,
                opt(r.coarse_accuracy),
                opt(r.coarse_macro_f1),
                r.delta_accuracy,
                r.delta_macro_f1
            )
            .unwrap();
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation.tsv"), self.to_tsv())?;
        std::fs::write(dir.join("ablation.json"), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn row(&self, config: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.config == config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(labels: &[&str]) -> Vec<String> {
        labels.iter().map(|l| l.to_string()).collect()
    }

    #[test]
    fn accuracy_counts_matches() {
        let g = s(&["A", "A", "B", "B"]);
        let p = s(&["A", "B", "B", "B"]);
        assert!((accuracy(&g, &p).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_two_class_example() {
        let g = s(&["A", "A", "B", "B"]);
        let p = s(&["A", "B", "B", "B"]);
        // F1(A) = 2/3, F1(B) = 4/5 -> macro = 11/15.
        assert!((macro_f1(&g, &p).unwrap() - 0.7333).abs() < 1e-4);
    }

    #[test]
    fn macro_f1_handles_unpredicted_class() {
        let g = s(&["A", "B", "C"]);
        let p = s(&["A", "A", "A"]);
        // F1(A) = 0.5, F1(B) = F1(C) = 0.
        assert!((macro_f1(&g, &p).unwrap() - 0.5 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn micro_f1_equals_accuracy_for_single_label() {
        let g = s(&["A", "B", "C", "A", "B"]);
        let p = s(&["A", "C", "C", "B", "B"]);
        assert!((micro_f1(&g, &p).unwrap() - accuracy(&g, &p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let g = s(&["A", "B", "C"]);
        assert_eq!(accuracy(&g, &g).unwrap(), 1.0);
        assert_eq!(macro_f1(&g, &g).unwrap(), 1.0);
        assert_eq!(micro_f1(&g, &g).unwrap(), 1.0);
    }

    #[test]
    fn length_mismatch_rejected() {
        let g = s(&["A", "B"]);
        let p = s(&["A"]);
        assert!(accuracy(&g, &p).is_err());
        assert!(macro_f1(&g, &p).is_err());
        assert!(significance(&g, &p, &p, 1000, 0).is_err());
    }

    #[test]
    fn identical_predictions_not_significant() {
        let g = s(&["A", "B", "A", "B", "A", "B"]);
        let p = s(&["A", "B", "B", "B", "A", "A"]);
        let pv = significance(&g, &p, &p, 1000, 7).unwrap();
        assert_eq!(pv, 1.0);
    }

    #[test]
    fn large_gap_is_significant() {
        let n = 200;
        let gold: Vec<String> = (0..n).map(|i| format!("L{}", i % 4)).collect();
        let good = gold.clone();
        let bad: Vec<String> = (0..n).map(|i| format!("L{}", (i + 1) % 4)).collect();
        let pv = significance(&gold, &good, &bad, 2000, 3).unwrap();
        assert!(pv < 0.01, "p = {pv}");
    }

    #[test]
    fn significance_deterministic_and_in_range() {
        let gold: Vec<String> = (0..50).map(|i| format!("L{}", i % 3)).collect();
        let a: Vec<String> = (0..50).map(|i| format!("L{}", i % 2)).collect();
        let b: Vec<String> = (0..50).map(|i| format!("L{}", (i + 1) % 3)).collect();
        let p1 = significance(&gold, &a, &b, 1000, 9).unwrap();
        let p2 = significance(&gold, &a, &b, 1000, 9).unwrap();
        assert_eq!(p1, p2);
        assert!(p1 > 0.0 && p1 <= 1.0);
    }

    #[test]
    fn too_few_iterations_rejected() {
        let g = s(&["A", "B"]);
        assert!(significance(&g, &g, &g, 999, 0).is_err());
    }

    #[test]
    fn grid_has_expected_shape() {
        assert_eq!(GRID.len(), 7);
        assert!(GRID.iter().any(|(n, _)| *n == BASELINE_CONFIG));
        let (_, full) = GRID.iter().find(|(n, _)| *n == "full").unwrap();
        assert!(full.use_semantic && full.use_coarse && full.use_projection);
        let (_, star) = GRID.iter().find(|(n, _)| *n == "w/o SA*").unwrap();
        assert!(star.gold_coarse_at_test && star.use_coarse && !star.use_semantic);
        for (_, cfg) in &GRID {
            cfg.validate().unwrap();
        }
    }
}
