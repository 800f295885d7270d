//! Alternating multi-task training: interleaved ERE/DRR batches over the
//! shared parameters, combined loss weighting, gradient clipping and
//! best-on-dev checkpoint selection.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{InstancePair, SplitData, Task};
use crate::error::{Error, Result};
use crate::model::{trainable_groups, Model};
use crate::tensorgrad::{clip_global_norm, Binder, Graph, OptimState, Rng, TensorId};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Weight on the fine-grained objective; `1 - alpha` goes to the coarse
    /// classifier's cross-entropy.
    pub alpha: f64,
    /// Weight on the KL regularizer inside the fine-grained objective.
    #[serde(rename = "lambda")]
    pub lambda_kl: f64,
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Gold coarse embeddings feed the fine classifier during training when
    /// true; otherwise the coarse classifier's argmax is used.
    pub teacher_forcing: bool,
    /// Task whose dev accuracy drives checkpoint selection.
    pub target_task: Task,
    pub grad_clip: f32,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            alpha: 0.9,
            lambda_kl: 0.5,
            lr: 1e-3,
            batch_size: 32,
            epochs: 20,
            seed: 42,
            teacher_forcing: true,
            target_task: Task::Ere,
            grad_clip: 5.0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Invalid(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if self.lambda_kl < 0.0 {
            return Err(Error::Invalid(format!("lambda must be >= 0, got {}", self.lambda_kl)));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Invalid("epochs must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Invalid(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// The scalar training objective:
/// `alpha * (fine_ce + lambda * kl) + (1 - alpha) * coarse_ce`.
/// Components absent under an ablation enter as zero.
pub fn combined_loss(alpha: f64, lambda: f64, fine_ce: f64, coarse_ce: f64, kl: f64) -> f64 {
    alpha * (fine_ce + lambda * kl) + (1.0 - alpha) * coarse_ce
}

/// One optimizer step's loss breakdown, written to the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub task: Task,
    pub fine_ce: f64,
    pub coarse_ce: f64,
    pub kl: f64,
    pub combined: f64,
    pub grad_norm: f64,
}

/// Per-epoch summary line, interleaved with step records in the log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub dev_acc: f64,
    pub best: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_dev_acc: f64,
    pub dev_history: Vec<f64>,
}

fn mean_node(g: &mut Graph, terms: &[TensorId]) -> Result<TensorId> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    g.scale(acc, 1.0 / terms.len() as f32)
}

/// Runs one batch through the model, backpropagates the combined loss and
/// applies an Adam update to the groups a batch of this task trains.
/// The batch must be non-empty and single-task.
pub fn train_step(
    model: &mut Model,
    opt: &mut OptimState,
    cfg: &TrainerConfig,
    batch: &[InstancePair],
    step: usize,
    epoch: usize,
    rng: &mut Rng,
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::Invalid("cannot train on an empty batch".into()));
    }
    let task = batch[0].task;
    if batch.iter().any(|p| p.task != task) {
        return Err(Error::Invalid("training batches must be single-task".into()));
    }

    let mut g = Graph::new();
    let mut binder = Binder::new();
    let mut fine_terms = Vec::with_capacity(batch.len());
    let mut coarse_terms = Vec::with_capacity(batch.len());
    let mut kl_terms = Vec::with_capacity(batch.len());
    for pair in batch {
        let fwd = model.forward_train(&mut g, &mut binder, pair, cfg.teacher_forcing, rng)?;
        let spec = model.specs.spec(task);
        let fid = spec.fine_id(&pair.fine_label).unwrap();
        fine_terms.push(g.cross_entropy(fwd.fine_logits, fid)?);
        if let Some(cl) = fwd.coarse_logits {
            coarse_terms.push(g.cross_entropy(cl, pair.coarse_label.id())?);
        }
        if let Some(kl) = fwd.kl {
            kl_terms.push(kl);
        }
    }

    let fine_mean = mean_node(&mut g, &fine_terms)?;
    let coarse_mean = if coarse_terms.is_empty() {
        None
    } else {
        Some(mean_node(&mut g, &coarse_terms)?)
    };
    let kl_mean = if kl_terms.is_empty() { None } else { Some(mean_node(&mut g, &kl_terms)?) };

    // Build the objective with explicit scale nodes so that alpha = 1 sends
    // exactly zero gradient into the coarse cross-entropy branch.
    let mut inner = fine_mean;
    if let Some(kl) = kl_mean {
        let weighted = g.scale(kl, cfg.lambda_kl as f32)?;
        inner = g.add(inner, weighted)?;
    }
    let mut total = g.scale(inner, cfg.alpha as f32)?;
    if let Some(cm) = coarse_mean {
        let weighted = g.scale(cm, (1.0 - cfg.alpha) as f32)?;
        total = g.add(total, weighted)?;
    }

    let fine_v = g.scalar_value(fine_mean) as f64;
    let coarse_v = coarse_mean.map(|n| g.scalar_value(n) as f64).unwrap_or(0.0);
    let kl_v = kl_mean.map(|n| g.scalar_value(n) as f64).unwrap_or(0.0);

    g.backward(total)?;
    binder.harvest(&g, &mut model.params);
    let groups = trainable_groups(&model.ablation, task);
    let grad_norm = clip_global_norm(&mut model.params, &groups, cfg.grad_clip);
    opt.step_groups(&mut model.params, &groups)?;

    Ok(StepRecord {
        step,
        epoch,
        task,
        fine_ce: fine_v,
        coarse_ce: coarse_v,
        kl: kl_v,
        combined: combined_loss(cfg.alpha, cfg.lambda_kl, fine_v, coarse_v, kl_v),
        grad_norm: grad_norm as f64,
    })
}

/// Fraction of instances whose predicted fine label matches gold.
pub fn dev_accuracy(model: &Model, data: &[InstancePair]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    let mut correct = 0usize;
    for pair in data {
        if model.predict(pair)?.fine_label == pair.fine_label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn batches(indices: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    indices.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Full training loop. Batches from the two tasks alternate 1:1 (the longer
/// stream finishes solo once the shorter runs out); when the knowledge
/// projection is disabled only the target task's data is used. After each
/// epoch the target task's dev accuracy is measured and the best weights are
/// kept; the model holds the best parameters on return. When `out_dir` is
/// given, a JSONL training log and the best checkpoint are written there.
pub fn train(
    model: &mut Model,
    ere: &SplitData,
    drr: &SplitData,
    cfg: &TrainerConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut opt = OptimState::new(cfg.lr);
    let rng = Rng::seeded(cfg.seed);
    let mut sample_rng = rng.split(1);
    let mut shuffle_rng = rng.split(2);

    let mut log: Option<BufWriter<File>> = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join("train_log.jsonl"))?))
        }
        None => None,
    };

    let split_of = |task: Task| -> &SplitData {
        match task {
            Task::Ere => ere,
            Task::Drr => drr,
        }
    };
    let target_train = &split_of(cfg.target_task).train;
    if target_train.is_empty() {
        return Err(Error::Data("target task has no training data".into()));
    }

    let other_task = match cfg.target_task {
        Task::Ere => Task::Drr,
        Task::Drr => Task::Ere,
    };

    let mut step = 0usize;
    let mut best_dev = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = model.params.clone();
    let mut dev_history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut tgt_idx: Vec<usize> = (0..target_train.len()).collect();
        shuffle_rng.shuffle(&mut tgt_idx);
        let tgt_batches = batches(&tgt_idx, cfg.batch_size);

        let aux_batches = if model.ablation.use_projection {
            let aux_train = &split_of(other_task).train;
            let mut aux_idx: Vec<usize> = (0..aux_train.len()).collect();
            shuffle_rng.shuffle(&mut aux_idx);
            batches(&aux_idx, cfg.batch_size)
        } else {
            Vec::new()
        };

        // Alternate target / auxiliary batches.
        let rounds = tgt_batches.len().max(aux_batches.len());
        for i in 0..rounds {
            for (task, batch_ids) in [
                (cfg.target_task, tgt_batches.get(i)),
                (other_task, aux_batches.get(i)),
            ] {
                let Some(ids) = batch_ids else { continue };
                let train_split = &split_of(task).train;
                let batch: Vec<InstancePair> =
                    ids.iter().map(|&j| train_split[j].clone()).collect();
                step += 1;
                let rec = train_step(model, &mut opt, cfg, &batch, step, epoch, &mut sample_rng)?;
                if let Some(w) = log.as_mut() {
                    serde_json::to_writer(&mut *w, &rec)?;
                    writeln!(w)?;
                }
            }
        }

        let dev_acc = dev_accuracy(model, &split_of(cfg.target_task).dev)?;
        dev_history.push(dev_acc);
        let is_best = dev_acc > best_dev;
        if is_best {
            best_dev = dev_acc;
            best_epoch = epoch;
            best_params = model.params.clone();
        }
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &EpochSummary { epoch, dev_acc, best: is_best })?;
            writeln!(w)?;
        }
    }

    model.params = best_params;
    if let Some(dir) = out_dir {
        model.save(&dir.join("best"))?;
    }
    if let Some(mut w) = log {
        w.flush()?;
    }

    Ok(TrainReport {
        steps: step,
        epochs: cfg.epochs,
        best_epoch,
        best_dev_acc: best_dev,
        dev_history,
    })
}
