//! Full model assembly: the shared encoder, semantic and coarse adaptors
//! composed with per-task fine classifiers, plus ablation variants and
//! checkpoint I/O.
//!
//! Parameter groups and their sharing contract:
//! `bert.*` (token adaptor), `semantic.*` (VAE heads) and `coarse.*`
//! (coarse classifier + label embedding) are shared between ERE and DRR;
//! `fine_ere.*` and `fine_drr.*` each hold one task's fine classifier and
//! its fine label embedding table.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coarse::{self, CoarseLabel, NUM_COARSE};
use crate::data::{InstancePair, Task, TaskSpecs};
use crate::encoder::{self, EncoderConfig, Vocab};
use crate::error::{Error, Result};
use crate::semantic::{self, SemanticDims};
use crate::tensorgrad::{checkpoint, Binder, Graph, ParamSet, Rng, TensorId};
use crate::tensorgrad::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_z: usize,
    pub d_label: usize,
    pub d_c: usize,
    pub max_len: usize,
    pub ff_dim: usize,
    pub vocab_cap: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            heads: 4,
            d_model: 64,
            d_z: 32,
            d_label: 32,
            d_c: 32,
            max_len: 64,
            ff_dim: 128,
            vocab_cap: 8192,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            heads: self.heads,
            d_model: self.d_model,
            ff_dim: self.ff_dim,
            max_len: self.max_len,
        }
    }
}

/// Which adaptors are active. `use_projection` controls whether the other
/// task's data participates in training at all.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub use_semantic: bool,
    pub use_coarse: bool,
    pub use_projection: bool,
    pub gold_coarse_at_test: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            use_semantic: true,
            use_coarse: true,
            use_projection: true,
            gold_coarse_at_test: false,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gold_coarse_at_test && !self.use_coarse {
            return Err(Error::Invalid(
                "gold_coarse_at_test requires use_coarse".into(),
            ));
        }
        Ok(())
    }
}

fn fine_group(task: Task) -> &'static str {
    match task {
        Task::Ere => "fine_ere",
        Task::Drr => "fine_drr",
    }
}

/// Group names updated by a training step on `task`: the shared groups that
/// exist under the ablation plus that task's fine group.
pub fn trainable_groups(ablation: &AblationConfig, task: Task) -> Vec<&'static str> {
    let mut gs = vec!["bert"];
    if ablation.use_semantic {
        gs.push("semantic");
    }
    if ablation.use_coarse {
        gs.push("coarse");
    }
    gs.push(fine_group(task));
    gs
}

/// Per-instance training-path outputs (graph nodes).
#[derive(Debug, Clone, Copy)]
pub struct TrainForward {
    pub fine_logits: TensorId,
    pub coarse_logits: Option<TensorId>,
    pub kl: Option<TensorId>,
}

/// Inference output for one pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub fine_label: String,
    pub fine_probs: Vec<f32>,
    pub coarse_label: Option<CoarseLabel>,
    pub coarse_probs: Option<Vec<f32>>,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub ablation: AblationConfig,
    pub specs: TaskSpecs,
    pub vocab: Vocab,
    pub params: ParamSet,
}

impl Model {
    /// Initializes all parameter groups that the ablation keeps active.
    pub fn new(
        cfg: ModelConfig,
        ablation: AblationConfig,
        specs: TaskSpecs,
        vocab: Vocab,
        seed: u64,
    ) -> Result<Model> {
        ablation.validate()?;
        specs.validate()?;
        let mut ps = ParamSet::new();
        let rng = Rng::seeded(seed);
        encoder::init_params(&mut ps, &cfg.encoder(), vocab.size(), &mut rng.split(1))?;
        if ablation.use_semantic {
            let dims = SemanticDims { d: cfg.d_model, d_label: cfg.d_label, d_z: cfg.d_z };
            semantic::init_params(&mut ps, &dims, &mut rng.split(2))?;
        }
        if ablation.use_coarse {
            let in_dim = cfg.d_model + if ablation.use_semantic { cfg.d_z } else { 0 };
            coarse::init_params(&mut ps, in_dim, cfg.d_c, &mut rng.split(3))?;
        }
        let feat = feature_dim(&cfg, &ablation);
        for task in [Task::Ere, Task::Drr] {
            let group = fine_group(task);
            let n = specs.spec(task).num_fine();
            let mut trng = rng.split(4 + task as u64);
            ps.add(
                &format!("{group}.cls.w"),
                Tensor::new(vec![feat, n], trng.normal_vec(feat * n, 0.02))?,
            )?;
            ps.add(&format!("{group}.cls.b"), Tensor::zeros(vec![n]))?;
            if ablation.use_semantic {
                ps.add(
                    &format!("{group}.label_emb"),
                    Tensor::new(vec![n, cfg.d_label], trng.normal_vec(n * cfg.d_label, 0.02))?,
                )?;
            }
        }
        Ok(Model { cfg, ablation, specs, vocab, params: ps })
    }

    /// Training-time forward for one labeled instance: encoder, posterior
    /// sampling (when the semantic adaptor is on), coarse logits (when the
    /// coarse adaptor is on), and fine logits over the assembled features.
    /// `teacher_forcing` selects gold vs predicted-argmax coarse embeddings
    /// for the fine-classifier input.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        pair: &InstancePair,
        teacher_forcing: bool,
        rng: &mut Rng,
    ) -> Result<TrainForward> {
        pair.validate(&self.specs)?;
        let spec = self.specs.spec(pair.task);
        let fid = spec.fine_id(&pair.fine_label).unwrap();
        let ps = &self.params;

        let tok = encoder::tokenize_pair(&pair.arg1, &pair.arg2, &self.vocab, self.cfg.max_len)?;
        let h_cls = encoder::encode_one(g, binder, ps, &self.cfg.encoder(), &tok)?;

        let (h_z, kl) = if self.ablation.use_semantic {
            let table = binder.bind(g, ps, &format!("{}.label_emb", fine_group(pair.task)))?;
            let rows = g.embedding(table, &[fid])?;
            let h_y = g.row(rows, 0)?;
            let q = semantic::posterior_params(g, binder, ps, h_cls, h_y)?;
            let p = semantic::prior_params(g, binder, ps, h_cls)?;
            let (z, _eps) = semantic::reparameterize(g, &q, rng)?;
            let kl = semantic::kl_nodes(g, &q, &p)?;
            (Some(z), Some(kl))
        } else {
            (None, None)
        };

        let (coarse_logits, h_yc) = if self.ablation.use_coarse {
            let cfeat = match h_z {
                Some(z) => g.concat(h_cls, z)?,
                None => h_cls,
            };
            let logits = coarse::coarse_logits(g, binder, ps, cfeat)?;
            let label = if teacher_forcing {
                pair.coarse_label
            } else {
                let probs = crate::tensorgrad::kernels::softmax_last(
                    &g.value(logits).data,
                    NUM_COARSE,
                );
                coarse::argmax_label(&probs)
            };
            let emb = coarse::embed_coarse(g, binder, ps, label)?;
            (Some(logits), Some(emb))
        } else {
            (None, None)
        };

        let features = assemble_features(g, h_cls, h_z, h_yc, &self.ablation)?;
        let w = binder.bind(g, ps, &format!("{}.cls.w", fine_group(pair.task)))?;
        let b = binder.bind(g, ps, &format!("{}.cls.b", fine_group(pair.task)))?;
        let fine_logits = g.affine(features, w, b)?;
        Ok(TrainForward { fine_logits, coarse_logits, kl })
    }

    /// Deterministic inference: latent = prior mean, coarse = argmax (or the
    /// gold label under the oracle configuration), fine = argmax over the
    /// assembled features.
    pub fn predict(&self, pair: &InstancePair) -> Result<Prediction> {
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let ps = &self.params;
        let spec = self.specs.spec(pair.task);

        let tok = encoder::tokenize_pair(&pair.arg1, &pair.arg2, &self.vocab, self.cfg.max_len)?;
        let h_cls = encoder::encode_one(&mut g, &mut binder, ps, &self.cfg.encoder(), &tok)?;

        let h_z = if self.ablation.use_semantic {
            Some(semantic::infer_latent(&mut g, &mut binder, ps, h_cls)?)
        } else {
            None
        };

        let (coarse_label, coarse_probs, h_yc) = if self.ablation.use_coarse {
            let cfeat = match h_z {
                Some(z) => g.concat(h_cls, z)?,
                None => h_cls,
            };
            let probs_node = coarse::classify_coarse(&mut g, &mut binder, ps, cfeat)?;
            let probs = g.value(probs_node).data.clone();
            let label = if self.ablation.gold_coarse_at_test {
                // Table-4-style oracle: the gold coarse label overrides the
                // classifier's decision.
                spec.fine_id(&pair.fine_label)
                    .map(|fid| spec.coarse_of(fid))
                    .ok_or_else(|| {
                        Error::Invalid(format!(
                            "gold-coarse oracle needs a valid gold label on instance {}",
                            pair.id
                        ))
                    })?
            } else {
                coarse::argmax_label(&probs)
            };
            let emb = coarse::embed_coarse(&mut g, &mut binder, ps, label)?;
            (Some(label), Some(probs), Some(emb))
        } else {
            (None, None, None)
        };

        let features = assemble_features(&mut g, h_cls, h_z, h_yc, &self.ablation)?;
        let w = binder.bind(&mut g, ps, &format!("{}.cls.w", fine_group(pair.task)))?;
        let b = binder.bind(&mut g, ps, &format!("{}.cls.b", fine_group(pair.task)))?;
        let logits = g.affine(features, w, b)?;
        let probs_node = g.softmax(logits)?;
        let fine_probs = g.value(probs_node).data.clone();
        let mut best = 0;
        for i in 1..fine_probs.len() {
            if fine_probs[i] > fine_probs[best] {
                best = i;
            }
        }
        Ok(Prediction {
            fine_label: spec.fine_labels[best].clone(),
            fine_probs,
            coarse_label,
            coarse_probs,
        })
    }

    // ---- persistence -----------------------------------------------------

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        checkpoint::save(&self.params, dir, "checkpoint")?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        let meta = ModelMeta {
            model: self.cfg,
            ablation: self.ablation,
            task_specs: self.specs.clone(),
            vocab_hash: self.vocab.hash(),
        };
        fs::write(dir.join("model.json"), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Model> {
        let meta: ModelMeta = serde_json::from_slice(&fs::read(dir.join("model.json")).map_err(
            |e| Error::Data(format!("cannot open {}/model.json: {e}", dir.display())),
        )?)?;
        let vocab = Vocab::load(&dir.join("vocab.txt"))?;
        if vocab.hash() != meta.vocab_hash {
            return Err(Error::Data(format!(
                "vocab hash mismatch in {} (checkpoint was built with a different vocabulary)",
                dir.display()
            )));
        }
        let params = checkpoint::load(dir, "checkpoint")?;
        Ok(Model {
            cfg: meta.model,
            ablation: meta.ablation,
            specs: meta.task_specs,
            vocab,
            params,
        })
    }
}

/// Checkpoint sidecar: everything needed to rebuild the model around the
/// raw parameter blob.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model: ModelConfig,
    pub ablation: AblationConfig,
    pub task_specs: TaskSpecs,
    pub vocab_hash: String,
}

/// Width of the fine classifier's input under an ablation.
pub fn feature_dim(cfg: &ModelConfig, ablation: &AblationConfig) -> usize {
    cfg.d_model
        + if ablation.use_semantic { cfg.d_z } else { 0 }
        + if ablation.use_coarse { cfg.d_c } else { 0 }
}

/// Concatenates the enabled components in fixed order (h_cls, h_z, h_yc);
/// disabled components are omitted entirely.
pub fn assemble_features(
    g: &mut Graph,
    h_cls: TensorId,
    h_z: Option<TensorId>,
    h_yc: Option<TensorId>,
    ablation: &AblationConfig,
) -> Result<TensorId> {
    let mut out = h_cls;
    if ablation.use_semantic {
        let z = h_z.ok_or_else(|| Error::Invalid("semantic adaptor enabled but h_z missing".into()))?;
        out = g.concat(out, z)?;
    }
    if ablation.use_coarse {
        let yc =
            h_yc.ok_or_else(|| Error::Invalid("coarse adaptor enabled but h_yc missing".into()))?;
        out = g.concat(out, yc)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};

    fn tiny_model(ablation: AblationConfig) -> (Model, Vec<InstancePair>) {
        let spec = SynthSpec { n_train: 60, n_dev: 30, n_test: 30, seed: 8, noise_rate: 0.0 };
        let d = synth_generate(&spec).unwrap();
        let cfg = ModelConfig {
            layers: 1,
            heads: 2,
            d_model: 16,
            d_z: 4,
            d_label: 4,
            d_c: 4,
            max_len: 32,
            ff_dim: 32,
            vocab_cap: 512,
        };
        let vocab = Vocab::build(
            d.ere.train.iter().chain(&d.drr.train).flat_map(|p| {
                [p.arg1.clone(), p.arg2.clone()]
            }),
            cfg.vocab_cap,
        );
        let m = Model::new(cfg, ablation, d.specs.clone(), vocab, 5).unwrap();
        (m, d.ere.train)
    }

    #[test]
    fn feature_dims_follow_ablation() {
        let cfg = ModelConfig::default();
        let full = AblationConfig::default();
        assert_eq!(feature_dim(&cfg, &full), 64 + 32 + 32);
        let no_sa = AblationConfig { use_semantic: false, ..full };
        assert_eq!(feature_dim(&cfg, &no_sa), 64 + 32);
        let bare = AblationConfig { use_semantic: false, use_coarse: false, ..full };
        assert_eq!(feature_dim(&cfg, &bare), 64);
    }

    #[test]
    fn oracle_requires_coarse() {
        let bad = AblationConfig {
            use_coarse: false,
            gold_coarse_at_test: true,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn forward_train_shapes_and_determinism() {
        let (m, data) = tiny_model(AblationConfig::default());
        let run = || {
            let mut g = Graph::new();
            let mut b = Binder::new();
            let mut rng = Rng::seeded(3);
            let f = m.forward_train(&mut g, &mut b, &data[0], true, &mut rng).unwrap();
            (
                g.value(f.fine_logits).data.clone(),
                g.value(f.coarse_logits.unwrap()).data.clone(),
                g.scalar_value(f.kl.unwrap()),
            )
        };
        let (fl, cl, kl) = run();
        assert_eq!(fl.len(), m.specs.ere.num_fine());
        assert_eq!(cl.len(), NUM_COARSE);
        assert!(kl.is_finite());
        assert_eq!(run(), (fl, cl, kl));
    }

    #[test]
    fn no_semantic_means_no_kl() {
        let ab = AblationConfig { use_semantic: false, ..Default::default() };
        let (m, data) = tiny_model(ab);
        let mut g = Graph::new();
        let mut b = Binder::new();
        let mut rng = Rng::seeded(3);
        let f = m.forward_train(&mut g, &mut b, &data[0], true, &mut rng).unwrap();
        assert!(f.kl.is_none());
        assert!(m.params.get("semantic.post.wz").is_none());
    }

    #[test]
    fn predict_returns_task_label_and_is_deterministic() {
        let (m, data) = tiny_model(AblationConfig::default());
        let p1 = m.predict(&data[1]).unwrap();
        let p2 = m.predict(&data[1]).unwrap();
        assert!(m.specs.ere.fine_id(&p1.fine_label).is_some());
        assert_eq!(p1.fine_probs, p2.fine_probs);
        assert_eq!(p1.coarse_label, p2.coarse_label);
    }

    #[test]
    fn oracle_overrides_coarse_prediction() {
        let (mut m, data) = tiny_model(AblationConfig::default());
        m.ablation.gold_coarse_at_test = true;
        for pair in data.iter().take(10) {
            let p = m.predict(pair).unwrap();
            assert_eq!(p.coarse_label, Some(pair.coarse_label));
        }
    }

    #[test]
    fn fine_argmax_invariant_under_positive_scaling() {
        let (mut m, data) = tiny_model(AblationConfig::default());
        let before = m.predict(&data[2]).unwrap();
        for name in ["fine_ere.cls.w", "fine_ere.cls.b"] {
            let p = m.params.get_mut(name).unwrap();
            p.value.data.iter_mut().for_each(|v| *v *= 3.0);
        }
        let after = m.predict(&data[2]).unwrap();
        assert_eq!(before.fine_label, after.fine_label);
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let (m, data) = tiny_model(AblationConfig::default());
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let m2 = Model::load(dir.path()).unwrap();
        for (a, b) in m.params.iter().zip(m2.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        assert_eq!(
            m.predict(&data[0]).unwrap().fine_probs,
            m2.predict(&data[0]).unwrap().fine_probs
        );
    }

    #[test]
    fn label_outside_task_spec_rejected() {
        let (m, data) = tiny_model(AblationConfig::default());
        let mut bad = data[0].clone();
        bad.fine_label = "NotALabel".into();
        let mut g = Graph::new();
        let mut b = Binder::new();
        let mut rng = Rng::seeded(1);
        assert!(m.forward_train(&mut g, &mut b, &bad, true, &mut rng).is_err());
    }
}
