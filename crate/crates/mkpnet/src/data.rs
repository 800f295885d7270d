//! Corpus formats and dataset construction: JSONL instance pairs, task
//! specifications (fine label inventories with their coarse parents),
//! implicit-instance construction from explicit relations, and a synthetic
//! planted-cue generator for desk-scale end-to-end runs.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coarse::CoarseLabel;
use crate::error::{Error, Result};
use crate::tensorgrad::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "ERE")]
    Ere,
    #[serde(rename = "DRR")]
    Drr,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Ere => "ERE",
            Task::Drr => "DRR",
        })
    }
}

/// Fine label inventory of one task plus the fine → coarse mapping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    pub fine_labels: Vec<String>,
    /// Parallel to `fine_labels`.
    pub coarse_parents: Vec<CoarseLabel>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.fine_labels.is_empty() {
            return Err(Error::Data(format!("{} task spec has no fine labels", self.task)));
        }
        if self.fine_labels.len() != self.coarse_parents.len() {
            return Err(Error::Data(format!(
                "{} task spec: {} fine labels but {} coarse parents",
                self.task,
                self.fine_labels.len(),
                self.coarse_parents.len()
            )));
        }
        let uniq: HashSet<&str> = self.fine_labels.iter().map(|s| s.as_str()).collect();
        if uniq.len() != self.fine_labels.len() {
            return Err(Error::Data(format!("{} task spec has duplicate fine labels", self.task)));
        }
        Ok(())
    }

    pub fn num_fine(&self) -> usize {
        self.fine_labels.len()
    }

    pub fn fine_id(&self, label: &str) -> Option<usize> {
        self.fine_labels.iter().position(|l| l == label)
    }

    pub fn coarse_of(&self, fine_id: usize) -> CoarseLabel {
        self.coarse_parents[fine_id]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpecs {
    pub ere: TaskSpec,
    pub drr: TaskSpec,
}

impl TaskSpecs {
    pub fn spec(&self, task: Task) -> &TaskSpec {
        match task {
            Task::Ere => &self.ere,
            Task::Drr => &self.drr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ere.validate()?;
        self.drr.validate()
    }
}

/// ASER-style relation inventory: 14 fine event relations.
pub fn default_ere_spec() -> TaskSpec {
    use CoarseLabel::*;
    let labels = [
        ("Precedence", Temporal),
        ("Succession", Temporal),
        ("Synchronous", Temporal),
        ("Reason", Contingency),
        ("Result", Contingency),
        ("Condition", Contingency),
        ("Contrast", Comparison),
        ("Concession", Comparison),
        ("Conjunction", Expansion),
        ("Instantiation", Expansion),
        ("Restatement", Expansion),
        ("Alternative", Expansion),
        ("ChosenAlternative", Expansion),
        ("Exception", Expansion),
    ];
    TaskSpec {
        task: Task::Ere,
        fine_labels: labels.iter().map(|(l, _)| l.to_string()).collect(),
        coarse_parents: labels.iter().map(|&(_, c)| c).collect(),
    }
}

/// PDTB-style second-level inventory: 11 fine discourse relations.
pub fn default_drr_spec() -> TaskSpec {
    use CoarseLabel::*;
    let labels = [
        ("Asynchronous", Temporal),
        ("Synchrony", Temporal),
        ("Cause", Contingency),
        ("PragmaticCause", Contingency),
        ("Contrast", Comparison),
        ("Concession", Comparison),
        ("Conjunction", Expansion),
        ("Instantiation", Expansion),
        ("Restatement", Expansion),
        ("Alternative", Expansion),
        ("List", Expansion),
    ];
    TaskSpec {
        task: Task::Drr,
        fine_labels: labels.iter().map(|(l, _)| l.to_string()).collect(),
        coarse_parents: labels.iter().map(|&(_, c)| c).collect(),
    }
}

pub fn default_task_specs() -> TaskSpecs {
    TaskSpecs { ere: default_ere_spec(), drr: default_drr_spec() }
}

/// One classification instance: two argument spans plus labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstancePair {
    pub id: String,
    pub task: Task,
    pub arg1: String,
    pub arg2: String,
    pub fine_label: String,
    pub coarse_label: CoarseLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub connective: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    /// Unknown input fields survive a load/save round trip.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl InstancePair {
    /// Checks labels against the owning task's spec.
    pub fn validate(&self, specs: &TaskSpecs) -> Result<()> {
        let spec = specs.spec(self.task);
        let fid = spec.fine_id(&self.fine_label).ok_or_else(|| {
            Error::Data(format!(
                "instance {}: fine label {:?} not in {} task spec",
                self.id, self.fine_label, self.task
            ))
        })?;
        if spec.coarse_of(fid) != self.coarse_label {
            return Err(Error::Data(format!(
                "instance {}: coarse label {:?} inconsistent with fine label {:?} (expected {:?})",
                self.id,
                self.coarse_label.name(),
                self.fine_label,
                spec.coarse_of(fid).name()
            )));
        }
        Ok(())
    }
}

/// Loads and validates a JSONL corpus, one instance per line.
pub fn load_jsonl(path: &Path, specs: &TaskSpecs) -> Result<Vec<InstancePair>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: InstancePair = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: malformed instance: {e}", path.display(), lineno + 1))
        })?;
        pair.validate(specs).map_err(|e| {
            Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push(pair);
    }
    Ok(out)
}

pub fn save_jsonl(path: &Path, data: &[InstancePair]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    for pair in data {
        serde_json::to_writer(&mut f, pair)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Turns explicit instances into implicit supervision by clearing the
/// connective; argument texts and labels are untouched. Instances whose
/// connective was already cleared pass through, so the operation is
/// idempotent.
pub fn strip_connectives(explicit: &[InstancePair]) -> Result<Vec<InstancePair>> {
    explicit
        .iter()
        .map(|p| {
            if p.connective.is_none() && !p.extra.contains_key("stripped_connective") {
                return Err(Error::Data(format!("instance {} has no connective to strip", p.id)));
            }
            let mut out = p.clone();
            if let Some(conn) = out.connective.take() {
                out.extra
                    .insert("stripped_connective".into(), serde_json::Value::String(conn));
            }
            Ok(out)
        })
        .collect()
}

/// Per fine label, keeps the `cap` instances with the highest confidence
/// (ties broken by id, ascending). Order of the survivors is preserved.
pub fn cap_per_category(data: &[InstancePair], cap: usize) -> Result<Vec<InstancePair>> {
    let mut by_label: BTreeMap<&str, Vec<&InstancePair>> = BTreeMap::new();
    for p in data {
        if p.confidence.is_none() {
            return Err(Error::Data(format!("instance {} has no confidence score", p.id)));
        }
        by_label.entry(p.fine_label.as_str()).or_default().push(p);
    }
    let mut keep: HashSet<&str> = HashSet::new();
    for group in by_label.values_mut() {
        group.sort_by(|a, b| {
            b.confidence
                .partial_cmp(&a.confidence)
                .unwrap()
                .then_with(|| a.id.cmp(&b.id))
        });
        for p in group.iter().take(cap) {
            keep.insert(p.id.as_str());
        }
    }
    Ok(data.iter().filter(|p| keep.contains(p.id.as_str())).cloned().collect())
}

// ---- synthetic generator --------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Fraction of *training* labels flipped to a random other fine label of
    /// the same task (dev/test supervision stays clean).
    pub noise_rate: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { n_train: 2000, n_dev: 400, n_test: 400, seed: 17, noise_rate: 0.1 }
    }
}

#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: Vec<InstancePair>,
    pub dev: Vec<InstancePair>,
    pub test: Vec<InstancePair>,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub specs: TaskSpecs,
    pub ere: SplitData,
    pub drr: SplitData,
}

const FILLERS: [&str; 12] = [
    "the", "a", "person", "goes", "to", "it", "then", "very", "so", "and", "was", "there",
];

fn coarse_cue(c: CoarseLabel) -> String {
    format!("cue{}", c.name().to_lowercase())
}

fn fine_cue(task: Task, label: &str) -> String {
    format!("{}{}", task.to_string().to_lowercase(), label.to_lowercase())
}

/// Generates ERE and DRR corpora with planted cues: a coarse-cue token in
/// arg1 determines the coarse label (cues shared across tasks) and a
/// task-specific fine-cue token in arg2 determines the fine label within
/// that coarse parent. With zero noise the data is perfectly classifiable
/// by cue lookup.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthData> {
    if !(0.0..0.5).contains(&spec.noise_rate) {
        return Err(Error::Invalid(format!(
            "noise rate {} outside [0, 0.5)",
            spec.noise_rate
        )));
    }
    let specs = default_task_specs();
    let min = spec.n_train.min(spec.n_dev).min(spec.n_test);
    let max_labels = specs.ere.num_fine().max(specs.drr.num_fine());
    if min < 2 * max_labels {
        return Err(Error::Invalid(format!(
            "split size {min} too small to cover {max_labels} labels twice"
        )));
    }
    let rng = Rng::seeded(spec.seed);
    let ere = gen_task(&specs.ere, spec, &mut rng.split(1))?;
    let drr = gen_task(&specs.drr, spec, &mut rng.split(2))?;
    Ok(SynthData { specs, ere, drr })
}

fn gen_task(task_spec: &TaskSpec, spec: &SynthSpec, rng: &mut Rng) -> Result<SplitData> {
    let gen_split = |name: &str, n: usize, noisy: bool, rng: &mut Rng| -> Vec<InstancePair> {
        (0..n)
            .map(|i| {
                let fid = rng.gen_range(task_spec.num_fine());
                let coarse = task_spec.coarse_of(fid);
                let arg1 = plant(&coarse_cue(coarse), rng);
                let arg2 = plant(&fine_cue(task_spec.task, &task_spec.fine_labels[fid]), rng);
                let (fid, coarse) = if noisy && (rng.uniform() as f64) < spec.noise_rate {
                    let mut other = rng.gen_range(task_spec.num_fine() - 1);
                    if other >= fid {
                        other += 1;
                    }
                    (other, task_spec.coarse_of(other))
                } else {
                    (fid, coarse)
                };
                InstancePair {
                    id: format!("{}-{}-{:05}", task_spec.task, name, i),
                    task: task_spec.task,
                    arg1,
                    arg2,
                    fine_label: task_spec.fine_labels[fid].clone(),
                    coarse_label: coarse,
                    connective: None,
                    confidence: Some(1.0 + 9.0 * rng.uniform() as f64),
                    extra: BTreeMap::new(),
                }
            })
            .collect()
    };
    Ok(SplitData {
        train: gen_split("train", spec.n_train, true, rng),
        dev: gen_split("dev", spec.n_dev, false, rng),
        test: gen_split("test", spec.n_test, false, rng),
    })
}

/// Cue token embedded among 2–5 filler tokens at a random position.
fn plant(cue: &str, rng: &mut Rng) -> String {
    let n = 2 + rng.gen_range(4);
    let mut toks: Vec<String> =
        (0..n).map(|_| FILLERS[rng.gen_range(FILLERS.len())].to_string()).collect();
    let pos = rng.gen_range(toks.len() + 1);
    toks.insert(pos, cue.to_string());
    toks.join(" ")
}

// ---- manifest --------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitEntry {
    pub path: String,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task_specs: TaskSpecs,
    pub splits: BTreeMap<String, SplitEntry>,
    pub provenance: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_slice(&fs::read(path).map_err(|e| {
            Error::Data(format!("cannot open manifest {}: {e}", path.display()))
        })?)?;
        m.task_specs.validate()?;
        Ok(m)
    }

    /// Loads a named split relative to the manifest's directory.
    pub fn load_split(&self, manifest_path: &Path, name: &str) -> Result<Vec<InstancePair>> {
        let entry = self
            .splits
            .get(name)
            .ok_or_else(|| Error::Data(format!("manifest has no split {name:?}")))?;
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let data = load_jsonl(&base.join(&entry.path), &self.task_specs)?;
        if data.len() != entry.count {
            return Err(Error::Data(format!(
                "split {name}: manifest says {} instances, file has {}",
                entry.count,
                data.len()
            )));
        }
        Ok(data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, fine: &str, coarse: CoarseLabel, conf: f64) -> InstancePair {
        InstancePair {
            id: id.into(),
            task: Task::Ere,
            arg1: "he goes home".into(),
            arg2: "he is tired".into(),
            fine_label: fine.into(),
            coarse_label: coarse,
            connective: Some("because".into()),
            confidence: Some(conf),
            extra: BTreeMap::new(),
        }
    }

    #[test]
    fn empty_file_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        fs::write(&p, "").unwrap();
        assert!(load_jsonl(&p, &default_task_specs()).unwrap().is_empty());
    }

    #[test]
    fn round_trip_preserves_fields_including_unknown() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let mut inst = sample("x1", "Reason", CoarseLabel::Contingency, 2.5);
        inst.extra.insert("source_doc".into(), serde_json::json!("doc-9"));
        save_jsonl(&p, &[inst.clone()]).unwrap();
        let loaded = load_jsonl(&p, &default_task_specs()).unwrap();
        assert_eq!(loaded, vec![inst]);
    }

    #[test]
    fn unknown_fine_label_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        let mut f = fs::File::create(&p).unwrap();
        let ok = serde_json::to_string(&sample("a", "Reason", CoarseLabel::Contingency, 1.0)).unwrap();
        let bad = ok.replace("Reason", "Banana");
        writeln!(f, "{ok}").unwrap();
        writeln!(f, "{bad}").unwrap();
        let err = load_jsonl(&p, &default_task_specs()).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
        assert!(err.contains("Banana"), "{err}");
    }

    #[test]
    fn strip_connectives_clears_and_preserves_labels() {
        let data = vec![sample("a", "Reason", CoarseLabel::Contingency, 1.0)];
        let once = strip_connectives(&data).unwrap();
        assert!(once[0].connective.is_none());
        assert_eq!(once[0].fine_label, "Reason");
        assert_eq!(once[0].arg1, data[0].arg1);
        let twice = strip_connectives(&once).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn strip_connectives_requires_connective() {
        let mut inst = sample("a", "Reason", CoarseLabel::Contingency, 1.0);
        inst.connective = None;
        assert!(strip_connectives(&[inst]).is_err());
    }

    #[test]
    fn cap_keeps_top_confidence() {
        let data = vec![
            sample("a", "Reason", CoarseLabel::Contingency, 5.0),
            sample("b", "Reason", CoarseLabel::Contingency, 4.0),
            sample("c", "Reason", CoarseLabel::Contingency, 3.0),
        ];
        let kept = cap_per_category(&data, 2).unwrap();
        let ids: Vec<&str> = kept.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b"]);
    }

    #[test]
    fn cap_keeps_all_when_under_cap() {
        let data = vec![
            sample("a", "Reason", CoarseLabel::Contingency, 5.0),
            sample("b", "Reason", CoarseLabel::Contingency, 4.0),
            sample("c", "Reason", CoarseLabel::Contingency, 3.0),
        ];
        assert_eq!(cap_per_category(&data, 5).unwrap().len(), 3);
    }

    #[test]
    fn cap_and_strip_commute() {
        let mut data = Vec::new();
        for i in 0..20 {
            let fine = if i % 2 == 0 { "Reason" } else { "Contrast" };
            let coarse = if i % 2 == 0 { CoarseLabel::Contingency } else { CoarseLabel::Comparison };
            data.push(sample(&format!("i{i:02}"), fine, coarse, (i % 7) as f64));
        }
        let a = cap_per_category(&strip_connectives(&data).unwrap(), 3).unwrap();
        let b = strip_connectives(&cap_per_category(&data, 3).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synth_is_seed_deterministic() {
        let spec = SynthSpec { n_train: 100, n_dev: 50, n_test: 50, seed: 5, noise_rate: 0.1 };
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&spec).unwrap();
        assert_eq!(a.ere.train, b.ere.train);
        assert_eq!(a.drr.test, b.drr.test);
    }

    #[test]
    fn synth_instances_validate_and_splits_are_disjoint() {
        let spec = SynthSpec { n_train: 120, n_dev: 40, n_test: 40, seed: 9, noise_rate: 0.2 };
        let d = synth_generate(&spec).unwrap();
        let mut ids = HashSet::new();
        for split in [&d.ere.train, &d.ere.dev, &d.ere.test, &d.drr.train, &d.drr.dev, &d.drr.test]
        {
            for p in split {
                p.validate(&d.specs).unwrap();
                assert!(ids.insert(p.id.clone()), "duplicate id {}", p.id);
            }
        }
    }

    #[test]
    fn synth_noise_zero_is_cue_consistent() {
        let spec = SynthSpec { n_train: 200, n_dev: 40, n_test: 40, seed: 3, noise_rate: 0.0 };
        let d = synth_generate(&spec).unwrap();
        for p in &d.ere.train {
            assert!(p.arg1.contains(&coarse_cue(p.coarse_label)), "{p:?}");
            assert!(p.arg2.contains(&fine_cue(Task::Ere, &p.fine_label)), "{p:?}");
        }
    }

    #[test]
    fn synth_label_marginals_roughly_uniform() {
        let spec = SynthSpec { n_train: 5000, n_dev: 40, n_test: 40, seed: 11, noise_rate: 0.0 };
        let d = synth_generate(&spec).unwrap();
        let k = d.specs.ere.num_fine() as f64;
        let n = d.ere.train.len() as f64;
        let expect = n / k;
        let sigma = (n * (1.0 / k) * (1.0 - 1.0 / k)).sqrt();
        for label in &d.specs.ere.fine_labels {
            let c = d.ere.train.iter().filter(|p| &p.fine_label == label).count() as f64;
            assert!((c - expect).abs() < 3.0 * sigma, "{label}: {c} vs {expect}");
        }
    }

    #[test]
    fn synth_rejects_bad_noise_and_tiny_splits() {
        assert!(synth_generate(&SynthSpec { noise_rate: 0.6, ..Default::default() }).is_err());
        assert!(synth_generate(&SynthSpec {
            n_train: 10,
            n_dev: 10,
            n_test: 10,
            seed: 1,
            noise_rate: 0.0
        })
        .is_err());
    }
}
