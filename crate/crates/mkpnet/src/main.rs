//! `mkpnet` command line: dataset generation, training, evaluation, the
//! ablation harness, prediction and event-graph enrichment.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 data or validation
//! error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mkpnet::config::RunConfig;
use mkpnet::data::{
    load_jsonl, save_jsonl, synth_generate, DatasetManifest, SplitData, SplitEntry, SynthData,
    Task,
};
use mkpnet::encoder::Vocab;
use mkpnet::enrich::{enrich_graph, Candidate, EventGraph, Tier};
use mkpnet::evalx::{ablation_grid, evaluate};
use mkpnet::model::Model;
use mkpnet::trainer::train;
use mkpnet::{Error, Result};

#[derive(Parser)]
#[command(name = "mkpnet", version, about = "Multi-task relation extraction over event pairs")]
struct Cli {
    /// Path to a JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seeds in the configuration (trainer and generator).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset and write splits plus a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and keep the best-on-dev checkpoint.
    Train {
        /// Dataset manifest; overrides the configuration's data section.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained model on one split of a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "ere")]
        task: String,
        /// Use gold coarse labels at test time (oracle evaluation).
        #[arg(long)]
        oracle_coarse: bool,
    },
    /// Train and evaluate the whole ablation grid.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads for independent configurations.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Predict fine-grained relations for instances in a JSONL file.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output JSONL path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score candidate event pairs and merge accepted edges into a graph.
    Enrich {
        #[arg(long)]
        model: PathBuf,
        /// Directory holding nodes.tsv and edges.tsv.
        #[arg(long)]
        graph: PathBuf,
        /// JSONL file of candidate pairs with frequencies.
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Confidence tier for the written view: core, high or full.
        #[arg(long)]
        tier: Option<String>,
        #[arg(long)]
        task: Option<String>,
    },
}

fn parse_task(s: &str) -> Result<Task> {
    match s.to_ascii_lowercase().as_str() {
        "ere" => Ok(Task::Ere),
        "drr" => Ok(Task::Drr),
        other => Err(Error::Invalid(format!("unknown task {other:?} (expected ere or drr)"))),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.trainer.seed = seed;
        cfg.data.synth.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

const SPLIT_NAMES: [&str; 3] = ["train", "dev", "test"];

fn load_dataset(cfg: &RunConfig, data_override: Option<&Path>) -> Result<SynthData> {
    let manifest_path = data_override.or(cfg.data.manifest.as_deref());
    match manifest_path {
        Some(path) => {
            let manifest = DatasetManifest::load(path)?;
            let load_task = |task: &str| -> Result<SplitData> {
                let mut splits = SPLIT_NAMES
                    .iter()
                    .map(|s| manifest.load_split(path, &format!("{task}-{s}")));
                Ok(SplitData {
                    train: splits.next().unwrap()?,
                    dev: splits.next().unwrap()?,
                    test: splits.next().unwrap()?,
                })
            };
            Ok(SynthData {
                specs: manifest.task_specs.clone(),
                ere: load_task("ere")?,
                drr: load_task("drr")?,
            })
        }
        None => synth_generate(&cfg.data.synth),
    }
}

fn build_vocab(cfg: &RunConfig, data: &SynthData) -> Vocab {
    Vocab::build(
        data.ere
            .train
            .iter()
            .chain(&data.drr.train)
            .flat_map(|p| [p.arg1.clone(), p.arg2.clone()]),
        cfg.model.vocab_cap,
    )
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Cmd::GenData { out } => {
            let cfg = load_config(&cli)?;
            println!("{}", cfg.to_pretty_json());
            let data = synth_generate(&cfg.data.synth)?;
            std::fs::create_dir_all(out)?;
            let mut manifest = DatasetManifest {
                task_specs: data.specs.clone(),
                splits: Default::default(),
                provenance: Default::default(),
            };
            for (task, split) in [("ere", &data.ere), ("drr", &data.drr)] {
                for (name, part) in [
                    ("train", &split.train),
                    ("dev", &split.dev),
                    ("test", &split.test),
                ] {
                    let file = format!("{task}-{name}.jsonl");
                    save_jsonl(&out.join(&file), part)?;
                    manifest
                        .splits
                        .insert(format!("{task}-{name}"), SplitEntry { path: file, count: part.len() });
                }
            }
            manifest.provenance.insert("generator".into(), "synthetic-cues".into());
            manifest.provenance.insert("seed".into(), cfg.data.synth.seed.to_string());
            manifest
                .provenance
                .insert("noise_rate".into(), cfg.data.synth.noise_rate.to_string());
            manifest.save(&out.join("manifest.json"))?;
            println!("wrote {}", out.join("manifest.json").display());
            Ok(())
        }
        Cmd::Train { data, out } => {
            let cfg = load_config(&cli)?;
            println!("{}", cfg.to_pretty_json());
            let dataset = load_dataset(&cfg, data.as_deref())?;
            let vocab = build_vocab(&cfg, &dataset);
            let mut model = Model::new(
                cfg.model,
                cfg.ablation,
                dataset.specs.clone(),
                vocab,
                cfg.trainer.seed,
            )?;
            let report = train(&mut model, &dataset.ere, &dataset.drr, &cfg.trainer, Some(out))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            println!("checkpoint: {}", out.join("best").display());
            Ok(())
        }
        Cmd::Eval { model, data, split, task, oracle_coarse } => {
            let task = parse_task(task)?;
            let mut model = Model::load(model)?;
            if *oracle_coarse {
                model.ablation.gold_coarse_at_test = true;
                model.ablation.validate()?;
            }
            let manifest = DatasetManifest::load(data)?;
            let instances = manifest.load_split(data, &format!("{task}-{split}").to_lowercase())?;
            let result = evaluate(&model, &instances)?;
            println!("{}", serde_json::to_string_pretty(&result)?);
            Ok(())
        }
        Cmd::Ablate { data, out, jobs } => {
            let cfg = load_config(&cli)?;
            println!("{}", cfg.to_pretty_json());
            let dataset = load_dataset(&cfg, data.as_deref())?;
            let report = ablation_grid(&cfg.model, &cfg.trainer, &dataset, cfg.trainer.seed, *jobs)?;
            report.save(out)?;
            print!("{}", report.to_tsv());
            Ok(())
        }
        Cmd::Predict { model, input, out } => {
            let model = Model::load(model)?;
            let instances = load_jsonl(input, &model.specs)?;
            let mut lines = String::new();
            for pair in &instances {
                let pred = model.predict(pair)?;
                let rec = serde_json::json!({
                    "id": pair.id,
                    "task": pair.task,
                    "fine_label": pred.fine_label,
                    "coarse_label": pred.coarse_label,
                    "fine_probs": pred.fine_probs,
                });
                lines.push_str(&serde_json::to_string(&rec)?);
                lines.push('\n');
            }
            match out {
                Some(path) => std::fs::write(path, lines)?,
                None => print!("{lines}"),
            }
            Ok(())
        }
        Cmd::Enrich { model, graph, candidates, out, tier, task } => {
            let cfg = load_config(&cli)?;
            let tier = Tier::parse(tier.as_deref().unwrap_or(&cfg.enrichment.tier))?;
            let task = match task {
                Some(t) => parse_task(t)?,
                None => cfg.enrichment.task,
            };
            let model = Model::load(model)?;
            let base = EventGraph::load(graph)?;
            let text = std::fs::read_to_string(candidates).map_err(|e| {
                Error::Data(format!("cannot read candidates {}: {e}", candidates.display()))
            })?;
            let cands: Vec<Candidate> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .enumerate()
                .map(|(i, l)| {
                    serde_json::from_str(l).map_err(|e| {
                        Error::Data(format!("candidates line {}: {e}", i + 1))
                    })
                })
                .collect::<Result<_>>()?;
            let enriched = enrich_graph(&model, task, &base, &cands)?;
            let view = enriched.at_tier(tier);
            view.save(out)?;
            println!(
                "enriched graph: {} nodes, {} edges at tier {} -> {}",
                view.nodes.len(),
                view.edges.len(),
                tier,
                out.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
