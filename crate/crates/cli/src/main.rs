mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use s3d_core::analysis::{self, RunReport, SimilarityHistogram, REPORT_SCHEMA_VERSION};
use s3d_core::datagen::{self, DatasetSplits};
use s3d_core::model::{self, Model};
use s3d_core::selection;
use s3d_core::trainer::{self, Mode, Snapshot};

use config::{ConfigError, ExperimentConfig};

const REPORT_FILE: &str = "report.json";
const HISTOGRAM_FILE: &str = "histograms.json";

#[derive(Parser)]
#[command(name = "s3d", version, about = "Sample-to-sample self-distillation on synthetic styled domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed for data generation and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Labeled target samples per class.
    #[arg(long)]
    shots: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct DataArg {
    /// Dataset directory written by `gen-data`; generated from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    S3d,
    S3dNoAf,
    SPlusT,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::S3d => Mode::S3d,
            ModeArg::S3dNoAf => Mode::S3dNoAf,
            ModeArg::SPlusT => Mode::SPlusT,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset directory.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train on labeled data and record the average margin.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Pre-train (unless given a checkpoint) and adapt.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Pre-trained checkpoint to resume from.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint on every split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Similarity histograms and embedding exports for checkpoints.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::Pretrain { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Analyze { common, .. } => common,
        }
    }
}

fn load_config(common: &Common, mode: Option<ModeArg>) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.data.spec.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(shots) = common.shots {
        cfg.train.shots = shots;
    }
    if let Some(mode) = mode {
        cfg.train.mode = mode.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<DatasetSplits> {
    match dir {
        Some(dir) => datagen::read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display())),
        None => Ok(datagen::build_dataset(
            &cfg.data.spec,
            &cfg.data.source,
            &cfg.data.target,
            cfg.train.shots,
            cfg.data.val_per_class,
        )?),
    }
}

fn split_accuracy(model: &Model, data: &DatasetSplits) -> Result<BTreeMap<String, f64>> {
    let mut acc = BTreeMap::new();
    let unlabeled = data.unlabeled_with_truth();
    let splits = [
        ("source", &data.source),
        ("target_labeled", &data.target_labeled),
        ("target_unlabeled", &unlabeled),
        ("target_val", &data.target_val),
    ];
    for (name, set) in splits {
        if !set.is_empty() {
            acc.insert(name.to_string(), analysis::evaluate(model, set)?);
        }
    }
    Ok(acc)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn report(
    cfg: &ExperimentConfig,
    mode: &str,
    accuracy: BTreeMap<String, f64>,
    started: Instant,
    histograms: Vec<SimilarityHistogram>,
) -> RunReport {
    RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        mode: mode.to_string(),
        seed: cfg.train.seed,
        config_digest: analysis::config_digest(cfg),
        accuracy,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        histograms,
        embedding_paths: Vec::new(),
    }
}

fn print_accuracy(acc: &BTreeMap<String, f64>) {
    for (split, a) in acc {
        println!("{split}\t{a:.4}");
    }
}

fn run(command: Command) -> Result<()> {
    let started = Instant::now();
    let mode = match &command {
        Command::Train { mode, .. } => *mode,
        _ => None,
    };
    let cfg = load_config(command.common(), mode)?;
    let out = command.common().out.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    match command {
        Command::GenData { .. } => {
            let data = dataset(&cfg, None)?;
            datagen::write_dataset(&out, &data)?;
            log::info!("wrote dataset to {}", out.display());
        }
        Command::Pretrain { data, .. } => {
            let data = dataset(&cfg, data.data.as_deref())?;
            let model = trainer::init_model(&data, &cfg.train)?;
            let pre = trainer::pretrain(model, data.training_view(), &cfg.train)?;
            let margin = selection::average_margin(&pre.best.model, &data.target_unlabeled)?;
            model::save_checkpoint(
                &out.join(trainer::PRETRAINED_CHECKPOINT),
                &pre.best.model,
                pre.best.iteration,
                cfg.train.seed,
                Some(margin),
            )?;
            let acc = split_accuracy(&pre.best.model, &data)?;
            print_accuracy(&acc);
            write_json(&out.join(REPORT_FILE), &report(&cfg, "pretrain", acc, started, Vec::new()))?;
        }
        Command::Train { data, pretrained, .. } => {
            let data = dataset(&cfg, data.data.as_deref())?;
            let run = match pretrained {
                Some(path) => {
                    let (model, header) = model::load_checkpoint(&path)?;
                    let margin = match header.average_margin {
                        Some(m) => m,
                        None => selection::average_margin(&model, &data.target_unlabeled)?,
                    };
                    let snapshot = Snapshot {
                        model,
                        val_acc: f64::NAN,
                        iteration: header.iteration,
                    };
                    trainer::adapt_from(&data, &cfg.train, snapshot, margin, Some(&out))?
                }
                None => trainer::run_experiment(&data, &cfg.train, Some(&out))?,
            };
            let mut histograms = Vec::new();
            histograms.extend(analysis::similarity_histograms(&run.pretrained.model, &data, run.pretrained.iteration)?);
            histograms.extend(analysis::similarity_histograms(
                &run.adapted.best.model,
                &data,
                run.pretrained.iteration + run.adapted.best.iteration,
            )?);
            let acc = split_accuracy(&run.adapted.best.model, &data)?;
            print_accuracy(&acc);
            write_json(
                &out.join(REPORT_FILE),
                &report(&cfg, cfg.train.mode.as_str(), acc, started, histograms),
            )?;
        }
        Command::Eval { data, checkpoint, .. } => {
            let data = dataset(&cfg, data.data.as_deref())?;
            let (model, _) = model::load_checkpoint(&checkpoint)?;
            let acc = split_accuracy(&model, &data)?;
            print_accuracy(&acc);
            write_json(&out.join(REPORT_FILE), &report(&cfg, "eval", acc, started, Vec::new()))?;
        }
        Command::Analyze { data, checkpoints, .. } => {
            let data = dataset(&cfg, data.data.as_deref())?;
            let mut histograms = Vec::new();
            for path in &checkpoints {
                let (model, header) = model::load_checkpoint(path)?;
                histograms.extend(analysis::similarity_histograms(&model, &data, header.iteration)?);
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
                let csv = out.join(format!("embeddings-{stem}.csv"));
                let rows = analysis::export_embeddings(&model, &data, &csv)?;
                log::info!("wrote {rows} embeddings to {}", csv.display());
            }
            write_json(&out.join(HISTOGRAM_FILE), &histograms)?;
        }
    }
    Ok(())
}

/// Joins the error chain, skipping causes whose text the parent already embeds.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}
