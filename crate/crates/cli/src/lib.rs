//! The `bsm` command line: dataset ingestion, training, detection,
//! segmentation, evaluation, fold management and synthetic data.
//!
//! Exit codes: 0 on success, 1 for usage errors (bad arguments, invalid
//! config, missing required paths), 2 for data errors (unreadable or
//! inconsistent inputs, failed writes).

pub mod commands;
pub mod config;
pub mod dataset;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use bsm_core::par;
use bsm_core::synth::SynthShape;
use clap::{Parser, Subcommand};

use crate::commands::*;
use crate::config::Config;
use crate::dataset::Dataset;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

/// Marks an error as the caller's fault rather than the data's.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(name = "bsm", version, about = "Boundary shape model: detection and segmentation from tiny training sets")]
pub struct Cli {
    /// JSON config; missing fields take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// Overrides the fold and synthetic-data seeds.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Debug logging; `segment` also writes likelihood images.
    #[arg(long, global = true)]
    pub debug: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a config with every parameter at its default.
    InitConfig {
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Overwrite an existing file.
        #[arg(long)]
        force: bool,
    },
    /// Build a model from a dataset with masks.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long, requires = "exclude_fold")]
        folds: Option<PathBuf>,
        /// Train on every fold but this one.
        #[arg(long, requires = "folds")]
        exclude_fold: Option<usize>,
    },
    /// Write object hypotheses as JSON.
    Detect {
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        select: Selection,
        /// Output file (default: stdout).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Write object masks, merged masks and segments.json.
    Segment {
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        select: Selection,
        /// Output directory.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Score segment outputs against ground-truth masks.
    Eval {
        /// A segment output directory or segments.json; repeat once per class.
        #[arg(long = "pred", required = true)]
        preds: Vec<PathBuf>,
        /// Ground-truth dataset for the matching --pred.
        #[arg(long = "gt", required = true)]
        gts: Vec<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Assign dataset images to cross-validation folds.
    Folds {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        n_folds: Option<usize>,
        /// Output file (default: stdout).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(short, long)]
        n: Option<usize>,
        /// notched-disk or rounded-square.
        #[arg(long)]
        shape: Option<SynthShape>,
    },
}

#[derive(Debug, clap::Args)]
pub struct Selection {
    /// Process the images of this dataset.
    #[arg(long, conflicts_with = "images")]
    pub dataset: Option<PathBuf>,
    #[arg(long, requires = "fold", requires = "dataset")]
    pub folds: Option<PathBuf>,
    /// Only images in this fold.
    #[arg(long, requires = "folds")]
    pub fold: Option<usize>,
    /// Image files to process instead of a dataset.
    pub images: Vec<PathBuf>,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match (cli.debug, cli.verbose) {
        (true, _) | (_, 2..) => "debug",
        (_, 1) => "info",
        _ => "warn",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if cli.jobs == Some(0) {
        eprintln!("error: --jobs must be at least 1");
        return EXIT_USAGE;
    }
    match par::install(cli.jobs, || execute(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            if e.downcast_ref::<UsageError>().is_some() {
                EXIT_USAGE
            } else {
                EXIT_DATA
            }
        }
    }
}

/// The error chain on one line, skipping causes a message already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if out.contains(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).map_err(|e| usage(describe(&e)))?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.folds.seed = s;
        cfg.synth.seed = s;
    }
    Ok(cfg)
}

fn pick(arg: &Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    arg.clone().or_else(|| fallback.clone()).ok_or_else(|| usage(format!("no {what} given (pass it or set it under paths in the config)")))
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn selected_inputs(cfg: &Config, sel: &Selection) -> Result<Vec<Input>> {
    if !sel.images.is_empty() {
        return inputs_from_files(&sel.images);
    }
    let root = pick(&sel.dataset, &cfg.paths.dataset, "dataset or image files")?;
    let ds = Dataset::open(&root, false)?;
    let fold = match (&sel.folds, sel.fold) {
        (Some(p), Some(k)) => {
            let spec = load_folds(p)?;
            check_fold(&spec, k)?;
            Some((spec, k))
        }
        _ => None,
    };
    inputs_from_dataset(&ds, fold.as_ref().map(|(s, k)| (s, *k, true)))
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::InitConfig { out, force } => {
            if let Some(p) = out {
                if p.exists() && !force {
                    return Err(usage(format!("{} exists (use --force to overwrite)", p.display())));
                }
            }
            emit(&cfg.to_json()?, out.as_deref())
        }
        Command::Train { dataset, out, folds, exclude_fold } => {
            let root = pick(dataset, &cfg.paths.dataset, "dataset")?;
            let out = pick(out, &cfg.paths.model, "model output path")?;
            let ds = Dataset::open(&root, true)?;
            let spec = folds.as_deref().map(load_folds).transpose()?;
            let inputs = match (&spec, exclude_fold) {
                (Some(s), Some(k)) => {
                    check_fold(s, *k)?;
                    inputs_from_dataset(&ds, Some((s, *k, false)))?
                }
                _ => inputs_from_dataset(&ds, None)?,
            };
            let model = cmd_train(&cfg, &ds, &inputs, &out)?;
            println!("{}", TrainReport::of(&model));
            Ok(())
        }
        Command::Detect { model, select, out } => {
            let model = load_model(&pick(model, &cfg.paths.model, "model")?)?;
            let inputs = selected_inputs(&cfg, select)?;
            let dets = cmd_detect(&cfg, &model, &inputs)?;
            emit(&to_json(&dets)?, out.as_deref())
        }
        Command::Segment { model, select, out } => {
            let model = load_model(&pick(model, &cfg.paths.model, "model")?)?;
            let out = pick(out, &cfg.paths.output, "output directory")?;
            let inputs = selected_inputs(&cfg, select)?;
            let seg = cmd_segment(&cfg, &model, &inputs, &out, cli.debug)?;
            let objects: usize = seg.images.iter().map(|i| i.objects.len()).sum();
            println!("{} images, {} objects -> {}", seg.images.len(), objects, out.display());
            Ok(())
        }
        Command::Eval { preds, gts, out } => {
            if preds.len() != gts.len() {
                return Err(usage(format!("{} --pred but {} --gt", preds.len(), gts.len())));
            }
            let pairs: Vec<(PathBuf, PathBuf)> = preds.iter().cloned().zip(gts.iter().cloned()).collect();
            let m = cmd_eval(&pairs)?;
            if let Some(p) = out {
                write_json(p, &m)?;
            }
            println!("{m}");
            Ok(())
        }
        Command::Folds { dataset, n_folds, out } => {
            let root = pick(dataset, &cfg.paths.dataset, "dataset")?;
            let ds = Dataset::open(&root, true)?;
            let spec = cmd_folds(&ds, n_folds.unwrap_or(cfg.folds.n_folds), cfg.folds.seed)?;
            emit(&to_json(&spec)?, out.as_deref())
        }
        Command::Synth { out, n, shape } => {
            let out = pick(out, &cfg.paths.output, "output directory")?;
            let n = n.unwrap_or(cfg.synth.n_images);
            if n == 0 {
                return Err(usage("--n must be at least 1"));
            }
            let mut params = cfg.synth.params.clone();
            if let Some(s) = shape {
                params.shape = *s;
            }
            let m = cmd_synth(&params, &out, n, cfg.synth.seed)?;
            println!("{} {} images -> {}", m.items.len(), m.class_name, out.display());
            Ok(())
        }
    }
}
