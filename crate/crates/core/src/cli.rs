//! Command-line driver: `gen-data`, `train`, `eval`, `ablate`, `report`.
//!
//! Exit codes: 0 success, 1 validation error (bad flag, config key or value,
//! missing input), 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::{TrainConfig, SEED_ENV};
use crate::error::CcsdError;
use crate::metrics::{write_reports, EvalTable};
use crate::synth::write_dataset;
use crate::trainer::{self, ablate, evaluate, AblationAxis, Dataset, CONFIG_FILE, EVAL_TABLE_FILE};

#[derive(Debug, Parser)]
#[command(name = "ccsd", version, about = "Missing-modality segmentation with compositional self-distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Config file with `key = value` lines.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "ccsd_out")]
    pub out: PathBuf,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Training seed; wins over the config file, `--set` and CCSD_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write SVG plots.
    #[arg(long)]
    pub render_plots: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate phantom case files and a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model and evaluate it on the test split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Read cases from a `gen-data` directory instead of generating them.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on every modality combination of the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Sweep one ablation axis over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// k1k2, carrier or path_strategy.
        #[arg(long)]
        axis: String,
        /// Comma-separated seeds.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Rebuild table, curve and AURC files from a finished run directory.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        run_dir: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(CcsdError),
}

impl From<CcsdError> for CliError {
    fn from(e: CcsdError) -> Self {
        match e {
            CcsdError::Config(_) | CcsdError::Incompatible(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other),
        }
    }
}

fn usage(flag: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("{flag}: {e}"))
}

/// Config precedence: defaults, `--config`, `--set`, CCSD_SEED, `--seed`.
fn load_config(common: &Common, fallback: Option<&Path>) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::default();
    let file = common.config.as_deref().or(fallback.filter(|p| p.exists()));
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| usage("--config", format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text).map_err(|e| usage("--config", e))?;
    }
    for kv in &common.set {
        cfg.apply_override(kv).map_err(|e| usage("--set", e))?;
    }
    cfg.apply_env().map_err(|e| usage(SEED_ENV, e))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| usage("config", e))?;
    Ok(cfg)
}

fn dataset(cfg: &TrainConfig, data: Option<&Path>) -> Result<Dataset, CliError> {
    match data {
        None => Ok(Dataset::generate(cfg)?),
        Some(dir) => {
            if !dir.join(crate::synth::MANIFEST_FILE).exists() {
                return Err(usage("--data", format!("{} has no manifest.csv", dir.display())));
            }
            let ds = Dataset::load(dir)?;
            let want = cfg.net.dims();
            let bad = ds.train.iter().chain(&ds.val).chain(&ds.test).find(|c| {
                c.dims != want || c.n_modalities() != cfg.net.n_modalities
            });
            if let Some(c) = bad {
                return Err(usage(
                    "--data",
                    format!(
                        "case {} has {} modalities of {:?} but net expects {} of {:?}",
                        c.case_id,
                        c.n_modalities(),
                        c.dims,
                        cfg.net.n_modalities,
                        want
                    ),
                ));
            }
            Ok(ds)
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(CcsdError::io(dir, e)))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = load_config(&common, None)?;
            let entries = write_dataset(&cfg.phantom(), cfg.split, &common.out)?;
            println!("wrote {} cases to {}", entries.len(), common.out.display());
        }
        Command::Train { common, data } => {
            let cfg = load_config(&common, None)?;
            let ds = dataset(&cfg, data.as_deref())?;
            let o = trainer::train::<f32>(&cfg, &ds, Some(&common.out))?;
            if let Some(table) = &o.record.test_table {
                write_reports(table, &common.out, common.render_plots)?;
                println!("test mean Dice {:.4}", table.mean_dice());
            }
            println!("run written to {}", common.out.display());
        }
        Command::Eval {
            common,
            checkpoint: ckpt,
            data,
        } => {
            if !ckpt.is_file() {
                return Err(usage("--checkpoint", format!("{} does not exist", ckpt.display())));
            }
            if !checkpoint::meta_path(&ckpt).is_file() {
                return Err(usage(
                    "--checkpoint",
                    format!("{} has no sidecar metadata file", ckpt.display()),
                ));
            }
            let cfg = load_config(&common, ckpt.parent().map(|p| p.join(CONFIG_FILE)).as_deref())?;
            let (net, _) = checkpoint::load::<f32>(&ckpt, Some(&cfg.net))?;
            let ds = dataset(&cfg, data.as_deref())?;
            let table = evaluate(&net, &ds.test, cfg.batch_size)?;
            ensure_dir(&common.out)?;
            write_reports(&table, &common.out, common.render_plots)?;
            println!("test mean Dice {:.4}", table.mean_dice());
        }
        Command::Ablate {
            common,
            axis,
            seeds,
            data,
        } => {
            let axis = AblationAxis::parse(&axis).map_err(|e| usage("--axis", e))?;
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|e| usage("--seeds", e))?;
            if seeds.is_empty() {
                return Err(usage("--seeds", "at least one seed is required"));
            }
            let cfg = load_config(&common, None)?;
            let ds = dataset(&cfg, data.as_deref())?;
            let report = ablate::<f32>(&cfg, axis, &seeds, &ds, Some(&common.out))?;
            print!("{}", report.summary_csv());
        }
        Command::Report { common, run_dir } => {
            let src = run_dir.join(EVAL_TABLE_FILE);
            if !src.is_file() {
                return Err(usage(
                    "--run-dir",
                    format!("{} is incomplete: {} is missing", run_dir.display(), EVAL_TABLE_FILE),
                ));
            }
            let text = fs::read_to_string(&src).map_err(|e| CliError::Runtime(CcsdError::io(&src, e)))?;
            let table = EvalTable::from_csv(&text).map_err(|e| usage("--run-dir", format!("{}: {e}", src.display())))?;
            ensure_dir(&common.out)?;
            write_reports(&table, &common.out, common.render_plots)?;
            println!("reports written to {}", common.out.display());
        }
    }
    Ok(())
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}
