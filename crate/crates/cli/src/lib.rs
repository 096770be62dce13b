//! The `fyh` command line: one subcommand per pipeline step over a JSON
//! configuration.
//!
//! Exit codes: 0 on success, 1 when arguments or configuration are invalid
//! (with usage on stderr), 2 when the run itself fails.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fyh::pipeline::{
    run_eval, run_gradcheck, run_match, run_prep, run_product, run_reproject, run_stats, run_synth,
    run_train, PipelineConfig, PipelineError, GRADCHECK_TOL,
};
use fyh::scene::SceneKind;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Environment override of `--threads`.
pub const THREADS_ENV: &str = "FYH_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "fyh",
    version,
    about = "Cloud-type recognition from geostationary imagery"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Pipeline configuration (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Computation is currently single-threaded, so only
    /// the value is checked.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the working directory of the configuration.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Print the report as JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic imager and label scene pairs.
    Synth,
    /// Resample scenes onto the metric grid (all raw scenes by default).
    Reproject {
        #[arg(long = "in", value_name = "FILE", num_args = 1..)]
        inputs: Vec<PathBuf>,
    },
    /// Pair reprojected imager and label scenes in time.
    Match,
    /// Normalize, tile and split the matched pairs.
    Prep,
    /// Class histogram and long-tail report of a directory of label scenes.
    Stats {
        /// Label directory; defaults to the reprojected labels.
        #[arg(long, visible_alias = "in", value_name = "DIR")]
        labels: Option<PathBuf>,
    },
    /// Train a model on the prepared tiles.
    Train,
    /// Evaluate a checkpoint on a tile manifest.
    Eval {
        /// Defaults to the best checkpoint of the working directory.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Defaults to the validation manifest.
        #[arg(long = "in", value_name = "MANIFEST")]
        manifest: Option<PathBuf>,
    },
    /// Finite-difference check of the configured network's gradients.
    Gradcheck,
    /// Classify whole imager scenes on the product grid.
    Product {
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long = "in", value_name = "FILE", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
    },
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.is_validation() {
            Failure::Invalid(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

/// Runs the command line `argv` (program name first) and returns the exit
/// code. Reports go to `stdout`, diagnostics to `stderr`.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{}", e.render());
                    EXIT_OK
                }
                _ => {
                    let _ = write!(stderr, "{}", e.render());
                    EXIT_INVALID
                }
            };
        }
    };
    match dispatch(&cli, stdout) {
        Ok(code) => code,
        Err(Failure::Invalid(msg)) => {
            let _ = writeln!(stderr, "error: {msg}\n\nUsage: fyh [OPTIONS] <COMMAND>\n\nFor more information, try '--help'.");
            EXIT_INVALID
        }
        Err(Failure::Runtime(msg)) => {
            let _ = writeln!(stderr, "error: {msg}");
            EXIT_RUNTIME
        }
    }
}

fn load_config(g: &Global) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &g.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.set_seed(seed);
    }
    if let Some(dir) = &g.out {
        cfg.work_dir = dir.clone();
    }
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.parse::<usize>()
                .map_err(|_| Failure::Invalid(format!("{THREADS_ENV}={v} is not a count")))?,
        ),
        Err(_) => g.threads,
    };
    if threads == Some(0) {
        return Err(Failure::Invalid("thread count must be at least 1".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit<R: Serialize>(
    out: &mut dyn Write,
    json: bool,
    report: &R,
    text: impl FnOnce() -> String,
) -> Result<(), Failure> {
    let body = if json {
        serde_json::to_string_pretty(report).map_err(|e| Failure::Runtime(e.to_string()))?
    } else {
        text()
    };
    writeln!(out, "{body}").map_err(|e| Failure::Runtime(e.to_string()))
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<i32, Failure> {
    let cfg = load_config(&cli.global)?;
    let json = cli.global.json;
    match &cli.command {
        Command::Synth => {
            let r = run_synth(&cfg)?;
            emit(out, json, &r, || {
                format!(
                    "wrote {} scene pairs under {}",
                    r.scenes,
                    cfg.work_dir.display()
                )
            })?;
        }
        Command::Reproject { inputs } => {
            let r = run_reproject(&cfg, inputs)?;
            emit(out, json, &r, || {
                format!("reprojected {} scenes", r.written.len())
            })?;
        }
        Command::Match => {
            let r = run_match(&cfg)?;
            emit(out, json, &r, || {
                format!(
                    "matched {} of {} imager scenes ({} in window, {} unmatched)",
                    r.matched, r.imager_total, r.imager_in_window, r.unmatched
                )
            })?;
        }
        Command::Prep => {
            let r = run_prep(&cfg)?;
            emit(out, json, &r, || {
                format!(
                    "{} pairs -> {} tiles kept, {} dropped; {} train, {} val",
                    r.pairs, r.tiles_kept, r.tiles_dropped, r.train_tiles, r.val_tiles
                )
            })?;
        }
        Command::Stats { labels } => {
            let dir = labels
                .clone()
                .unwrap_or_else(|| cfg.eqr_dir(SceneKind::Label));
            let r = run_stats(&dir)?;
            emit(out, json, &r, || {
                let mut s = format!("{} label scenes\nclass  pixels  fraction\n", r.scenes);
                for (c, (n, f)) in r.histogram.counts.iter().zip(&r.fractions).enumerate() {
                    s.push_str(&format!("{c:>5}  {n:>6}  {f:.4}\n"));
                }
                s.push_str(&format!(
                    "dominant class {}; long tail: {}",
                    r.dominant_class,
                    if r.long_tailed { "yes" } else { "no" }
                ));
                s
            })?;
        }
        Command::Train => {
            let r = run_train(&cfg)?;
            emit(out, json, &r, || {
                format!(
                    "best val mIoU {:.4} at epoch {}; checkpoint {}",
                    r.best_miou,
                    r.best_epoch,
                    r.checkpoint.display()
                )
            })?;
        }
        Command::Eval {
            checkpoint,
            manifest,
        } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| cfg.checkpoint_path());
            let manifest = manifest.clone().unwrap_or_else(|| cfg.val_manifest());
            let r = run_eval(&cfg, &ckpt, &manifest)?;
            emit(out, json, &r, || {
                let mut s = String::new();
                for (name, iou) in r.class_names.iter().zip(&r.per_class_iou) {
                    match iou {
                        Some(v) => s.push_str(&format!("{name:>14}  {v:.4}\n")),
                        None => s.push_str(&format!("{name:>14}  absent\n")),
                    }
                }
                s.push_str(&format!("{:>14}  {:.4}", "mIoU", r.miou));
                s
            })?;
        }
        Command::Gradcheck => {
            let r = run_gradcheck(&cfg)?;
            emit(out, json, &r, || {
                format!(
                    "max relative error {:.3e} over {} entries (worst in {}); {}",
                    r.max_rel_error,
                    r.entries,
                    r.worst_slot,
                    if r.passed { "ok" } else { "FAILED" }
                )
            })?;
            if !r.passed {
                return Err(Failure::Runtime(format!(
                    "gradient check failed: {:.3e} >= {GRADCHECK_TOL:e}",
                    r.max_rel_error
                )));
            }
        }
        Command::Product { checkpoint, inputs } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| cfg.checkpoint_path());
            let mut reports = Vec::new();
            for input in inputs {
                reports.push(run_product(&cfg, &ckpt, input)?);
            }
            emit(out, json, &reports, || {
                reports
                    .iter()
                    .map(|r| format!("{} ({} fill pixels)", r.png.display(), r.fill))
                    .collect::<Vec<_>>()
                    .join("\n")
            })?;
        }
    }
    Ok(EXIT_OK)
}
