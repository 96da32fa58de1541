//! Command-line entry point. Thin by design: parsing and config resolution
//! live here, everything else is the library.
//!
//! Config precedence: built-in defaults < config file < `CLP_SEED` < command
//! flags < `--set key=value` overrides. Exit codes: 0 success, 2 config or
//! contract error, 3 data error, 4 non-finite numbers.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use clp::config::Config;
use clp::error::{ClpError, Result};
use clp::{report, run, synth};

#[derive(Parser)]
#[command(
    name = "clp",
    version,
    about = "Self-supervised video representation learning with temporal and \
             cross-identity reconstruction losses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder; writes metrics, checkpoints, and provenance.
    Pretrain {
        /// Config file (JSON). Defaults apply for every omitted field.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus root; overrides `data.root` from the config file.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory to create.
        #[arg(long)]
        out: PathBuf,
        /// Config override, repeatable: --set train.lr=0.01
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a checkpoint with subject-independent linear probes.
    Probe {
        /// Checkpoint produced by `pretrain`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled corpus root (expects labels.jsonl next to manifests).
        #[arg(long)]
        dataset: PathBuf,
        /// Cross-validation folds; defaults to the checkpoint's setting.
        #[arg(long)]
        folds: Option<usize>,
        /// Probe seed; defaults to CLP_SEED, then the checkpoint's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for probe_report.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a grid of loss/schedule/queue ablations end to end.
    Ablate {
        /// Grid file (JSON) listing the axes to vary.
        #[arg(long)]
        grid: PathBuf,
        /// Base config file; grid cells are edits on top of it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; one subdirectory per cell.
        #[arg(long)]
        out: PathBuf,
        /// Config override, repeatable: --set train.epochs=2
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Generate a synthetic labeled video corpus.
    #[command(name = "synth-gen")]
    SynthGen {
        /// Corpus root to create.
        #[arg(long)]
        out: PathBuf,
        /// Number of synthetic identities; overrides `synth.subjects`.
        #[arg(long)]
        identities: Option<usize>,
        /// Generator seed; defaults to CLP_SEED, then the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Config file for the remaining generator settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Config override, repeatable: --set synth.frames_per_video=60
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Render metrics logs and probe reports into tables and plots.
    Report {
        /// Input files, repeatable. `*.jsonl` is read as a metrics log,
        /// anything else as a probe report.
        #[arg(long = "in", value_name = "PATH", required = true)]
        inputs: Vec<PathBuf>,
        /// Output directory for report.txt, report.json, and plots.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_sets(sets: &[String]) -> Result<Vec<(String, String)>> {
    sets.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| {
                    ClpError::Config(format!("override {s:?} is not of the form key=value"))
                })
        })
        .collect()
}

/// defaults < file < CLP_SEED < explicit edits (done by the caller between
/// this and apply_overrides) < --set pairs.
fn resolve_config(path: Option<&Path>, sets: &[String]) -> Result<(Config, Vec<(String, String)>)> {
    let mut cfg = match path {
        Some(p) => Config::from_file(p)?,
        None => Config::default(),
    };
    cfg.apply_env_seed()?;
    Ok((cfg, parse_sets(sets)?))
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("CLP_SEED") {
        Ok(raw) => raw
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| ClpError::Config(format!("CLP_SEED must be an unsigned integer, got {raw:?}"))),
        Err(_) => Ok(None),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain {
            config,
            data,
            out,
            set,
        } => {
            let (mut cfg, pairs) = resolve_config(config.as_deref(), &set)?;
            if let Some(d) = data {
                cfg.data.root = d;
            }
            cfg.apply_overrides(&pairs)?;
            let outcome = run::pretrain(&cfg, &out)?;
            println!(
                "pretrain: {} steps, checkpoint {}",
                outcome.steps,
                outcome.checkpoint.display()
            );
        }
        Command::Probe {
            checkpoint,
            dataset,
            folds,
            seed,
            out,
        } => {
            let seed = match seed {
                Some(s) => Some(s),
                None => env_seed()?,
            };
            let report = run::probe_run(&checkpoint, &dataset, folds, seed, &out)?;
            println!(
                "probe: mean F1 (x 100) {:.1}, report {}",
                report.mean_f1 * 100.0,
                out.join("probe_report.json").display()
            );
        }
        Command::Ablate {
            grid,
            config,
            out,
            set,
        } => {
            let (mut cfg, pairs) = resolve_config(config.as_deref(), &set)?;
            cfg.apply_overrides(&pairs)?;
            let grid = run::load_grid(&grid)?;
            let rows = run::ablate(&cfg, &grid, &out)?;
            print!("{}", run::render_ablation_table(&rows));
        }
        Command::SynthGen {
            out,
            identities,
            seed,
            config,
            set,
        } => {
            let (mut cfg, pairs) = resolve_config(config.as_deref(), &set)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = identities {
                cfg.synth.subjects = n;
            }
            cfg.apply_overrides(&pairs)?;
            run::write_provenance(&out, "synth-gen", Some(&cfg))?;
            let corpus = synth::generate(&cfg.synth, cfg.seed, &out)?;
            println!(
                "synth-gen: {} identities, {} videos, {} frames in {}",
                cfg.synth.subjects,
                corpus.manifests.len(),
                corpus.states.len(),
                out.display()
            );
        }
        Command::Report { inputs, out } => {
            let (metrics, probes): (Vec<PathBuf>, Vec<PathBuf>) = inputs
                .into_iter()
                .partition(|p| p.extension().is_some_and(|e| e == "jsonl"));
            report::write_report(&out, &metrics, &probes)?;
            println!("report: written to {}", out.display());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
