//! Run orchestration: resolves a config into a run directory, then drives
//! pretraining, probing, or the ablation grid end to end.
//!
//! Every run directory receives the fully resolved config, the seed, and a
//! code version tag before any work starts, so a finished or interrupted run
//! can be re-executed bit-for-bit from its own artifacts.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Config, WeightSchedule};
use crate::data::labels::{join_with_manifests, label_names, load_labels};
use crate::data::manifest::{load_manifests, VideoManifest};
use crate::data::{FrameStore, Sampler};
use crate::encoder::Encoder;
use crate::error::{ClpError, Result};
use crate::probe::{build_probe_data, run_probe, ProbeReport};
use crate::trainer::{self, TrainState};

/// Code version stamped into every run directory.
pub const VERSION_TAG: &str = env!("CARGO_PKG_VERSION");

/// Provenance sidecar written next to each run's artifacts. `seed` is absent
/// for commands that do not consume one (report rendering).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunInfo {
    pub command: String,
    pub seed: Option<u64>,
    pub version: String,
}

/// Create `dir` and write the resolved config plus `run_info.json` into it.
pub fn write_provenance(dir: &Path, command: &str, cfg: Option<&Config>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| ClpError::io(dir, e))?;
    if let Some(cfg) = cfg {
        cfg.save(&dir.join("config.json"))?;
    }
    let info = RunInfo {
        command: command.to_string(),
        seed: cfg.map(|c| c.seed),
        version: VERSION_TAG.to_string(),
    };
    let path = dir.join("run_info.json");
    let json = serde_json::to_string_pretty(&info).expect("run info serializes");
    std::fs::write(&path, json).map_err(|e| ClpError::io(&path, e))
}

/// Load manifests and decoded frames for the corpus under `cfg.data.root`.
pub fn load_corpus(cfg: &Config) -> Result<(Vec<VideoManifest>, FrameStore)> {
    let root = &cfg.data.root;
    let manifests = load_manifests(&root.join("manifests.jsonl"))?;
    let store = FrameStore::load(root, &manifests, cfg.data.channels)?;
    Ok((manifests, store))
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub steps: usize,
    pub state: TrainState,
}

/// Pretrain from scratch into `out`. Emits `metrics.jsonl` (one line every
/// `train.log_every` steps, plus the final step), intermediate checkpoints
/// every `train.checkpoint_every` epochs when nonzero, and a final
/// `checkpoint.json`.
pub fn pretrain(cfg: &Config, out: &Path) -> Result<PretrainOutcome> {
    cfg.validate()?;
    write_provenance(out, "pretrain", Some(cfg))?;
    let (manifests, store) = load_corpus(cfg)?;
    let sampler = Sampler::new(&manifests, &cfg.tcl, &cfg.cir, cfg.train.batch_videos)?;
    let mut state = TrainState::new(cfg, cfg.seed)?;

    let metrics_path = out.join("metrics.jsonl");
    let mut metrics_file = BufWriter::new(
        File::create(&metrics_path).map_err(|e| ClpError::io(&metrics_path, e))?,
    );
    let total = trainer::total_steps(&sampler, &cfg.train);
    let log_every = cfg.train.log_every.max(1);
    let ckpt_every = cfg.train.checkpoint_every;

    trainer::train_loop(
        &mut state,
        cfg,
        &sampler,
        &store,
        |_state, m| {
            if m.step % log_every == 0 || m.step == total {
                let line = serde_json::to_string(m).expect("metrics serialize");
                writeln!(metrics_file, "{line}").map_err(|e| ClpError::io(&metrics_path, e))?;
            }
            Ok(())
        },
        |state| {
            if ckpt_every > 0 && state.epoch % ckpt_every == 0 && state.epoch < cfg.train.epochs {
                let path = out.join(format!("checkpoint_epoch_{:04}.json", state.epoch));
                trainer::save_checkpoint(&path, state, cfg)?;
            }
            Ok(())
        },
    )?;
    metrics_file
        .flush()
        .map_err(|e| ClpError::io(&metrics_path, e))?;

    let checkpoint = out.join("checkpoint.json");
    trainer::save_checkpoint(&checkpoint, &state, cfg)?;
    Ok(PretrainOutcome {
        checkpoint,
        metrics: metrics_path,
        steps: state.step,
        state,
    })
}

/// Probe `encoder` on the labeled corpus under `cfg.data.root`.
pub fn probe_corpus(encoder: &Encoder, cfg: &Config) -> Result<ProbeReport> {
    let (manifests, store) = load_corpus(cfg)?;
    let records = load_labels(&cfg.data.root.join("labels.jsonl"))?;
    let names = label_names(&records);
    let examples = join_with_manifests(&records, &manifests)?;
    let data = build_probe_data(&store, &manifests, &examples, &names, cfg.data.input_size)?;
    run_probe(encoder, &data, &cfg.probe, cfg.seed)
}

/// Load a pretraining checkpoint and run the probe protocol against the
/// labeled corpus at `data_root`. `folds` and `seed` override the values
/// the checkpoint was trained with; the report lands in
/// `out/probe_report.json`.
pub fn probe_run(
    checkpoint: &Path,
    data_root: &Path,
    folds: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<ProbeReport> {
    let (state, mut cfg) = trainer::load_checkpoint(checkpoint)?;
    cfg.data.root = data_root.to_path_buf();
    if let Some(f) = folds {
        cfg.probe.folds = f;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    write_provenance(out, "probe", Some(&cfg))?;
    let report = probe_corpus(&state.online, &cfg)?;
    let path = out.join("probe_report.json");
    let json = serde_json::to_string_pretty(&report).expect("probe report serializes");
    std::fs::write(&path, json).map_err(|e| ClpError::io(&path, e))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Ablation grid
// ---------------------------------------------------------------------------

/// Grid axes for ablation runs. A missing axis keeps the base config's
/// value; a present axis must list at least one value. The cross product of
/// all axes is run cell by cell.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub tcl: Option<Vec<bool>>,
    pub cir: Option<Vec<bool>>,
    pub schedule: Option<Vec<WeightSchedule>>,
    pub memory_size: Option<Vec<usize>>,
    pub eq4_printed_variant: Option<Vec<bool>>,
}

pub fn load_grid(path: &Path) -> Result<AblationGrid> {
    let text = std::fs::read_to_string(path).map_err(|e| ClpError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| ClpError::Json {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone)]
pub struct AblationCell {
    /// Human-readable cell key built from the axes the grid actually varies.
    pub name: String,
    pub config: Config,
}

fn schedule_name(s: WeightSchedule) -> &'static str {
    match s {
        WeightSchedule::Uniform => "uniform",
        WeightSchedule::InvSqrt => "inv_sqrt",
        WeightSchedule::InvLinear => "inv_linear",
        WeightSchedule::ExpDecay => "exp_decay",
    }
}

/// Expand the grid against a base config. A cell that would disable both
/// loss terms is rejected rather than silently skipped, since its training
/// run would optimize nothing.
pub fn expand_grid(base: &Config, grid: &AblationGrid) -> Result<Vec<AblationCell>> {
    fn axis<T: Clone>(vals: &Option<Vec<T>>, base: T, name: &str) -> Result<(Vec<T>, bool)> {
        match vals {
            None => Ok((vec![base], false)),
            Some(v) if v.is_empty() => Err(ClpError::Config(format!(
                "ablation grid axis {name} is empty"
            ))),
            Some(v) => Ok((v.clone(), true)),
        }
    }
    let (tcls, vary_tcl) = axis(&grid.tcl, base.tcl.enabled, "tcl")?;
    let (cirs, vary_cir) = axis(&grid.cir, base.cir.enabled, "cir")?;
    let (scheds, vary_sched) = axis(&grid.schedule, base.tcl.weight_schedule, "schedule")?;
    let (mems, vary_mem) = axis(&grid.memory_size, base.cir.memory_size, "memory_size")?;
    let (eq4s, vary_eq4) = axis(
        &grid.eq4_printed_variant,
        base.cir.eq4_printed_variant,
        "eq4_printed_variant",
    )?;

    let mut cells = Vec::new();
    for &tcl in &tcls {
        for &cir in &cirs {
            for &sched in &scheds {
                for &mem in &mems {
                    for &eq4 in &eq4s {
                        let mut parts: Vec<String> = Vec::new();
                        if vary_tcl {
                            parts.push(format!("tcl={}", if tcl { "on" } else { "off" }));
                        }
                        if vary_cir {
                            parts.push(format!("cir={}", if cir { "on" } else { "off" }));
                        }
                        if vary_sched {
                            parts.push(format!("schedule={}", schedule_name(sched)));
                        }
                        if vary_mem {
                            parts.push(format!("memory={mem}"));
                        }
                        if vary_eq4 {
                            parts.push(format!("eq4={}", if eq4 { "printed" } else { "plain" }));
                        }
                        let name = if parts.is_empty() {
                            "base".to_string()
                        } else {
                            parts.join(",")
                        };
                        if !tcl && !cir {
                            return Err(ClpError::Config(format!(
                                "ablation cell {name:?} disables both loss terms; vacuous"
                            )));
                        }
                        let mut config = base.clone();
                        config.tcl.enabled = tcl;
                        config.cir.enabled = cir;
                        config.tcl.weight_schedule = sched;
                        config.cir.memory_size = mem;
                        config.cir.eq4_printed_variant = eq4;
                        cells.push(AblationCell { name, config });
                    }
                }
            }
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub mean_f1: f64,
}

fn cell_slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect()
}

/// Render the (cell, mean F1) table; F1 printed x 100 with one decimal.
pub fn render_ablation_table(rows: &[AblationRow]) -> String {
    let w = rows
        .iter()
        .map(|r| r.cell.len())
        .max()
        .unwrap_or(4)
        .max("cell".len());
    let mut out = String::new();
    let _ = writeln!(out, "{:<w$} | mean F1 (x 100)", "cell");
    let _ = writeln!(out, "{}-+----------------", "-".repeat(w));
    for r in rows {
        let _ = writeln!(out, "{:<w$} | {:>15.1}", r.cell, r.mean_f1 * 100.0);
    }
    out
}

/// Run every grid cell end to end (pretrain, then probe on the same corpus)
/// and collect mean F1 per cell. Each cell gets its own subdirectory of
/// `out`; the summary lands in `ablation.txt` and `ablation.json`.
pub fn ablate(base: &Config, grid: &AblationGrid, out: &Path) -> Result<Vec<AblationRow>> {
    let cells = expand_grid(base, grid)?;
    write_provenance(out, "ablate", Some(base))?;
    let mut rows = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        let dir = out.join(format!("cell_{i:02}_{}", cell_slug(&cell.name)));
        let outcome = pretrain(&cell.config, &dir)?;
        let report = probe_corpus(&outcome.state.online, &cell.config)?;
        let path = dir.join("probe_report.json");
        let json = serde_json::to_string_pretty(&report).expect("probe report serializes");
        std::fs::write(&path, json).map_err(|e| ClpError::io(&path, e))?;
        rows.push(AblationRow {
            cell: cell.name.clone(),
            mean_f1: report.mean_f1,
        });
    }
    let table = render_ablation_table(&rows);
    std::fs::write(out.join("ablation.txt"), &table)
        .map_err(|e| ClpError::io(out.join("ablation.txt"), e))?;
    let json = serde_json::to_string_pretty(&rows).expect("rows serialize");
    std::fs::write(out.join("ablation.json"), json)
        .map_err(|e| ClpError::io(out.join("ablation.json"), e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SynthConfig;

    /// Small corpus plus matching config, everything inside `dir`.
    fn desk_setup(dir: &Path, seed: u64) -> Config {
        let synth = SynthConfig {
            subjects: 3,
            videos_per_subject: 2,
            frames_per_video: 18,
            image_size: 8,
            latent_dims: 2,
            // Short clips need busy dynamics, or a video can sit entirely at
            // the idle baseline and starve batch statistics of variance.
            event_prob: 0.2,
            pulse_len: 4.0,
            ..SynthConfig::default()
        };
        let root = dir.join("corpus");
        crate::synth::generate(&synth, seed, &root).unwrap();

        let mut cfg = Config::default();
        cfg.seed = seed;
        cfg.data.root = root;
        cfg.data.input_size = 8;
        cfg.encoder.hidden = vec![16];
        cfg.encoder.feature_dim = 8;
        cfg.encoder.head_hidden = 8;
        cfg.encoder.embed_dim = 4;
        cfg.tcl.seq_len = 5;
        cfg.tcl.stride = 1;
        cfg.cir.memory_size = 32;
        cfg.cir.min_negatives = 4;
        cfg.cir.momentum = 0.9;
        cfg.train.epochs = 2;
        cfg.train.batch_videos = 4;
        cfg.train.lr = 0.05;
        cfg.train.log_every = 1;
        cfg.probe.epochs = 2;
        cfg.probe.folds = 3;
        cfg
    }

    #[test]
    fn pretrain_writes_complete_run_directory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = desk_setup(dir.path(), 5);
        let out = dir.path().join("run");
        let outcome = pretrain(&cfg, &out).unwrap();

        assert!(out.join("config.json").exists());
        let info: RunInfo =
            serde_json::from_str(&std::fs::read_to_string(out.join("run_info.json")).unwrap())
                .unwrap();
        assert_eq!(info.command, "pretrain");
        assert_eq!(info.seed, Some(5));
        assert_eq!(info.version, VERSION_TAG);

        let metrics = crate::report::load_metrics(&outcome.metrics).unwrap();
        assert_eq!(metrics.len(), outcome.steps, "log_every=1 logs every step");
        let (resumed, loaded_cfg) = trainer::load_checkpoint(&outcome.checkpoint).unwrap();
        assert_eq!(resumed.step, outcome.steps);
        assert_eq!(loaded_cfg, cfg);
    }

    #[test]
    fn pretrain_reruns_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = desk_setup(dir.path(), 11);
        let out1 = dir.path().join("run1");
        let out2 = dir.path().join("run2");
        pretrain(&cfg, &out1).unwrap();
        pretrain(&cfg, &out2).unwrap();
        for f in ["metrics.jsonl", "checkpoint.json", "config.json"] {
            let a = std::fs::read(out1.join(f)).unwrap();
            let b = std::fs::read(out2.join(f)).unwrap();
            assert_eq!(a, b, "{f} differs between identical runs");
        }
    }

    #[test]
    fn intermediate_checkpoints_follow_epoch_cadence() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = desk_setup(dir.path(), 7);
        cfg.train.epochs = 4;
        cfg.train.checkpoint_every = 2;
        let out = dir.path().join("run");
        pretrain(&cfg, &out).unwrap();
        assert!(out.join("checkpoint_epoch_0002.json").exists());
        // Epoch 4 is the end of training; only the final file covers it.
        assert!(!out.join("checkpoint_epoch_0004.json").exists());
        assert!(out.join("checkpoint.json").exists());
    }

    #[test]
    fn probe_run_consumes_checkpoint_and_writes_report() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = desk_setup(dir.path(), 13);
        let out = dir.path().join("run");
        let outcome = pretrain(&cfg, &out).unwrap();

        let probe_out = dir.path().join("probe");
        let report = probe_run(
            &outcome.checkpoint,
            &cfg.data.root,
            Some(3),
            None,
            &probe_out,
        )
        .unwrap();
        assert_eq!(report.per_fold.len(), 3);
        assert!(report.mean_f1.is_finite());
        let on_disk: ProbeReport = serde_json::from_str(
            &std::fs::read_to_string(probe_out.join("probe_report.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(on_disk.mean_f1, report.mean_f1);
        assert!(probe_out.join("config.json").exists());
    }

    #[test]
    fn grid_expansion_covers_product_and_names_varied_axes() {
        let base = Config::default();
        let grid = AblationGrid {
            schedule: Some(vec![WeightSchedule::Uniform, WeightSchedule::InvSqrt]),
            memory_size: Some(vec![512, 1024]),
            ..AblationGrid::default()
        };
        let cells = expand_grid(&base, &grid).unwrap();
        assert_eq!(cells.len(), 4);
        let names: Vec<&str> = cells.iter().map(|c| c.name.as_str()).collect();
        assert!(names.contains(&"schedule=uniform,memory=512"), "{names:?}");
        assert!(names.contains(&"schedule=inv_sqrt,memory=1024"), "{names:?}");
        // Axes the grid does not vary stay out of the name.
        assert!(!names[0].contains("tcl="), "{names:?}");
        for c in &cells {
            assert!(c.config.tcl.enabled && c.config.cir.enabled);
        }
    }

    #[test]
    fn grid_with_both_losses_off_rejected() {
        let base = Config::default();
        let grid = AblationGrid {
            tcl: Some(vec![true, false]),
            cir: Some(vec![true, false]),
            ..AblationGrid::default()
        };
        let err = expand_grid(&base, &grid).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("vacuous"), "{err}");
    }

    #[test]
    fn ablate_emits_one_row_per_cell_with_finite_f1() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = desk_setup(dir.path(), 3);
        cfg.train.epochs = 1;
        cfg.probe.epochs = 1;
        let grid = AblationGrid {
            schedule: Some(vec![WeightSchedule::Uniform, WeightSchedule::InvSqrt]),
            cir: Some(vec![false]),
            ..AblationGrid::default()
        };
        let out = dir.path().join("ablate");
        let rows = ablate(&cfg, &grid, &out).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert!(r.mean_f1.is_finite(), "{}", r.cell);
        }
        let table = std::fs::read_to_string(out.join("ablation.txt")).unwrap();
        assert!(table.contains("schedule=uniform"), "{table}");
        assert!(table.contains("schedule=inv_sqrt"), "{table}");
        let json: Vec<AblationRow> = serde_json::from_str(
            &std::fs::read_to_string(out.join("ablation.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(json.len(), 2);
    }
}
