//! Pretraining: one optimizer state, one step function, one loop.
//!
//! A step runs the online trunk once over the concatenated sequence and
//! query rows, feeds the per-video sequence slices to the temporal head and
//! the query slice to the reconstruction head, pulls keys from the momentum
//! target encoder, and combines the two feature gradients before the single
//! trunk backward. The target never sees a gradient; it follows the online
//! weights by exponential moving average, running statistics included.
//!
//! Checkpoints capture everything a resumed run needs to be bit-identical
//! to an uninterrupted one: both encoders, optimizer velocity, the memory
//! queue, and the RNG. They are written at epoch boundaries, which is also
//! the only point where "resume here" is well defined, because batch plans
//! for an epoch are drawn from the RNG at the moment the epoch starts.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cir::{cir_step, MemoryQueue};
use crate::config::{Config, DataConfig, LrSchedule, TrainConfig};
use crate::data::{FrameStore, Sampler, StepBatch};
use crate::encoder::{stack_rows, Encoder};
use crate::error::{ClpError, Result};
use crate::nn::{
    cosine_lr, ema_blend, ensure_unit_rows, load_state_map, state_map, Grads, Sgd, Tensor,
};
use crate::tcl::tcl_loss_and_grad;

/// Flattened pixel count the encoder consumes.
pub fn input_dim(data: &DataConfig) -> usize {
    data.input_size * data.input_size * data.channels
}

/// Everything that changes while training.
#[derive(Debug)]
pub struct TrainState {
    pub online: Encoder,
    pub target: Encoder,
    pub sgd: Sgd,
    pub queue: MemoryQueue,
    pub rng: ChaCha8Rng,
    /// Optimizer steps completed.
    pub step: usize,
    /// Epochs completed.
    pub epoch: usize,
}

impl TrainState {
    /// Fresh state: the target starts as an exact copy of the online
    /// encoder, the queue empty.
    pub fn new(cfg: &Config, seed: u64) -> Result<TrainState> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let online = Encoder::new(&cfg.encoder, input_dim(&cfg.data), &mut rng)?;
        let target = online.clone();
        Ok(TrainState {
            online,
            target,
            sgd: Sgd::new(cfg.train.momentum),
            queue: MemoryQueue::new(cfg.cir.memory_size, cfg.encoder.embed_dim),
            rng,
            step: 0,
            epoch: 0,
        })
    }
}

/// One metrics line per optimizer step; serialized as-is into
/// `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_tcl: f64,
    pub l_cir: f64,
    pub l_tot: f64,
    pub queue_fill: usize,
}

pub fn lr_at(cfg: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.lr,
        LrSchedule::Cosine => cosine_lr(cfg.lr, step, total_steps),
    }
}

/// Whole batches per epoch; short tails are dropped, and a corpus smaller
/// than one batch still yields one step.
pub fn steps_per_epoch(sampler: &Sampler) -> usize {
    let n = sampler.num_eligible();
    let chunk = sampler.batch_videos.min(n).max(1);
    n / chunk
}

pub fn total_steps(sampler: &Sampler, cfg: &TrainConfig) -> usize {
    steps_per_epoch(sampler) * cfg.epochs
}

fn ensure_grads_finite(grads: &Grads, step: usize) -> Result<()> {
    for (name, g) in grads {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(ClpError::NonFinite {
                context: format!("gradient of {name} at step {step}"),
                diagnostics: Some(format!(
                    "{} of {} components non-finite",
                    g.iter().filter(|x| !x.is_finite()).count(),
                    g.len()
                )),
            });
        }
    }
    Ok(())
}

/// Run one optimizer step on a materialized batch and return its metrics.
pub fn train_step(
    state: &mut TrainState,
    batch: &StepBatch,
    cfg: &Config,
    lr: f64,
) -> Result<StepMetrics> {
    let b = batch.videos_in_step;
    let seq_len = cfg.tcl.seq_len;
    let use_tcl = cfg.tcl.enabled;
    let use_cir = cfg.cir.enabled;
    let seq_rows = if use_tcl { b * seq_len } else { 0 };

    // One trunk pass over every row this step touches. A disabled loss term
    // contributes no rows, so ablation cells do not pay for unused frames.
    let mut parts: Vec<&Array2<f64>> = Vec::new();
    if use_tcl {
        parts.push(&batch.seq);
    }
    if use_cir {
        parts.push(&batch.queries);
    }
    let stacked = stack_rows(&parts);
    let (feats, trunk_cache) = state.online.trunk.forward(&stacked, true);

    let mut grads = Grads::new();
    let mut d_feats = Array2::zeros(feats.raw_dim());

    // Temporal term, averaged over the videos in the step.
    let mut l_tcl = 0.0;
    if use_tcl {
        let seq_feats = feats.slice(s![..seq_rows, ..]).to_owned();
        let (tcl_emb, tcl_cache) = state.online.tcl_head.forward(&seq_feats);
        ensure_unit_rows("temporal-head embedding", &tcl_emb, 1e-3)?;
        let mut d_tcl_emb = Array2::zeros(tcl_emb.raw_dim());
        for v in 0..b {
            let rows = s![v * seq_len..(v + 1) * seq_len, ..];
            let (l, g) = tcl_loss_and_grad(
                &tcl_emb.slice(rows).to_owned(),
                cfg.tcl.margin,
                cfg.tcl.weight_schedule,
            );
            l_tcl += l / b as f64;
            d_tcl_emb
                .slice_mut(rows)
                .iter_mut()
                .zip(g.iter())
                .for_each(|(o, gi)| *o = gi / b as f64);
        }
        let d_seq_feats = state.online.tcl_head.backward(&tcl_cache, &d_tcl_emb, &mut grads);
        d_feats.slice_mut(s![..seq_rows, ..]).assign(&d_seq_feats);
    }

    // Reconstruction term: online queries against target keys.
    let mut l_cir = 0.0;
    let mut queue_fill = 0;
    if use_cir {
        let query_feats = feats.slice(s![seq_rows.., ..]).to_owned();
        let (q_emb, cir_cache) = state.online.cir_head.forward(&query_feats);
        let k_emb = state.target.embed_cir_eval(&batch.keys);
        ensure_unit_rows("reconstruction-head query embedding", &q_emb, 1e-3)?;
        ensure_unit_rows("target key embedding", &k_emb, 1e-3)?;
        let out = cir_step(
            &mut state.queue,
            &q_emb,
            &k_emb,
            &batch.query_video_ids,
            &cfg.cir,
            &mut state.rng,
        )?;
        l_cir = out.loss;
        queue_fill = out.queue_fill;
        let d_q_emb = out.grads.mapv(|g| cfg.train.beta * g);
        let d_query_feats = state.online.cir_head.backward(&cir_cache, &d_q_emb, &mut grads);
        d_feats.slice_mut(s![seq_rows.., ..]).assign(&d_query_feats);
    }

    let l_tot = l_tcl + cfg.train.beta * l_cir;
    if !l_tot.is_finite() {
        return Err(ClpError::NonFinite {
            context: format!("loss at step {}", state.step + 1),
            diagnostics: Some(format!("l_tcl={l_tcl} l_cir={l_cir}")),
        });
    }

    state.online.trunk.backward(&trunk_cache, &d_feats, &mut grads);
    ensure_grads_finite(&grads, state.step + 1)?;

    state.sgd.step(&mut state.online, &grads, lr);
    // The target encoder only feeds the reconstruction term; without it the
    // EMA update is dead weight.
    if use_cir {
        ema_blend(&mut state.target, &state.online, cfg.cir.momentum)?;
    }
    state.step += 1;

    Ok(StepMetrics {
        step: state.step,
        l_tcl,
        l_cir,
        l_tot,
        queue_fill,
    })
}

/// Train from `state.epoch` up to the configured epoch count. `on_step`
/// runs after every optimizer step, `on_epoch_end` after each epoch's
/// counter advances; either may abort by returning an error.
pub fn train_loop(
    state: &mut TrainState,
    cfg: &Config,
    sampler: &Sampler,
    store: &FrameStore,
    mut on_step: impl FnMut(&TrainState, &StepMetrics) -> Result<()>,
    mut on_epoch_end: impl FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    let total = total_steps(sampler, &cfg.train);
    while state.epoch < cfg.train.epochs {
        let plans = sampler.epoch_plan(&mut state.rng);
        for plan in &plans {
            let batch = sampler.materialize(plan, store, &cfg.augment, cfg.data.input_size, &mut state.rng);
            let lr = lr_at(&cfg.train, state.step, total);
            let metrics = train_step(state, &batch, cfg, lr)?;
            on_step(state, &metrics)?;
        }
        state.epoch += 1;
        on_epoch_end(state)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    step: usize,
    epoch: usize,
    config: Config,
    online: BTreeMap<String, Tensor>,
    target: BTreeMap<String, Tensor>,
    velocity: BTreeMap<String, Vec<f64>>,
    queue: MemoryQueue,
    rng: ChaCha8Rng,
}

pub fn save_checkpoint(path: &Path, state: &TrainState, cfg: &Config) -> Result<()> {
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        step: state.step,
        epoch: state.epoch,
        config: cfg.clone(),
        online: state_map(&state.online),
        target: state_map(&state.target),
        velocity: state.sgd.velocity.clone(),
        queue: state.queue.clone(),
        rng: state.rng.clone(),
    };
    let file = std::fs::File::create(path).map_err(|e| ClpError::io(path, e))?;
    serde_json::to_writer(BufWriter::new(file), &ck).map_err(|e| ClpError::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Rebuild training state from a checkpoint. The stored config snapshot is
/// authoritative for reconstruction and is returned alongside the state.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, Config)> {
    let file = std::fs::File::open(path).map_err(|e| ClpError::io(path, e))?;
    let ck: Checkpoint = serde_json::from_reader(BufReader::new(file)).map_err(|e| ClpError::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(ClpError::Contract(format!(
            "checkpoint {} has version {}, this build reads version {}",
            path.display(),
            ck.version,
            CHECKPOINT_VERSION
        )));
    }
    // Seed only shapes the throwaway init; every tensor is overwritten.
    let mut init_rng = ChaCha8Rng::seed_from_u64(0);
    let dim = input_dim(&ck.config.data);
    let mut online = Encoder::new(&ck.config.encoder, dim, &mut init_rng)?;
    load_state_map(&mut online, &ck.online)?;
    let mut target = Encoder::new(&ck.config.encoder, dim, &mut init_rng)?;
    load_state_map(&mut target, &ck.target)?;
    let state = TrainState {
        online,
        target,
        sgd: Sgd {
            momentum: ck.config.train.momentum,
            velocity: ck.velocity,
        },
        queue: ck.queue,
        rng: ck.rng,
        step: ck.step,
        epoch: ck.epoch,
    };
    Ok((state, ck.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SynthConfig;
    use crate::nn::{Module, TensorKind};
    use crate::synth::build_corpus;

    /// Small world and small model so each test step stays in the
    /// millisecond range.
    fn desk_config() -> Config {
        let mut cfg = Config::default();
        cfg.data.input_size = 8;
        cfg.encoder.hidden = vec![16];
        cfg.encoder.feature_dim = 8;
        cfg.encoder.head_hidden = 8;
        cfg.encoder.embed_dim = 6;
        cfg.tcl.seq_len = 5;
        cfg.tcl.stride = 1;
        cfg.cir.memory_size = 64;
        cfg.cir.min_negatives = 4;
        cfg.cir.frames_per_video = 2;
        cfg.cir.momentum = 0.9;
        cfg.train.batch_videos = 4;
        cfg.train.epochs = 2;
        cfg.train.lr = 0.05;
        cfg.synth = SynthConfig {
            subjects: 2,
            videos_per_subject: 4,
            frames_per_video: 16,
            image_size: 8,
            latent_dims: 2,
            ..SynthConfig::default()
        };
        cfg
    }

    fn world(cfg: &Config, seed: u64) -> (FrameStore, Sampler) {
        let (corpus, videos) = build_corpus(&cfg.synth, seed).unwrap();
        let store = FrameStore::from_images(videos);
        let sampler = Sampler::new(&corpus.manifests, &cfg.tcl, &cfg.cir, cfg.train.batch_videos).unwrap();
        (store, sampler)
    }

    fn run_steps(cfg: &Config, seed: u64) -> (TrainState, Vec<StepMetrics>) {
        let (store, sampler) = world(cfg, seed);
        let mut state = TrainState::new(cfg, seed).unwrap();
        let mut log = Vec::new();
        train_loop(&mut state, cfg, &sampler, &store, |_, m| {
            log.push(m.clone());
            Ok(())
        }, |_| Ok(()))
        .unwrap();
        (state, log)
    }

    #[test]
    fn steps_per_epoch_matches_the_plans_actually_drawn() {
        let cfg = desk_config();
        let (corpus, _) = build_corpus(&cfg.synth, 5).unwrap();
        let sampler = Sampler::new(&corpus.manifests, &cfg.tcl, &cfg.cir, cfg.train.batch_videos).unwrap();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(sampler.epoch_plan(&mut rng).len(), steps_per_epoch(&sampler));
        }
    }

    #[test]
    fn epoch_loop_reports_consistent_metrics_and_fills_the_queue() {
        let cfg = desk_config();
        let (_, log) = run_steps(&cfg, 3);
        assert_eq!(log.len(), total_steps_for(&cfg, 3));
        let first = &log[0];
        let last = log.last().unwrap();
        assert_eq!(first.step, 1);
        assert_eq!(last.step, log.len());
        // 4 videos x 2 query frames per step fill the 64-slot queue; the
        // cold first step must still carry a zero reconstruction loss.
        assert!(last.queue_fill > first.queue_fill);
        assert_eq!(first.l_cir, 0.0);
        for m in &log {
            assert!((m.l_tot - (m.l_tcl + cfg.train.beta * m.l_cir)).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_steps_on_one_batch_drive_the_loss_down() {
        let cfg = desk_config();
        let (store, sampler) = world(&cfg, 3);
        let mut state = TrainState::new(&cfg, 3).unwrap();
        let plan = sampler.epoch_plan(&mut state.rng.clone()).remove(0);
        let batch = sampler.materialize(&plan, &store, &cfg.augment, cfg.data.input_size, &mut state.rng);
        let mut log = Vec::new();
        for _ in 0..30 {
            log.push(train_step(&mut state, &batch, &cfg, cfg.train.lr).unwrap());
        }
        // The temporal term is active from the start and must fall.
        let first_tcl = log[0].l_tcl;
        let last_tcl = log.last().unwrap().l_tcl;
        assert!(
            last_tcl < 0.6 * first_tcl,
            "temporal loss barely moved: {first_tcl} -> {last_tcl}"
        );
        // The reconstruction loss grows while the queue fills (every push
        // adds a negative), so compare it only at constant fill.
        let full_at = log
            .iter()
            .position(|m| m.queue_fill == cfg.cir.memory_size)
            .expect("queue fills within the run");
        let head = log[full_at].l_tot;
        let tail = log.last().unwrap().l_tot;
        assert!(
            tail < 0.9 * head,
            "fixed-batch optimization barely moved after fill: {head} -> {tail}"
        );
    }

    fn total_steps_for(cfg: &Config, seed: u64) -> usize {
        let (_, sampler) = world(cfg, seed);
        total_steps(&sampler, &cfg.train)
    }

    #[test]
    fn training_is_deterministic_in_the_seed() {
        let cfg = desk_config();
        let (state_a, log_a) = run_steps(&cfg, 7);
        let (state_b, log_b) = run_steps(&cfg, 7);
        assert_eq!(log_a, log_b);
        assert_eq!(state_map(&state_a.online), state_map(&state_b.online));
        let (_, log_c) = run_steps(&cfg, 8);
        assert_ne!(log_a, log_c);
    }

    #[test]
    fn momentum_zero_makes_the_target_shadow_the_online_encoder() {
        let mut cfg = desk_config();
        cfg.cir.momentum = 0.0;
        cfg.train.epochs = 1;
        let (state, _) = run_steps(&cfg, 9);
        assert_eq!(state_map(&state.online), state_map(&state.target));
    }

    #[test]
    fn momentum_one_freezes_the_target() {
        let mut cfg = desk_config();
        cfg.cir.momentum = 1.0;
        cfg.train.epochs = 1;
        let init = TrainState::new(&cfg, 11).unwrap();
        let frozen = state_map(&init.target);
        let (state, _) = run_steps(&cfg, 11);
        assert_ne!(state_map(&state.online), frozen);
        assert_eq!(state_map(&state.target), frozen);
    }

    #[test]
    fn resume_from_checkpoint_is_bit_exact() {
        let cfg = desk_config();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("epoch1.ckpt.json");

        // Uninterrupted two-epoch run, checkpointing after the first epoch.
        let (store, sampler) = world(&cfg, 13);
        let mut state = TrainState::new(&cfg, 13).unwrap();
        let mut full_log = Vec::new();
        train_loop(&mut state, &cfg, &sampler, &store, |_, m| {
            full_log.push(m.clone());
            Ok(())
        }, |s| {
            if s.epoch == 1 {
                save_checkpoint(&ckpt, s, &cfg)?;
            }
            Ok(())
        })
        .unwrap();

        // Resume and replay the second epoch.
        let (mut resumed, loaded_cfg) = load_checkpoint(&ckpt).unwrap();
        assert_eq!(loaded_cfg, cfg);
        assert_eq!(resumed.epoch, 1);
        let mut resumed_log = Vec::new();
        train_loop(&mut resumed, &cfg, &sampler, &store, |_, m| {
            resumed_log.push(m.clone());
            Ok(())
        }, |_| Ok(()))
        .unwrap();

        let per_epoch = steps_per_epoch(&sampler);
        assert_eq!(resumed_log, full_log[per_epoch..].to_vec());
        assert_eq!(state_map(&resumed.online), state_map(&state.online));
        assert_eq!(state_map(&resumed.target), state_map(&state.target));
        assert_eq!(resumed.queue, state.queue);
        assert_eq!(resumed.sgd.velocity, state.sgd.velocity);
    }

    #[test]
    fn checkpoint_version_mismatch_is_rejected() {
        let cfg = desk_config();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let state = TrainState::new(&cfg, 15).unwrap();
        save_checkpoint(&path, &state, &cfg).unwrap();
        let mut raw: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        raw["version"] = serde_json::json!(99);
        std::fs::write(&path, serde_json::to_string(&raw).unwrap()).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn poisoned_weights_fail_with_the_numeric_exit_code() {
        let cfg = desk_config();
        let (store, sampler) = world(&cfg, 17);
        let mut state = TrainState::new(&cfg, 17).unwrap();
        let mut poisoned = false;
        state.online.visit_mut(&mut |_, kind, _, data| {
            if kind == TensorKind::Weight && !poisoned {
                data[0] = f64::NAN;
                poisoned = true;
            }
        });
        let err = train_loop(&mut state, &cfg, &sampler, &store, |_, _| Ok(()), |_| Ok(()))
            .unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }
}
