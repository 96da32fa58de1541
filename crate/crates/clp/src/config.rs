//! Run configuration.
//!
//! Every knob lives in one serde tree so a run can be reproduced from its
//! saved `config.json` alone. Defaults follow the reference training recipe;
//! the synthetic-corpus examples override the scale-dependent fields (input
//! size, memory size, epochs) to keep runs small.
//!
//! Overrides use dotted paths (`cir.temperature=0.1`). The value side is
//! parsed as JSON first, falling back to a bare string, so numbers, booleans
//! and arrays all work from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ClpError, Result};

/// Per-offset weight for the triplet terms, indexed by the gap `j` between
/// the positive and the anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSchedule {
    /// All offsets weigh 1.
    Uniform,
    /// 1 / sqrt(j).
    InvSqrt,
    /// 1 / j.
    InvLinear,
    /// exp(-j).
    ExpDecay,
}

impl WeightSchedule {
    pub fn weight(&self, j: usize) -> f64 {
        let jf = j as f64;
        match self {
            WeightSchedule::Uniform => 1.0,
            WeightSchedule::InvSqrt => 1.0 / jf.sqrt(),
            WeightSchedule::InvLinear => 1.0 / jf,
            WeightSchedule::ExpDecay => (-jf).exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus root: expects `frames/` plus `manifests.jsonl`, and
    /// `labels.jsonl` where probing is involved.
    pub root: PathBuf,
    /// Frames are resized to `input_size` x `input_size` before encoding.
    pub input_size: usize,
    /// 1 for grayscale, 3 for RGB. Mismatched sources are converted.
    pub channels: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: PathBuf::from("data"),
            input_size: 16,
            channels: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Backbone family. Only `mlp` is available in this build.
    pub backbone: String,
    /// Hidden widths of the MLP trunk.
    pub hidden: Vec<usize>,
    /// Output width of the trunk; this is the representation probed later.
    pub feature_dim: usize,
    /// Hidden width of each projection head.
    pub head_hidden: usize,
    /// Output width of each projection head, before L2 normalization.
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            backbone: "mlp".to_string(),
            hidden: vec![256],
            feature_dim: 128,
            head_hidden: 256,
            embed_dim: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TclConfig {
    /// Ablation switch for the temporal loss. At least one of the two loss
    /// terms must stay enabled.
    pub enabled: bool,
    /// Frames per sampled sequence (the anchor plus seq_len - 1 offsets).
    pub seq_len: usize,
    /// Frame stride within a sequence.
    pub stride: usize,
    /// Triplet margin.
    pub margin: f64,
    pub weight_schedule: WeightSchedule,
}

impl Default for TclConfig {
    fn default() -> Self {
        TclConfig {
            enabled: true,
            seq_len: 9,
            stride: 2,
            margin: 0.03,
            weight_schedule: WeightSchedule::InvSqrt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CirConfig {
    /// Ablation switch for the reconstruction loss. At least one of the two
    /// loss terms must stay enabled.
    pub enabled: bool,
    /// Query frames sampled per video per step.
    pub frames_per_video: usize,
    /// Memory queue capacity.
    pub memory_size: usize,
    /// Share of the filled queue that becomes the dictionary at each step;
    /// the remainder serves as negatives.
    pub dict_fraction: f64,
    /// Softmax temperature for both the reconstruction coefficients and the
    /// contrastive term.
    pub temperature: f64,
    /// The queue is treated as warm once a split would leave at least this
    /// many negatives. Until then the loss is zero and entries still enqueue.
    pub min_negatives: usize,
    /// EMA coefficient for the target encoder.
    pub momentum: f64,
    /// Score the reconstruction against the negatives themselves in the
    /// denominator instead of the query's own dictionary scores. Off by
    /// default; kept for comparison runs.
    pub eq4_printed_variant: bool,
    /// Drop queue entries recorded from the query's own video before forming
    /// its dictionary and negatives. Off by default. Matters when the queue
    /// is small relative to the per-video enqueue rate: a handful of own-video
    /// keys can otherwise dominate the reconstruction softmax and turn the
    /// loss into video re-identification.
    pub exclude_same_video: bool,
}

impl Default for CirConfig {
    fn default() -> Self {
        CirConfig {
            enabled: true,
            frames_per_video: 2,
            memory_size: 65536,
            dict_fraction: 0.5,
            temperature: 0.07,
            min_negatives: 256,
            momentum: 0.999,
            eq4_printed_variant: false,
            exclude_same_video: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Rotation is drawn uniformly from [-max_rotation_deg, max_rotation_deg].
    pub max_rotation_deg: f64,
    pub hflip_prob: f64,
    /// Random crop side length as a fraction of the source, drawn from
    /// [min_crop_scale, 1]; the crop is resized back to the input size.
    pub min_crop_scale: f64,
    /// Additive brightness jitter, uniform in [-x, x].
    pub brightness: f64,
    /// Multiplicative contrast jitter, uniform in [1-x, 1+x] around the mean.
    pub contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_rotation_deg: 10.0,
            hflip_prob: 0.5,
            min_crop_scale: 0.8,
            brightness: 0.2,
            contrast: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Videos per optimization step. Each contributes one frame sequence and
    /// `cir.frames_per_video` query frames.
    pub batch_videos: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// SGD momentum.
    pub momentum: f64,
    /// Weight of the reconstruction loss in the total.
    pub beta: f64,
    /// Steps between metric lines in metrics.jsonl.
    pub log_every: usize,
    /// Epochs between intermediate checkpoints; 0 writes only the final one.
    /// Checkpoints land on epoch boundaries, where resume is bit-exact.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_videos: 16,
            lr: 0.001,
            lr_schedule: LrSchedule::Constant,
            momentum: 0.9,
            beta: 0.1,
            log_every: 10,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Subject-independent cross-validation folds.
    pub folds: usize,
    /// Decision threshold on the sigmoid output.
    pub threshold: f64,
    /// Positive-class weight is neg/pos per label, capped here.
    pub pos_weight_cap: f64,
    /// Update the frozen backbone's batch-norm layers (affine parameters and
    /// running statistics) during probing; everything else stays fixed.
    pub update_backbone_bn: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 10,
            lr: 0.01,
            batch_size: 64,
            folds: 3,
            threshold: 0.5,
            pos_weight_cap: 100.0,
            update_backbone_bn: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub subjects: usize,
    pub videos_per_subject: usize,
    pub frames_per_video: usize,
    /// Rendered side length in pixels (square, grayscale).
    pub image_size: usize,
    /// Latent activation dimensions; each maps to one binary label.
    pub latent_dims: usize,
    /// Mean-reversion rate of the latent trajectories, per frame.
    pub reversion: f64,
    /// Per-frame noise scale of the latent trajectories.
    pub drive: f64,
    /// Probability per idle frame that a latent starts an activation pulse.
    pub event_prob: f64,
    /// Mean pulse duration in frames; the latent's target holds high for the
    /// drawn span, then falls back to baseline. Activations are episodes, not
    /// level switches, so a window can watch one rise and fade again.
    pub pulse_len: f64,
    /// Pixel noise standard deviation.
    pub pixel_noise: f64,
    /// Amplitude of the per-subject identity texture.
    pub identity_strength: f64,
    /// Amplitude of each activation blob pair.
    pub activation_strength: f64,
    /// A latent above this value labels the frame positive for that unit.
    pub label_threshold: f64,
    /// Probability that a video gets one recording gap in its frame index.
    pub gap_prob: f64,
    pub fps: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            subjects: 8,
            videos_per_subject: 6,
            frames_per_video: 120,
            image_size: 16,
            latent_dims: 4,
            reversion: 0.25,
            drive: 0.08,
            event_prob: 0.05,
            pulse_len: 8.0,
            pixel_noise: 0.02,
            identity_strength: 0.35,
            activation_strength: 0.30,
            label_threshold: 0.5,
            gap_prob: 0.0,
            fps: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub tcl: TclConfig,
    pub cir: CirConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub synth: SynthConfig,
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| ClpError::io(path, e))?;
        let cfg: Config = serde_json::from_str(&text).map_err(|e| ClpError::Config(format!(
            "{}: {e}",
            path.display()
        )))?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|e| ClpError::io(path, e))
    }

    /// Apply `key=value` overrides with dotted keys. Values are parsed as
    /// JSON when possible so `cir.temperature=0.1`, `train.epochs=3`,
    /// `encoder.hidden=[64,64]` and `data.root=corpus` all work.
    pub fn apply_overrides(&mut self, pairs: &[(String, String)]) -> Result<()> {
        if pairs.is_empty() {
            return Ok(());
        }
        fn set_path(
            node: &mut serde_json::Value,
            segments: &[&str],
            key: &str,
            value: serde_json::Value,
        ) -> Result<()> {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| ClpError::Config(format!("override {key}: path enters a non-section")))?;
            match segments {
                [] => Err(ClpError::Config(format!("override {key}: empty path"))),
                [leaf] => {
                    if !obj.contains_key(*leaf) {
                        return Err(ClpError::Config(format!("override {key}: no such field")));
                    }
                    obj.insert((*leaf).to_string(), value);
                    Ok(())
                }
                [head, rest @ ..] => {
                    let child = obj.get_mut(*head).ok_or_else(|| {
                        ClpError::Config(format!("override {key}: no such section {head}"))
                    })?;
                    set_path(child, rest, key, value)
                }
            }
        }

        let mut root = serde_json::to_value(&*self).expect("config serializes");
        for (key, raw) in pairs {
            let value: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
            let segments: Vec<&str> = key.split('.').collect();
            set_path(&mut root, &segments, key, value)?;
        }
        *self = serde_json::from_value(root)
            .map_err(|e| ClpError::Config(format!("override produced invalid config: {e}")))?;
        Ok(())
    }

    /// Adopt `CLP_SEED` from the environment. Called before explicit seed
    /// overrides so the command line still wins.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var("CLP_SEED") {
            self.seed = raw.trim().parse().map_err(|_| {
                ClpError::Config(format!("CLP_SEED must be an unsigned integer, got {raw:?}"))
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ClpError::Config(msg));
        if !self.tcl.enabled && !self.cir.enabled {
            return fail(
                "both loss terms disabled; a run with neither the temporal nor the \
                 reconstruction loss is vacuous"
                    .into(),
            );
        }
        if self.encoder.backbone != "mlp" {
            return fail(format!(
                "encoder.backbone {:?} is not available; this build provides \"mlp\"",
                self.encoder.backbone
            ));
        }
        if self.data.input_size == 0 {
            return fail("data.input_size must be positive".into());
        }
        if !matches!(self.data.channels, 1 | 3) {
            return fail(format!("data.channels must be 1 or 3, got {}", self.data.channels));
        }
        if self.encoder.feature_dim == 0 || self.encoder.embed_dim == 0 {
            return fail("encoder dims must be positive".into());
        }
        if self.tcl.seq_len < 3 {
            return fail(format!(
                "tcl.seq_len must be at least 3 (anchor, positive, negative), got {}",
                self.tcl.seq_len
            ));
        }
        if self.tcl.stride == 0 {
            return fail("tcl.stride must be positive".into());
        }
        if !(self.tcl.margin > 0.0 && self.tcl.margin.is_finite()) {
            return fail(format!("tcl.margin must be positive and finite, got {}", self.tcl.margin));
        }
        if self.cir.frames_per_video == 0 {
            return fail("cir.frames_per_video must be positive".into());
        }
        if self.cir.memory_size < 4 {
            return fail(format!("cir.memory_size must be at least 4, got {}", self.cir.memory_size));
        }
        if !(self.cir.dict_fraction > 0.0 && self.cir.dict_fraction < 1.0) {
            return fail(format!(
                "cir.dict_fraction must lie strictly between 0 and 1, got {}",
                self.cir.dict_fraction
            ));
        }
        if !(self.cir.temperature > 0.0 && self.cir.temperature.is_finite()) {
            return fail(format!(
                "cir.temperature must be positive and finite, got {}",
                self.cir.temperature
            ));
        }
        if self.cir.min_negatives == 0 {
            return fail("cir.min_negatives must be positive".into());
        }
        let full_dict = (self.cir.memory_size as f64 * self.cir.dict_fraction).floor() as usize;
        if self.cir.memory_size - full_dict < self.cir.min_negatives {
            return fail(format!(
                "a full queue of {} split at {} leaves fewer than min_negatives = {} negatives; \
                 the queue could never warm up",
                self.cir.memory_size, self.cir.dict_fraction, self.cir.min_negatives
            ));
        }
        if !(0.0..=1.0).contains(&self.cir.momentum) {
            return fail(format!("cir.momentum must lie in [0, 1], got {}", self.cir.momentum));
        }
        if !(0.0..=1.0).contains(&self.augment.hflip_prob) {
            return fail(format!("augment.hflip_prob must lie in [0, 1], got {}", self.augment.hflip_prob));
        }
        if !(self.augment.min_crop_scale > 0.0 && self.augment.min_crop_scale <= 1.0) {
            return fail(format!(
                "augment.min_crop_scale must lie in (0, 1], got {}",
                self.augment.min_crop_scale
            ));
        }
        if self.train.batch_videos == 0 {
            return fail("train.batch_videos must be positive".into());
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return fail(format!("train.lr must be positive and finite, got {}", self.train.lr));
        }
        if !(self.train.beta >= 0.0 && self.train.beta.is_finite()) {
            return fail(format!("train.beta must be nonnegative and finite, got {}", self.train.beta));
        }
        if self.probe.folds < 2 {
            return fail(format!("probe.folds must be at least 2, got {}", self.probe.folds));
        }
        if !(self.probe.threshold > 0.0 && self.probe.threshold < 1.0) {
            return fail(format!(
                "probe.threshold must lie strictly between 0 and 1, got {}",
                self.probe.threshold
            ));
        }
        if self.probe.pos_weight_cap < 1.0 {
            return fail(format!(
                "probe.pos_weight_cap must be at least 1, got {}",
                self.probe.pos_weight_cap
            ));
        }
        if self.synth.latent_dims == 0 {
            return fail("synth.latent_dims must be positive".into());
        }
        if self.synth.image_size < 4 {
            return fail(format!("synth.image_size must be at least 4, got {}", self.synth.image_size));
        }
        if !(0.0..=1.0).contains(&self.synth.gap_prob) {
            return fail(format!("synth.gap_prob must lie in [0, 1], got {}", self.synth.gap_prob));
        }
        // A full sequence must fit in a gap-free video for pretraining to
        // have any material; checked against the corpus at load time, not
        // here, since manifests carry the actual lengths.
        Ok(())
    }
}

/// Default seed used when neither the config, CLP_SEED, nor an override
/// provides one.
impl Config {
    pub const DEFAULT_SEED: u64 = 17;
}
