//! Synthetic face-like corpus with known latent structure.
//!
//! Each subject gets a fixed low-frequency identity texture. On top of it,
//! K latent activation channels each light up a bilaterally symmetric pair
//! of blobs at fixed, subject-independent locations; channel k's blob pair
//! brightens with its latent value. Latents follow smooth mean-reverting
//! trajectories with occasional retargeting events, so nearby frames look
//! alike and transitions span several frames. Binary labels threshold the
//! latents.
//!
//! The design mirrors what the training method needs to prove: identity is
//! the dominant pixel signal (so raw pixels transfer poorly across
//! subjects), activations are shared across subjects (so a good
//! representation transfers), appearance changes smoothly in time (so
//! temporal ordering is learnable), and horizontal flips preserve both
//! identity and labels (so the augmentations are label-safe).

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::SynthConfig;
use crate::data::labels::LabelRecord;
use crate::data::manifest::VideoManifest;
use crate::error::{ClpError, Result};
use crate::image::Image;

/// Ground-truth latent state behind one rendered frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameState {
    pub image: PathBuf,
    pub video_id: String,
    pub subject_id: String,
    pub latents: Vec<f64>,
}

pub fn save_states(path: &Path, states: &[FrameState]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| ClpError::io(path, e))?;
    for s in states {
        let line = serde_json::to_string(s).expect("state serializes");
        writeln!(file, "{line}").map_err(|e| ClpError::io(path, e))?;
    }
    Ok(())
}

pub fn load_states(path: &Path) -> Result<Vec<FrameState>> {
    let file = std::fs::File::open(path).map_err(|e| ClpError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ClpError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: FrameState = serde_json::from_str(&line).map_err(|e| ClpError::Format {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(s);
    }
    if out.is_empty() {
        return Err(ClpError::Data(format!("{}: no frame states", path.display())));
    }
    Ok(out)
}

/// Everything `generate` decides, before any pixel hits the disk.
pub struct GeneratedCorpus {
    pub manifests: Vec<VideoManifest>,
    pub labels: Vec<LabelRecord>,
    pub states: Vec<FrameState>,
}

/// One blob pair per latent channel, mirrored about the vertical axis so a
/// horizontal flip maps each pattern onto itself exactly. Rows are spread
/// over the image height; locations are identical for every subject.
pub fn blob_patterns(size: usize, dims: usize) -> Vec<Image> {
    let sigma = size as f64 / 8.0;
    let center = (size as f64 - 1.0) / 2.0;
    let dx = 0.28 * (size as f64 - 1.0);
    (0..dims)
        .map(|k| {
            let cy = (k as f64 + 1.0) / (dims as f64 + 1.0) * (size as f64 - 1.0);
            let cx_l = center - dx;
            let cx_r = center + dx;
            let mut img = Image::zeros(size, size, 1);
            // Fill the left half and mirror it; flip symmetry must be
            // bit-exact, and mirrored subtraction is not.
            for y in 0..size {
                for x in 0..size.div_ceil(2) {
                    let bump = |cx: f64| {
                        let dy = y as f64 - cy;
                        let dxx = x as f64 - cx;
                        (-(dy * dy + dxx * dxx) / (2.0 * sigma * sigma)).exp()
                    };
                    let v = (bump(cx_l) + bump(cx_r)).min(1.0);
                    img.set(y, x, 0, v);
                    img.set(y, size - 1 - x, 0, v);
                }
            }
            img
        })
        .collect()
}

/// Smooth zero-mean identity texture, mirrored about the vertical axis.
pub fn identity_texture(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let mut img = Image::zeros(size, size, 1);
    // Random half, mirrored, then box-blurred into low-frequency structure.
    for y in 0..size {
        for x in 0..size.div_ceil(2) {
            let v = rng.gen_range(-1.0..1.0);
            img.set(y, x, 0, v);
            img.set(y, size - 1 - x, 0, v);
        }
    }
    for _ in 0..3 {
        let src = img.clone();
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = y as i64 + dy;
                        let xx = x as i64 + dx;
                        if yy >= 0 && yy < size as i64 && xx >= 0 && xx < size as i64 {
                            acc += src.get(yy as usize, xx as usize, 0);
                            n += 1.0;
                        }
                    }
                }
                img.set(y, x, 0, acc / n);
            }
        }
    }
    let mean = img.mean();
    let amp = img
        .data
        .iter()
        .map(|v| (v - mean).abs())
        .fold(0.0, f64::max)
        .max(1e-9);
    for v in &mut img.data {
        *v = (*v - mean) / amp;
    }
    img
}

const LATENT_LOW: f64 = 0.15;
const LATENT_HIGH: f64 = 0.85;
/// Per-step movement bound for a latent channel.
const MAX_STEP: f64 = 0.2;

/// Latent channels idle at a low baseline and fire episodic pulses: an onset
/// raises the channel's pull target to the high level for a drawn duration,
/// then the target falls back and the channel relaxes. A sampled window can
/// therefore watch an activation rise and fade within itself.
struct LatentWalk {
    x: Vec<f64>,
    /// Frames left at the high target; 0 means idle at baseline.
    pulse_left: Vec<usize>,
}

impl LatentWalk {
    fn draw_pulse(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> usize {
        let lo = (cfg.pulse_len * 0.5).max(1.0);
        let hi = (cfg.pulse_len * 1.5).max(lo + 1.0);
        rng.gen_range(lo..hi).round() as usize
    }

    fn init(dims: usize, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        // A fresh segment can open mid-pulse, at the event rate's duty cycle.
        let duty = (cfg.event_prob * cfg.pulse_len).min(0.5);
        let mut x = Vec::with_capacity(dims);
        let mut pulse_left = Vec::with_capacity(dims);
        for _ in 0..dims {
            if rng.gen_bool(duty) {
                x.push((LATENT_HIGH + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0));
                pulse_left.push(Self::draw_pulse(cfg, rng).div_ceil(2));
            } else {
                x.push((LATENT_LOW + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0));
                pulse_left.push(0);
            }
        }
        LatentWalk { x, pulse_left }
    }

    fn step(&mut self, cfg: &SynthConfig, rng: &mut ChaCha8Rng) {
        for k in 0..self.x.len() {
            if self.pulse_left[k] > 0 {
                self.pulse_left[k] -= 1;
            } else if rng.gen_bool(cfg.event_prob) {
                self.pulse_left[k] = Self::draw_pulse(cfg, rng);
            }
            let target = if self.pulse_left[k] > 0 { LATENT_HIGH } else { LATENT_LOW };
            let noise = cfg.drive * rng.gen_range(-1.0..1.0);
            let delta = (cfg.reversion * (target - self.x[k]) + noise).clamp(-MAX_STEP, MAX_STEP);
            self.x[k] = (self.x[k] + delta).clamp(0.0, 1.0);
        }
    }
}

/// Latent trajectories for one video. A `restart_at` position re-randomizes
/// the walk, modeling the discontinuity a recording gap leaves behind.
pub fn latent_rollout(
    cfg: &SynthConfig,
    frames: usize,
    restart_at: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let mut walk = LatentWalk::init(cfg.latent_dims, cfg, rng);
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        if restart_at == Some(t) {
            walk = LatentWalk::init(cfg.latent_dims, cfg, rng);
        } else if t > 0 {
            walk.step(cfg, rng);
        }
        out.push(walk.x.clone());
    }
    out
}

/// Compose a frame: mid-gray, identity texture, activation blobs centered at
/// their half-activation level, pixel noise, clipped to [0, 1].
pub fn render_frame(
    texture: &Image,
    blobs: &[Image],
    latents: &[f64],
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Image {
    let size = texture.height;
    let mut img = Image::zeros(size, size, 1);
    for y in 0..size {
        for x in 0..size {
            let mut v = 0.5 + cfg.identity_strength * texture.get(y, x, 0);
            for (b, &xk) in blobs.iter().zip(latents) {
                v += cfg.activation_strength * (xk - 0.5) * b.get(y, x, 0);
            }
            v += cfg.pixel_noise * rng.gen_range(-1.0..1.0);
            img.set(y, x, 0, v);
        }
    }
    img.clip_unit();
    img
}

fn frame_path(video_id: &str, frame: usize) -> PathBuf {
    PathBuf::from(format!("frames/{video_id}/f{frame:04}.png"))
}

/// Build the whole corpus in memory. Returns the records plus the rendered
/// frames per video, parallel to the manifests.
pub fn build_corpus(cfg: &SynthConfig, seed: u64) -> Result<(GeneratedCorpus, Vec<Vec<Image>>)> {
    if cfg.frames_per_video < 2 {
        return Err(ClpError::Config(
            "synth.frames_per_video must be at least 2".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs = blob_patterns(cfg.image_size, cfg.latent_dims);
    let textures: Vec<Image> = (0..cfg.subjects)
        .map(|_| identity_texture(cfg.image_size, &mut rng))
        .collect();

    let mut manifests = Vec::new();
    let mut labels = Vec::new();
    let mut states = Vec::new();
    let mut videos = Vec::new();

    for (s, texture) in textures.iter().enumerate() {
        let subject_id = format!("s{s:02}");
        for v in 0..cfg.videos_per_subject {
            let video_id = format!("{subject_id}v{v:02}");
            let gap = if rng.gen_bool(cfg.gap_prob) {
                // Interior position, away from both ends so each side still
                // holds material.
                Some(rng.gen_range(cfg.frames_per_video / 4..=3 * cfg.frames_per_video / 4))
            } else {
                None
            };
            let rollout = latent_rollout(cfg, cfg.frames_per_video, gap, &mut rng);
            let mut frames = Vec::with_capacity(cfg.frames_per_video);
            let mut frame_paths = Vec::with_capacity(cfg.frames_per_video);
            for (t, latents) in rollout.iter().enumerate() {
                let img = render_frame(texture, &blobs, latents, cfg, &mut rng);
                let path = frame_path(&video_id, t);
                labels.push(LabelRecord {
                    image: path.clone(),
                    labels: latents
                        .iter()
                        .enumerate()
                        .map(|(k, &x)| (format!("au{k}"), Some(x >= cfg.label_threshold)))
                        .collect(),
                });
                states.push(FrameState {
                    image: path.clone(),
                    video_id: video_id.clone(),
                    subject_id: subject_id.clone(),
                    latents: latents.clone(),
                });
                frame_paths.push(path);
                frames.push(img);
            }
            manifests.push(VideoManifest {
                video_id,
                subject_id: subject_id.clone(),
                frames: frame_paths,
                gaps: gap.into_iter().collect(),
                fps: Some(cfg.fps),
            });
            videos.push(frames);
        }
    }
    Ok((
        GeneratedCorpus {
            manifests,
            labels,
            states,
        },
        videos,
    ))
}

/// Write a built corpus to `root`: PNG frames plus `manifests.jsonl`,
/// `labels.jsonl` and `states.jsonl`.
pub fn write_corpus(root: &Path, corpus: &GeneratedCorpus, videos: &[Vec<Image>]) -> Result<()> {
    for (m, frames) in corpus.manifests.iter().zip(videos) {
        for (path, img) in m.frames.iter().zip(frames) {
            let full = root.join(path);
            if let Some(dir) = full.parent() {
                std::fs::create_dir_all(dir).map_err(|e| ClpError::io(dir, e))?;
            }
            img.save_png(&full)?;
        }
    }
    crate::data::manifest::save_manifests(&root.join("manifests.jsonl"), &corpus.manifests)?;
    crate::data::labels::save_labels(&root.join("labels.jsonl"), &corpus.labels)?;
    save_states(&root.join("states.jsonl"), &corpus.states)?;
    Ok(())
}

/// Generate and persist a corpus in one call; the usual entry point.
pub fn generate(cfg: &SynthConfig, seed: u64, root: &Path) -> Result<GeneratedCorpus> {
    let (corpus, videos) = build_corpus(cfg, seed)?;
    write_corpus(root, &corpus, &videos)?;
    Ok(corpus)
}

/// Frame pairs from different subjects whose latent vectors nearly agree:
/// the probe set for measuring whether an embedding treats expression alike
/// across identities. Greedy and deterministic: frames are scanned in
/// corpus order and each may appear in at most one pair.
pub fn cross_identity_pairs(
    states: &[FrameState],
    max_latent_dist: f64,
    max_pairs: usize,
) -> Vec<(usize, usize)> {
    let mut used = vec![false; states.len()];
    let mut pairs = Vec::new();
    'outer: for i in 0..states.len() {
        if used[i] {
            continue;
        }
        for j in i + 1..states.len() {
            if used[j] || states[i].subject_id == states[j].subject_id {
                continue;
            }
            let d2: f64 = states[i]
                .latents
                .iter()
                .zip(&states[j].latents)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d2.sqrt() <= max_latent_dist {
                used[i] = true;
                used[j] = true;
                pairs.push((i, j));
                if pairs.len() >= max_pairs {
                    break 'outer;
                }
                break;
            }
        }
    }
    pairs
}
