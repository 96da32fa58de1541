//! Corpus access: manifests, labels, frame storage, augmentation, and the
//! batch sampler that turns videos into training matrices.

pub mod augment;
pub mod labels;
pub mod manifest;

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{AugmentConfig, CirConfig, TclConfig};
use crate::error::{ClpError, Result};
use crate::image::Image;
use augment::{apply, draw_full, draw_photometric};
use manifest::VideoManifest;

/// All frames of a corpus held in memory, channel-converted once at load.
/// Sized for the corpora this toolkit targets; at 16x16 grayscale a thousand
/// frames cost a few megabytes.
pub struct FrameStore {
    videos: Vec<Vec<Image>>,
}

fn to_channels(img: Image, channels: usize) -> Image {
    if img.channels == channels {
        return img;
    }
    let mut out = Image::zeros(img.height, img.width, channels);
    for y in 0..img.height {
        for x in 0..img.width {
            match (img.channels, channels) {
                (1, 3) => {
                    let v = img.get(y, x, 0);
                    for c in 0..3 {
                        out.set(y, x, c, v);
                    }
                }
                (3, 1) => {
                    let v = (0..3).map(|c| img.get(y, x, c)).sum::<f64>() / 3.0;
                    out.set(y, x, 0, v);
                }
                _ => unreachable!("channel counts are validated to 1 or 3"),
            }
        }
    }
    out
}

impl FrameStore {
    pub fn load(root: &Path, manifests: &[VideoManifest], channels: usize) -> Result<FrameStore> {
        let mut videos = Vec::with_capacity(manifests.len());
        for m in manifests {
            let mut frames = Vec::with_capacity(m.frames.len());
            for f in &m.frames {
                let img = Image::load_png(&root.join(f))?;
                frames.push(to_channels(img, channels));
            }
            videos.push(frames);
        }
        Ok(FrameStore { videos })
    }

    /// Build directly from decoded images; tests and synthetic previews use
    /// this to skip the disk.
    pub fn from_images(videos: Vec<Vec<Image>>) -> FrameStore {
        FrameStore { videos }
    }

    pub fn frame(&self, video: usize, frame: usize) -> &Image {
        &self.videos[video][frame]
    }

    pub fn num_videos(&self) -> usize {
        self.videos.len()
    }
}

/// One optimization step's sampling decisions, before any pixel is touched.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    /// Indices into the manifest list.
    pub videos: Vec<usize>,
    /// Window start per video.
    pub starts: Vec<usize>,
    /// Query frame indices per video.
    pub query_frames: Vec<Vec<usize>>,
}

/// Materialized matrices for one step. Rows are video-major: the sequence
/// block holds `seq_len` consecutive rows per video, the query and key
/// blocks `frames_per_video` rows per video, aligned with
/// `query_video_ids`.
pub struct StepBatch {
    pub seq: Array2<f64>,
    pub queries: Array2<f64>,
    pub keys: Array2<f64>,
    pub query_video_ids: Vec<String>,
    pub videos_in_step: usize,
}

#[derive(Debug)]
pub struct Sampler {
    pub seq_len: usize,
    pub stride: usize,
    pub frames_per_video: usize,
    pub batch_videos: usize,
    /// Valid window starts per video; empty where the video is too short or
    /// too fragmented.
    starts: Vec<Vec<usize>>,
    eligible: Vec<usize>,
    video_frame_counts: Vec<usize>,
    video_ids: Vec<String>,
}

impl Sampler {
    pub fn new(
        manifests: &[VideoManifest],
        tcl: &TclConfig,
        cir: &CirConfig,
        batch_videos: usize,
    ) -> Result<Sampler> {
        let starts: Vec<Vec<usize>> = manifests
            .iter()
            .map(|m| m.valid_window_starts(tcl.seq_len, tcl.stride))
            .collect();
        let eligible: Vec<usize> = (0..manifests.len()).filter(|&i| !starts[i].is_empty()).collect();
        if eligible.is_empty() {
            let required = (tcl.seq_len - 1) * tcl.stride + 1;
            let available = manifests.iter().map(|m| m.frames.len()).max().unwrap_or(0);
            return Err(ClpError::NotEnoughFrames { required, available });
        }
        Ok(Sampler {
            seq_len: tcl.seq_len,
            stride: tcl.stride,
            frames_per_video: cir.frames_per_video,
            batch_videos,
            starts,
            eligible,
            video_frame_counts: manifests.iter().map(|m| m.frames.len()).collect(),
            video_ids: manifests.iter().map(|m| m.video_id.clone()).collect(),
        })
    }

    pub fn num_eligible(&self) -> usize {
        self.eligible.len()
    }

    /// Steps per epoch: whole batches over a shuffled video order, with one
    /// short step when fewer videos exist than the batch asks for.
    pub fn epoch_plan(&self, rng: &mut ChaCha8Rng) -> Vec<StepPlan> {
        let mut order = self.eligible.clone();
        order.shuffle(rng);
        let chunk = self.batch_videos.min(order.len());
        let mut plans = Vec::new();
        for group in order.chunks(chunk) {
            if group.len() < chunk {
                break;
            }
            let mut plan = StepPlan {
                videos: group.to_vec(),
                starts: Vec::with_capacity(group.len()),
                query_frames: Vec::with_capacity(group.len()),
            };
            for &v in group {
                let starts = &self.starts[v];
                plan.starts.push(starts[rng.gen_range(0..starts.len())]);
                let n_frames = self.video_len(v);
                let qf = if n_frames >= self.frames_per_video {
                    rand::seq::index::sample(rng, n_frames, self.frames_per_video).into_vec()
                } else {
                    (0..self.frames_per_video)
                        .map(|_| rng.gen_range(0..n_frames))
                        .collect()
                };
                plan.query_frames.push(qf);
            }
            plans.push(plan);
        }
        plans
    }

    fn video_len(&self, video: usize) -> usize {
        self.video_frame_counts[video]
    }

    /// Turn a plan into matrices. One full-policy draw covers a video's
    /// whole sequence, so geometry stays consistent within the window; each
    /// query frame gets its own full-policy view and a photometric-only key
    /// view of the same frame.
    pub fn materialize(
        &self,
        plan: &StepPlan,
        store: &FrameStore,
        aug: &AugmentConfig,
        input_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> StepBatch {
        let b = plan.videos.len();
        let dim_of = |img: &Image| img.data.len();
        let probe = apply(store.frame(plan.videos[0], 0), &augment::AugmentDraw::identity(), input_size);
        let d = dim_of(&probe);

        let mut seq = Array2::zeros((b * self.seq_len, d));
        let mut queries = Array2::zeros((b * self.frames_per_video, d));
        let mut keys = Array2::zeros((b * self.frames_per_video, d));
        let mut query_video_ids = Vec::with_capacity(b * self.frames_per_video);

        for (bi, ((&v, &start), qf)) in plan
            .videos
            .iter()
            .zip(&plan.starts)
            .zip(&plan.query_frames)
            .enumerate()
        {
            let seq_draw = draw_full(aug, rng);
            for (si, &fi) in VideoManifest::window_indices(start, self.seq_len, self.stride)
                .iter()
                .enumerate()
            {
                let img = apply(store.frame(v, fi), &seq_draw, input_size);
                seq.row_mut(bi * self.seq_len + si)
                    .iter_mut()
                    .zip(&img.data)
                    .for_each(|(o, p)| *o = *p);
            }
            for (qi, &fi) in qf.iter().enumerate() {
                let q_draw = draw_full(aug, rng);
                let k_draw = draw_photometric(aug, rng);
                let q_img = apply(store.frame(v, fi), &q_draw, input_size);
                let k_img = apply(store.frame(v, fi), &k_draw, input_size);
                let row = bi * self.frames_per_video + qi;
                queries
                    .row_mut(row)
                    .iter_mut()
                    .zip(&q_img.data)
                    .for_each(|(o, p)| *o = *p);
                keys.row_mut(row)
                    .iter_mut()
                    .zip(&k_img.data)
                    .for_each(|(o, p)| *o = *p);
                query_video_ids.push(self.video_ids[v].clone());
            }
        }
        StepBatch {
            seq,
            queries,
            keys,
            query_video_ids,
            videos_in_step: b,
        }
    }
}
