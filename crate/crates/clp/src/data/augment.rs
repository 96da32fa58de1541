//! Stochastic frame augmentation. A draw captures every random choice up
//! front so the same geometry can be applied to all frames of a sequence;
//! applying a draw is then deterministic.
//!
//! Order: rotate, horizontal flip, random crop, resize to the input size,
//! brightness and contrast jitter, clip to [0, 1]. The photometric-only
//! draw keeps the geometry fixed; it produces the key view, which must stay
//! spatially aligned with what the target encoder should treat as the same
//! face.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::AugmentConfig;
use crate::image::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraw {
    pub rotation_deg: f64,
    pub flip: bool,
    /// Crop side as a fraction of the shorter source side.
    pub crop_scale: f64,
    /// Fractional crop anchor within the slack left by the crop, in [0, 1].
    pub crop_y: f64,
    pub crop_x: f64,
    /// Additive brightness shift.
    pub brightness: f64,
    /// Multiplicative contrast factor around the image mean.
    pub contrast: f64,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        AugmentDraw {
            rotation_deg: 0.0,
            flip: false,
            crop_scale: 1.0,
            crop_y: 0.0,
            crop_x: 0.0,
            brightness: 0.0,
            contrast: 1.0,
        }
    }
}

/// Full policy: geometry plus photometrics.
pub fn draw_full(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> AugmentDraw {
    AugmentDraw {
        rotation_deg: rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg),
        flip: rng.gen_bool(cfg.hflip_prob),
        crop_scale: rng.gen_range(cfg.min_crop_scale..=1.0),
        crop_y: rng.gen_range(0.0..=1.0),
        crop_x: rng.gen_range(0.0..=1.0),
        brightness: rng.gen_range(-cfg.brightness..=cfg.brightness),
        contrast: rng.gen_range(1.0 - cfg.contrast..=1.0 + cfg.contrast),
    }
}

/// Jitter only; geometry stays the identity.
pub fn draw_photometric(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> AugmentDraw {
    AugmentDraw {
        brightness: rng.gen_range(-cfg.brightness..=cfg.brightness),
        contrast: rng.gen_range(1.0 - cfg.contrast..=1.0 + cfg.contrast),
        ..AugmentDraw::identity()
    }
}

pub fn apply(img: &Image, draw: &AugmentDraw, out_size: usize) -> Image {
    let mut cur = img.rotate(draw.rotation_deg);
    if draw.flip {
        cur = cur.flip_horizontal();
    }
    let short = cur.height.min(cur.width);
    let side = ((short as f64 * draw.crop_scale).round() as usize).clamp(1, short);
    let top = ((cur.height - side) as f64 * draw.crop_y).round() as usize;
    let left = ((cur.width - side) as f64 * draw.crop_x).round() as usize;
    cur = cur
        .crop(top, left, side, side)
        .expect("crop stays inside by construction");
    cur = cur.resize_bilinear(out_size, out_size);
    // Skip the photometric arithmetic entirely when it is the identity;
    // (v - m) * 1 + m is not bit-exact in floating point.
    if draw.contrast != 1.0 || draw.brightness != 0.0 {
        let mean = cur.mean();
        for v in &mut cur.data {
            *v = (*v - mean) * draw.contrast + mean + draw.brightness;
        }
        cur.clip_unit();
    }
    cur
}
