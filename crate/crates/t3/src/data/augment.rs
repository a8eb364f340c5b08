//! Image augmentation: resize + crop, color jitter, optional flips, and
//! per-channel standardization to [-1, 1].
//!
//! Spatial augmentation (random crop and flips) is disabled for pose tasks,
//! which depend on absolute spatial structure; color jitter applies to every
//! task.

use image::imageops::FilterType;
use image::RgbImage;
use rand::Rng;

use crate::rng::rng_from;
use crate::tensor::Tensor;

pub const RESIZE_TO: u32 = 256;
pub const CROP_TO: u32 = 224;

#[derive(Debug, Clone, Copy)]
pub struct AugmentCfg {
    /// Random crop offsets and horizontal/vertical flips.
    pub spatial: bool,
    /// Brightness/contrast/saturation jitter magnitude (0 disables).
    pub jitter: f64,
}

impl AugmentCfg {
    pub fn train(pose_task: bool) -> Self {
        AugmentCfg {
            spatial: !pose_task,
            jitter: 0.2,
        }
    }

    pub fn eval() -> Self {
        AugmentCfg {
            spatial: false,
            jitter: 0.0,
        }
    }
}

/// Decode-side transform: resize to 256, crop to 224 (random when spatial
/// augmentation is on, centered otherwise), jitter, flips, then standardize
/// with fixed constants (0.5, 0.5). Deterministic for a fixed seed.
pub fn augment(image: &RgbImage, cfg: AugmentCfg, seed: u64) -> Tensor<f32> {
    let mut rng = rng_from(seed, "augment");
    let resized = if image.dimensions() == (RESIZE_TO, RESIZE_TO) {
        image.clone()
    } else {
        image::imageops::resize(image, RESIZE_TO, RESIZE_TO, FilterType::Triangle)
    };

    let max_off = RESIZE_TO - CROP_TO;
    let (ox, oy) = if cfg.spatial {
        (rng.gen_range(0..=max_off), rng.gen_range(0..=max_off))
    } else {
        (max_off / 2, max_off / 2)
    };
    let (flip_h, flip_v) = if cfg.spatial {
        (rng.gen_bool(0.5), rng.gen_bool(0.5))
    } else {
        (false, false)
    };
    let (fb, fc, fs) = if cfg.jitter > 0.0 {
        let j = cfg.jitter;
        (
            rng.gen_range(1.0 - j..1.0 + j),
            rng.gen_range(1.0 - j..1.0 + j),
            rng.gen_range(1.0 - j..1.0 + j),
        )
    } else {
        (1.0, 1.0, 1.0)
    };

    let side = CROP_TO as usize;
    let mut rgb = vec![0f64; 3 * side * side];
    let mut gray_mean = 0.0f64;
    for y in 0..side {
        for x in 0..side {
            let (mut sx, mut sy) = (ox as usize + x, oy as usize + y);
            if flip_h {
                sx = ox as usize + (side - 1 - x);
            }
            if flip_v {
                sy = oy as usize + (side - 1 - y);
            }
            let p = resized.get_pixel(sx as u32, sy as u32).0;
            for c in 0..3 {
                rgb[c * side * side + y * side + x] = p[c] as f64 / 255.0;
            }
            gray_mean +=
                0.299 * p[0] as f64 / 255.0 + 0.587 * p[1] as f64 / 255.0 + 0.114 * p[2] as f64 / 255.0;
        }
    }
    gray_mean /= (side * side) as f64;

    let mut out = vec![0f32; 3 * side * side];
    for i in 0..side * side {
        let r = rgb[i];
        let g = rgb[side * side + i];
        let b = rgb[2 * side * side + i];
        let gray = 0.299 * r + 0.587 * g + 0.114 * b;
        for (c, v) in [r, g, b].into_iter().enumerate() {
            let v = v * fb; // brightness
            let v = (v - gray_mean) * fc + gray_mean; // contrast about the image mean
            let v = gray + (v - gray) * fs; // saturation toward per-pixel gray
            let v = v.clamp(0.0, 1.0);
            out[c * side * side + i] = ((v - 0.5) / 0.5) as f32;
        }
    }
    Tensor::from_vec(out, &[3, side, side])
}
