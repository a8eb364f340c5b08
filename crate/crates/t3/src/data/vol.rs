//! Variance-of-Laplacian contact metric and the flat-image filter built on
//! it: sigma = sqrt(Var(Laplacian(I - I_flat))).

use image::RgbImage;

use crate::error::{Result, T3Error};
use super::ShardRecord;

/// Threshold that removes most no-contact frames.
pub const DEFAULT_VOL_THRESHOLD: f64 = 4.24;

fn to_gray(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|p| 0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64)
        .collect()
}

/// 4-neighbor Laplacian of `field`, interior pixels only (the zero-padding
/// border is excluded). Returns a (h-2) x (w-2) buffer.
pub fn laplacian_interior(field: &[f64], w: usize, h: usize) -> Vec<f64> {
    assert!(w >= 3 && h >= 3, "laplacian needs at least a 3x3 image");
    let mut out = Vec::with_capacity((w - 2) * (h - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = field[y * w + x];
            out.push(
                field[(y - 1) * w + x] + field[(y + 1) * w + x] + field[y * w + x - 1]
                    + field[y * w + x + 1]
                    - 4.0 * c,
            );
        }
    }
    out
}

/// Contact-content metric of `image` against the sensor's no-contact
/// reference frame.
pub fn vol_sigma(image: &RgbImage, flat_reference: &RgbImage) -> Result<f64> {
    if image.dimensions() != flat_reference.dimensions() {
        return Err(T3Error::Data(format!(
            "vol_sigma size mismatch: {:?} vs {:?}",
            image.dimensions(),
            flat_reference.dimensions()
        )));
    }
    let (w, h) = (image.width() as usize, image.height() as usize);
    let gi = to_gray(image);
    let gf = to_gray(flat_reference);
    let diff: Vec<f64> = gi.iter().zip(&gf).map(|(a, b)| a - b).collect();
    let lap = laplacian_interior(&diff, w, h);
    let n = lap.len() as f64;
    let mean = lap.iter().sum::<f64>() / n;
    let var = lap.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(var.sqrt())
}

/// Keep records whose sigma against the flat reference reaches `threshold`.
/// Returns the survivors and the number removed.
pub fn vol_filter(
    records: &[ShardRecord],
    flat_reference: &RgbImage,
    threshold: f64,
) -> Result<(Vec<ShardRecord>, usize)> {
    let mut kept = Vec::new();
    let mut removed = 0usize;
    for r in records {
        let img = r.decode_image()?;
        if vol_sigma(&img, flat_reference)? >= threshold {
            kept.push(r.clone());
        } else {
            removed += 1;
        }
    }
    Ok((kept, removed))
}
