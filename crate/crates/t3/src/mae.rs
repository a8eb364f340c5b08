//! Pre-training stage I: random patch masking with per-patch-normalized
//! reconstruction targets and an L2 loss over masked positions only.
//!
//! Masking is shuffle-based: a fresh uniform permutation per sample selects
//! `round(T * ratio)` patches to hide. The encoder and trunk see only CLS
//! plus the visible patches; mask tokens enter at the decoder.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, T3Error};
use crate::model::T3Model;
use crate::tensor::{Elem, Tensor};
use crate::vit::patchify;

/// Per-sample boolean masks over patch positions; identical masked count
/// across the batch.
#[derive(Debug, Clone)]
pub struct MaskPlan {
    pub masked: Vec<Vec<bool>>,
    pub ratio: f64,
    pub seed: u64,
    tokens: usize,
}

impl MaskPlan {
    pub fn batch(&self) -> usize {
        self.masked.len()
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Masked patches per sample.
    pub fn masked_count(&self) -> usize {
        self.masked[0].iter().filter(|&&m| m).count()
    }

    pub fn visible_indices(&self) -> Vec<Vec<usize>> {
        self.masked
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter_map(|(i, &m)| (!m).then_some(i))
                    .collect()
            })
            .collect()
    }

    pub fn masked_indices(&self) -> Vec<Vec<usize>> {
        self.masked
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter_map(|(i, &m)| m.then_some(i))
                    .collect()
            })
            .collect()
    }
}

/// Build a mask plan for `batch` samples over `tokens` patch positions.
pub fn make_mask(batch: usize, tokens: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(T3Error::Config(format!(
            "mask ratio must lie in [0, 1), got {ratio}"
        )));
    }
    if batch == 0 {
        return Err(T3Error::Config("mask plan for an empty batch".into()));
    }
    let count = (tokens as f64 * ratio).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = Vec::with_capacity(batch);
    for _ in 0..batch {
        let mut perm: Vec<usize> = (0..tokens).collect();
        perm.shuffle(&mut rng);
        let mut row = vec![false; tokens];
        for &p in &perm[..count] {
            row[p] = true;
        }
        masked.push(row);
    }
    Ok(MaskPlan {
        masked,
        ratio,
        seed,
        tokens,
    })
}

/// Standardize each patch vector to zero mean / unit variance (eps 1e-6
/// inside the square root). Returns a detached target tensor.
pub fn normalize_targets<E: Elem>(patches: &Tensor<E>) -> Tensor<E> {
    let shape = patches.shape();
    assert_eq!(shape.len(), 3, "normalize_targets expects [B, T, P], got {shape:?}");
    let p = shape[2];
    let eps = E::from_f64(1e-6);
    let data = patches.with_data(|d| {
        let mut out = Vec::with_capacity(d.len());
        for patch in d.chunks(p) {
            let inv_p = E::from_f64(1.0 / p as f64);
            let mean = patch.iter().fold(E::zero(), |a, &v| a + v) * inv_p;
            let var = patch
                .iter()
                .fold(E::zero(), |a, &v| a + (v - mean) * (v - mean))
                * inv_p;
            let inv_std = E::one() / (var + eps).sqrt();
            out.extend(patch.iter().map(|&v| (v - mean) * inv_std));
        }
        out
    });
    Tensor::from_vec(data, &shape)
}

/// Mean squared error over masked patches only, averaged over the masked
/// count and then the batch. Exactly invariant to unmasked predictions.
pub fn mae_loss<E: Elem>(
    pred: &Tensor<E>,
    target_norm: &Tensor<E>,
    plan: &MaskPlan,
) -> Result<Tensor<E>> {
    let shape = pred.shape();
    assert_eq!(
        shape,
        target_norm.shape(),
        "prediction and target shapes disagree"
    );
    let (b, t) = (shape[0], shape[1]);
    if b != plan.batch() || t != plan.tokens() {
        return Err(T3Error::Config(format!(
            "mask plan covers {}x{} but predictions are {b}x{t}",
            plan.batch(),
            plan.tokens()
        )));
    }
    let count = plan.masked_count();
    if count == 0 {
        return Err(T3Error::Config(
            "mae loss undefined with zero masked patches".into(),
        ));
    }
    let mask_data: Vec<E> = plan
        .masked
        .iter()
        .flatten()
        .map(|&m| if m { E::one() } else { E::zero() })
        .collect();
    let mask = Tensor::from_vec(mask_data, &[b, t]);
    let diff = pred.sub(target_norm);
    let per_patch = diff.mul(&diff).mean_trailing(1, false);
    let masked_sum = per_patch.mul(&mask).sum_all();
    Ok(masked_sum.scale(1.0 / (b * count) as f64))
}

/// One stage-I forward: mask, encode visible, decode with mask tokens, and
/// score against patch-normalized targets. Returns the loss tensor (still
/// attached to the graph) and the plan used.
pub fn mae_forward_loss<E: Elem>(
    model: &T3Model<E>,
    sensor: &str,
    task: &str,
    images: &Tensor<E>,
    ratio: f64,
    seed: u64,
) -> Result<(Tensor<E>, MaskPlan)> {
    let b = images.shape()[0];
    let enc_cfg = model.size.encoder_cfg();
    let plan = make_mask(b, enc_cfg.tokens(), ratio, seed)?;
    if plan.masked_count() == 0 {
        return Err(T3Error::Config(
            "mae step needs at least one masked patch; raise the ratio".into(),
        ));
    }
    let visible = plan.visible_indices();
    let pred = model.forward_masked(sensor, task, images, &visible)?;
    let targets = crate::tensor::no_grad(|| normalize_targets(&patchify(images, enc_cfg.patch_size)));
    let loss = mae_loss(&pred, &targets, &plan)?;
    Ok((loss, plan))
}
