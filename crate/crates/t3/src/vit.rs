//! Vision-transformer building blocks: patch embedding, multi-head
//! self-attention with optional weight capture, pre-norm transformer blocks,
//! and joint attention maps (per-layer products used as image masks).

use rand_chacha::ChaCha8Rng;

use crate::tensor::{Elem, Init, Tensor};

/// Stack geometry shared by encoders, the trunk, and the MAE decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: f64,
    pub patch_size: usize,
    pub image_size: usize,
    pub with_cls_token: bool,
}

impl ViTConfig {
    pub fn new(embed_dim: usize, heads: usize, layers: usize) -> Self {
        let cfg = ViTConfig {
            embed_dim,
            heads,
            layers,
            mlp_ratio: 4.0,
            patch_size: 16,
            image_size: 224,
            with_cls_token: true,
        };
        cfg.validate();
        cfg
    }

    pub fn validate(&self) {
        assert!(
            self.embed_dim % self.heads == 0,
            "embed dim {} not divisible by {} heads",
            self.embed_dim,
            self.heads
        );
        assert!(
            self.image_size % self.patch_size == 0,
            "image size {} not divisible by patch size {}",
            self.image_size,
            self.patch_size
        );
    }

    /// Patch token count (196 at the default 224/16 geometry).
    pub fn tokens(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    /// Flattened patch length (768 at the default geometry).
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

// ── patchify ────────────────────────────────────────────────────────────

/// Split `[B, 3, S, S]` images into flattened patches `[B, T, p*p*3]`.
/// Row i holds patch i in row-major patch order; within a row the layout is
/// (pixel row, pixel col, channel).
pub fn patchify<E: Elem>(images: &Tensor<E>, patch_size: usize) -> Tensor<E> {
    let s = images.shape();
    assert!(
        s.len() == 4 && s[1] == 3 && s[2] == s[3] && s[2] % patch_size == 0,
        "patchify expects [B, 3, S, S] with S divisible by {patch_size}, got {s:?}"
    );
    let (b, side) = (s[0], s[2]);
    let g = side / patch_size;
    let p = patch_size;
    let patch_dim = p * p * 3;
    let plane = side * side;
    let out_shape = vec![b, g * g, patch_dim];
    let fwd = images.with_data(|src| {
        let mut out = Vec::with_capacity(b * g * g * patch_dim);
        for bi in 0..b {
            let img = &src[bi * 3 * plane..(bi + 1) * 3 * plane];
            for pr in 0..g {
                for pc in 0..g {
                    for r in 0..p {
                        let row_base = (pr * p + r) * side + pc * p;
                        for c in 0..p {
                            let px = row_base + c;
                            out.push(img[px]);
                            out.push(img[plane + px]);
                            out.push(img[2 * plane + px]);
                        }
                    }
                }
            }
        }
        out
    });
    Tensor::make_output(
        "patchify",
        &[images],
        fwd,
        out_shape,
        Box::new(move |grad| {
            let mut dx = vec![E::zero(); b * 3 * plane];
            let mut cursor = 0;
            for bi in 0..b {
                let img = &mut dx[bi * 3 * plane..(bi + 1) * 3 * plane];
                for pr in 0..g {
                    for pc in 0..g {
                        for r in 0..p {
                            let row_base = (pr * p + r) * side + pc * p;
                            for c in 0..p {
                                let px = row_base + c;
                                img[px] = img[px] + grad[cursor];
                                img[plane + px] = img[plane + px] + grad[cursor + 1];
                                img[2 * plane + px] = img[2 * plane + px] + grad[cursor + 2];
                                cursor += 3;
                            }
                        }
                    }
                }
            }
            vec![Some(dx)]
        }),
    )
}

/// Inverse of [`patchify`].
pub fn unpatchify<E: Elem>(patches: &Tensor<E>, patch_size: usize, image_size: usize) -> Tensor<E> {
    let s = patches.shape();
    let g = image_size / patch_size;
    assert!(
        s.len() == 3 && s[1] == g * g && s[2] == patch_size * patch_size * 3,
        "unpatchify expects [B, {}, {}], got {s:?}",
        g * g,
        patch_size * patch_size * 3
    );
    let b = s[0];
    patches
        .reshape(&[b, g, g, patch_size, patch_size, 3])
        .permute(&[0, 5, 1, 3, 2, 4])
        .reshape(&[b, 3, image_size, image_size])
}

// ── primitive layers ────────────────────────────────────────────────────

pub struct Linear<E: Elem> {
    pub w: Tensor<E>,
    pub b: Tensor<E>,
}

impl<E: Elem> Linear<E> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: Tensor::init_with(&[d_in, d_out], Init::TruncNormal(0.02), rng).requires_grad(),
            b: Tensor::init_with(&[d_out], Init::Zeros, rng).requires_grad(),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Tensor<E> {
        x.matmul(&self.w).add(&self.b)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

pub struct LayerNorm<E: Elem> {
    pub gain: Tensor<E>,
    pub bias: Tensor<E>,
    pub eps: f64,
}

impl<E: Elem> LayerNorm<E> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Tensor::ones(&[dim]).requires_grad(),
            bias: Tensor::zeros(&[dim]).requires_grad(),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Tensor<E> {
        layer_norm(x, &self.gain, &self.bias, self.eps)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Normalize the last axis to zero mean / unit variance, then apply the
/// affine `gain`/`bias` (both shaped to the last axis).
pub fn layer_norm<E: Elem>(
    x: &Tensor<E>,
    gain: &Tensor<E>,
    bias: &Tensor<E>,
    eps: f64,
) -> Tensor<E> {
    let m = x.mean_trailing(1, true);
    let centered = x.sub(&m);
    let var = centered.mul(&centered).mean_trailing(1, true);
    let std = var.add_scalar(eps).sqrt_t();
    centered.div(&std).mul(gain).add(bias)
}

// ── attention ───────────────────────────────────────────────────────────

/// Captured attention weights: one `[B, H, T, T]` buffer per layer.
pub struct AttentionTrace<E: Elem> {
    layers: Vec<Vec<E>>,
    batch: usize,
    heads: usize,
    tokens: usize,
}

impl<E: Elem> AttentionTrace<E> {
    pub fn new(batch: usize, heads: usize, tokens: usize) -> Self {
        AttentionTrace {
            layers: Vec::new(),
            batch,
            heads,
            tokens,
        }
    }

    pub fn push_layer(&mut self, weights: Vec<E>) {
        assert_eq!(
            weights.len(),
            self.batch * self.heads * self.tokens * self.tokens,
            "attention trace layer has inconsistent dimensions"
        );
        self.layers.push(weights);
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.heads, self.tokens)
    }

    pub fn layer(&self, l: usize) -> &[E] {
        &self.layers[l]
    }

    /// Head-averaged product of all layer attention matrices for one sample,
    /// multiplied in layer order. Returns a `[T, T]` matrix.
    pub fn joint_product(&self, sample: usize) -> Vec<E> {
        assert!(!self.layers.is_empty(), "joint product of an empty trace");
        assert!(sample < self.batch, "sample {sample} beyond batch {}", self.batch);
        let t = self.tokens;
        let head_avg = |layer: &[E]| -> Vec<E> {
            let mut avg = vec![E::zero(); t * t];
            let inv_h = E::from_f64(1.0 / self.heads as f64);
            for h in 0..self.heads {
                let base = (sample * self.heads + h) * t * t;
                for (i, a) in avg.iter_mut().enumerate() {
                    *a = *a + layer[base + i] * inv_h;
                }
            }
            avg
        };
        let mut product = head_avg(&self.layers[0]);
        for layer in &self.layers[1..] {
            let next = head_avg(layer);
            let mut out = vec![E::zero(); t * t];
            for i in 0..t {
                for p in 0..t {
                    let a = product[i * t + p];
                    for j in 0..t {
                        out[i * t + j] = out[i * t + j] + a * next[p * t + j];
                    }
                }
            }
            product = out;
        }
        product
    }

    /// Joint map from the CLS row over patch tokens, min-max normalized to
    /// [0, 1] and returned row-major as a `side x side` grid. A constant
    /// (zero-range) map normalizes to all zeros.
    pub fn joint_map(&self, sample: usize) -> Vec<E> {
        let t = self.tokens;
        let patches = t - 1;
        let side = (patches as f64).sqrt() as usize;
        assert_eq!(
            side * side,
            patches,
            "joint map needs CLS + a square patch grid, got {t} tokens"
        );
        let product = self.joint_product(sample);
        let row: Vec<E> = (1..t).map(|j| product[j]).collect();
        let mut lo = row[0];
        let mut hi = row[0];
        for &v in &row {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = hi - lo;
        if range == E::zero() {
            return vec![E::zero(); patches];
        }
        row.iter().map(|&v| (v - lo) / range).collect()
    }
}

pub struct MultiHeadAttention<E: Elem> {
    pub wq: Linear<E>,
    pub wk: Linear<E>,
    pub wv: Linear<E>,
    pub wo: Linear<E>,
    heads: usize,
}

impl<E: Elem> MultiHeadAttention<E> {
    pub fn new(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            wq: Linear::new(dim, dim, rng),
            wk: Linear::new(dim, dim, rng),
            wv: Linear::new(dim, dim, rng),
            wo: Linear::new(dim, dim, rng),
            heads,
        }
    }

    /// Self-attention over `[B, T, D]`; optionally returns the softmaxed
    /// attention weights as raw `[B, H, T, T]` data.
    pub fn forward(&self, x: &Tensor<E>, capture: bool) -> (Tensor<E>, Option<Vec<E>>) {
        let s = x.shape();
        assert_eq!(s.len(), 3, "attention expects [B, T, D], got {s:?}");
        let (b, t, d) = (s[0], s[1], s[2]);
        let h = self.heads;
        let hd = d / h;
        let split = |y: Tensor<E>| y.reshape(&[b, t, h, hd]).permute(&[0, 2, 1, 3]);
        let q = split(self.wq.forward(x));
        let k = split(self.wk.forward(x));
        let v = split(self.wv.forward(x));
        let scale = 1.0 / (hd as f64).sqrt();
        let scores = q.matmul_nt(&k).scale(scale);
        let attn = scores.softmax(3);
        let captured = if capture { Some(attn.to_vec()) } else { None };
        let y = attn
            .matmul(&v)
            .permute(&[0, 2, 1, 3])
            .reshape(&[b, t, d]);
        (self.wo.forward(&y), captured)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.wq.named_params(&format!("{prefix}.wq"), out);
        self.wk.named_params(&format!("{prefix}.wk"), out);
        self.wv.named_params(&format!("{prefix}.wv"), out);
        self.wo.named_params(&format!("{prefix}.wo"), out);
    }
}

// ── transformer block and stacks ────────────────────────────────────────

/// Pre-norm residual block: `x + attn(ln(x))`, then `h + mlp(ln(h))` with a
/// gelu MLP of hidden width `mlp_ratio * D`.
pub struct TransformerBlock<E: Elem> {
    pub ln1: LayerNorm<E>,
    pub attn: MultiHeadAttention<E>,
    pub ln2: LayerNorm<E>,
    pub fc1: Linear<E>,
    pub fc2: Linear<E>,
}

impl<E: Elem> TransformerBlock<E> {
    pub fn new(dim: usize, heads: usize, mlp_ratio: f64, rng: &mut ChaCha8Rng) -> Self {
        let hidden = (dim as f64 * mlp_ratio) as usize;
        TransformerBlock {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, heads, rng),
            ln2: LayerNorm::new(dim),
            fc1: Linear::new(dim, hidden, rng),
            fc2: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<E>, capture: bool) -> (Tensor<E>, Option<Vec<E>>) {
        let (a, captured) = self.attn.forward(&self.ln1.forward(x), capture);
        let h = x.add(&a);
        let m = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&h)).gelu());
        (h.add(&m), captured)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.ln1.named_params(&format!("{prefix}.ln1"), out);
        self.attn.named_params(&format!("{prefix}.attn"), out);
        self.ln2.named_params(&format!("{prefix}.ln2"), out);
        self.fc1.named_params(&format!("{prefix}.fc1"), out);
        self.fc2.named_params(&format!("{prefix}.fc2"), out);
    }
}

/// A plain stack of transformer blocks (the trunk, and the body of encoders
/// and the reconstruction decoder).
pub struct BlockStack<E: Elem> {
    pub blocks: Vec<TransformerBlock<E>>,
    pub dim: usize,
    pub heads: usize,
}

impl<E: Elem> BlockStack<E> {
    pub fn new(dim: usize, heads: usize, layers: usize, mlp_ratio: f64, rng: &mut ChaCha8Rng) -> Self {
        BlockStack {
            blocks: (0..layers)
                .map(|_| TransformerBlock::new(dim, heads, mlp_ratio, rng))
                .collect(),
            dim,
            heads,
        }
    }

    pub fn forward(&self, x: &Tensor<E>, capture: bool) -> (Tensor<E>, Option<AttentionTrace<E>>) {
        let s = x.shape();
        let mut trace = capture.then(|| AttentionTrace::new(s[0], self.heads, s[1]));
        let mut h = x.clone();
        for block in &self.blocks {
            let (next, captured) = block.forward(&h, capture);
            h = next;
            if let (Some(tr), Some(w)) = (trace.as_mut(), captured) {
                tr.push_layer(w);
            }
        }
        (h, trace)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.named_params(&format!("{prefix}.block{i}"), out);
        }
    }
}

// ── the sensor-side encoder ─────────────────────────────────────────────

/// Patch projection + CLS token + learned positional embeddings + blocks.
pub struct PatchEncoder<E: Elem> {
    pub cfg: ViTConfig,
    pub patch_proj: Linear<E>,
    pub cls: Option<Tensor<E>>,
    pub pos: Tensor<E>,
    pub stack: BlockStack<E>,
}

impl<E: Elem> PatchEncoder<E> {
    pub fn new(cfg: ViTConfig, rng: &mut ChaCha8Rng) -> Self {
        cfg.validate();
        let d = cfg.embed_dim;
        let seq = cfg.tokens() + usize::from(cfg.with_cls_token);
        PatchEncoder {
            patch_proj: Linear::new(cfg.patch_dim(), d, rng),
            cls: cfg
                .with_cls_token
                .then(|| Tensor::init_with(&[d], Init::TruncNormal(0.02), rng).requires_grad()),
            pos: Tensor::init_with(&[seq, d], Init::TruncNormal(0.02), rng).requires_grad(),
            stack: BlockStack::new(d, cfg.heads, cfg.layers, cfg.mlp_ratio, rng),
            cfg,
        }
    }

    /// Project patches, prepend CLS when configured, add positional
    /// embeddings. `patches` is `[B, T, patch_dim]`.
    pub fn embed(&self, patches: &Tensor<E>) -> Tensor<E> {
        let s = patches.shape();
        assert_eq!(
            s[1],
            self.cfg.tokens(),
            "encoder expects {} patch tokens, got {:?}",
            self.cfg.tokens(),
            s
        );
        let b = s[0];
        let projected = self.patch_proj.forward(patches);
        let tokens = match &self.cls {
            Some(cls) => {
                let cls_tok = cls.expand_batch(b).reshape(&[b, 1, self.cfg.embed_dim]);
                Tensor::concat(&[&cls_tok, &projected], 1)
            }
            None => projected,
        };
        tokens.add(&self.pos)
    }

    /// Full forward: embed then run all blocks.
    pub fn forward(&self, patches: &Tensor<E>, capture: bool) -> (Tensor<E>, Option<AttentionTrace<E>>) {
        self.stack.forward(&self.embed(patches), capture)
    }

    /// Masked-autoencoding forward: embed all positions, then keep only the
    /// CLS token plus the listed visible patch rows before running blocks.
    pub fn forward_visible(&self, patches: &Tensor<E>, visible: &[Vec<usize>]) -> Tensor<E> {
        assert!(self.cfg.with_cls_token, "visible-only forward requires a CLS token");
        let embedded = self.embed(patches);
        let idx: Vec<Vec<usize>> = visible
            .iter()
            .map(|v| {
                let mut rows = Vec::with_capacity(v.len() + 1);
                rows.push(0usize);
                rows.extend(v.iter().map(|&p| p + 1));
                rows
            })
            .collect();
        let gathered = embedded.gather_rows(&idx);
        self.stack.forward(&gathered, false).0
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.patch_proj.named_params(&format!("{prefix}.patch_proj"), out);
        if let Some(cls) = &self.cls {
            out.push((format!("{prefix}.cls"), cls.clone()));
        }
        out.push((format!("{prefix}.pos"), self.pos.clone()));
        self.stack.named_params(&format!("{prefix}.stack"), out);
    }

    pub fn params(&self) -> Vec<Tensor<E>> {
        let mut named = Vec::new();
        self.named_params("enc", &mut named);
        named.into_iter().map(|(_, t)| t).collect()
    }
}

pub fn param_count<E: Elem>(named: &[(String, Tensor<E>)]) -> usize {
    named.iter().map(|(_, t)| t.numel()).sum()
}
