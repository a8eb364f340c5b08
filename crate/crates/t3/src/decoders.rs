//! Task-specific heads: MLP classifiers and regressors fed by the CLS token,
//! a ResNet-style pose decoder fed by the patch-token map, and the
//! transformer decoder that reconstructs masked patches.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{Elem, Init, Tensor};
use crate::vit::{BlockStack, Linear, ViTConfig};

/// What a decoder predicts and how it is trained.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// Masked-patch reconstruction (pre-training stage I).
    MaeRecon,
    /// Cross-entropy classification from the CLS token.
    Classifier { num_classes: usize },
    /// Scalar regression from the CLS token (variance-of-Laplacian).
    VolRegressor,
    /// Pose regression from the reshaped patch-token map.
    Pose { dof: usize },
}

impl TaskKind {
    /// Number of tactile images a batch for this task carries.
    pub fn default_arity(&self) -> usize {
        match self {
            TaskKind::Pose { .. } => 2,
            _ => 1,
        }
    }

    pub fn arity_valid(&self, arity: usize) -> bool {
        match self {
            TaskKind::Pose { .. } => arity == 1 || arity == 2,
            _ => arity == 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DecoderSpec {
    #[serde(flatten)]
    pub kind: TaskKind,
    pub input_arity: usize,
}

impl DecoderSpec {
    pub fn new(kind: TaskKind) -> Self {
        let input_arity = kind.default_arity();
        DecoderSpec { kind, input_arity }
    }
}

// ── MLP heads ───────────────────────────────────────────────────────────

/// Fully connected head with gelu between hidden layers and a linear output.
pub struct MlpHead<E: Elem> {
    pub layers: Vec<Linear<E>>,
}

impl<E: Elem> MlpHead<E> {
    pub fn new(d_in: usize, hidden: &[usize], d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut dims = vec![d_in];
        dims.extend_from_slice(hidden);
        dims.push(d_out);
        let layers = dims
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        MlpHead { layers }
    }

    /// The classifier/regressor shape used by every CLS-token head.
    pub fn cls_head(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::new(d_in, &[256, 128, 64], d_out, rng)
    }

    pub fn forward(&self, x: &Tensor<E>) -> Tensor<E> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i != last {
                h = h.gelu();
            }
        }
        h
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.named_params(&format!("{prefix}.fc{i}"), out);
        }
    }
}

// ── token map + pose decoder ────────────────────────────────────────────

/// Drop the CLS token and reshape `[B, T+1, C]` to a 2-D map `[B, C, s, s]`
/// in row-major token order.
pub fn token_map_reshape<E: Elem>(tokens: &Tensor<E>) -> Tensor<E> {
    let s = tokens.shape();
    assert_eq!(s.len(), 3, "token_map_reshape expects [B, T+1, C], got {s:?}");
    let (b, t_plus, c) = (s[0], s[1], s[2]);
    let patches = t_plus - 1;
    let side = (patches as f64).sqrt() as usize;
    assert_eq!(
        side * side,
        patches,
        "token count {patches} after CLS removal is not square"
    );
    tokens
        .narrow(1, 1, patches)
        .permute(&[0, 2, 1])
        .reshape(&[b, c, side, side])
}

/// Per-channel normalization over spatial positions with a learned affine;
/// batch-size independent by construction.
pub fn channel_norm<E: Elem>(
    x: &Tensor<E>,
    gain: &Tensor<E>,
    bias: &Tensor<E>,
    eps: f64,
) -> Tensor<E> {
    let s = x.shape();
    assert_eq!(s.len(), 4, "channel_norm expects [B, C, H, W], got {s:?}");
    let c = s[1];
    let m = x.mean_trailing(2, true);
    let centered = x.sub(&m);
    let var = centered.mul(&centered).mean_trailing(2, true);
    let xn = centered.div(&var.add_scalar(eps).sqrt_t());
    xn.mul(&gain.reshape(&[c, 1, 1])).add(&bias.reshape(&[c, 1, 1]))
}

/// conv3x3 - norm - gelu - conv3x3 - norm, plus the identity skip.
pub struct ResBlock<E: Elem> {
    pub conv1: Tensor<E>,
    pub n1_gain: Tensor<E>,
    pub n1_bias: Tensor<E>,
    pub conv2: Tensor<E>,
    pub n2_gain: Tensor<E>,
    pub n2_bias: Tensor<E>,
}

impl<E: Elem> ResBlock<E> {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv = |rng: &mut ChaCha8Rng| {
            Tensor::init_with(&[channels, channels, 3, 3], Init::TruncNormal(0.02), rng)
                .requires_grad()
        };
        ResBlock {
            conv1: conv(rng),
            n1_gain: Tensor::ones(&[channels]).requires_grad(),
            n1_bias: Tensor::zeros(&[channels]).requires_grad(),
            conv2: conv(rng),
            n2_gain: Tensor::ones(&[channels]).requires_grad(),
            n2_bias: Tensor::zeros(&[channels]).requires_grad(),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Tensor<E> {
        let h = channel_norm(&x.conv2d(&self.conv1), &self.n1_gain, &self.n1_bias, 1e-5).gelu();
        let h = channel_norm(&h.conv2d(&self.conv2), &self.n2_gain, &self.n2_bias, 1e-5);
        x.add(&h)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.conv1"), self.conv1.clone()));
        out.push((format!("{prefix}.n1_gain"), self.n1_gain.clone()));
        out.push((format!("{prefix}.n1_bias"), self.n1_bias.clone()));
        out.push((format!("{prefix}.conv2"), self.conv2.clone()));
        out.push((format!("{prefix}.n2_gain"), self.n2_gain.clone()));
        out.push((format!("{prefix}.n2_bias"), self.n2_bias.clone()));
    }
}

/// Two residual conv blocks, spatial average pooling, then a small MLP.
/// `channels` is the trunk dim for single-image tasks and twice that for the
/// dual-image path (channel-wise concatenation of the two token maps).
pub struct PoseDecoder<E: Elem> {
    pub channels: usize,
    pub dof: usize,
    pub block1: ResBlock<E>,
    pub block2: ResBlock<E>,
    pub mlp: MlpHead<E>,
}

impl<E: Elem> PoseDecoder<E> {
    pub fn new(channels: usize, dof: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(dof == 3 || dof == 6, "pose decoder supports 3 or 6 DoF, got {dof}");
        PoseDecoder {
            channels,
            dof,
            block1: ResBlock::new(channels, rng),
            block2: ResBlock::new(channels, rng),
            mlp: MlpHead::new(channels, &[256, 64], dof, rng),
        }
    }

    /// `map` is `[B, channels, s, s]`, the reshaped (and possibly
    /// concatenated) token map.
    pub fn forward(&self, map: &Tensor<E>) -> Tensor<E> {
        let s = map.shape();
        assert_eq!(
            s[1], self.channels,
            "pose decoder built for {} channels, got {s:?}",
            self.channels
        );
        let h = self.block2.forward(&self.block1.forward(map));
        let pooled = h.mean_trailing(2, false);
        self.mlp.forward(&pooled)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.block1.named_params(&format!("{prefix}.block1"), out);
        self.block2.named_params(&format!("{prefix}.block2"), out);
        self.mlp.named_params(&format!("{prefix}.mlp"), out);
    }
}

// ── MAE reconstruction decoder ──────────────────────────────────────────

/// Transformer decoder for masked-patch reconstruction: project trunk
/// tokens, insert a learned mask token at masked positions, add decoder
/// positional embeddings, run the blocks, and predict all patch pixels.
pub struct MaeDecoder<E: Elem> {
    pub proj: Linear<E>,
    pub mask_token: Tensor<E>,
    pub pos: Tensor<E>,
    pub stack: BlockStack<E>,
    pub head: Linear<E>,
    patch_tokens: usize,
    patch_dim: usize,
}

impl<E: Elem> MaeDecoder<E> {
    /// `trunk_dim` feeds the input projection; `cfg` fixes the decoder width
    /// (512 dim / 16 heads / 8 layers at paper scale).
    pub fn new(trunk_dim: usize, cfg: &ViTConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.embed_dim;
        let patch_tokens = cfg.tokens();
        MaeDecoder {
            proj: Linear::new(trunk_dim, d, rng),
            mask_token: Tensor::init_with(&[d], Init::TruncNormal(0.02), rng).requires_grad(),
            pos: Tensor::init_with(&[patch_tokens + 1, d], Init::TruncNormal(0.02), rng)
                .requires_grad(),
            stack: BlockStack::new(d, cfg.heads, cfg.layers, cfg.mlp_ratio, rng),
            head: Linear::new(d, cfg.patch_dim(), rng),
            patch_tokens,
            patch_dim: cfg.patch_dim(),
        }
    }

    /// `trunk_tokens` is `[B, V+1, trunk_dim]` with CLS first; `visible[b]`
    /// lists the patch indices the encoder saw. Returns per-patch pixel
    /// predictions `[B, T, patch_dim]` (the CLS prediction is discarded).
    pub fn forward(&self, trunk_tokens: &Tensor<E>, visible: &[Vec<usize>]) -> Tensor<E> {
        let s = trunk_tokens.shape();
        assert_eq!(s.len(), 3, "mae decoder expects [B, V+1, D], got {s:?}");
        assert_eq!(s[0], visible.len(), "batch/visible-list mismatch");
        let seq = self.patch_tokens + 1;
        for v in visible {
            assert_eq!(
                v.len() + 1,
                s[1],
                "visible list length {} does not match {} trunk tokens",
                v.len(),
                s[1]
            );
            assert!(
                v.iter().all(|&p| p < self.patch_tokens),
                "visible patch index beyond {}",
                self.patch_tokens
            );
        }
        let idx: Vec<Vec<usize>> = visible
            .iter()
            .map(|v| {
                let mut rows = Vec::with_capacity(v.len() + 1);
                rows.push(0usize);
                rows.extend(v.iter().map(|&p| p + 1));
                rows
            })
            .collect();
        let projected = self.proj.forward(trunk_tokens);
        let full = projected
            .scatter_rows(&idx, seq, &self.mask_token)
            .add(&self.pos);
        let (decoded, _) = self.stack.forward(&full, false);
        self.head
            .forward(&decoded)
            .narrow(1, 1, self.patch_tokens)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_dim
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.proj.named_params(&format!("{prefix}.proj"), out);
        out.push((format!("{prefix}.mask_token"), self.mask_token.clone()));
        out.push((format!("{prefix}.pos"), self.pos.clone()));
        self.stack.named_params(&format!("{prefix}.stack"), out);
        self.head.named_params(&format!("{prefix}.head"), out);
    }
}

// ── decoder dispatch ────────────────────────────────────────────────────

pub enum Decoder<E: Elem> {
    MaeRecon(MaeDecoder<E>),
    Classifier(MlpHead<E>),
    VolRegressor(MlpHead<E>),
    Pose(PoseDecoder<E>),
}

impl<E: Elem> Decoder<E> {
    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        match self {
            Decoder::MaeRecon(d) => d.named_params(prefix, out),
            Decoder::Classifier(d) => d.named_params(prefix, out),
            Decoder::VolRegressor(d) => d.named_params(prefix, out),
            Decoder::Pose(d) => d.named_params(prefix, out),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check_sampled;
    use crate::vit::param_count;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randn<E: Elem>(shape: &[usize], seed: u64) -> Tensor<E> {
        let mut r = rng(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| E::from_f64(r.gen_range(-1.0..1.0))).collect(), shape)
    }

    #[test]
    fn classifier_param_count_formula() {
        let d = 32;
        let c = 6;
        let head = MlpHead::<f32>::cls_head(d, c, &mut rng(1));
        let mut named = Vec::new();
        head.named_params("h", &mut named);
        let expect = d * 256 + 256 + 256 * 128 + 128 + 128 * 64 + 64 + 64 * c + c;
        assert_eq!(param_count(&named), expect);
    }

    #[test]
    fn zero_input_zero_final_layer_gives_uniform_softmax() {
        let head = MlpHead::<f64>::cls_head(8, 5, &mut rng(2));
        let last = head.layers.last().unwrap();
        last.w.set_data(vec![0.0; 64 * 5]);
        let x = Tensor::<f64>::zeros(&[2, 8]);
        let probs = head.forward(&x).softmax(1).to_vec();
        assert!(probs.iter().all(|&p| (p - 0.2).abs() < 1e-9));
    }

    #[test]
    fn mse_hand_values() {
        let a = Tensor::<f64>::from_vec(vec![0.0], &[1]);
        let b = Tensor::<f64>::from_vec(vec![2.0], &[1]);
        assert_eq!(crate::tensor::mse(&a, &b).item(), 4.0);
        assert_eq!(crate::tensor::mse(&b, &b).item(), 0.0);
    }

    #[test]
    fn token_map_positions() {
        // value encodes the token index; check row-major placement
        let t = 197;
        let c = 2;
        let data: Vec<f64> = (0..t * c).map(|i| (i / c) as f64).collect();
        let tokens = Tensor::from_vec(data, &[1, t, c]);
        let map = token_map_reshape(&tokens);
        assert_eq!(map.shape(), vec![1, c, 14, 14]);
        let v = map.to_vec();
        // token 1 (first patch) lands at (0,0)
        assert_eq!(v[0], 1.0);
        // token 15 lands at (1,0): offset 14 within channel 0
        assert_eq!(v[14], 15.0);
    }

    #[test]
    fn token_map_reshape_then_flatten_recovers_order() {
        let tokens = randn::<f64>(&[2, 197, 3], 4);
        let map = token_map_reshape(&tokens);
        let back = map.reshape(&[2, 3, 196]).permute(&[0, 2, 1]);
        let orig = tokens.narrow(1, 1, 196);
        assert_eq!(back.to_vec(), orig.to_vec());
    }

    #[test]
    #[should_panic(expected = "not square")]
    fn token_map_rejects_non_square() {
        let tokens = Tensor::<f64>::zeros(&[1, 8, 2]);
        let _ = token_map_reshape(&tokens);
    }

    #[test]
    fn pose_zero_final_layer_gives_zero_pose() {
        let dec = PoseDecoder::<f64>::new(4, 3, &mut rng(5));
        let last = dec.mlp.layers.last().unwrap();
        last.w.set_data(vec![0.0; 64 * 3]);
        last.b.set_data(vec![0.0; 3]);
        let map = randn::<f64>(&[2, 4, 14, 14], 6);
        let pose = dec.forward(&map).to_vec();
        assert!(pose.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pose_output_shapes() {
        for dof in [3usize, 6] {
            let dec = PoseDecoder::<f64>::new(4, dof, &mut rng(7));
            let map = randn::<f64>(&[2, 4, 14, 14], 8);
            assert_eq!(dec.forward(&map).shape(), vec![2, dof]);
        }
    }

    #[test]
    fn pose_dual_width_changes_only_sizes() {
        // doubling input channels keeps the same parameter tensor list;
        // only dimensions touching the channel count scale
        let single = {
            let mut named = Vec::new();
            PoseDecoder::<f32>::new(8, 3, &mut rng(9)).named_params("p", &mut named);
            named
        };
        let dual = {
            let mut named = Vec::new();
            PoseDecoder::<f32>::new(16, 3, &mut rng(9)).named_params("p", &mut named);
            named
        };
        assert_eq!(single.len(), dual.len());
        for ((name_s, t_s), (name_d, t_d)) in single.iter().zip(&dual) {
            assert_eq!(name_s, name_d);
            let (ss, ds) = (t_s.shape(), t_d.shape());
            assert_eq!(ss.len(), ds.len());
            for (a, b) in ss.iter().zip(&ds) {
                assert!(*b == *a || *b == 2 * *a, "{name_s}: {ss:?} vs {ds:?}");
            }
        }
    }

    #[test]
    fn grad_pose_decoder() {
        let dec = PoseDecoder::<f64>::new(3, 3, &mut rng(10));
        let map = randn::<f64>(&[1, 3, 5, 5], 11);
        // 5x5 maps keep the finite-difference sweep cheap
        let mut named = Vec::new();
        dec.named_params("p", &mut named);
        for (name, p) in named.iter().take(4) {
            let err = finite_diff_check_sampled(
                || {
                    let h = dec.block2.forward(&dec.block1.forward(&map));
                    dec.mlp.forward(&h.mean_trailing(2, false)).powi_t(2).sum_all()
                },
                p,
                1e-5,
                8,
                0,
            );
            assert!(err < 1e-4, "{name}: rel err {err}");
        }
    }

    #[test]
    fn mae_decoder_output_shape_and_mask_grad() {
        let cfg = ViTConfig {
            embed_dim: 16,
            heads: 2,
            layers: 1,
            mlp_ratio: 4.0,
            patch_size: 16,
            image_size: 224,
            with_cls_token: true,
        };
        let dec = MaeDecoder::<f64>::new(12, &cfg, &mut rng(12));
        let visible: Vec<Vec<usize>> = vec![(0..40).collect(), (50..90).collect()];
        let trunk_tokens = randn::<f64>(&[2, 41, 12], 13);
        let out = dec.forward(&trunk_tokens, &visible);
        assert_eq!(out.shape(), vec![2, 196, 768]);

        dec.mask_token.zero_grad();
        out.powi_t(2).sum_all().backward();
        let g = dec.mask_token.grad().expect("mask token must receive gradient");
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn mae_decoder_param_count_formula() {
        // paper-scale decoder: 512 dim, 16 heads, 8 layers
        let cfg = ViTConfig {
            embed_dim: 512,
            heads: 16,
            layers: 8,
            mlp_ratio: 4.0,
            patch_size: 16,
            image_size: 224,
            with_cls_token: true,
        };
        let trunk_d = 192;
        let dec = MaeDecoder::<f32>::new(trunk_d, &cfg, &mut rng(14));
        let mut named = Vec::new();
        dec.named_params("d", &mut named);
        let d = 512;
        let per_block = 12 * d * d + 13 * d;
        let expect = (trunk_d * d + d) + d + 197 * d + 8 * per_block + (d * 768 + 768);
        assert_eq!(param_count(&named), expect);
    }

    #[test]
    fn cls_head_ignores_patch_tokens() {
        // CLS-only heads read the narrowed first token, so permuting the
        // rest cannot change the output
        let head = MlpHead::<f64>::cls_head(6, 4, &mut rng(15));
        let tokens = randn::<f64>(&[1, 5, 6], 16);
        let cls = tokens.narrow(1, 0, 1).reshape(&[1, 6]);
        let out_a = head.forward(&cls).to_vec();
        let shuffled = tokens.gather_rows(&[vec![0, 3, 1, 4, 2]]);
        let cls_b = shuffled.narrow(1, 0, 1).reshape(&[1, 6]);
        let out_b = head.forward(&cls_b).to_vec();
        assert_eq!(out_a, out_b);
    }
}
