//! The T3 assembly: sensor-specific encoders resolved through a share map,
//! one shared trunk, and task-specific decoders. A forward pass touches
//! exactly one encoder group and one decoder, so gradients of everything
//! else are exactly zero by construction.

use std::collections::BTreeMap;

use crate::decoders::{Decoder, DecoderSpec, MaeDecoder, MlpHead, PoseDecoder, TaskKind};
use crate::error::{Result, T3Error};
use crate::rng::rng_from;
use crate::tensor::{Elem, Tensor};
use crate::vit::{patchify, AttentionTrace, BlockStack, PatchEncoder, ViTConfig};

/// Network geometry. Encoder and trunk share the embedding width; the
/// reconstruction decoder has its own width (512/16/8 at paper scale, shrunk
/// for the test-only nano size).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SizeConfig {
    pub name: String,
    pub d_enc: usize,
    pub h_enc: usize,
    pub l_enc: usize,
    pub l_tru: usize,
    pub dec_dim: usize,
    pub dec_heads: usize,
    pub dec_layers: usize,
}

impl SizeConfig {
    fn preset(name: &str, d: usize, h: usize, l_enc: usize, l_tru: usize) -> Self {
        SizeConfig {
            name: name.to_string(),
            d_enc: d,
            h_enc: h,
            l_enc,
            l_tru,
            dec_dim: 512,
            dec_heads: 16,
            dec_layers: 8,
        }
    }

    pub fn tiny() -> Self {
        Self::preset("tiny", 192, 3, 3, 9)
    }

    pub fn small() -> Self {
        Self::preset("small", 384, 6, 3, 9)
    }

    pub fn medium() -> Self {
        Self::preset("medium", 768, 12, 3, 9)
    }

    pub fn large() -> Self {
        Self::preset("large", 1024, 8, 3, 9)
    }

    /// Reduced size for fast tests; not a paper configuration. The
    /// reconstruction decoder shrinks with it.
    pub fn nano() -> Self {
        SizeConfig {
            name: "nano".to_string(),
            d_enc: 64,
            h_enc: 2,
            l_enc: 2,
            l_tru: 3,
            dec_dim: 64,
            dec_heads: 2,
            dec_layers: 2,
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            "medium" => Ok(Self::medium()),
            "large" => Ok(Self::large()),
            "nano" => Ok(Self::nano()),
            other => Err(T3Error::Config(format!("unknown size config '{other}'"))),
        }
    }

    pub fn encoder_cfg(&self) -> ViTConfig {
        ViTConfig::new(self.d_enc, self.h_enc, self.l_enc)
    }

    pub fn mae_decoder_cfg(&self) -> ViTConfig {
        ViTConfig::new(self.dec_dim, self.dec_heads, self.dec_layers)
    }
}

/// One task registration: a stable id plus its decoder contract.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TaskDef {
    pub id: String,
    #[serde(flatten)]
    pub spec: DecoderSpec,
}

impl TaskDef {
    pub fn new(id: &str, kind: TaskKind) -> Self {
        TaskDef {
            id: id.to_string(),
            spec: DecoderSpec::new(kind),
        }
    }
}

/// Identity share map: every sensor gets its own encoder group.
pub fn identity_share_map(sensors: &[String]) -> BTreeMap<String, String> {
    sensors.iter().map(|s| (s.clone(), s.clone())).collect()
}

pub struct T3Model<E: Elem> {
    pub size: SizeConfig,
    pub share_map: BTreeMap<String, String>,
    pub encoders: BTreeMap<String, PatchEncoder<E>>,
    pub trunk: BlockStack<E>,
    pub decoders: BTreeMap<String, (DecoderSpec, Decoder<E>)>,
    pub tasks: Vec<TaskDef>,
    pub seed: u64,
}

impl<E: Elem> T3Model<E> {
    /// Build encoders, trunk, and decoders with independent parameter sets.
    /// Component streams are keyed by name, so assembly is deterministic for
    /// a fixed seed regardless of registration order.
    pub fn assemble(
        size: SizeConfig,
        sensors: &[String],
        tasks: &[TaskDef],
        share_map: &BTreeMap<String, String>,
        seed: u64,
    ) -> Result<Self> {
        for s in sensors {
            if !share_map.contains_key(s) {
                return Err(T3Error::Config(format!(
                    "sensor '{s}' missing from the share map"
                )));
            }
        }
        let mut ids = std::collections::HashSet::new();
        for t in tasks {
            if !ids.insert(&t.id) {
                return Err(T3Error::Config(format!("duplicate task id '{}'", t.id)));
            }
            if !t.spec.kind.arity_valid(t.spec.input_arity) {
                return Err(T3Error::Config(format!(
                    "task '{}' has invalid input arity {} for {:?}",
                    t.id, t.spec.input_arity, t.spec.kind
                )));
            }
        }

        let enc_cfg = size.encoder_cfg();
        let mut encoders = BTreeMap::new();
        for group in share_map.values() {
            if !encoders.contains_key(group) {
                let mut rng = rng_from(seed, &format!("encoder/{group}"));
                encoders.insert(group.clone(), PatchEncoder::new(enc_cfg.clone(), &mut rng));
            }
        }
        let trunk = {
            let mut rng = rng_from(seed, "trunk");
            BlockStack::new(size.d_enc, size.h_enc, size.l_tru, 4.0, &mut rng)
        };
        let mut decoders = BTreeMap::new();
        for t in tasks {
            let mut rng = rng_from(seed, &format!("decoder/{}", t.id));
            let d = size.d_enc;
            let dec = match &t.spec.kind {
                TaskKind::MaeRecon => {
                    Decoder::MaeRecon(MaeDecoder::new(d, &size.mae_decoder_cfg(), &mut rng))
                }
                TaskKind::Classifier { num_classes } => {
                    if *num_classes < 2 {
                        return Err(T3Error::Config(format!(
                            "task '{}' needs >= 2 classes",
                            t.id
                        )));
                    }
                    Decoder::Classifier(MlpHead::cls_head(d, *num_classes, &mut rng))
                }
                TaskKind::VolRegressor => Decoder::VolRegressor(MlpHead::cls_head(d, 1, &mut rng)),
                TaskKind::Pose { dof } => {
                    if *dof != 3 && *dof != 6 {
                        return Err(T3Error::Config(format!(
                            "task '{}' has unsupported dof {dof}",
                            t.id
                        )));
                    }
                    Decoder::Pose(PoseDecoder::new(d * t.spec.input_arity, *dof, &mut rng))
                }
            };
            decoders.insert(t.id.clone(), (t.spec.clone(), dec));
        }
        Ok(T3Model {
            size,
            share_map: share_map.clone(),
            encoders,
            trunk,
            decoders,
            tasks: tasks.to_vec(),
            seed,
        })
    }

    pub fn encoder_group(&self, sensor: &str) -> Result<&str> {
        self.share_map
            .get(sensor)
            .map(|s| s.as_str())
            .ok_or_else(|| T3Error::Config(format!("unknown sensor id '{sensor}'")))
    }

    fn encoder_for(&self, sensor: &str) -> Result<&PatchEncoder<E>> {
        let group = self.encoder_group(sensor)?;
        self.encoders
            .get(group)
            .ok_or_else(|| T3Error::Config(format!("share map points to missing group '{group}'")))
    }

    fn task(&self, task: &str) -> Result<&(DecoderSpec, Decoder<E>)> {
        self.decoders
            .get(task)
            .ok_or_else(|| T3Error::Config(format!("unknown task id '{task}'")))
    }

    /// Encoder then trunk for one image batch `[B, 3, S, S]`.
    fn encode(&self, sensor: &str, images: &Tensor<E>, capture: bool) -> Result<EncodeOut<E>> {
        let enc = self.encoder_for(sensor)?;
        let patches = patchify(images, enc.cfg.patch_size);
        let (tokens, enc_trace) = enc.forward(&patches, capture);
        let (trunk_tokens, trunk_trace) = self.trunk.forward(&tokens, capture);
        Ok(EncodeOut {
            trunk_tokens,
            enc_trace,
            trunk_trace,
        })
    }

    /// Single-image forward per Eq-style routing: decoder(trunk(encoder(x))).
    pub fn forward_single(&self, sensor: &str, task: &str, images: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.forward_single_traced(sensor, task, images, false)?.0)
    }

    /// Like [`forward_single`], optionally capturing attention weights of the
    /// encoder and trunk stacks.
    pub fn forward_single_traced(
        &self,
        sensor: &str,
        task: &str,
        images: &Tensor<E>,
        capture: bool,
    ) -> Result<(Tensor<E>, Option<AttentionTrace<E>>, Option<AttentionTrace<E>>)> {
        let (spec, dec) = self.task(task)?;
        if spec.input_arity != 1 {
            return Err(T3Error::Config(format!(
                "task '{task}' expects {} images, got a single batch",
                spec.input_arity
            )));
        }
        let out = self.encode(sensor, images, capture)?;
        let tokens = out.trunk_tokens;
        let b = tokens.shape()[0];
        let d = self.size.d_enc;
        let y = match dec {
            Decoder::Classifier(head) | Decoder::VolRegressor(head) => {
                let cls = tokens.narrow(1, 0, 1).reshape(&[b, d]);
                head.forward(&cls)
            }
            Decoder::Pose(pose) => {
                let map = crate::decoders::token_map_reshape(&tokens);
                pose.forward(&map)
            }
            Decoder::MaeRecon(mae) => {
                // full-visibility decode: every patch token was seen
                let patches = self.encoders[self.encoder_group(sensor)?].cfg.tokens();
                let visible: Vec<Vec<usize>> = (0..b).map(|_| (0..patches).collect()).collect();
                mae.forward(&tokens, &visible)
            }
        };
        Ok((y, out.enc_trace, out.trunk_trace))
    }

    /// Dual-image forward: each image runs encoder+trunk independently, the
    /// token maps are concatenated channel-wise, and the decoder predicts
    /// the relative quantity.
    pub fn forward_dual(
        &self,
        sensor: &str,
        task: &str,
        images_1: &Tensor<E>,
        images_2: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let (spec, dec) = self.task(task)?;
        if spec.input_arity != 2 {
            return Err(T3Error::Config(format!(
                "task '{task}' expects {} image(s), got a dual batch",
                spec.input_arity
            )));
        }
        let (b1, b2) = (images_1.shape()[0], images_2.shape()[0]);
        if b1 != b2 {
            return Err(T3Error::Config(format!(
                "dual forward batch sizes disagree: {b1} vs {b2}"
            )));
        }
        let t1 = self.encode(sensor, images_1, false)?.trunk_tokens;
        let t2 = self.encode(sensor, images_2, false)?.trunk_tokens;
        let m1 = crate::decoders::token_map_reshape(&t1);
        let m2 = crate::decoders::token_map_reshape(&t2);
        let map = Tensor::concat(&[&m1, &m2], 1);
        match dec {
            Decoder::Pose(pose) => Ok(pose.forward(&map)),
            _ => Err(T3Error::Config(format!(
                "task '{task}' is not a dual-image task"
            ))),
        }
    }

    /// Masked forward for pre-training stage I: the encoder and trunk see
    /// only CLS plus visible patches; the reconstruction decoder fills in
    /// mask tokens. Returns `[B, T, patch_dim]` predictions.
    pub fn forward_masked(
        &self,
        sensor: &str,
        task: &str,
        images: &Tensor<E>,
        visible: &[Vec<usize>],
    ) -> Result<Tensor<E>> {
        let (_, dec) = self.task(task)?;
        let Decoder::MaeRecon(mae) = dec else {
            return Err(T3Error::Config(format!(
                "task '{task}' is not a reconstruction task"
            )));
        };
        let enc = self.encoder_for(sensor)?;
        let patches = patchify(images, enc.cfg.patch_size);
        let tokens = enc.forward_visible(&patches, visible);
        let (trunk_tokens, _) = self.trunk.forward(&tokens, false);
        Ok(mae.forward(&trunk_tokens, visible))
    }

    /// The parameters Eq-style routing trains for one pairing: the sensor's
    /// encoder group, the trunk, and the task decoder. Nothing else.
    pub fn trainable_set(&self, sensor: &str, task: &str) -> Result<Vec<(String, Tensor<E>)>> {
        let group = self.encoder_group(sensor)?;
        if !self.decoders.contains_key(task) {
            return Err(T3Error::Config(format!("unknown task id '{task}'")));
        }
        let mut out = Vec::new();
        self.encoders[group].named_params(&format!("encoder/{group}"), &mut out);
        self.trunk.named_params("trunk", &mut out);
        self.decoders[task].1.named_params(&format!("decoder/{task}"), &mut out);
        Ok(out)
    }

    /// Route a new sensor through an existing encoder group without copying
    /// any weights (zero-shot substitution).
    pub fn substitute_encoder(&mut self, new_sensor: &str, donor_group: &str) -> Result<()> {
        if self.share_map.contains_key(new_sensor) {
            return Err(T3Error::Config(format!(
                "sensor '{new_sensor}' already registered"
            )));
        }
        if !self.encoders.contains_key(donor_group) {
            return Err(T3Error::Config(format!(
                "donor encoder group '{donor_group}' does not exist"
            )));
        }
        self.share_map
            .insert(new_sensor.to_string(), donor_group.to_string());
        Ok(())
    }

    /// All parameters with stable component-qualified names.
    pub fn named_params(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        for (group, enc) in &self.encoders {
            enc.named_params(&format!("encoder/{group}"), &mut out);
        }
        self.trunk.named_params("trunk", &mut out);
        for (id, (_, dec)) in &self.decoders {
            dec.named_params(&format!("decoder/{id}"), &mut out);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_all_grads(&self) {
        for (_, t) in self.named_params() {
            t.zero_grad();
        }
    }
}

struct EncodeOut<E: Elem> {
    trunk_tokens: Tensor<E>,
    enc_trace: Option<AttentionTrace<E>>,
    trunk_trace: Option<AttentionTrace<E>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sensors(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn randn_img(b: usize, seed: u64) -> Tensor<f32> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = b * 3 * 224 * 224;
        Tensor::from_vec((0..n).map(|_| r.gen_range(-1.0..1.0)).collect(), &[b, 3, 224, 224])
    }

    fn nano_model(tasks: &[TaskDef], share: &BTreeMap<String, String>) -> T3Model<f32> {
        let sensor_list: Vec<String> = share.keys().cloned().collect();
        T3Model::assemble(SizeConfig::nano(), &sensor_list, tasks, share, 42).unwrap()
    }

    #[test]
    fn shared_group_builds_one_encoder() {
        let mut share = BTreeMap::new();
        share.insert("s1".to_string(), "g".to_string());
        share.insert("s2".to_string(), "g".to_string());
        let model = nano_model(&[TaskDef::new("cls", TaskKind::Classifier { num_classes: 6 })], &share);
        assert_eq!(model.encoders.len(), 1);
    }

    #[test]
    fn tiny_trunk_geometry() {
        let size = SizeConfig::tiny();
        assert_eq!((size.d_enc, size.h_enc, size.l_enc, size.l_tru), (192, 3, 3, 9));
        let small = SizeConfig::small();
        assert_eq!((small.d_enc, small.h_enc), (384, 6));
        let medium = SizeConfig::medium();
        assert_eq!((medium.d_enc, medium.h_enc), (768, 12));
        let large = SizeConfig::large();
        assert_eq!((large.d_enc, large.h_enc), (1024, 8));
    }

    #[test]
    fn assembly_is_deterministic() {
        let share = identity_share_map(&sensors(&["a"]));
        let tasks = [TaskDef::new("cls", TaskKind::Classifier { num_classes: 4 })];
        let m1 = T3Model::<f32>::assemble(SizeConfig::nano(), &sensors(&["a"]), &tasks, &share, 7).unwrap();
        let m2 = T3Model::<f32>::assemble(SizeConfig::nano(), &sensors(&["a"]), &tasks, &share, 7).unwrap();
        for ((n1, t1), (n2, t2)) in m1.named_params().iter().zip(m2.named_params().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.to_vec(), t2.to_vec(), "{n1} differs");
        }
    }

    #[test]
    fn forward_single_classifier_shape_and_softmax() {
        let share = identity_share_map(&sensors(&["a"]));
        let model = nano_model(&[TaskDef::new("cls", TaskKind::Classifier { num_classes: 6 })], &share);
        let img = randn_img(2, 1);
        let logits = model.forward_single("a", "cls", &img).unwrap();
        assert_eq!(logits.shape(), vec![2, 6]);
        let probs = logits.softmax(1).to_vec();
        for row in probs.chunks(6) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn shared_encoder_gives_identical_logits() {
        let mut share = BTreeMap::new();
        share.insert("s1".to_string(), "g".to_string());
        share.insert("s2".to_string(), "g".to_string());
        let model = nano_model(&[TaskDef::new("cls", TaskKind::Classifier { num_classes: 6 })], &share);
        let img = randn_img(1, 2);
        let a = model.forward_single("s1", "cls", &img).unwrap().to_vec();
        let b = model.forward_single("s2", "cls", &img).unwrap().to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn dual_forward_shape_and_asymmetry() {
        let share = identity_share_map(&sensors(&["a"]));
        let model = nano_model(&[TaskDef::new("pose", TaskKind::Pose { dof: 3 })], &share);
        let (x1, x2) = (randn_img(2, 3), randn_img(2, 4));
        let y12 = model.forward_dual("a", "pose", &x1, &x2).unwrap();
        assert_eq!(y12.shape(), vec![2, 3]);
        let y21 = model.forward_dual("a", "pose", &x2, &x1).unwrap();
        let (a, b) = (y12.to_vec(), y21.to_vec());
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-7),
            "swapping inputs should change the prediction");
    }

    #[test]
    fn dual_identical_pair_zero_final_layer_gives_zero() {
        let share = identity_share_map(&sensors(&["a"]));
        let model = nano_model(&[TaskDef::new("pose", TaskKind::Pose { dof: 3 })], &share);
        if let Decoder::Pose(p) = &model.decoders["pose"].1 {
            let last = p.mlp.layers.last().unwrap();
            last.w.apply_update(|d| d.fill(0.0));
        }
        let x = randn_img(1, 5);
        let y = model.forward_dual("a", "pose", &x, &x).unwrap().to_vec();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dual_rejects_batch_mismatch_and_single_arity() {
        let share = identity_share_map(&sensors(&["a"]));
        let model = nano_model(
            &[
                TaskDef::new("pose", TaskKind::Pose { dof: 3 }),
                TaskDef::new("cls", TaskKind::Classifier { num_classes: 2 }),
            ],
            &share,
        );
        let (x1, x2) = (randn_img(1, 6), randn_img(2, 7));
        assert!(model.forward_dual("a", "pose", &x1, &x2).is_err());
        assert!(model.forward_single("a", "pose", &x1).is_err());
        assert!(model.forward_dual("a", "cls", &x1, &x1).is_err());
    }

    #[test]
    fn gradient_isolation_is_exact() {
        let mut share = BTreeMap::new();
        share.insert("s1".to_string(), "g1".to_string());
        share.insert("s2".to_string(), "g2".to_string());
        let model = nano_model(
            &[
                TaskDef::new("t1", TaskKind::Classifier { num_classes: 3 }),
                TaskDef::new("t2", TaskKind::Classifier { num_classes: 4 }),
            ],
            &share,
        );
        let img = randn_img(2, 8);
        let logits = model.forward_single("s1", "t1", &img).unwrap();
        logits.cross_entropy(&[0, 1]).backward();

        let active: std::collections::HashSet<String> = model
            .trainable_set("s1", "t1")
            .unwrap()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let mut trunk_nonzero = false;
        for (name, t) in model.named_params() {
            let g = t.grad();
            if active.contains(&name) {
                if name.starts_with("trunk") {
                    trunk_nonzero |= g.map_or(false, |g| g.iter().any(|&v| v != 0.0));
                }
            } else {
                let norm_zero = g.map_or(true, |g| g.iter().all(|&v| v == 0.0));
                assert!(norm_zero, "{name} received gradient outside its pairing");
            }
        }
        assert!(trunk_nonzero, "trunk gradient must be nonzero for a nonzero loss");
    }

    #[test]
    fn substitution_routes_without_copying() {
        let mut share = BTreeMap::new();
        share.insert("donor".to_string(), "gd".to_string());
        let mut model = nano_model(&[TaskDef::new("cls", TaskKind::Classifier { num_classes: 6 })], &share);
        let before = model.param_count();
        model.substitute_encoder("newbie", "gd").unwrap();
        assert_eq!(model.param_count(), before);
        let img = randn_img(1, 9);
        let a = model.forward_single("donor", "cls", &img).unwrap().to_vec();
        let b = model.forward_single("newbie", "cls", &img).unwrap().to_vec();
        assert_eq!(a, b);
        assert!(model.substitute_encoder("newbie", "gd").is_err(), "duplicate must be rejected");
        assert!(model.substitute_encoder("x", "missing").is_err());
    }

    #[test]
    fn param_count_is_additive_over_decoders() {
        let share = identity_share_map(&sensors(&["a"]));
        let base = nano_model(&[TaskDef::new("cls", TaskKind::Classifier { num_classes: 6 })], &share);
        let extended = nano_model(
            &[
                TaskDef::new("cls", TaskKind::Classifier { num_classes: 6 }),
                TaskDef::new("vol", TaskKind::VolRegressor),
            ],
            &share,
        );
        let mut vol_named = Vec::new();
        extended.decoders["vol"].1.named_params("decoder/vol", &mut vol_named);
        let vol_count: usize = vol_named.iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(extended.param_count(), base.param_count() + vol_count);
    }

    #[test]
    fn nano_param_count_matches_hand_formula() {
        let share = identity_share_map(&sensors(&["a"]));
        let model = nano_model(&[TaskDef::new("cls", TaskKind::Classifier { num_classes: 6 })], &share);
        let d = 64usize;
        let per_block = 12 * d * d + 13 * d;
        let encoder = (768 * d + d) + d + 197 * d + 2 * per_block;
        let trunk = 3 * per_block;
        let head = d * 256 + 256 + 256 * 128 + 128 + 128 * 64 + 64 + 64 * 6 + 6;
        assert_eq!(model.param_count(), encoder + trunk + head);
    }

    #[test]
    fn tiny_with_mae_decoder_is_order_of_magnitude_of_reported_total() {
        // Reported totals mix an unspecified set of encoders and decoders;
        // only the order of magnitude is checked here.
        let share = identity_share_map(&sensors(&["a"]));
        let model = T3Model::<f32>::assemble(
            SizeConfig::tiny(),
            &sensors(&["a"]),
            &[TaskDef::new("mae", TaskKind::MaeRecon)],
            &share,
            1,
        )
        .unwrap();
        let count = model.param_count();
        assert!(
            (10_000_000..100_000_000).contains(&count),
            "trunk + 1 encoder + reconstruction decoder = {count} params"
        );
    }

    #[test]
    fn unknown_ids_are_rejected() {
        let share = identity_share_map(&sensors(&["a"]));
        let model = nano_model(&[TaskDef::new("cls", TaskKind::Classifier { num_classes: 6 })], &share);
        let img = randn_img(1, 10);
        assert!(model.forward_single("ghost", "cls", &img).is_err());
        assert!(model.forward_single("a", "ghost", &img).is_err());
        assert!(model.trainable_set("ghost", "cls").is_err());
        assert!(model.trainable_set("a", "ghost").is_err());
    }
}
