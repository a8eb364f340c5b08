//! Optimization loop: stage configs, routed updates per pairing batch,
//! evaluation metrics, checkpointing, and resume.

pub mod metrics;
pub mod optim;
pub mod sweep;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, CheckpointExtras};
use crate::data::{LabelBatch, PairingBatch, PairingSampler, PairingStore, Weighting};
use crate::decoders::TaskKind;
use crate::error::{Result, T3Error};
use crate::mae::mae_forward_loss;
use crate::model::T3Model;
use crate::rng::derive_seed_idx;
use crate::tensor::{mse, no_grad, Tensor};
use metrics::{MetricLog, MetricRow};
use optim::{lr_at, AdamW};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain1,
    Pretrain2,
    Finetune,
}

impl Stage {
    pub fn tag(&self) -> &'static str {
        match self {
            Stage::Pretrain1 => "pretrain1",
            Stage::Pretrain2 => "pretrain2",
            Stage::Finetune => "finetune",
        }
    }
}

/// Parameters excluded from optimizer updates; their gradients are still
/// computed and then discarded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Freeze {
    #[default]
    None,
    Trunk,
    Encoders,
}

impl Freeze {
    fn excludes(&self, param_name: &str) -> bool {
        match self {
            Freeze::None => false,
            Freeze::Trunk => param_name.starts_with("trunk"),
            Freeze::Encoders => param_name.starts_with("encoder/"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Stage-I masking ratio; ignored by supervised stages.
    pub mask_ratio: f64,
    pub pairing_weighting: Weighting,
    pub seed: u64,
    /// Evaluate and checkpoint every this many steps (0 = end of run only).
    pub eval_every: usize,
}

impl TrainConfig {
    /// Stage defaults: pre-training runs at 1e-4, fine-tuning at 5e-5, both
    /// with weight decay 0.05 and 5% linear warmup.
    pub fn stage_defaults(stage: Stage, steps: usize) -> Self {
        let base_lr = match stage {
            Stage::Finetune => 5e-5,
            _ => 1e-4,
        };
        TrainConfig {
            stage,
            steps,
            batch_size: 8,
            base_lr,
            weight_decay: 0.05,
            warmup_steps: steps / 20,
            mask_ratio: 0.8,
            pairing_weighting: Weighting::default(),
            seed: 0,
            eval_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.steps <= self.warmup_steps {
            return Err(T3Error::Config(format!(
                "steps ({}) must exceed warmup_steps ({})",
                self.steps, self.warmup_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(T3Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(T3Error::Config(format!(
                "mask_ratio must lie in [0, 1), got {}",
                self.mask_ratio
            )));
        }
        Ok(())
    }
}

/// Mutable training state: step counter, optimizer moments, best-metric
/// snapshot, and the metric log.
pub struct TrainState {
    pub step: usize,
    pub optimizer: AdamW,
    pub best: Option<BestSnapshot>,
    pub log: MetricLog,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BestSnapshot {
    pub step: usize,
    pub score: f64,
}

/// One evaluation result for a pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub pairing: String,
    pub metric_name: String,
    pub value: f64,
    /// RMSE of the constant dataset-mean predictor, for regression tasks.
    pub baseline: Option<f64>,
    pub n: usize,
}

fn label_tensor(labels: &LabelBatch) -> Result<Tensor<f32>> {
    match labels {
        LabelBatch::Scalars(s) => Ok(Tensor::from_vec(s.clone(), &[s.len(), 1])),
        LabelBatch::Poses(p) => {
            let dof = p[0].len();
            let flat: Vec<f32> = p.iter().flatten().copied().collect();
            Ok(Tensor::from_vec(flat, &[p.len(), dof]))
        }
        other => Err(T3Error::Config(format!(
            "labels {other:?} are not regression targets"
        ))),
    }
}

/// Stage loss for a single homogeneous batch.
pub fn batch_loss(
    model: &T3Model<f32>,
    batch: &PairingBatch,
    mask_ratio: f64,
    mask_seed: u64,
) -> Result<Tensor<f32>> {
    let kind = model
        .decoders
        .get(&batch.task_id)
        .map(|(spec, _)| spec.kind.clone())
        .ok_or_else(|| T3Error::Config(format!("unknown task id '{}'", batch.task_id)))?;
    match kind {
        TaskKind::MaeRecon => {
            let (loss, _) = mae_forward_loss(
                model,
                &batch.sensor_id,
                &batch.task_id,
                &batch.images,
                mask_ratio,
                mask_seed,
            )?;
            Ok(loss)
        }
        TaskKind::Classifier { .. } => {
            let LabelBatch::Classes(classes) = &batch.labels else {
                return Err(T3Error::Data("classification batch without class labels".into()));
            };
            let logits = model.forward_single(&batch.sensor_id, &batch.task_id, &batch.images)?;
            Ok(logits.cross_entropy(classes))
        }
        TaskKind::VolRegressor => {
            let target = label_tensor(&batch.labels)?;
            let pred = model.forward_single(&batch.sensor_id, &batch.task_id, &batch.images)?;
            Ok(mse(&pred, &target))
        }
        TaskKind::Pose { .. } => {
            let target = label_tensor(&batch.labels)?;
            let pred = match &batch.images2 {
                Some(second) => {
                    model.forward_dual(&batch.sensor_id, &batch.task_id, &batch.images, second)?
                }
                None => model.forward_single(&batch.sensor_id, &batch.task_id, &batch.images)?,
            };
            Ok(mse(&pred, &target))
        }
    }
}

/// Evaluate one validation pairing. Classification reports top-1 accuracy;
/// regression reports RMSE in label units plus the dataset-average-predictor
/// baseline; reconstruction reports the masked loss at a fixed seed.
pub fn evaluate(
    model: &T3Model<f32>,
    store: &PairingStore,
    batch_size: usize,
    mask_ratio: f64,
) -> Result<EvalRecord> {
    let pairing = format!("{}/{}", store.sensor, store.task);
    let batches = store.eval_batches(batch_size)?;
    no_grad(|| match &store.kind {
        TaskKind::Classifier { .. } => {
            let (mut correct, mut total) = (0usize, 0usize);
            for b in &batches {
                let LabelBatch::Classes(classes) = &b.labels else {
                    return Err(T3Error::Data("classification batch without labels".into()));
                };
                let logits = model.forward_single(&b.sensor_id, &b.task_id, &b.images)?;
                let v = logits.to_vec();
                let c = logits.shape()[1];
                for (row, &truth) in v.chunks(c).zip(classes) {
                    let argmax = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(i, _)| i)
                        .unwrap();
                    correct += usize::from(argmax == truth);
                    total += 1;
                }
            }
            Ok(EvalRecord {
                pairing,
                metric_name: "top1_accuracy".into(),
                value: correct as f64 / total as f64,
                baseline: None,
                n: total,
            })
        }
        TaskKind::VolRegressor | TaskKind::Pose { .. } => {
            let mut preds: Vec<Vec<f32>> = Vec::new();
            let mut truths: Vec<Vec<f32>> = Vec::new();
            for b in &batches {
                let target = label_tensor(&b.labels)?;
                let pred = match &b.images2 {
                    Some(second) => {
                        model.forward_dual(&b.sensor_id, &b.task_id, &b.images, second)?
                    }
                    None => model.forward_single(&b.sensor_id, &b.task_id, &b.images)?,
                };
                let dof = pred.shape()[1];
                for row in pred.to_vec().chunks(dof) {
                    preds.push(row.to_vec());
                }
                for row in target.to_vec().chunks(dof) {
                    truths.push(row.to_vec());
                }
            }
            let dof = truths[0].len();
            let n = truths.len();
            let mut mean = vec![0.0f64; dof];
            for t in &truths {
                for (m, &v) in mean.iter_mut().zip(t) {
                    *m += v as f64 / n as f64;
                }
            }
            let mut sq = 0.0f64;
            let mut sq_base = 0.0f64;
            for (p, t) in preds.iter().zip(&truths) {
                for d in 0..dof {
                    sq += (p[d] as f64 - t[d] as f64).powi(2);
                    sq_base += (mean[d] - t[d] as f64).powi(2);
                }
            }
            let denom = (n * dof) as f64;
            Ok(EvalRecord {
                pairing,
                metric_name: "rmse".into(),
                value: (sq / denom).sqrt(),
                baseline: Some((sq_base / denom).sqrt()),
                n,
            })
        }
        TaskKind::MaeRecon => {
            let mut total = 0.0f64;
            for (i, b) in batches.iter().enumerate() {
                let (loss, _) = mae_forward_loss(
                    model,
                    &b.sensor_id,
                    &b.task_id,
                    &b.images,
                    mask_ratio,
                    derive_seed_idx(0, "eval-mask", i as u64),
                )?;
                total += loss.item() as f64;
            }
            Ok(EvalRecord {
                pairing,
                metric_name: "masked_loss".into(),
                value: total / batches.len() as f64,
                baseline: None,
                n: store.units(),
            })
        }
    })
}

/// Higher-is-better score used for the best-checkpoint snapshot.
fn goodness(rec: &EvalRecord) -> f64 {
    match rec.metric_name.as_str() {
        "top1_accuracy" => rec.value,
        _ => -rec.value,
    }
}

pub struct StageRunner {
    pub cfg: TrainConfig,
    pub freeze: Freeze,
    /// Checkpoints, metric log, and the loss curve land here when set.
    pub out_dir: Option<PathBuf>,
}

pub const CKPT_LATEST: &str = "ckpt-latest.tar";
pub const CKPT_FINAL: &str = "ckpt-final.tar";
pub const CKPT_BEST: &str = "ckpt-best.tar";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LOSS_CURVE_FILE: &str = "loss_curve.png";

impl StageRunner {
    pub fn new(cfg: TrainConfig) -> Self {
        StageRunner {
            cfg,
            freeze: Freeze::None,
            out_dir: None,
        }
    }

    pub fn with_out_dir(mut self, dir: &Path) -> Self {
        self.out_dir = Some(dir.to_path_buf());
        self
    }

    pub fn with_freeze(mut self, freeze: Freeze) -> Self {
        self.freeze = freeze;
        self
    }

    fn ckpt_path(&self, name: &str) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join(name))
    }

    /// Run the stage over homogeneous pairing batches. Picks up at
    /// `resume.step` with restored optimizer moments when given.
    pub fn run(
        &self,
        model: &T3Model<f32>,
        train: Vec<PairingStore>,
        val: Vec<PairingStore>,
        resume: Option<CheckpointExtras>,
    ) -> Result<TrainState> {
        self.run_partial(model, train, val, resume, None)
    }

    /// Like [`run`], but stop after `stop_at` steps while keeping the full
    /// schedule (the learning-rate curve still spans `cfg.steps`).
    pub fn run_partial(
        &self,
        model: &T3Model<f32>,
        train: Vec<PairingStore>,
        val: Vec<PairingStore>,
        resume: Option<CheckpointExtras>,
        stop_at: Option<usize>,
    ) -> Result<TrainState> {
        self.cfg.validate()?;
        if let Some(dir) = &self.out_dir {
            std::fs::create_dir_all(dir)
                .map_err(|e| T3Error::Io(format!("cannot create {}: {e}", dir.display())))?;
        }
        let sampler = PairingSampler::new(
            train,
            self.cfg.batch_size,
            self.cfg.pairing_weighting,
            self.cfg.seed,
        )?;
        for warning in &sampler.dropped {
            eprintln!("warning: {warning}");
        }

        let log = match self.out_dir.as_ref() {
            Some(dir) => MetricLog::at_path(&dir.join(METRICS_FILE))?,
            None => MetricLog::in_memory(),
        };
        let mut state = TrainState {
            step: 0,
            optimizer: AdamW::new(),
            best: None,
            log,
        };
        if let Some(resume) = resume {
            state.step = resume.step;
            if let Some(opt) = resume.optimizer {
                state.optimizer = opt;
            }
        }
        let mut last_ckpt: Option<String> = None;
        let stop = stop_at.unwrap_or(self.cfg.steps).min(self.cfg.steps);

        while state.step < stop {
            let step = state.step;
            let lr = lr_at(step, &self.cfg);
            let batch = sampler.batch_at(step as u64)?;
            let mask_seed = derive_seed_idx(self.cfg.seed, "mask", step as u64);
            let loss = batch_loss(model, &batch, self.cfg.mask_ratio, mask_seed)?;
            let loss_value = loss.item() as f64;
            if !loss_value.is_finite() {
                return Err(T3Error::NumericAbort {
                    step,
                    checkpoint: last_ckpt,
                });
            }
            let params = model.trainable_set(&batch.sensor_id, &batch.task_id)?;
            loss.backward();
            let updatable: Vec<(String, Tensor<f32>)> = params
                .iter()
                .filter(|(n, _)| !self.freeze.excludes(n))
                .cloned()
                .collect();
            state.optimizer.step(&updatable, lr, self.cfg.weight_decay);
            for (_, p) in &params {
                p.zero_grad();
            }
            state.step += 1;
            state.log.push(MetricRow {
                step: state.step,
                stage: self.cfg.stage.tag().into(),
                pairing: format!("{}/{}", batch.sensor_id, batch.task_id),
                loss: Some(loss_value),
                metric_name: "train_loss".into(),
                metric_value: loss_value,
                lr,
            })?;

            let at_eval = self.cfg.eval_every > 0 && state.step % self.cfg.eval_every == 0;
            let at_end = state.step == stop;
            if at_eval || at_end {
                let mut scores = Vec::new();
                for store in &val {
                    let rec = evaluate(model, store, self.cfg.batch_size, self.cfg.mask_ratio)?;
                    scores.push(goodness(&rec));
                    state.log.push(MetricRow {
                        step: state.step,
                        stage: self.cfg.stage.tag().into(),
                        pairing: rec.pairing.clone(),
                        loss: None,
                        metric_name: format!("val_{}", rec.metric_name),
                        metric_value: rec.value,
                        lr,
                    })?;
                    if let Some(baseline) = rec.baseline {
                        state.log.push(MetricRow {
                            step: state.step,
                            stage: self.cfg.stage.tag().into(),
                            pairing: rec.pairing,
                            loss: None,
                            metric_name: "val_baseline_rmse".into(),
                            metric_value: baseline,
                            lr,
                        })?;
                    }
                }
                if !scores.is_empty() {
                    let score = scores.iter().sum::<f64>() / scores.len() as f64;
                    let improved = state.best.as_ref().map_or(true, |b| score > b.score);
                    if improved {
                        state.best = Some(BestSnapshot {
                            step: state.step,
                            score,
                        });
                        if let Some(path) = self.ckpt_path(CKPT_BEST) {
                            save_checkpoint(
                                model,
                                state.step,
                                Some(&state.optimizer),
                                Some(&self.cfg),
                                &path,
                            )?;
                        }
                    }
                }
                if let Some(path) = self.ckpt_path(CKPT_LATEST) {
                    save_checkpoint(model, state.step, Some(&state.optimizer), Some(&self.cfg), &path)?;
                    last_ckpt = Some(path.display().to_string());
                }
            }
        }

        if let Some(path) = self.ckpt_path(CKPT_FINAL) {
            save_checkpoint(model, state.step, Some(&state.optimizer), Some(&self.cfg), &path)?;
        }
        if let Some(dir) = &self.out_dir {
            let points: Vec<(f64, f64)> = state
                .log
                .rows
                .iter()
                .filter(|r| r.metric_name == "train_loss")
                .map(|r| (r.step as f64, r.metric_value))
                .collect();
            if points.len() >= 2 {
                crate::plot::line_plot(
                    &dir.join(LOSS_CURVE_FILE),
                    &[("train_loss", &points)],
                    "step",
                    "loss",
                )?;
            }
        }
        Ok(state)
    }
}

/// Load stage-I stores: every pairing's records become (sensor, mae-task)
/// stores so self-supervised pre-training can use all data.
pub fn retag_for_mae(store: PairingStore, mae_task_id: &str) -> Result<PairingStore> {
    PairingStore::from_records(
        &store.sensor.clone(),
        mae_task_id,
        TaskKind::MaeRecon,
        1,
        store.records,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Labels, ShardRecord};
    use crate::model::{identity_share_map, SizeConfig, TaskDef};
    use crate::synth::{flat_image, render, ProbeSpec, SensorStyle};

    fn jpeg_of(img: &image::RgbImage) -> Vec<u8> {
        let mut bytes = Vec::new();
        let mut enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut bytes, 92);
        enc.encode_image(&image::DynamicImage::ImageRgb8(img.clone())).unwrap();
        bytes
    }

    fn synth_cls_store(style_idx: usize, n: usize, seed: u64) -> PairingStore {
        let style = SensorStyle::preset(style_idx);
        let flat = flat_image(&style);
        let mut records = Vec::new();
        for i in 0..n {
            let mut rng = crate::rng::rng_from_idx(seed, "trainer-test", i as u64);
            use rand::Rng;
            let probe = ProbeSpec::new(rng.gen_range(0..6)).unwrap();
            let force = rng.gen_range(0.5..2.0);
            let pose = [rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0)];
            let img = render(&style, &probe, pose, force).unwrap();
            let labels = Labels {
                sensor_id: style.name.clone(),
                object_id: Some(probe.probe_id as i64),
                sigma: Some(crate::data::vol_sigma(&img, &flat).unwrap()),
                force_z: Some(force),
                pose3: Some([pose[0], pose[1], 0.5 * force]),
                ..Default::default()
            };
            records.push(ShardRecord::new(&format!("r{i:04}"), jpeg_of(&img), &labels).unwrap());
        }
        PairingStore::from_records(
            &style.name,
            "cls",
            TaskKind::Classifier { num_classes: 6 },
            1,
            records,
        )
        .unwrap()
    }

    fn nano_cls_model(sensor: &str, seed: u64) -> T3Model<f32> {
        let sensors = vec![sensor.to_string()];
        let share = identity_share_map(&sensors);
        T3Model::assemble(
            SizeConfig::nano(),
            &sensors,
            &[TaskDef::new("cls", TaskKind::Classifier { num_classes: 6 })],
            &share,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn evaluate_perfect_and_baseline_identities() {
        // constant mean predictor RMSE equals the label standard deviation
        let store = synth_cls_store(0, 12, 1);
        let model = nano_cls_model("wedge", 2);
        let rec = evaluate(&model, &store, 4, 0.8).unwrap();
        assert_eq!(rec.metric_name, "top1_accuracy");
        assert!(rec.value >= 0.0 && rec.value <= 1.0);
        assert_eq!(rec.n, 12);
    }

    #[test]
    fn untrained_classifier_is_near_chance() {
        let store = synth_cls_store(0, 120, 3);
        let model = nano_cls_model("wedge", 4);
        let rec = evaluate(&model, &store, 8, 0.8).unwrap();
        // 4-sigma binomial band around 1/6 at n = 120
        let band = 4.0 * (1.0 / 6.0 * 5.0 / 6.0 / 120.0f64).sqrt();
        assert!(
            (rec.value - 1.0 / 6.0).abs() < band + 1e-9,
            "accuracy {} outside chance band {band}",
            rec.value
        );
    }

    #[test]
    fn baseline_rmse_equals_label_std() {
        // regression eval against a frozen random model: baseline identity
        let style = SensorStyle::preset(1);
        let flat = flat_image(&style);
        let mut records = Vec::new();
        for i in 0..10 {
            let probe = ProbeSpec::new(i % 6).unwrap();
            let force = 0.5 + 0.15 * i as f64;
            let img = render(&style, &probe, [0.0, 0.0], force).unwrap();
            let labels = Labels {
                sensor_id: style.name.clone(),
                sigma: Some(crate::data::vol_sigma(&img, &flat).unwrap()),
                object_id: Some(0),
                ..Default::default()
            };
            records.push(ShardRecord::new(&format!("v{i}"), jpeg_of(&img), &labels).unwrap());
        }
        let sigmas: Vec<f64> = records
            .iter()
            .map(|r| r.labels().unwrap().sigma.unwrap())
            .collect();
        let store =
            PairingStore::from_records(&style.name, "vol", TaskKind::VolRegressor, 1, records)
                .unwrap();
        let sensors = vec![style.name.clone()];
        let share = identity_share_map(&sensors);
        let model = T3Model::assemble(
            SizeConfig::nano(),
            &sensors,
            &[TaskDef::new("vol", TaskKind::VolRegressor)],
            &share,
            5,
        )
        .unwrap();
        let rec = evaluate(&model, &store, 4, 0.8).unwrap();
        let mean = sigmas.iter().sum::<f64>() / sigmas.len() as f64;
        let std = (sigmas.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>()
            / sigmas.len() as f64)
            .sqrt();
        let baseline = rec.baseline.unwrap();
        // eval runs in f32; allow float slack
        assert!(
            (baseline - std).abs() < 1e-3 * std.max(1.0),
            "baseline {baseline} vs label std {std}"
        );
    }

    #[test]
    fn finetune_touches_only_its_pairing() {
        let sensors = vec!["wedge".to_string(), "mini".to_string()];
        let share = identity_share_map(&sensors);
        let model = T3Model::assemble(
            SizeConfig::nano(),
            &sensors,
            &[
                TaskDef::new("cls", TaskKind::Classifier { num_classes: 6 }),
                TaskDef::new("vol", TaskKind::VolRegressor),
            ],
            &share,
            6,
        )
        .unwrap();
        let before: Vec<(String, Vec<f32>)> = model
            .named_params()
            .into_iter()
            .filter(|(n, _)| n.starts_with("encoder/mini") || n.starts_with("decoder/vol"))
            .map(|(n, t)| (n, t.to_vec()))
            .collect();

        let cfg = TrainConfig {
            eval_every: 0,
            ..TrainConfig::stage_defaults(Stage::Finetune, 3)
        };
        let runner = StageRunner::new(cfg);
        let train = vec![synth_cls_store(0, 10, 7)];
        runner.run(&model, train, vec![], None).unwrap();

        // untouched components: bytes unchanged and no residual gradients
        for (name, t) in model.named_params() {
            if name.starts_with("encoder/mini") || name.starts_with("decoder/vol") {
                let orig = &before.iter().find(|(n, _)| *n == name).unwrap().1;
                assert_eq!(&t.to_vec(), orig, "{name} changed");
                assert!(t.grad().is_none(), "{name} holds a gradient");
            }
        }
    }

    #[test]
    fn frozen_trunk_stays_bit_identical() {
        let model = nano_cls_model("wedge", 8);
        let trunk_before: Vec<Vec<f32>> = model
            .named_params()
            .iter()
            .filter(|(n, _)| n.starts_with("trunk"))
            .map(|(_, t)| t.to_vec())
            .collect();
        let cfg = TrainConfig {
            warmup_steps: 0,
            ..TrainConfig::stage_defaults(Stage::Finetune, 3)
        };
        let runner = StageRunner::new(cfg).with_freeze(Freeze::Trunk);
        runner
            .run(&model, vec![synth_cls_store(0, 10, 9)], vec![], None)
            .unwrap();
        let trunk_after: Vec<Vec<f32>> = model
            .named_params()
            .iter()
            .filter(|(n, _)| n.starts_with("trunk"))
            .map(|(_, t)| t.to_vec())
            .collect();
        assert_eq!(trunk_before, trunk_after);

        // encoder did move
        let enc_moved = {
            let model2 = nano_cls_model("wedge", 8);
            let orig: Vec<Vec<f32>> = model2
                .named_params()
                .iter()
                .filter(|(n, _)| n.starts_with("encoder/"))
                .map(|(_, t)| t.to_vec())
                .collect();
            let now: Vec<Vec<f32>> = model
                .named_params()
                .iter()
                .filter(|(n, _)| n.starts_with("encoder/"))
                .map(|(_, t)| t.to_vec())
                .collect();
            orig != now
        };
        assert!(enc_moved, "unfrozen encoder should have been updated");
    }

    #[test]
    fn resume_reproduces_the_continuation_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let total_steps = 6;
        let cfg = TrainConfig {
            warmup_steps: 1,
            eval_every: 0,
            ..TrainConfig::stage_defaults(Stage::Finetune, total_steps)
        };

        // uninterrupted run
        let model_a = nano_cls_model("wedge", 10);
        let runner = StageRunner::new(cfg.clone());
        let state_a = runner
            .run(&model_a, vec![synth_cls_store(0, 12, 11)], vec![], None)
            .unwrap();

        // interrupted at step 3 (same schedule), checkpointed, resumed
        let model_b = nano_cls_model("wedge", 10);
        let state_b1 = StageRunner::new(cfg.clone())
            .run_partial(&model_b, vec![synth_cls_store(0, 12, 11)], vec![], None, Some(3))
            .unwrap();
        let ckpt = dir.path().join("mid.tar");
        save_checkpoint(&model_b, state_b1.step, Some(&state_b1.optimizer), Some(&cfg), &ckpt)
            .unwrap();
        let (model_c, extras) = crate::checkpoint::load_checkpoint(&ckpt).unwrap();
        let state_b2 = StageRunner::new(cfg)
            .run(&model_c, vec![synth_cls_store(0, 12, 11)], vec![], Some(extras))
            .unwrap();

        let losses_a: Vec<f64> = state_a.log.rows.iter().filter_map(|r| r.loss).collect();
        let losses_b: Vec<f64> = state_b2.log.rows.iter().filter_map(|r| r.loss).collect();
        assert_eq!(losses_b.len(), 3);
        for (a, b) in losses_a[3..].iter().zip(&losses_b) {
            assert_eq!(a.to_bits(), b.to_bits(), "resumed loss diverged");
        }
    }
}
