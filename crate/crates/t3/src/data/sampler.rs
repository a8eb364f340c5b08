//! Homogeneous pairing-batch sampling.
//!
//! Every emitted batch carries exactly one (sensor, task) tag. The pairing
//! for each batch is drawn by a weighting rule over pairing sizes; record
//! choice and augmentation are keyed by (seed, step), so a resumed run
//! reproduces the exact batch sequence from its step counter alone.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{augment, AugmentCfg, ShardRecord, ShardSet};
use crate::decoders::TaskKind;
use crate::error::{Result, T3Error};
use crate::rng::{derive_seed_idx, derive_seed_idx2};
use crate::tensor::Tensor;

/// How the pairing for each batch is chosen. `Temperature(t)` draws with
/// probability proportional to `n^t`: 1 reproduces proportional sampling and
/// 0 is uniform over pairings.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "weighting", content = "tau", rename_all = "snake_case")]
pub enum Weighting {
    Proportional,
    Uniform,
    Temperature(f64),
}

impl Weighting {
    fn exponent(&self) -> f64 {
        match self {
            Weighting::Proportional => 1.0,
            Weighting::Uniform => 0.0,
            Weighting::Temperature(t) => *t,
        }
    }
}

impl Default for Weighting {
    fn default() -> Self {
        Weighting::Temperature(0.5)
    }
}

/// Task-typed labels of one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelBatch {
    Classes(Vec<usize>),
    Scalars(Vec<f32>),
    Poses(Vec<Vec<f32>>),
    None,
}

/// One homogeneous batch; `images2` is present only for dual-image tasks.
pub struct PairingBatch {
    pub sensor_id: String,
    pub task_id: String,
    pub images: Tensor<f32>,
    pub images2: Option<Tensor<f32>>,
    pub labels: LabelBatch,
    pub keys: Vec<String>,
    /// Per-record sensor tags, for homogeneity audits.
    pub record_sensor_ids: Vec<String>,
}

impl PairingBatch {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn is_homogeneous(&self) -> bool {
        self.record_sensor_ids.iter().all(|s| *s == self.sensor_id)
    }
}

/// In-memory record store for one pairing. Dual-image pairings keep their
/// two record halves adjacent (`{stem}a`, `{stem}b`).
pub struct PairingStore {
    pub sensor: String,
    pub task: String,
    pub kind: TaskKind,
    pub arity: usize,
    pub records: Vec<ShardRecord>,
    cache: RefCell<Vec<Option<Rc<RgbImage>>>>,
}

/// Decoded images are cached only for small stores.
const DECODE_CACHE_LIMIT: usize = 1024;

impl PairingStore {
    pub fn from_records(
        sensor: &str,
        task: &str,
        kind: TaskKind,
        arity: usize,
        records: Vec<ShardRecord>,
    ) -> Result<Self> {
        if !kind.arity_valid(arity) {
            return Err(T3Error::Config(format!(
                "task '{task}' cannot take arity {arity}"
            )));
        }
        for r in &records {
            let labels = r.labels()?;
            if labels.sensor_id != sensor {
                return Err(T3Error::Data(format!(
                    "record '{}' tagged sensor '{}' inside pairing ({sensor}, {task})",
                    r.key, labels.sensor_id
                )));
            }
        }
        if arity == 2 {
            if records.len() % 2 != 0 {
                return Err(T3Error::Data(format!(
                    "dual pairing ({sensor}, {task}) has an odd record count {}",
                    records.len()
                )));
            }
            for pair in records.chunks(2) {
                let (a, b) = (&pair[0].key, &pair[1].key);
                let ok = a.ends_with('a')
                    && b.ends_with('b')
                    && a[..a.len() - 1] == b[..b.len() - 1];
                if !ok {
                    return Err(T3Error::Data(format!(
                        "dual pairing records '{a}'/'{b}' are not an adjacent a/b pair"
                    )));
                }
            }
        }
        let cache = RefCell::new(if records.len() <= DECODE_CACHE_LIMIT {
            vec![None; records.len()]
        } else {
            Vec::new()
        });
        Ok(PairingStore {
            sensor: sensor.to_string(),
            task: task.to_string(),
            kind,
            arity,
            records,
            cache,
        })
    }

    /// Load a pairing by streaming its shard set fully into memory
    /// (archive order, which preserves pair adjacency).
    pub fn load(
        set: &ShardSet,
        sensor: &str,
        task: &str,
        kind: TaskKind,
        arity: usize,
    ) -> Result<Self> {
        let records: Vec<ShardRecord> = super::stream_shards(set, 1, 0).collect();
        Self::from_records(sensor, task, kind, arity, records)
    }

    /// Sampling units: records for single-image tasks, adjacent pairs for
    /// dual-image tasks.
    pub fn units(&self) -> usize {
        self.records.len() / self.arity
    }

    fn decoded(&self, index: usize) -> Result<Rc<RgbImage>> {
        {
            let cache = self.cache.borrow();
            if let Some(Some(img)) = cache.get(index) {
                return Ok(img.clone());
            }
        }
        let img = Rc::new(self.records[index].decode_image()?);
        let mut cache = self.cache.borrow_mut();
        if let Some(slot) = cache.get_mut(index) {
            *slot = Some(img.clone());
        }
        Ok(img)
    }

    fn label_of(&self, unit: usize) -> Result<LabelValue> {
        match (&self.kind, self.arity) {
            (TaskKind::Classifier { num_classes }, _) => {
                let labels = self.records[unit].labels()?;
                let id = labels.object_id.ok_or_else(|| {
                    T3Error::Data(format!("record '{}' lacks object_id", self.records[unit].key))
                })?;
                if id < 0 || id as usize >= *num_classes {
                    return Err(T3Error::Data(format!(
                        "record '{}' class {id} outside 0..{num_classes}",
                        self.records[unit].key
                    )));
                }
                Ok(LabelValue::Class(id as usize))
            }
            (TaskKind::VolRegressor, _) => {
                let labels = self.records[unit].labels()?;
                let sigma = labels.sigma.ok_or_else(|| {
                    T3Error::Data(format!("record '{}' lacks sigma", self.records[unit].key))
                })?;
                Ok(LabelValue::Scalar(sigma as f32))
            }
            (TaskKind::Pose { dof }, 2) => {
                let a = self.records[unit * 2].labels()?;
                let b = self.records[unit * 2 + 1].labels()?;
                let rel: Vec<f32> = match dof {
                    3 => {
                        let (pa, pb) = (
                            a.pose3.ok_or_else(|| T3Error::Data("pair half lacks pose3".into()))?,
                            b.pose3.ok_or_else(|| T3Error::Data("pair half lacks pose3".into()))?,
                        );
                        (0..3).map(|i| (pb[i] - pa[i]) as f32).collect()
                    }
                    _ => {
                        let (pa, pb) = (
                            a.pose6.ok_or_else(|| T3Error::Data("pair half lacks pose6".into()))?,
                            b.pose6.ok_or_else(|| T3Error::Data("pair half lacks pose6".into()))?,
                        );
                        (0..6).map(|i| (pb[i] - pa[i]) as f32).collect()
                    }
                };
                Ok(LabelValue::Pose(rel))
            }
            (TaskKind::Pose { dof }, _) => {
                let labels = self.records[unit].labels()?;
                let pose = match dof {
                    3 => labels.pose3.map(|p| p.to_vec()),
                    _ => labels.pose6.map(|p| p.to_vec()),
                };
                let pose = pose.ok_or_else(|| {
                    T3Error::Data(format!("record '{}' lacks pose label", self.records[unit].key))
                })?;
                Ok(LabelValue::Pose(pose.iter().map(|&v| v as f32).collect()))
            }
            (TaskKind::MaeRecon, _) => Ok(LabelValue::None),
        }
    }

    /// Assemble a batch from unit indices with per-slot augmentation seeds.
    pub fn assemble_batch(
        &self,
        units: &[usize],
        cfg: AugmentCfg,
        seed: u64,
        step: u64,
    ) -> Result<PairingBatch> {
        let b = units.len();
        let mut data1 = Vec::with_capacity(b * 3 * 224 * 224);
        let mut data2 = if self.arity == 2 {
            Vec::with_capacity(b * 3 * 224 * 224)
        } else {
            Vec::new()
        };
        let mut keys = Vec::with_capacity(b * self.arity);
        let mut sensors = Vec::with_capacity(b * self.arity);
        let mut classes = Vec::new();
        let mut scalars = Vec::new();
        let mut poses = Vec::new();

        for (slot, &u) in units.iter().enumerate() {
            let first = u * self.arity;
            let img = self.decoded(first)?;
            let aug_seed = derive_seed_idx2(seed, "aug", step, (slot * 2) as u64);
            data1.extend(augment(&img, cfg, aug_seed).to_vec());
            keys.push(self.records[first].key.clone());
            sensors.push(self.records[first].labels()?.sensor_id);
            if self.arity == 2 {
                let img2 = self.decoded(first + 1)?;
                let aug_seed2 = derive_seed_idx2(seed, "aug", step, (slot * 2 + 1) as u64);
                data2.extend(augment(&img2, cfg, aug_seed2).to_vec());
                keys.push(self.records[first + 1].key.clone());
                sensors.push(self.records[first + 1].labels()?.sensor_id);
            }
            match self.label_of(u)? {
                LabelValue::Class(c) => classes.push(c),
                LabelValue::Scalar(s) => scalars.push(s),
                LabelValue::Pose(p) => poses.push(p),
                LabelValue::None => {}
            }
        }

        let labels = match &self.kind {
            TaskKind::Classifier { .. } => LabelBatch::Classes(classes),
            TaskKind::VolRegressor => LabelBatch::Scalars(scalars),
            TaskKind::Pose { .. } => LabelBatch::Poses(poses),
            TaskKind::MaeRecon => LabelBatch::None,
        };
        Ok(PairingBatch {
            sensor_id: self.sensor.clone(),
            task_id: self.task.clone(),
            images: Tensor::from_vec(data1, &[b, 3, 224, 224]),
            images2: (self.arity == 2).then(|| Tensor::from_vec(data2, &[b, 3, 224, 224])),
            labels,
            keys,
            record_sensor_ids: sensors,
        })
    }

    /// Sequential evaluation batches over the whole store, no augmentation.
    pub fn eval_batches(&self, batch_size: usize) -> Result<Vec<PairingBatch>> {
        if self.units() == 0 {
            return Err(T3Error::Config(format!(
                "empty evaluation set for pairing ({}, {})",
                self.sensor, self.task
            )));
        }
        let mut out = Vec::new();
        let units: Vec<usize> = (0..self.units()).collect();
        for chunk in units.chunks(batch_size) {
            out.push(self.assemble_batch(chunk, AugmentCfg::eval(), 0, 0)?);
        }
        Ok(out)
    }
}

enum LabelValue {
    Class(usize),
    Scalar(f32),
    Pose(Vec<f32>),
    None,
}

/// Draws one homogeneous batch per step.
pub struct PairingSampler {
    stores: Vec<PairingStore>,
    weights: Vec<f64>,
    batch_size: usize,
    seed: u64,
    /// Pairings dropped because they hold fewer units than one batch.
    pub dropped: Vec<String>,
}

impl PairingSampler {
    pub fn new(
        stores: Vec<PairingStore>,
        batch_size: usize,
        weighting: Weighting,
        seed: u64,
    ) -> Result<Self> {
        assert!(batch_size >= 1, "batch size must be at least 1");
        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        for s in stores {
            if s.units() < batch_size {
                dropped.push(format!(
                    "pairing ({}, {}) dropped: {} units < batch size {batch_size}",
                    s.sensor,
                    s.task,
                    s.units()
                ));
            } else {
                kept.push(s);
            }
        }
        if kept.is_empty() {
            return Err(T3Error::Config(
                "no pairing holds at least one full batch".into(),
            ));
        }
        let tau = weighting.exponent();
        let weights: Vec<f64> = kept.iter().map(|s| (s.units() as f64).powf(tau)).collect();
        Ok(PairingSampler {
            stores: kept,
            weights,
            batch_size,
            seed,
            dropped,
        })
    }

    pub fn pairings(&self) -> &[PairingStore] {
        &self.stores
    }

    /// Which pairing batch `step` draws from.
    pub fn pairing_at(&self, step: u64) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_idx(self.seed, "pick", step));
        let total: f64 = self.weights.iter().sum();
        let mut draw = rng.gen_range(0.0..total);
        for (i, w) in self.weights.iter().enumerate() {
            if draw < *w {
                return i;
            }
            draw -= w;
        }
        self.weights.len() - 1
    }

    /// The batch for a given step counter; fully determined by (seed, step).
    pub fn batch_at(&self, step: u64) -> Result<PairingBatch> {
        let store = &self.stores[self.pairing_at(step)];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_idx(self.seed, "units", step));
        let mut chosen = HashSet::new();
        let mut units = Vec::with_capacity(self.batch_size);
        while units.len() < self.batch_size {
            let u = rng.gen_range(0..store.units());
            if chosen.insert(u) {
                units.push(u);
            }
        }
        let pose_task = matches!(store.kind, TaskKind::Pose { .. });
        store.assemble_batch(&units, AugmentCfg::train(pose_task), self.seed, step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Labels;

    fn png_bytes(tint: u8) -> Vec<u8> {
        let img = RgbImage::from_fn(16, 16, |x, y| {
            image::Rgb([tint, (x * 16) as u8, (y * 16) as u8])
        });
        let mut bytes = Vec::new();
        image::DynamicImage::ImageRgb8(img)
            .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .unwrap();
        bytes
    }

    fn cls_store(sensor: &str, n: usize) -> PairingStore {
        let records: Vec<ShardRecord> = (0..n)
            .map(|i| {
                let labels = Labels {
                    sensor_id: sensor.to_string(),
                    object_id: Some((i % 6) as i64),
                    ..Default::default()
                };
                ShardRecord::new(&format!("{sensor}-{i:05}"), png_bytes((i % 200) as u8), &labels)
                    .unwrap()
            })
            .collect();
        PairingStore::from_records(sensor, "cls", TaskKind::Classifier { num_classes: 6 }, 1, records)
            .unwrap()
    }

    fn pose_store(sensor: &str, pairs: usize) -> PairingStore {
        let mut records = Vec::new();
        for i in 0..pairs {
            for (suffix, offset) in [("a", 0.0), ("b", 1.5)] {
                let labels = Labels {
                    sensor_id: sensor.to_string(),
                    object_id: Some(0),
                    pose3: Some([i as f64, 2.0 * i as f64 + offset, 0.5]),
                    force_z: Some(1.0),
                    ..Default::default()
                };
                records.push(
                    ShardRecord::new(&format!("{sensor}-{i:05}{suffix}"), png_bytes(3), &labels)
                        .unwrap(),
                );
            }
        }
        PairingStore::from_records(sensor, "pose", TaskKind::Pose { dof: 3 }, 2, records).unwrap()
    }

    #[test]
    fn uniform_weighting_concentrates_at_equal_shares() {
        let stores = vec![cls_store("a", 30), cls_store("b", 300), cls_store("c", 90)];
        let sampler = PairingSampler::new(stores, 4, Weighting::Uniform, 1).unwrap();
        let n = 3000u64;
        let mut counts = [0usize; 3];
        for step in 0..n {
            counts[sampler.pairing_at(step)] += 1;
        }
        for c in counts {
            let share = c as f64 / n as f64;
            assert!((share - 1.0 / 3.0).abs() < 0.05, "share {share}");
        }
    }

    #[test]
    fn proportional_matches_sizes() {
        let stores = vec![cls_store("a", 100), cls_store("b", 200), cls_store("c", 700)];
        let sampler = PairingSampler::new(stores, 4, Weighting::Proportional, 2).unwrap();
        let n = 4000u64;
        let mut counts = [0usize; 3];
        for step in 0..n {
            counts[sampler.pairing_at(step)] += 1;
        }
        for (c, expect) in counts.iter().zip([0.1, 0.2, 0.7]) {
            let share = *c as f64 / n as f64;
            assert!((share - expect).abs() < 0.05, "share {share} vs {expect}");
        }
    }

    #[test]
    fn temperature_one_equals_proportional() {
        let stores = || vec![cls_store("a", 100), cls_store("b", 400)];
        let s1 = PairingSampler::new(stores(), 4, Weighting::Proportional, 3).unwrap();
        let s2 = PairingSampler::new(stores(), 4, Weighting::Temperature(1.0), 3).unwrap();
        for step in 0..500 {
            assert_eq!(s1.pairing_at(step), s2.pairing_at(step));
        }
    }

    #[test]
    fn every_batch_is_homogeneous() {
        let stores = vec![cls_store("a", 40), cls_store("b", 40), pose_store("c", 20)];
        let sampler = PairingSampler::new(stores, 4, Weighting::Uniform, 4).unwrap();
        for step in 0..100 {
            let batch = sampler.batch_at(step).unwrap();
            assert!(batch.is_homogeneous(), "mixed batch at step {step}");
            assert_eq!(batch.len(), if batch.images2.is_some() { 8 } else { 4 });
        }
    }

    #[test]
    fn undersized_pairing_dropped_with_warning() {
        let stores = vec![cls_store("a", 2), cls_store("b", 40)];
        let sampler = PairingSampler::new(stores, 8, Weighting::Uniform, 5).unwrap();
        assert_eq!(sampler.pairings().len(), 1);
        assert_eq!(sampler.dropped.len(), 1);
        assert!(sampler.dropped[0].contains("(a, cls)"));
    }

    #[test]
    fn batches_are_reproducible_from_step() {
        let sampler =
            PairingSampler::new(vec![cls_store("a", 50)], 4, Weighting::Uniform, 6).unwrap();
        let b1 = sampler.batch_at(17).unwrap();
        let b2 = sampler.batch_at(17).unwrap();
        assert_eq!(b1.keys, b2.keys);
        assert_eq!(b1.images.to_vec(), b2.images.to_vec());
    }

    #[test]
    fn pose_pairs_have_relative_labels() {
        let store = pose_store("c", 5);
        let batch = store
            .assemble_batch(&[0, 3], AugmentCfg::eval(), 0, 0)
            .unwrap();
        match &batch.labels {
            LabelBatch::Poses(p) => {
                assert_eq!(p.len(), 2);
                for rel in p {
                    assert_eq!(rel.len(), 3);
                    assert!((rel[0] - 0.0).abs() < 1e-6);
                    assert!((rel[1] - 1.5).abs() < 1e-6);
                    assert!((rel[2] - 0.0).abs() < 1e-6);
                }
            }
            other => panic!("expected pose labels, got {other:?}"),
        }
        assert!(batch.images2.is_some());
    }

    #[test]
    fn dual_store_rejects_broken_pairing() {
        let labels = Labels {
            sensor_id: "s".into(),
            pose3: Some([0.0, 0.0, 0.0]),
            ..Default::default()
        };
        let recs = vec![
            ShardRecord::new("0a", png_bytes(0), &labels).unwrap(),
            ShardRecord::new("1b", png_bytes(0), &labels).unwrap(),
        ];
        assert!(
            PairingStore::from_records("s", "pose", TaskKind::Pose { dof: 3 }, 2, recs).is_err()
        );
    }
}
