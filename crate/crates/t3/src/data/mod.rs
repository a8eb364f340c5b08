//! The sharded dataset layer: record/label schema, tar-packed shard sets
//! with manifests, streaming with a bounded shuffle buffer, contact-content
//! filtering, augmentation, and the homogeneous pairing-batch sampler.

mod augment;
mod sampler;
mod shards;
pub mod tarfile;
mod vol;

pub use augment::{augment, AugmentCfg};
pub use sampler::{LabelBatch, PairingBatch, PairingSampler, PairingStore, Weighting};
pub use shards::{pack_shards, stream_shards, stream_shards_parallel, ShardStream};
pub use vol::{laplacian_interior, vol_filter, vol_sigma, DEFAULT_VOL_THRESHOLD};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, T3Error};

/// Hard cap on records per archive.
pub const SHARD_CAP: usize = 10_000;

/// Task labels carried by one record. `sensor_id` is always present; other
/// fields are task-dependent and unknown keys roundtrip verbatim.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub sensor_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub object_id: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub material_id: Option<i64>,
    /// Translational pose in millimeters (x, y, depth proxy).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pose3: Option<[f64; 3]>,
    /// Millimeters plus radians axis-angle.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pose6: Option<[f64; 6]>,
    /// Variance-of-Laplacian contact metric.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Normal force in newtons.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub force_z: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unlabeled: Option<bool>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Labels {
    pub fn has_task_label(&self) -> bool {
        self.object_id.is_some()
            || self.material_id.is_some()
            || self.pose3.is_some()
            || self.pose6.is_some()
            || self.sigma.is_some()
            || self.force_z.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sensor_id.is_empty() {
            return Err(T3Error::Data("record labels missing sensor_id".into()));
        }
        if !self.has_task_label() && self.unlabeled != Some(true) {
            return Err(T3Error::Data(format!(
                "record for sensor '{}' carries no task label and is not flagged unlabeled",
                self.sensor_id
            )));
        }
        Ok(())
    }
}

/// One datapoint: compressed image bytes plus the raw label JSON. The JSON
/// bytes are kept verbatim so shard roundtrips are byte-exact.
#[derive(Debug, Clone)]
pub struct ShardRecord {
    pub key: String,
    pub image_bytes: Vec<u8>,
    pub label_json: Vec<u8>,
}

impl ShardRecord {
    pub fn new(key: &str, image_bytes: Vec<u8>, labels: &Labels) -> Result<Self> {
        labels.validate()?;
        Ok(ShardRecord {
            key: key.to_string(),
            image_bytes,
            label_json: serde_json::to_vec(labels)?,
        })
    }

    pub fn labels(&self) -> Result<Labels> {
        serde_json::from_slice(&self.label_json)
            .map_err(|e| T3Error::Data(format!("record '{}' has malformed labels: {e}", self.key)))
    }

    pub fn decode_image(&self) -> Result<image::RgbImage> {
        image::load_from_memory(&self.image_bytes)
            .map(|img| img.to_rgb8())
            .map_err(|e| T3Error::Data(format!("record '{}' image undecodable: {e}", self.key)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn tag(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = T3Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(T3Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// One manifest row per archive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRow {
    pub archive: String,
    pub records: usize,
    /// Histogram over sensor ids; the task half of a pairing is fixed by the
    /// dataset directory the shard set lives in.
    pub pairings: std::collections::BTreeMap<String, usize>,
}

/// An ordered collection of tar archives plus its manifest.
#[derive(Debug, Clone)]
pub struct ShardSet {
    pub dir: PathBuf,
    pub split: Split,
    pub rows: Vec<ManifestRow>,
}

impl ShardSet {
    pub fn manifest_path(dir: &Path, split: Split) -> PathBuf {
        dir.join(format!("{}-manifest.jsonl", split.tag()))
    }

    pub fn load(dir: &Path, split: Split) -> Result<Self> {
        let path = Self::manifest_path(dir, split);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| T3Error::Io(format!("cannot read manifest {}: {e}", path.display())))?;
        let mut rows = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            rows.push(serde_json::from_str(line)?);
        }
        Ok(ShardSet {
            dir: dir.to_path_buf(),
            split,
            rows,
        })
    }

    pub fn archive_paths(&self) -> Vec<PathBuf> {
        self.rows.iter().map(|r| self.dir.join(&r.archive)).collect()
    }

    pub fn record_count(&self) -> usize {
        self.rows.iter().map(|r| r.records).sum()
    }
}
