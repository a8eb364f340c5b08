//! Checkpoint archive: a single tar holding a JSON manifest, one raw f32
//! little-endian blob per component (encoder groups, trunk, decoders), and
//! optionally optimizer state, progress, and the training-config echo.
//! Loading rebuilds the model from the manifest and verifies every parameter
//! shape before accepting any bytes.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::tarfile::{TarReader, TarWriter};
use crate::error::{Result, T3Error};
use crate::model::{SizeConfig, T3Model, TaskDef};
use crate::tensor::Tensor;
use crate::train::optim::{AdamW, ParamState};
use crate::train::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    seed: u64,
    size_config: SizeConfig,
    share_map: BTreeMap<String, String>,
    tasks: Vec<TaskDef>,
    components: Vec<ComponentEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ComponentEntry {
    name: String,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimIndex {
    entries: Vec<OptimEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimEntry {
    name: String,
    t: u64,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Progress {
    step: usize,
}

/// Non-model state carried by a checkpoint.
pub struct CheckpointExtras {
    pub step: usize,
    pub optimizer: Option<AdamW>,
    pub train_config: Option<TrainConfig>,
}

fn component_of(param_name: &str) -> String {
    param_name
        .split_once('.')
        .map(|(c, _)| c.to_string())
        .unwrap_or_else(|| param_name.to_string())
}

fn f32s_to_bytes(vals: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(vals.len() * 4);
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bytes_to_f32s(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(T3Error::Data("parameter blob length not a multiple of 4".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn save_checkpoint(
    model: &T3Model<f32>,
    step: usize,
    optimizer: Option<&AdamW>,
    train_config: Option<&TrainConfig>,
    path: &Path,
) -> Result<()> {
    let named = model.named_params();
    // group params by component in encounter order
    let mut order: Vec<String> = Vec::new();
    let mut grouped: BTreeMap<String, Vec<&(String, Tensor<f32>)>> = BTreeMap::new();
    for p in &named {
        let comp = component_of(&p.0);
        if !grouped.contains_key(&comp) {
            order.push(comp.clone());
        }
        grouped.entry(comp).or_default().push(p);
    }
    let components: Vec<ComponentEntry> = order
        .iter()
        .map(|comp| ComponentEntry {
            name: comp.clone(),
            params: grouped[comp]
                .iter()
                .map(|(n, t)| ParamEntry {
                    name: n.clone(),
                    shape: t.shape(),
                })
                .collect(),
        })
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed: model.seed,
        size_config: model.size.clone(),
        share_map: model.share_map.clone(),
        tasks: model.tasks.clone(),
        components,
    };

    let file = std::fs::File::create(path)
        .map_err(|e| T3Error::Io(format!("cannot create checkpoint {}: {e}", path.display())))?;
    let mut tar = TarWriter::new(BufWriter::new(file));
    tar.append("manifest.json", &serde_json::to_vec(&manifest)?)?;
    for comp in &order {
        let mut blob = Vec::new();
        for (_, t) in &grouped[comp] {
            blob.extend_from_slice(&f32s_to_bytes(&t.to_vec()));
        }
        tar.append(&format!("params/{comp}.bin"), &blob)?;
    }
    if let Some(opt) = optimizer {
        let mut index = OptimIndex { entries: Vec::new() };
        let mut blob = Vec::new();
        for (name, st) in &opt.states {
            index.entries.push(OptimEntry {
                name: name.clone(),
                t: st.t,
                len: st.m.len(),
            });
            blob.extend_from_slice(&f32s_to_bytes(&st.m));
            blob.extend_from_slice(&f32s_to_bytes(&st.v));
        }
        tar.append("optimizer.json", &serde_json::to_vec(&index)?)?;
        tar.append("optimizer.bin", &blob)?;
    }
    tar.append("progress.json", &serde_json::to_vec(&Progress { step })?)?;
    if let Some(cfg) = train_config {
        tar.append("train_config.json", &serde_json::to_vec(cfg)?)?;
    }
    tar.finish()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(T3Model<f32>, CheckpointExtras)> {
    let file = std::fs::File::open(path)
        .map_err(|e| T3Error::Io(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let mut members: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for entry in TarReader::new(BufReader::new(file)) {
        let (name, data) = entry.map_err(|e| T3Error::Io(format!("corrupt checkpoint: {e}")))?;
        members.insert(name, data);
    }
    let manifest: Manifest = serde_json::from_slice(
        members
            .get("manifest.json")
            .ok_or_else(|| T3Error::Data("checkpoint missing manifest.json".into()))?,
    )?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(T3Error::Config(format!(
            "checkpoint format version {} unsupported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }

    let sensors: Vec<String> = manifest.share_map.keys().cloned().collect();
    let model = T3Model::assemble(
        manifest.size_config.clone(),
        &sensors,
        &manifest.tasks,
        &manifest.share_map,
        manifest.seed,
    )?;

    // verify the shape manifest against the rebuilt model before loading
    let named = model.named_params();
    let mut by_name: BTreeMap<&str, &Tensor<f32>> = BTreeMap::new();
    for (n, t) in &named {
        by_name.insert(n.as_str(), t);
    }
    let manifest_params: usize = manifest.components.iter().map(|c| c.params.len()).sum();
    if manifest_params != named.len() {
        return Err(T3Error::Data(format!(
            "checkpoint lists {manifest_params} parameters but the model has {}",
            named.len()
        )));
    }
    for comp in &manifest.components {
        for p in &comp.params {
            let t = by_name.get(p.name.as_str()).ok_or_else(|| {
                T3Error::Data(format!("checkpoint parameter '{}' unknown to the model", p.name))
            })?;
            if t.shape() != p.shape {
                return Err(T3Error::Data(format!(
                    "checkpoint parameter '{}' has shape {:?}, model expects {:?}",
                    p.name,
                    p.shape,
                    t.shape()
                )));
            }
        }
    }
    for comp in &manifest.components {
        let blob = members
            .get(&format!("params/{}.bin", comp.name))
            .ok_or_else(|| T3Error::Data(format!("checkpoint missing blob for '{}'", comp.name)))?;
        let vals = bytes_to_f32s(blob)?;
        let total: usize = comp.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        if vals.len() != total {
            return Err(T3Error::Data(format!(
                "component '{}' blob holds {} values, manifest says {total}",
                comp.name,
                vals.len()
            )));
        }
        let mut cursor = 0;
        for p in &comp.params {
            let n: usize = p.shape.iter().product();
            by_name[p.name.as_str()].set_data(vals[cursor..cursor + n].to_vec());
            cursor += n;
        }
    }

    let optimizer = match (members.get("optimizer.json"), members.get("optimizer.bin")) {
        (Some(index), Some(blob)) => {
            let index: OptimIndex = serde_json::from_slice(index)?;
            let vals = bytes_to_f32s(blob)?;
            let mut opt = AdamW::new();
            let mut cursor = 0;
            for e in index.entries {
                if cursor + 2 * e.len > vals.len() {
                    return Err(T3Error::Data("optimizer blob truncated".into()));
                }
                let m = vals[cursor..cursor + e.len].to_vec();
                let v = vals[cursor + e.len..cursor + 2 * e.len].to_vec();
                cursor += 2 * e.len;
                opt.states.insert(e.name, ParamState { m, v, t: e.t });
            }
            Some(opt)
        }
        _ => None,
    };
    let step = members
        .get("progress.json")
        .map(|b| serde_json::from_slice::<Progress>(b))
        .transpose()?
        .map(|p| p.step)
        .unwrap_or(0);
    let train_config = members
        .get("train_config.json")
        .map(|b| serde_json::from_slice::<TrainConfig>(b))
        .transpose()?;

    Ok((
        model,
        CheckpointExtras {
            step,
            optimizer,
            train_config,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoders::TaskKind;
    use crate::model::identity_share_map;

    fn small_model(seed: u64) -> T3Model<f32> {
        let sensors: Vec<String> = vec!["a".into(), "b".into()];
        let share = identity_share_map(&sensors);
        T3Model::assemble(
            SizeConfig::nano(),
            &sensors,
            &[
                TaskDef::new("cls", TaskKind::Classifier { num_classes: 6 }),
                TaskDef::new("mae", TaskKind::MaeRecon),
            ],
            &share,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_restores_exact_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.tar");
        let model = small_model(3);
        let mut opt = AdamW::new();
        opt.states.insert(
            "trunk.block0.fc1.w".into(),
            ParamState {
                m: vec![0.5; 4],
                v: vec![0.25; 4],
                t: 7,
            },
        );
        save_checkpoint(&model, 42, Some(&opt), None, &path).unwrap();
        let (loaded, extras) = load_checkpoint(&path).unwrap();
        assert_eq!(extras.step, 42);
        for ((n1, t1), (n2, t2)) in model.named_params().iter().zip(loaded.named_params().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.to_vec(), t2.to_vec(), "{n1}");
        }
        let lopt = extras.optimizer.unwrap();
        assert_eq!(lopt.states["trunk.block0.fc1.w"].t, 7);
        assert_eq!(lopt.states["trunk.block0.fc1.w"].m, vec![0.5; 4]);
    }

    #[test]
    fn identical_state_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.tar"), dir.path().join("b.tar"));
        save_checkpoint(&small_model(9), 5, None, None, &p1).unwrap();
        save_checkpoint(&small_model(9), 5, None, None, &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn shape_mismatch_rejected_before_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.tar");
        let model = small_model(1);
        save_checkpoint(&model, 0, None, None, &path).unwrap();
        // corrupt the manifest's first shape
        let file = std::fs::File::open(&path).unwrap();
        let mut members: Vec<(String, Vec<u8>)> = TarReader::new(BufReader::new(file))
            .map(|e| e.unwrap())
            .collect();
        let manifest_text = String::from_utf8(members[0].1.clone()).unwrap();
        let patched = manifest_text.replacen("[768,64]", "[768,32]", 1);
        assert_ne!(manifest_text, patched, "expected a [768,64] projection in the manifest");
        members[0].1 = patched.into_bytes();
        let out = std::fs::File::create(&path).unwrap();
        let mut w = TarWriter::new(BufWriter::new(out));
        for (n, d) in &members {
            w.append(n, d).unwrap();
        }
        w.finish().unwrap();
        let err = match load_checkpoint(&path) {
            Ok(_) => panic!("shape mismatch must be rejected"),
            Err(e) => e,
        };
        assert!(err.to_string().contains("shape"), "got: {err}");
    }
}
