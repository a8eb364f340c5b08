//! Masking-ratio sweep: pre-train stage I at each ratio, fine-tune the
//! classifier, evaluate, and emit a table plus plot. At desk scale the
//! pass condition is completion and masked-count sanity, not which ratio
//! wins.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::PairingStore;
use crate::decoders::TaskKind;
use crate::error::{Result, T3Error};
use crate::mae::make_mask;
use crate::model::{identity_share_map, SizeConfig, T3Model, TaskDef};
use crate::train::{evaluate, retag_for_mae, Stage, StageRunner, TrainConfig};

pub const DEFAULT_RATIOS: [f64; 7] = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub masked_count: usize,
    pub pretrain_first_loss: f64,
    pub pretrain_last_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct SweepBudget {
    pub size: SizeConfig,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SweepBudget {
    fn default() -> Self {
        SweepBudget {
            size: SizeConfig::nano(),
            pretrain_steps: 80,
            finetune_steps: 80,
            batch_size: 4,
            seed: 0,
        }
    }
}

/// Run the sweep for one classification pairing. `train`/`val` are
/// classification stores; their images also feed stage-I reconstruction.
pub fn mask_ratio_sweep(
    ratios: &[f64],
    train: &PairingStore,
    val: &PairingStore,
    budget: &SweepBudget,
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| T3Error::Io(format!("cannot create {}: {e}", out_dir.display())))?;
    let sensor = train.sensor.clone();
    let num_classes = match train.kind {
        TaskKind::Classifier { num_classes } => num_classes,
        _ => return Err(T3Error::Config("sweep needs a classification pairing".into())),
    };
    let mut rows = Vec::new();
    for &ratio in ratios {
        let plan = make_mask(1, 196, ratio, 0)?;
        let masked_count = plan.masked_count();

        let sensors = vec![sensor.clone()];
        let share = identity_share_map(&sensors);
        let tasks = vec![
            TaskDef::new("mae", TaskKind::MaeRecon),
            TaskDef::new(&train.task, TaskKind::Classifier { num_classes }),
        ];
        let model = T3Model::assemble(budget.size.clone(), &sensors, &tasks, &share, budget.seed)?;

        let mae_store = retag_for_mae(clone_store(train)?, "mae")?;
        let pre_cfg = TrainConfig {
            batch_size: budget.batch_size,
            mask_ratio: ratio,
            seed: budget.seed,
            ..TrainConfig::stage_defaults(Stage::Pretrain1, budget.pretrain_steps)
        };
        let pre_state = StageRunner::new(pre_cfg).run(&model, vec![mae_store], vec![], None)?;
        let losses: Vec<f64> = pre_state.log.rows.iter().filter_map(|r| r.loss).collect();
        let (first, last) = (losses[0], *losses.last().unwrap());

        let ft_cfg = TrainConfig {
            batch_size: budget.batch_size,
            seed: budget.seed,
            ..TrainConfig::stage_defaults(Stage::Finetune, budget.finetune_steps)
        };
        StageRunner::new(ft_cfg).run(&model, vec![clone_store(train)?], vec![], None)?;
        let rec = evaluate(&model, val, budget.batch_size, ratio)?;
        rows.push(SweepRow {
            ratio,
            masked_count,
            pretrain_first_loss: first,
            pretrain_last_loss: last,
            val_accuracy: rec.value,
        });
    }

    let mut table = String::new();
    for row in &rows {
        table.push_str(&serde_json::to_string(row)?);
        table.push('\n');
    }
    std::fs::write(out_dir.join("sweep.jsonl"), table)
        .map_err(|e| T3Error::Io(e.to_string()))?;
    let acc: Vec<(f64, f64)> = rows.iter().map(|r| (r.ratio, r.val_accuracy)).collect();
    let counts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.ratio, r.masked_count as f64 / 196.0))
        .collect();
    crate::plot::line_plot(
        &out_dir.join("sweep.png"),
        &[("val_accuracy", &acc), ("masked_fraction", &counts)],
        "masking ratio",
        "value",
    )?;
    Ok(rows)
}

fn clone_store(store: &PairingStore) -> Result<PairingStore> {
    PairingStore::from_records(
        &store.sensor,
        &store.task,
        store.kind.clone(),
        store.arity,
        store.records.clone(),
    )
}
