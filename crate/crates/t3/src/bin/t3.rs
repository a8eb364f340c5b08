//! Command-line entry points: synthetic data generation, the three training
//! stages, evaluation, and attention-map export.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 numeric
//! abort. `T3_DETERMINISTIC=1` forces single-threaded deterministic mode.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use t3::checkpoint::{load_checkpoint, CheckpointExtras};
use t3::data::{PairingStore, ShardSet, Split, Weighting};
use t3::decoders::TaskKind;
use t3::error::{Result, T3Error};
use t3::model::{identity_share_map, SizeConfig, T3Model, TaskDef};
use t3::synth::{generate_dataset, load_dataset_index, PairingDataset, SensorStyle};
use t3::train::{evaluate, retag_for_mae, Freeze, Stage, StageRunner, TrainConfig};

#[derive(Parser)]
#[command(name = "t3", version, about = "Heterogeneous tactile-transformer training stack")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-sensor/multi-task shard dataset.
    Synth(SynthArgs),
    /// Pre-training stage I: masked reconstruction over all pairings.
    Pretrain1(TrainArgs),
    /// Pre-training stage II: supervised heads over labeled pairings.
    Pretrain2(TrainArgs),
    /// Fine-tune one sensor-task pairing.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint on one pairing.
    Eval(EvalArgs),
    /// Export joint attention maps as image masks.
    Attnviz(AttnvizArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of built-in sensor styles to use (1-6).
    #[arg(long, default_value_t = 3)]
    styles: usize,
    /// Training records per (sensor, task) pairing.
    #[arg(long = "per-pairing")]
    per_pairing: usize,
    /// Validation records per pairing.
    #[arg(long = "val-per-pairing", default_value_t = 0)]
    val_per_pairing: usize,
    /// Comma-separated task list from {cls, vol, pose, mae}.
    #[arg(long, default_value = "cls")]
    tasks: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// JSON run configuration (see README).
    #[arg(long)]
    config: PathBuf,
    /// Resume an interrupted run of the same stage (continues step numbering).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Initialize weights from a previous stage's checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "mask-ratio")]
    mask_ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "eval-every")]
    eval_every: Option<usize>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Target sensor id.
    #[arg(long)]
    sensor: String,
    /// Target task id.
    #[arg(long)]
    task: String,
    /// Route an unseen sensor through this existing encoder group.
    #[arg(long = "donor-group")]
    donor_group: Option<String>,
    /// Exclude a component set from updates: none | trunk | encoders.
    #[arg(long, default_value = "none")]
    freeze: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset root (the directory holding datasets.json).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    sensor: String,
    #[arg(long)]
    task: String,
    #[arg(long, default_value = "val")]
    split: String,
    /// Also print the dataset-average-predictor RMSE.
    #[arg(long, default_value_t = false)]
    baseline: bool,
    #[arg(long = "batch-size", default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value = "t3-out/eval")]
    out: PathBuf,
}

#[derive(Args)]
struct AttnvizArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    sensor: String,
    /// Task whose routing to trace (defaults to the first single-image task).
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

// ── run manifest ────────────────────────────────────────────────────────

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_path: Option<String>,
    resolved: serde_json::Value,
    seed: u64,
    out_dir: String,
    version: &'a str,
    git: Option<&'a str>,
}

fn write_manifest(out_dir: &Path, manifest: &RunManifest) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| T3Error::Io(format!("cannot create {}: {e}", out_dir.display())))?;
    std::fs::write(
        out_dir.join("run_manifest.json"),
        serde_json::to_string_pretty(manifest)?,
    )
    .map_err(|e| T3Error::Io(e.to_string()))
}

// ── run-file config ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PairingSel {
    sensor: String,
    task: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunFile {
    /// Directory holding datasets.json and the pairing shard dirs.
    data_root: PathBuf,
    #[serde(default = "default_size")]
    size: String,
    #[serde(default)]
    model_seed: u64,
    /// sensor -> encoder group; identity when omitted.
    #[serde(default)]
    share_map: Option<BTreeMap<String, String>>,
    /// Subset of pairings to train on; all matching pairings when omitted.
    #[serde(default)]
    pairings: Option<Vec<PairingSel>>,
    #[serde(default)]
    train: TrainOverrides,
}

fn default_size() -> String {
    "tiny".to_string()
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct TrainOverrides {
    steps: Option<usize>,
    batch_size: Option<usize>,
    base_lr: Option<f64>,
    weight_decay: Option<f64>,
    warmup_steps: Option<usize>,
    mask_ratio: Option<f64>,
    pairing_weighting: Option<Weighting>,
    seed: Option<u64>,
    eval_every: Option<usize>,
}

fn resolve_train_config(stage: Stage, file: &TrainOverrides, args: &TrainArgs) -> Result<TrainConfig> {
    let steps = args.steps.or(file.steps).unwrap_or(1000);
    let mut cfg = TrainConfig::stage_defaults(stage, steps);
    if let Some(v) = file.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = file.base_lr {
        cfg.base_lr = v;
    }
    if let Some(v) = file.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = file.warmup_steps {
        cfg.warmup_steps = v;
    }
    if let Some(v) = file.mask_ratio {
        cfg.mask_ratio = v;
    }
    if let Some(v) = file.pairing_weighting {
        cfg.pairing_weighting = v;
    }
    if let Some(v) = file.seed {
        cfg.seed = v;
    }
    if let Some(v) = file.eval_every {
        cfg.eval_every = v;
    }
    // flags override the file
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.base_lr = v;
    }
    if let Some(v) = args.mask_ratio {
        cfg.mask_ratio = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.eval_every {
        cfg.eval_every = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_task_list(spec: &str) -> Result<Vec<TaskDef>> {
    let mut tasks = Vec::new();
    for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let def = match name {
            "cls" => TaskDef::new("cls", TaskKind::Classifier { num_classes: 6 }),
            "vol" => TaskDef::new("vol", TaskKind::VolRegressor),
            "pose" => TaskDef::new("pose", TaskKind::Pose { dof: 3 }),
            "mae" => TaskDef::new("mae", TaskKind::MaeRecon),
            other => {
                return Err(T3Error::Config(format!(
                    "unknown task '{other}' (expected cls, vol, pose, or mae)"
                )))
            }
        };
        tasks.push(def);
    }
    if tasks.is_empty() {
        return Err(T3Error::Config("task list is empty".into()));
    }
    Ok(tasks)
}

// ── dataset loading helpers ─────────────────────────────────────────────

fn task_defs_from_index(index: &[PairingDataset]) -> Vec<TaskDef> {
    let mut seen = BTreeMap::new();
    for e in index {
        seen.entry(e.task.clone()).or_insert_with(|| TaskDef {
            id: e.task.clone(),
            spec: t3::decoders::DecoderSpec {
                kind: e.kind.clone(),
                input_arity: e.input_arity,
            },
        });
    }
    let mut tasks: Vec<TaskDef> = seen.into_values().collect();
    if !tasks.iter().any(|t| matches!(t.spec.kind, TaskKind::MaeRecon)) {
        tasks.push(TaskDef::new("mae", TaskKind::MaeRecon));
    }
    tasks
}

fn load_store(entry: &PairingDataset, split: Split) -> Result<Option<PairingStore>> {
    let manifest = ShardSet::manifest_path(&entry.dir, split);
    if !manifest.exists() {
        return Ok(None);
    }
    let set = ShardSet::load(&entry.dir, split)?;
    if set.record_count() == 0 {
        return Ok(None);
    }
    Ok(Some(PairingStore::load(
        &set,
        &entry.sensor,
        &entry.task,
        entry.kind.clone(),
        entry.input_arity,
    )?))
}

struct StageData {
    train: Vec<PairingStore>,
    val: Vec<PairingStore>,
}

fn load_stage_data(
    index: &[PairingDataset],
    selection: Option<&[PairingSel]>,
    stage: Stage,
) -> Result<StageData> {
    let selected = |e: &PairingDataset| {
        selection.map_or(true, |sel| {
            sel.iter().any(|s| s.sensor == e.sensor && s.task == e.task)
        })
    };
    let mut train = Vec::new();
    let mut val = Vec::new();
    match stage {
        Stage::Pretrain1 => {
            // self-supervised: every record of every selected pairing
            for e in index.iter().filter(|e| selected(e)) {
                if let Some(store) = load_store(e, Split::Train)? {
                    train.push(retag_for_mae(store, "mae")?);
                }
                if let Some(store) = load_store(e, Split::Val)? {
                    val.push(retag_for_mae(store, "mae")?);
                }
            }
        }
        _ => {
            for e in index.iter().filter(|e| selected(e)) {
                if matches!(e.kind, TaskKind::MaeRecon) {
                    continue;
                }
                if let Some(store) = load_store(e, Split::Train)? {
                    train.push(store);
                }
                if let Some(store) = load_store(e, Split::Val)? {
                    val.push(store);
                }
            }
        }
    }
    if train.is_empty() {
        return Err(T3Error::Config("no training pairings matched the selection".into()));
    }
    Ok(StageData { train, val })
}

// ── commands ────────────────────────────────────────────────────────────

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    if args.per_pairing == 0 {
        return Err(T3Error::Config("--per-pairing must be >= 1".into()));
    }
    if args.styles == 0 || args.styles > 6 {
        return Err(T3Error::Config("--styles must lie in 1..=6".into()));
    }
    let tasks = parse_task_list(&args.tasks)?;
    let manifest = RunManifest {
        command: "synth",
        config_path: None,
        resolved: serde_json::json!({
            "styles": args.styles,
            "per_pairing": args.per_pairing,
            "val_per_pairing": args.val_per_pairing,
            "tasks": args.tasks,
            "seed": args.seed,
        }),
        seed: args.seed,
        out_dir: args.out.display().to_string(),
        version: env!("CARGO_PKG_VERSION"),
        git: option_env!("GIT_SHA"),
    };
    write_manifest(&args.out, &manifest)?;

    let styles = SensorStyle::presets(args.styles);
    let index = generate_dataset(
        &styles,
        &tasks,
        args.per_pairing,
        args.val_per_pairing,
        args.seed,
        &args.out,
    )?;
    let total: usize = index.iter().map(|e| e.train_records + e.val_records).sum();
    println!("wrote {} pairings, {} records total", index.len(), total);
    for e in &index {
        println!(
            "  {}/{}: {} train + {} val at {}",
            e.sensor,
            e.task,
            e.train_records,
            e.val_records,
            e.dir.display()
        );
    }
    Ok(())
}

fn run_training_stage(
    stage: Stage,
    args: &TrainArgs,
    target: Option<(&str, &str, Option<&str>, Freeze)>,
) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| T3Error::Config(format!("cannot read config {}: {e}", args.config.display())))?;
    let run_file: RunFile = serde_json::from_str(&text)
        .map_err(|e| T3Error::Config(format!("config {}: {e}", args.config.display())))?;
    let cfg = resolve_train_config(stage, &run_file.train, args)?;
    let out_dir = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("t3-out/{}", stage.tag())));

    let manifest = RunManifest {
        command: stage.tag(),
        config_path: Some(args.config.display().to_string()),
        resolved: serde_json::json!({
            "run_file": run_file,
            "train_config": cfg,
            "resume": args.resume.as_ref().map(|p| p.display().to_string()),
            "init": args.init.as_ref().map(|p| p.display().to_string()),
            "target": target.map(|(s, t, d, f)| serde_json::json!({
                "sensor": s, "task": t, "donor_group": d, "freeze": f,
            })),
        }),
        seed: cfg.seed,
        out_dir: out_dir.display().to_string(),
        version: env!("CARGO_PKG_VERSION"),
        git: option_env!("GIT_SHA"),
    };
    write_manifest(&out_dir, &manifest)?;

    let index = load_dataset_index(&run_file.data_root)?;
    let size = SizeConfig::from_name(&run_file.size)?;
    let tasks = task_defs_from_index(&index);
    let sensors: Vec<String> = {
        let mut s: Vec<String> = index.iter().map(|e| e.sensor.clone()).collect();
        s.sort();
        s.dedup();
        s
    };
    let share_map = run_file
        .share_map
        .clone()
        .unwrap_or_else(|| identity_share_map(&sensors));

    // model: resumed, warm-started, or fresh
    let (mut model, resume_extras): (T3Model<f32>, Option<CheckpointExtras>) =
        match (&args.resume, &args.init) {
            (Some(path), _) => {
                let (m, extras) = load_checkpoint(path)?;
                println!("resuming from {} at step {}", path.display(), extras.step);
                (m, Some(extras))
            }
            (None, Some(path)) => {
                let (m, _) = load_checkpoint(path)?;
                println!("initialized weights from {}", path.display());
                (m, None)
            }
            (None, None) => (
                T3Model::assemble(size, &sensors, &tasks, &share_map, run_file.model_seed)?,
                None,
            ),
        };

    let selection: Option<Vec<PairingSel>> = match target {
        Some((sensor, task, donor, _)) => {
            if let Some(donor_group) = donor {
                model.substitute_encoder(sensor, donor_group)?;
                println!("routing unseen sensor '{sensor}' through encoder group '{donor_group}'");
            }
            Some(vec![PairingSel {
                sensor: sensor.to_string(),
                task: task.to_string(),
            }])
        }
        None => run_file.pairings.clone(),
    };
    let data = load_stage_data(&index, selection.as_deref(), stage)?;
    let freeze = target.map(|(_, _, _, f)| f).unwrap_or_default();
    let runner = StageRunner::new(cfg).with_out_dir(&out_dir).with_freeze(freeze);
    let state = runner.run(&model, data.train, data.val, resume_extras)?;
    println!(
        "stage {} finished at step {}; outputs in {}",
        stage.tag(),
        state.step,
        out_dir.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let manifest = RunManifest {
        command: "eval",
        config_path: None,
        resolved: serde_json::json!({
            "ckpt": args.ckpt.display().to_string(),
            "data": args.data.display().to_string(),
            "sensor": args.sensor,
            "task": args.task,
            "split": args.split,
        }),
        seed: 0,
        out_dir: args.out.display().to_string(),
        version: env!("CARGO_PKG_VERSION"),
        git: option_env!("GIT_SHA"),
    };
    write_manifest(&args.out, &manifest)?;

    let (model, _) = load_checkpoint(&args.ckpt)?;
    let index = load_dataset_index(&args.data)?;
    let entry = index
        .iter()
        .find(|e| e.sensor == args.sensor && e.task == args.task)
        .ok_or_else(|| {
            T3Error::Config(format!(
                "pairing ({}, {}) not present in {}",
                args.sensor,
                args.task,
                args.data.display()
            ))
        })?;
    let split: Split = args.split.parse()?;
    let store = load_store(entry, split)?.ok_or_else(|| {
        T3Error::Config(format!("split '{}' is empty for this pairing", args.split))
    })?;
    let rec = evaluate(&model, &store, args.batch_size, 0.8)?;
    match rec.metric_name.as_str() {
        "top1_accuracy" => println!("top-1 accuracy: {:.4} (n = {})", rec.value, rec.n),
        "rmse" => println!("rmse: {:.4} mm (n = {})", rec.value, rec.n),
        other => println!("{other}: {:.6} (n = {})", rec.value, rec.n),
    }
    if args.baseline {
        if let Some(b) = rec.baseline {
            println!("dataset-average baseline rmse: {b:.4} mm");
        }
    }
    let row = serde_json::json!({
        "pairing": rec.pairing,
        "metric_name": rec.metric_name,
        "metric_value": rec.value,
        "baseline_rmse": rec.baseline,
        "n": rec.n,
    });
    println!("{row}");
    std::fs::write(args.out.join("eval.json"), serde_json::to_string_pretty(&row)?)
        .map_err(|e| T3Error::Io(e.to_string()))?;
    Ok(())
}

fn cmd_attnviz(args: &AttnvizArgs) -> Result<()> {
    let manifest = RunManifest {
        command: "attnviz",
        config_path: None,
        resolved: serde_json::json!({
            "ckpt": args.ckpt.display().to_string(),
            "image": args.image.display().to_string(),
            "sensor": args.sensor,
        }),
        seed: 0,
        out_dir: args.out.display().to_string(),
        version: env!("CARGO_PKG_VERSION"),
        git: option_env!("GIT_SHA"),
    };
    write_manifest(&args.out, &manifest)?;

    let (model, _) = load_checkpoint(&args.ckpt)?;
    let task = match &args.task {
        Some(t) => t.clone(),
        None => model
            .tasks
            .iter()
            .find(|t| t.spec.input_arity == 1)
            .map(|t| t.id.clone())
            .ok_or_else(|| T3Error::Config("no single-image task registered".into()))?,
    };
    let image = image::open(&args.image)
        .map_err(|e| T3Error::Io(format!("cannot open {}: {e}", args.image.display())))?
        .to_rgb8();
    let tensor = t3::data::augment(&image, t3::data::AugmentCfg::eval(), 0);
    let batch = tensor.reshape(&[1, 3, 224, 224]);
    let (_, enc_trace, trunk_trace) =
        model.forward_single_traced(&args.sensor, &task, &batch, true)?;
    let enc_trace = enc_trace.expect("trace requested");
    let trunk_trace = trunk_trace.expect("trace requested");

    // reconstruct the cropped image the model saw, in [0, 1]
    let shown = batch.to_vec();
    let to_u8 = |v: f32| (((v * 0.5) + 0.5).clamp(0.0, 1.0) * 255.0) as u8;

    for (name, trace) in [("encoder", &enc_trace), ("trunk", &trunk_trace)] {
        let map = trace.joint_map(0);
        // raw 14x14 map
        let raw = image::GrayImage::from_fn(14, 14, |x, y| {
            image::Luma([(map[(y * 14 + x) as usize] * 255.0) as u8])
        });
        raw.save(args.out.join(format!("{name}_map.png")))
            .map_err(|e| T3Error::Io(e.to_string()))?;
        // nearest-neighbor upsample to 224 and multiply onto the image
        let masked = image::RgbImage::from_fn(224, 224, |x, y| {
            let m = map[((y / 16) * 14 + (x / 16)) as usize];
            let idx = (y as usize) * 224 + x as usize;
            image::Rgb([
                (to_u8(shown[idx]) as f32 * m) as u8,
                (to_u8(shown[224 * 224 + idx]) as f32 * m) as u8,
                (to_u8(shown[2 * 224 * 224 + idx]) as f32 * m) as u8,
            ])
        });
        masked
            .save(args.out.join(format!("{name}_mask.png")))
            .map_err(|e| T3Error::Io(e.to_string()))?;
    }
    println!(
        "wrote encoder_map.png, trunk_map.png, encoder_mask.png, trunk_mask.png to {}",
        args.out.display()
    );
    Ok(())
}

fn out_dir_of(cmd: &Command) -> Option<PathBuf> {
    match cmd {
        Command::Synth(a) => Some(a.out.clone()),
        Command::Pretrain1(a) | Command::Pretrain2(a) => a.out.clone(),
        Command::Finetune(a) => a.train.out.clone(),
        Command::Eval(a) => Some(a.out.clone()),
        Command::Attnviz(a) => Some(a.out.clone()),
    }
}

fn run(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Synth(args) => cmd_synth(args),
        Command::Pretrain1(args) => run_training_stage(Stage::Pretrain1, args, None),
        Command::Pretrain2(args) => run_training_stage(Stage::Pretrain2, args, None),
        Command::Finetune(args) => {
            let freeze = match args.freeze.as_str() {
                "none" => Freeze::None,
                "trunk" => Freeze::Trunk,
                "encoders" => Freeze::Encoders,
                other => {
                    return Err(T3Error::Config(format!(
                        "unknown freeze subset '{other}' (expected none, trunk, or encoders)"
                    )))
                }
            };
            run_training_stage(
                Stage::Finetune,
                &args.train,
                Some((&args.sensor, &args.task, args.donor_group.as_deref(), freeze)),
            )
        }
        Command::Eval(args) => cmd_eval(args),
        Command::Attnviz(args) => cmd_attnviz(args),
    }
}

fn main() {
    if std::env::var("T3_DETERMINISTIC").map_or(false, |v| v == "1") {
        t3::tensor::set_single_thread(true);
    }
    let cli = Cli::parse();
    if let Err(e) = run(&cli.command) {
        eprintln!("error: {e}");
        if let Some(dir) = out_dir_of(&cli.command) {
            if dir.exists() {
                let _ = std::fs::write(dir.join(".failed"), e.to_string());
            }
        }
        std::process::exit(e.exit_code());
    }
}
