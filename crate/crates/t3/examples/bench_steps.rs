use std::time::Instant;
use t3::data::{PairingStore, Weighting, PairingSampler};
use t3::decoders::TaskKind;
use t3::model::{identity_share_map, SizeConfig, T3Model, TaskDef};
use t3::train::{batch_loss, optim::AdamW, retag_for_mae};
use t3::synth::{flat_image, render, ProbeSpec, SensorStyle};
use t3::data::{Labels, ShardRecord};

fn jpeg_of(img: &image::RgbImage) -> Vec<u8> {
    let mut bytes = Vec::new();
    let mut enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut bytes, 92);
    enc.encode_image(&image::DynamicImage::ImageRgb8(img.clone())).unwrap();
    bytes
}

fn main() {
    let style = SensorStyle::preset(0);
    let flat = flat_image(&style);
    let mut records = Vec::new();
    for i in 0..64 {
        let probe = ProbeSpec::new(i % 6).unwrap();
        let img = render(&style, &probe, [(i % 5) as f64 - 2.0, 0.0], 0.5 + 0.02 * i as f64).unwrap();
        let labels = Labels { sensor_id: style.name.clone(), object_id: Some((i % 6) as i64),
            sigma: Some(1.0), force_z: Some(1.0), pose3: Some([0.0, 0.0, 0.5]), ..Default::default() };
        records.push(ShardRecord::new(&format!("r{i:03}"), jpeg_of(&img), &labels).unwrap());
    }
    let sensors = vec![style.name.clone()];
    let share = identity_share_map(&sensors);
    let tasks = vec![
        TaskDef::new("mae", TaskKind::MaeRecon),
        TaskDef::new("cls", TaskKind::Classifier { num_classes: 6 }),
    ];
    let model = T3Model::<f32>::assemble(SizeConfig::nano(), &sensors, &tasks, &share, 1).unwrap();

    for (task, batch) in [("mae", 4usize), ("mae", 8), ("cls", 2), ("cls", 4), ("cls", 8)] {
        let store = PairingStore::from_records(&style.name, "cls", TaskKind::Classifier { num_classes: 6 }, 1, records.clone()).unwrap();
        let store = if task == "mae" { retag_for_mae(store, "mae").unwrap() } else { store };
        let sampler = PairingSampler::new(vec![store], batch, Weighting::Uniform, 0).unwrap();
        let mut opt = AdamW::new();
        let params = model.trainable_set(&style.name, task).unwrap();
        // warmup step
        let b = sampler.batch_at(0).unwrap();
        let loss = batch_loss(&model, &b, 0.8, 0).unwrap();
        loss.backward();
        opt.step(&params, 1e-4, 0.05);
        for (_, p) in &params { p.zero_grad(); }
        let t0 = Instant::now();
        let n = 10;
        for step in 1..=n {
            let b = sampler.batch_at(step).unwrap();
            let loss = batch_loss(&model, &b, 0.8, step).unwrap();
            loss.backward();
            opt.step(&params, 1e-4, 0.05);
            for (_, p) in &params { p.zero_grad(); }
        }
        let dt = t0.elapsed().as_secs_f64() / n as f64;
        println!("{task} batch {batch}: {:.0} ms/step -> 2000 steps = {:.1} min", dt * 1000.0, dt * 2000.0 / 60.0);
    }
}
