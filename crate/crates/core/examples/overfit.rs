//! Stage-1 overfit run on eight synthetic plate scenes.
//!
//! cargo run --release -p platesam --example overfit -- [base.safetensors] [init_std]
//!
//! Without a base path a foundation base is pretrained first.

use std::path::PathBuf;

use platesam::checkpoint::load_model;
use platesam::data::{synthesize_dataset, Normalization, PreparedSample, SynthConfig};
use platesam::evaluation::{evaluate, EvalConfig};
use platesam::lora::{inject, InjectionPlan};
use platesam::model::{ModelConfig, ScalePreset};
use platesam::training::{foundation_model, mean_dice, train_stage1, PretrainConfig, TrainConfig};

fn main() -> platesam::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let std: f64 = args.get(2).map_or(1.0, |s| s.parse().expect("init_std"));
    let mut model = match args.get(1) {
        Some(p) => load_model(&PathBuf::from(p))?,
        None => {
            foundation_model(
                ModelConfig::preset(ScalePreset::Tiny),
                &PretrainConfig::default(),
            )?
            .0
        }
    };
    let samples = synthesize_dataset(8, 0, &SynthConfig::default())?;
    let prepared: Vec<PreparedSample> = samples
        .iter()
        .map(|s| PreparedSample::new(s, model.config().image_size, &Normalization::default()))
        .collect::<platesam::Result<_>>()?;
    println!(
        "dice before adaptation {:.4}",
        mean_dice(&model, &prepared, None)?
    );
    inject(
        &mut model,
        &InjectionPlan {
            init_std: std,
            ..InjectionPlan::default()
        },
    )?;
    let start = std::time::Instant::now();
    let cfg = TrainConfig {
        max_steps: Some(500),
        ..TrainConfig::default()
    };
    let report = train_stage1(&model, &prepared, &cfg)?;
    for e in report.curve.iter().step_by(10) {
        println!(
            "epoch {:4} loss {:.4} lr {:.2e}",
            e.epoch, e.mean_loss, e.lr
        );
    }
    println!("{} steps in {:.1?}", report.steps, start.elapsed());
    println!("train dice {:.4}", mean_dice(&model, &prepared, None)?);
    let eval = EvalConfig {
        split: None,
        ..EvalConfig::default()
    };
    let (r, _) = evaluate(&model, &samples, &eval)?;
    println!(
        "train P {:.3} R {:.3} F1 {:.3} AP {:.3}",
        r.precision, r.recall, r.f1, r.ap
    );
    Ok(())
}
