use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::{GrayImage, Luma};
use platesam::checkpoint::{load_model, save_model, AdapterCheckpoint};
use platesam::data::{
    preprocess, synthesize_dataset, untransform_mask, write_generic_json, PreparedSample, Sample,
    Split,
};
use platesam::evaluation::{
    draw_overlay, evaluate_with, mask_to_detections, write_report, DetectionReport, EvalConfig,
    ModelPredictor, PromptedPredictor,
};
use platesam::inference::{predict, predict_refined, InferenceConfig, PromptKind};
use platesam::lora::{inject, merge_into_base, trainable_parameter_count, InjectionPlan};
use platesam::model::{Component, SamModel};
use platesam::training::{
    foundation_model, mean_dice, train_stage1, train_stage2, write_loss_csv, TrainReport,
};
use platesam::Error;
use serde::Serialize;

use crate::config::{FormatArg, RunConfig};
use crate::{AdapterArgs, AxisArg, Command, Common, DataArgs, InjectArg, SplitArg};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthData {
            common,
            n,
            plates,
            test_fraction,
            kind,
        } => {
            let mut cfg = base_config(&common)?;
            cfg.dataset.format = FormatArg::Synth;
            cfg.dataset.n = n;
            if let Some(s) = common.seed {
                cfg.dataset.seed = s;
            }
            if plates.is_some() {
                cfg.dataset.synth.plates = plates;
            }
            if let Some(f) = test_fraction {
                cfg.dataset.synth.test_fraction = f;
            }
            cfg.dataset.synth.kind = kind.into();
            cmd_synth_data(cfg)
        }
        Command::Pretrain { common, steps, lr } => {
            let mut cfg = base_config(&common)?;
            if let Some(s) = common.seed {
                cfg.pretrain.seed = s;
            }
            if let Some(s) = steps {
                cfg.pretrain.steps = s;
            }
            if let Some(l) = lr {
                cfg.pretrain.lr = l;
            }
            cmd_pretrain(cfg)
        }
        Command::Train {
            common,
            data,
            adapter,
            stage,
            base,
            init,
            epochs,
            lr,
            max_steps,
        } => {
            let mut cfg = base_config(&common)?;
            apply_data(&mut cfg, &data);
            apply_adapter(&mut cfg, &adapter);
            apply_training(&mut cfg, &common, lr, max_steps);
            if base.is_some() {
                cfg.base = base;
            }
            if let Some(e) = epochs {
                match stage {
                    1 => cfg.train.epochs_stage1 = e,
                    _ => cfg.train.epochs_stage2 = e,
                }
            }
            cmd_train(cfg, stage, init)
        }
        Command::Infer {
            common,
            base,
            adapter,
            input,
            refine,
        } => {
            let mut cfg = base_config(&common)?;
            if base.is_some() {
                cfg.base = base;
            }
            if refine.is_some() {
                cfg.eval.refine = refine;
            }
            cmd_infer(cfg, adapter, &input)
        }
        Command::Eval {
            common,
            data,
            base,
            adapter,
            refine,
            iou_thresh,
            split,
            overlays,
        } => {
            let mut cfg = base_config(&common)?;
            apply_data(&mut cfg, &data);
            if base.is_some() {
                cfg.base = base;
            }
            if refine.is_some() {
                cfg.eval.refine = refine;
            }
            apply_eval(&mut cfg, iou_thresh, split);
            cmd_eval(cfg, adapter, overlays)
        }
        Command::ExportMerged {
            common,
            base,
            adapter,
        } => {
            let mut cfg = base_config(&common)?;
            if base.is_some() {
                cfg.base = base;
            }
            cmd_export(cfg, &adapter)
        }
        Command::Ablate {
            common,
            data,
            adapter,
            axis,
            values,
            base,
            epochs,
            lr,
            max_steps,
            iou_thresh,
            split,
        } => {
            let mut cfg = base_config(&common)?;
            apply_data(&mut cfg, &data);
            apply_adapter(&mut cfg, &adapter);
            apply_training(&mut cfg, &common, lr, max_steps);
            apply_eval(&mut cfg, iou_thresh, split);
            if base.is_some() {
                cfg.base = base;
            }
            if let Some(e) = epochs {
                cfg.train.epochs_stage1 = e;
            }
            cmd_ablate(cfg, axis, values)
        }
    }
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(p) = common.preset {
        cfg.preset = p;
        cfg.model = None;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn apply_data(cfg: &mut RunConfig, data: &DataArgs) {
    if let Some(f) = data.format {
        cfg.dataset.format = f;
    }
    if data.data.is_some() {
        cfg.dataset.root = data.data.clone();
        if data.format.is_none() && cfg.dataset.format == FormatArg::Synth {
            cfg.dataset.format = FormatArg::GenericJson;
        }
    }
    if let Some(n) = data.n {
        cfg.dataset.n = n;
    }
    if let Some(s) = data.data_seed {
        cfg.dataset.seed = s;
    }
}

fn targets(arg: InjectArg) -> BTreeSet<Component> {
    match arg {
        InjectArg::Encoder => [Component::ImageEncoder].into(),
        InjectArg::Decoder => [Component::MaskDecoder].into(),
        InjectArg::Both => [Component::ImageEncoder, Component::MaskDecoder].into(),
    }
}

fn apply_adapter(cfg: &mut RunConfig, a: &AdapterArgs) {
    if let Some(r) = a.rank {
        cfg.injection.rank = r;
    }
    if let Some(i) = a.inject {
        cfg.injection.targets = targets(i);
    }
    if let Some(s) = a.init_std {
        cfg.injection.init_std = s;
    }
}

fn apply_training(cfg: &mut RunConfig, common: &Common, lr: Option<f64>, max_steps: Option<usize>) {
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.injection.seed = s;
    }
    if let Some(l) = lr {
        cfg.train.base_lr = l;
    }
    if max_steps.is_some() {
        cfg.train.max_steps = max_steps;
    }
}

fn apply_eval(cfg: &mut RunConfig, iou_thresh: Option<f64>, split: Option<SplitArg>) {
    if let Some(t) = iou_thresh {
        cfg.eval.iou_threshold = t;
    }
    if let Some(s) = split {
        cfg.eval.split = match s {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        };
    }
}

/// Resolves the config, loading the base weights (which pin the model config).
fn load_base(cfg: &mut RunConfig) -> Result<SamModel> {
    cfg.resolve()?;
    match &cfg.base {
        Some(path) => {
            let model =
                load_model(path).with_context(|| format!("loading base {}", path.display()))?;
            if model.injection_plan().is_some() {
                bail!(Error::Validation(format!(
                    "{} carries adapters; export a merged model first",
                    path.display()
                )));
            }
            cfg.model = Some(model.config().clone());
            Ok(model)
        }
        None => Ok(SamModel::new(cfg.model_config())?),
    }
}

fn load_adapted(cfg: &mut RunConfig, adapter: Option<&Path>) -> Result<SamModel> {
    let mut model = load_base(cfg)?;
    if let Some(path) = adapter {
        let ckpt = AdapterCheckpoint::load(path)
            .with_context(|| format!("loading adapter {}", path.display()))?;
        ckpt.apply(&mut model)?;
        cfg.injection = ckpt.manifest.plan.clone();
    }
    Ok(model)
}

fn prepare(cfg: &RunConfig, samples: &[Sample]) -> Result<Vec<PreparedSample>> {
    let size = cfg.model_config().image_size;
    Ok(samples
        .iter()
        .map(|s| PreparedSample::new(s, size, &cfg.normalization))
        .collect::<platesam::Result<_>>()?)
}

fn training_samples(cfg: &RunConfig) -> Result<Vec<Sample>> {
    let samples: Vec<Sample> = cfg
        .dataset
        .load()?
        .into_iter()
        .filter(|s| s.split == Split::Train)
        .collect();
    if samples.is_empty() {
        bail!(Error::Validation("dataset has no training samples".into()));
    }
    Ok(samples)
}

fn eval_config(cfg: &RunConfig) -> EvalConfig {
    EvalConfig {
        iou_threshold: cfg.eval.iou_threshold,
        min_area: cfg.eval.min_area,
        refine: cfg.eval.refine.map(|n| InferenceConfig {
            refine_iters: n,
            ..cfg.inference.clone()
        }),
        split: cfg.eval.split,
        normalization: cfg.normalization,
    }
}

fn cmd_synth_data(mut cfg: RunConfig) -> Result<()> {
    cfg.resolve()?;
    let samples = synthesize_dataset(cfg.dataset.n, cfg.dataset.seed, &cfg.dataset.synth)?;
    write_generic_json(&cfg.out, &samples)
        .with_context(|| format!("writing dataset to {}", cfg.out.display()))?;
    cfg.write(&cfg.out)?;
    log::info!("wrote {} images to {}", samples.len(), cfg.out.display());
    Ok(())
}

fn cmd_pretrain(mut cfg: RunConfig) -> Result<()> {
    cfg.resolve()?;
    cfg.pretrain.validate()?;
    let (model, losses) = foundation_model(cfg.model_config(), &cfg.pretrain)?;
    fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("base.safetensors");
    save_model(&model, &path)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l:.9}\n"));
    }
    fs::write(cfg.out.join("pretrain_loss.csv"), csv)?;
    cfg.base = Some(path.clone());
    cfg.write(&cfg.out)?;
    log::info!("base weights written to {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    stage: u8,
    steps: usize,
    final_loss: Option<f64>,
    trainable_params: usize,
    checkpoint_params: usize,
    train_dice: f64,
}

fn cmd_train(mut cfg: RunConfig, stage: u8, init: Option<PathBuf>) -> Result<()> {
    let (model, report): (SamModel, TrainReport) = match stage {
        1 => {
            let mut model = load_base(&mut cfg)?;
            let samples = prepare(&cfg, &training_samples(&cfg)?)?;
            inject(&mut model, &cfg.injection)?;
            let report = train_stage1(&model, &samples, &cfg.train)?;
            (model, report)
        }
        _ => {
            let Some(init) = init else {
                bail!(Error::Validation(
                    "stage 2 requires --init <stage-1 adapter checkpoint>".into()
                ));
            };
            let model = load_adapted(&mut cfg, Some(&init))?;
            let samples = prepare(&cfg, &training_samples(&cfg)?)?;
            let report = train_stage2(&model, &samples, &cfg.train)?;
            (model, report)
        }
    };
    fs::create_dir_all(&cfg.out)?;
    report
        .checkpoint
        .save(&cfg.out.join("adapter.safetensors"))?;
    write_loss_csv(&cfg.out.join("loss.csv"), &report.curve)?;
    let samples = prepare(&cfg, &training_samples(&cfg)?)?;
    let summary = TrainSummary {
        stage,
        steps: report.steps,
        final_loss: report.curve.last().map(|e| e.mean_loss),
        trainable_params: trainable_parameter_count(&model),
        checkpoint_params: report.checkpoint.num_params(),
        train_dice: mean_dice(&model, &samples, None)?,
    };
    fs::write(
        cfg.out.join("train_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    cfg.write(&cfg.out)?;
    log::info!(
        "stage {stage}: {} steps, train dice {:.4}",
        summary.steps,
        summary.train_dice
    );
    Ok(())
}

fn image_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        bail!(Error::Validation(format!(
            "{} does not exist",
            input.display()
        )));
    }
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(input)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .map(|e| e.into_path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!(Error::Validation(format!(
            "no images under {}",
            input.display()
        )));
    }
    Ok(files)
}

#[derive(Serialize)]
struct InferLine {
    image: String,
    mask: String,
    score: f32,
    level: usize,
    detections: Vec<platesam::boxes::BBox>,
}

fn cmd_infer(mut cfg: RunConfig, adapter: Option<PathBuf>, input: &Path) -> Result<()> {
    let model = load_adapted(&mut cfg, adapter.as_deref())?;
    let files = image_files(input)?;
    let size = model.config().image_size;
    let mask_dir = cfg.out.join("masks");
    fs::create_dir_all(&mask_dir)?;
    let mut lines = String::new();
    for file in &files {
        let image = image::open(file)
            .with_context(|| format!("reading {}", file.display()))?
            .to_rgb8();
        let (canvas, transform) = preprocess(&image, size, &cfg.normalization)?;
        let r = match cfg.eval.refine {
            Some(n) => predict_refined(
                &model,
                &canvas,
                &InferenceConfig {
                    refine_iters: n,
                    ..cfg.inference.clone()
                },
            )?,
            None => predict(&model, &canvas)?,
        };
        let id = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mask = untransform_mask(&r.selected_mask, &transform);
        let mut img = GrayImage::new(mask.width as u32, mask.height as u32);
        for y in 0..mask.height {
            for x in 0..mask.width {
                img.put_pixel(
                    x as u32,
                    y as u32,
                    Luma([if mask.get(x, y) { 255 } else { 0 }]),
                );
            }
        }
        let mask_name = format!("masks/{id}.png");
        img.save(cfg.out.join(&mask_name))?;
        let dets = mask_to_detections(
            &r.selected_mask,
            r.selected_score,
            &transform,
            &id,
            cfg.eval.min_area,
        );
        lines.push_str(&serde_json::to_string(&InferLine {
            image: file.display().to_string(),
            mask: mask_name,
            score: r.selected_score,
            level: r.selected_level,
            detections: dets.into_iter().map(|d| d.bbox).collect(),
        })?);
        lines.push('\n');
    }
    fs::write(cfg.out.join("predictions.jsonl"), lines)?;
    cfg.write(&cfg.out)?;
    log::info!(
        "predicted {} images into {}",
        files.len(),
        cfg.out.display()
    );
    Ok(())
}

fn cmd_eval(mut cfg: RunConfig, adapter: Option<PathBuf>, overlays: bool) -> Result<()> {
    let model = load_adapted(&mut cfg, adapter.as_deref())?;
    let samples = cfg.dataset.load()?;
    let ecfg = eval_config(&cfg);
    let predictor = ModelPredictor {
        model: &model,
        refine: ecfg.refine.clone(),
    };
    let (report, images) = evaluate_with(&predictor, &samples, model.config().image_size, &ecfg)?;
    write_report(&cfg.out, &report, &images)?;
    if overlays {
        let dir = cfg.out.join("overlays");
        fs::create_dir_all(&dir)?;
        for (s, im) in samples
            .iter()
            .filter(|s| ecfg.split.is_none_or(|sp| s.split == sp))
            .zip(&images)
        {
            let path = dir.join(format!("{}.png", s.source_id.replace(['/', '\\'], "_")));
            draw_overlay(&s.image, &s.gt_boxes, &im.detections)
                .save(&path)
                .with_context(|| format!("writing {}", path.display()))?;
        }
    }
    cfg.write(&cfg.out)?;
    log::info!(
        "P {:.4} R {:.4} F1 {:.4} AP {:.4} over {} images",
        report.precision,
        report.recall,
        report.f1,
        report.ap,
        report.n_images
    );
    Ok(())
}

fn cmd_export(mut cfg: RunConfig, adapter: &Path) -> Result<()> {
    let mut model = load_adapted(&mut cfg, Some(adapter))?;
    let merged = merge_into_base(&mut model)?;
    fs::create_dir_all(&cfg.out)?;
    save_model(&model, &cfg.out.join("merged.safetensors"))?;
    cfg.write(&cfg.out)?;
    log::info!(
        "merged {merged} adapters into {}",
        cfg.out.join("merged.safetensors").display()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub trainable_params: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap: f64,
}

impl AblationRow {
    fn new(axis: AxisArg, value: &str, trainable_params: usize, r: &DetectionReport) -> Self {
        Self {
            axis: axis_name(axis).into(),
            value: value.into(),
            trainable_params,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            ap: r.ap,
        }
    }
}

fn axis_name(axis: AxisArg) -> &'static str {
    match axis {
        AxisArg::Rank => "rank",
        AxisArg::Injection => "injection",
        AxisArg::Refine => "refine",
        AxisArg::Prompt => "prompt",
    }
}

fn default_values(axis: AxisArg) -> Vec<String> {
    let v: &[&str] = match axis {
        AxisArg::Rank => &["1", "2", "4", "8"],
        AxisArg::Injection => &["encoder", "decoder", "both"],
        AxisArg::Refine => &["0", "1", "2", "3", "4"],
        AxisArg::Prompt => &["none", "point", "mask"],
    };
    v.iter().map(|s| s.to_string()).collect()
}

fn parse_inject(s: &str) -> Result<InjectArg> {
    match s {
        "encoder" => Ok(InjectArg::Encoder),
        "decoder" => Ok(InjectArg::Decoder),
        "both" => Ok(InjectArg::Both),
        other => bail!(Error::Validation(format!(
            "unknown injection site {other:?}"
        ))),
    }
}

fn parse_count(s: &str) -> Result<usize> {
    s.parse().map_err(|_| {
        Error::Validation(format!("expected a non-negative integer, got {s:?}")).into()
    })
}

/// Trains stage 1 under `plan` on a fresh copy of the base.
fn train_cell(
    cfg: &mut RunConfig,
    plan: &InjectionPlan,
    train: &[PreparedSample],
) -> Result<(SamModel, usize)> {
    let mut model = load_base(cfg)?;
    inject(&mut model, plan)?;
    train_stage1(&model, train, &cfg.train)?;
    let n = platesam::lora::lora_parameter_count(&model, None);
    Ok((model, n))
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("axis,value,trainable_params,precision,recall,f1,ap\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.axis, r.value, r.trainable_params, r.precision, r.recall, r.f1, r.ap
        ));
    }
    s
}

fn cmd_ablate(mut cfg: RunConfig, axis: AxisArg, values: Vec<String>) -> Result<()> {
    let values = if values.is_empty() {
        default_values(axis)
    } else {
        values
    };
    cfg.resolve()?;
    // validate every value before any training starts
    for v in &values {
        match axis {
            AxisArg::Rank => {
                if parse_count(v)? == 0 {
                    bail!(Error::Validation("rank must be positive".into()));
                }
            }
            AxisArg::Injection => {
                parse_inject(v)?;
            }
            AxisArg::Refine => {
                parse_count(v)?;
            }
            AxisArg::Prompt => {
                v.parse::<PromptKind>()?;
            }
        }
    }
    let samples = cfg.dataset.load()?;
    let train = prepare(&cfg, &training_samples(&cfg)?)?;
    let ecfg = EvalConfig {
        refine: None,
        ..eval_config(&cfg)
    };
    let size = cfg.model_config().image_size;
    let mut rows = Vec::with_capacity(values.len());
    match axis {
        AxisArg::Rank | AxisArg::Injection => {
            for v in &values {
                let mut plan = cfg.injection.clone();
                if axis == AxisArg::Rank {
                    plan.rank = parse_count(v)?;
                } else {
                    plan.targets = targets(parse_inject(v)?);
                }
                let (model, n) = train_cell(&mut cfg, &plan, &train)?;
                let predictor = ModelPredictor {
                    model: &model,
                    refine: None,
                };
                let (report, _) = evaluate_with(&predictor, &samples, size, &ecfg)?;
                log::info!(
                    "{}={v}: F1 {:.4} AP {:.4}",
                    axis_name(axis),
                    report.f1,
                    report.ap
                );
                rows.push(AblationRow::new(axis, v, n, &report));
            }
        }
        AxisArg::Refine | AxisArg::Prompt => {
            let plan = cfg.injection.clone();
            let (model, n) = train_cell(&mut cfg, &plan, &train)?;
            for v in &values {
                let report = if axis == AxisArg::Refine {
                    let predictor = ModelPredictor {
                        model: &model,
                        refine: Some(InferenceConfig {
                            refine_iters: parse_count(v)?,
                            ..cfg.inference.clone()
                        }),
                    };
                    evaluate_with(&predictor, &samples, size, &ecfg)?.0
                } else {
                    let predictor = PromptedPredictor {
                        model: &model,
                        kind: v.parse()?,
                        min_area: cfg.eval.min_area,
                    };
                    evaluate_with(&predictor, &samples, size, &ecfg)?.0
                };
                log::info!(
                    "{}={v}: F1 {:.4} AP {:.4}",
                    axis_name(axis),
                    report.f1,
                    report.ap
                );
                rows.push(AblationRow::new(axis, v, n, &report));
            }
        }
    }
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("ablation.csv"), ablation_csv(&rows))?;
    cfg.write(&cfg.out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_csv_layout() {
        let rows = vec![AblationRow {
            axis: "rank".into(),
            value: "4".into(),
            trainable_params: 10,
            precision: 1.0,
            recall: 0.5,
            f1: 2.0 / 3.0,
            ap: 0.5,
        }];
        assert_eq!(
            ablation_csv(&rows),
            "axis,value,trainable_params,precision,recall,f1,ap\nrank,4,10,1.000000,0.500000,0.666667,0.500000\n"
        );
    }

    #[test]
    fn default_axis_values() {
        assert_eq!(default_values(AxisArg::Rank).len(), 4);
        assert_eq!(default_values(AxisArg::Injection).len(), 3);
        assert_eq!(default_values(AxisArg::Refine).len(), 5);
        assert!(parse_inject("mlp").is_err());
        assert!(parse_count("-1").is_err());
    }
}
