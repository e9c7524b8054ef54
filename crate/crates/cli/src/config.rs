use std::path::{Path, PathBuf};

use platesam::data::{
    load_dataset, synthesize_dataset, DatasetFormat, Normalization, Sample, Split, SynthConfig,
};
use platesam::inference::InferenceConfig;
use platesam::lora::InjectionPlan;
use platesam::model::{ModelConfig, ScalePreset};
use platesam::training::{PretrainConfig, TrainConfig};
use platesam::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum FormatArg {
    Ufpr,
    Ccpd,
    GenericJson,
    Synth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub format: FormatArg,
    pub root: Option<PathBuf>,
    /// Synthetic image count and seed, used when `format` is `synth`.
    pub n: usize,
    pub seed: u64,
    pub synth: SynthConfig,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            format: FormatArg::Synth,
            root: None,
            n: 8,
            seed: 0,
            synth: SynthConfig::default(),
        }
    }
}

impl DatasetSpec {
    pub fn load(&self) -> platesam::Result<Vec<Sample>> {
        let format = match self.format {
            FormatArg::Synth => return synthesize_dataset(self.n, self.seed, &self.synth),
            FormatArg::Ufpr => DatasetFormat::Ufpr,
            FormatArg::Ccpd => DatasetFormat::Ccpd,
            FormatArg::GenericJson => DatasetFormat::GenericJson,
        };
        let root = self.root.as_deref().ok_or_else(|| {
            Error::Validation("dataset root (--data) is required for this format".into())
        })?;
        let report = load_dataset(root, format)?;
        for e in &report.errors {
            log::warn!("{e}");
        }
        if report.samples.is_empty() {
            return Err(Error::Validation(format!(
                "no samples loaded from {}",
                root.display()
            )));
        }
        Ok(report.samples)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub iou_threshold: f64,
    pub min_area: usize,
    /// Refinement iterations; `None` means plain prediction.
    pub refine: Option<usize>,
    /// `None` evaluates every sample.
    pub split: Option<Split>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            min_area: platesam::evaluation::DEFAULT_MIN_AREA,
            refine: None,
            split: Some(Split::Test),
        }
    }
}

/// Everything a command needs; written next to every artifact once resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub preset: ScalePreset,
    /// Full model config; derived from `preset` when absent.
    pub model: Option<ModelConfig>,
    /// Frozen base weights; a freshly initialized base when absent.
    pub base: Option<PathBuf>,
    pub injection: InjectionPlan,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub inference: InferenceConfig,
    pub eval: EvalSettings,
    pub dataset: DatasetSpec,
    pub normalization: Normalization,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: ScalePreset::Tiny,
            model: None,
            base: None,
            injection: InjectionPlan::default(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            inference: InferenceConfig::default(),
            eval: EvalSettings::default(),
            dataset: DatasetSpec::default(),
            normalization: Normalization::default(),
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> platesam::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn load(path: Option<&Path>) -> platesam::Result<Self> {
        match path {
            Some(p) => Self::from_file(p),
            None => Ok(Self::default()),
        }
    }

    /// Fills every derived field so the persisted config is fully explicit.
    pub fn resolve(&mut self) -> platesam::Result<()> {
        let model = self
            .model
            .get_or_insert_with(|| ModelConfig::preset(self.preset));
        model.validate()?;
        self.preset = model.scale_preset;
        self.injection.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model
            .clone()
            .unwrap_or_else(|| ModelConfig::preset(self.preset))
    }

    pub fn write(&self, dir: &Path) -> platesam::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("resolved_config.json"),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"train": {"epochs_stage1": 3}}"#).unwrap();
        assert_eq!(cfg.train.epochs_stage1, 3);
        assert_eq!(cfg.train.base_lr, TrainConfig::default().base_lr);
        assert_eq!(cfg.eval, EvalSettings::default());
    }

    #[test]
    fn resolve_fills_model() {
        let mut cfg = RunConfig::default();
        cfg.resolve().unwrap();
        assert_eq!(cfg.model, Some(ModelConfig::preset(ScalePreset::Tiny)));
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn malformed_file_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, "{not json").unwrap();
        assert!(RunConfig::from_file(&p).unwrap_err().is_validation());
    }
}
