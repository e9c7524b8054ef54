//! Adapter and full-model checkpoints as single safetensors files.
//!
//! The JSON manifest travels in the safetensors metadata under `manifest`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{inject, InjectionPlan, Stage};
use crate::model::{Component, ModelConfig, SamModel};
use crate::params::{ParamRole, Parameterized};
use sha2::{Digest, Sha256};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_KEY: &str = "manifest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterManifest {
    pub format_version: u32,
    pub stage: Stage,
    pub plan: InjectionPlan,
    pub config_hash: String,
    /// [`base_fingerprint`] of the model the adapters were trained on.
    pub base_fingerprint: String,
}

/// SHA-256 over the frozen base weights of the image encoder and mask
/// decoder (the prompt encoder may be trained and is left out).
pub fn base_fingerprint(model: &SamModel) -> Result<String> {
    let mut h = Sha256::new();
    for (name, p) in model.named_params() {
        if p.role() != ParamRole::Base
            || Component::of_path(&name) == Some(Component::PromptEncoder)
        {
            continue;
        }
        h.update(name.as_bytes());
        for v in p.to_vec()? {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// One named tensor in row-major f32.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(Self {
            shape: t.dims().to_vec(),
            data: t.flatten_all()?.to_vec1::<f32>()?,
        })
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            self.data.clone(),
            self.shape.as_slice(),
            &Device::Cpu,
        )?)
    }
}

/// Everything training produces: adapter matrices plus, after the promptable
/// stage, the prompt-encoder weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterCheckpoint {
    pub manifest: AdapterManifest,
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl AdapterCheckpoint {
    pub fn from_model(model: &SamModel, stage: Stage) -> Result<Self> {
        let plan = model
            .injection_plan()
            .cloned()
            .ok_or_else(|| Error::Checkpoint("model carries no adapters".into()))?;
        let mut tensors = BTreeMap::new();
        for (path, p) in model.named_params() {
            let keep = p.role().is_lora()
                || (stage == Stage::Promptable
                    && Component::of_path(&path) == Some(Component::PromptEncoder));
            if keep {
                tensors.insert(path, TensorRecord::from_tensor(p.var().as_tensor())?);
            }
        }
        Ok(Self {
            manifest: AdapterManifest {
                format_version: FORMAT_VERSION,
                stage,
                plan,
                config_hash: model.config().config_hash(),
                base_fingerprint: base_fingerprint(model)?,
            },
            tensors,
        })
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        serialize(&self.tensors, serde_json::to_string(&self.manifest)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, tensors) = deserialize(bytes)?;
        let manifest: AdapterManifest = serde_json::from_str(&manifest)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Writes the stored tensors into `model`, injecting adapters first when
    /// the model has none. Fails on a config hash or plan mismatch.
    pub fn apply(&self, model: &mut SamModel) -> Result<()> {
        let found = model.config().config_hash();
        if found != self.manifest.config_hash {
            return Err(Error::ConfigHashMismatch {
                expected: self.manifest.config_hash.clone(),
                found,
            });
        }
        let fingerprint = base_fingerprint(model)?;
        if fingerprint != self.manifest.base_fingerprint {
            return Err(Error::Checkpoint(
                "adapters were trained on different base weights".into(),
            ));
        }
        match model.injection_plan() {
            None => {
                inject(model, &self.manifest.plan)?;
            }
            Some(p) if *p == self.manifest.plan => {}
            Some(p) => {
                return Err(Error::Config(format!(
                    "model injected with {p:?}, checkpoint expects {:?}",
                    self.manifest.plan
                )))
            }
        }
        let params: HashMap<String, _> = model.named_params().into_iter().collect();
        for (name, record) in &self.tensors {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            p.assign(&record.to_tensor()?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub injection: Option<InjectionPlan>,
}

/// Writes every parameter of `model` along with its configuration.
pub fn save_model(model: &SamModel, path: &Path) -> Result<()> {
    let tensors = model
        .named_params()
        .into_iter()
        .map(|(n, p)| Ok((n, TensorRecord::from_tensor(p.var().as_tensor())?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        injection: model.injection_plan().cloned(),
    };
    std::fs::write(
        path,
        serialize(&tensors, serde_json::to_string(&manifest)?)?,
    )?;
    Ok(())
}

/// Rebuilds a model from [`save_model`] output; every parameter must be present.
pub fn load_model(path: &Path) -> Result<SamModel> {
    let (manifest, tensors) = deserialize(&std::fs::read(path)?)?;
    let manifest: ModelManifest = serde_json::from_str(&manifest)?;
    let mut model = SamModel::new(manifest.config)?;
    if let Some(plan) = &manifest.injection {
        inject(&mut model, plan)?;
    }
    let params = model.named_params();
    if params.len() != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            params.len(),
            tensors.len()
        )));
    }
    for (name, p) in &params {
        let record = tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        p.assign(&record.to_tensor()?)?;
    }
    drop(params);
    crate::lora::freeze_all(&model);
    Ok(model)
}

fn serialize(tensors: &BTreeMap<String, TensorRecord>, manifest: String) -> Result<Vec<u8>> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(n, t)| {
            let raw = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            (n.clone(), t.shape.clone(), raw)
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(n, shape, raw)| Ok((n.as_str(), TensorView::new(Dtype::F32, shape.clone(), raw)?)))
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([(MANIFEST_KEY.to_string(), manifest)]);
    Ok(safetensors::serialize(views, Some(meta))?)
}

fn deserialize(bytes: &[u8]) -> Result<(String, BTreeMap<String, TensorRecord>)> {
    let (_, meta) = SafeTensors::read_metadata(bytes)?;
    let manifest = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(MANIFEST_KEY))
        .cloned()
        .ok_or_else(|| Error::Checkpoint("missing manifest".into()))?;
    let st = SafeTensors::deserialize(bytes)?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("{name}: expected f32")));
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(
            name,
            TensorRecord {
                shape: view.shape().to_vec(),
                data,
            },
        );
    }
    Ok((manifest, tensors))
}
