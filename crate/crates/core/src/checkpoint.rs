//! Versioned JSON checkpoints. Tensor data is stored as base64 of the
//! little-endian `f64` bytes, so a save/load round trip is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SanConfig, SanModel, SanParams, Variant};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: SanConfig,
    pub vocab: Vocabulary,
    pub tensors: BTreeMap<String, StoredTensor>,
}

pub fn encode_tensor(t: &Tensor) -> StoredTensor {
    let mut bytes = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    StoredTensor {
        shape: t.shape().to_vec(),
        data: STANDARD.encode(bytes),
    }
}

pub fn decode_tensor(name: &str, s: &StoredTensor) -> Result<Tensor> {
    let bytes = STANDARD
        .decode(&s.data)
        .map_err(|e| Error::Data(format!("tensor {name}: {e}")))?;
    let numel: usize = s.shape.iter().product();
    if bytes.len() != numel * 8 {
        return Err(Error::Data(format!(
            "tensor {name}: shape {:?} needs {} bytes, found {}",
            s.shape,
            numel * 8,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(s.shape.clone(), data).map_err(|e| Error::Data(format!("tensor {name}: {e}")))
}

impl Checkpoint {
    pub fn from_model(model: &SanModel) -> Self {
        let tensors = model
            .params
            .group
            .iter()
            .map(|(_, name, t)| (name.to_string(), encode_tensor(t)))
            .collect();
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: model.config.clone(),
            vocab: model.vocab.clone(),
            tensors,
        }
    }

    /// Rebuilds the model, checking that the stored tensors are exactly the
    /// ones the stored configuration calls for.
    pub fn into_model(self) -> Result<SanModel> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "format version {} (this build reads {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let mut skeleton = SanParams::init(
            &self.config,
            self.vocab.len(),
            None,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        let expected: Vec<String> = skeleton
            .group
            .iter()
            .map(|(_, n, _)| n.to_string())
            .collect();
        if let Some(extra) = self.tensors.keys().find(|k| !expected.contains(k)) {
            return Err(Error::Incompatible(format!(
                "tensor {extra} does not belong to a {} model",
                self.config.variant.display_name()
            )));
        }
        for name in &expected {
            let stored = self.tensors.get(name).ok_or_else(|| {
                Error::Incompatible(format!(
                    "tensor {name} required by a {} model is missing",
                    self.config.variant.display_name()
                ))
            })?;
            let id = skeleton.group.find(name).expect("listed above");
            let want = skeleton.group.get(id).shape().to_vec();
            if stored.shape != want {
                return Err(Error::Data(format!(
                    "tensor {name} has shape {:?}, configuration implies {want:?}",
                    stored.shape
                )));
            }
            *skeleton.group.get_mut(id) = decode_tensor(name, stored)?;
        }
        Ok(SanModel {
            config: self.config,
            vocab: self.vocab,
            params: skeleton,
        })
    }
}

pub fn save_model(path: &Path, model: &SanModel) -> Result<()> {
    let json = serde_json::to_string(&Checkpoint::from_model(model))
        .map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<SanModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
    ckpt.into_model()
}

/// Loads and insists on a particular variant.
pub fn load_model_as(path: &Path, variant: Variant) -> Result<SanModel> {
    let model = load_model(path)?;
    if model.config.variant != variant {
        return Err(Error::Incompatible(format!(
            "{} holds a {} model, {} was requested",
            path.display(),
            model.config.variant.display_name(),
            variant.display_name()
        )));
    }
    Ok(model)
}
