//! Versioned JSON checkpoints. Parameter values are stored as base64 of
//! little-endian `f64` bytes, so a round trip is bit-exact.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use syncb_core::model::{ModelConfig, SynCbModel};
use syncb_core::nn::Tensor;

use crate::config::{DataSource, SplitConfig};

pub const FORMAT: &str = "syncb-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredParameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub parameters: Vec<StoredParameter>,
    pub train_seed: u64,
    pub data: DataSource,
    pub split: SplitConfig,
}

fn encode(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD.decode(text)?;
    if bytes.len() % 8 != 0 {
        bail!("parameter payload of {} bytes is not a whole number of f64", bytes.len());
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

impl Checkpoint {
    pub fn new(model: &SynCbModel, train_seed: u64, data: DataSource, split: SplitConfig) -> Self {
        let parameters = model
            .params()
            .iter()
            .map(|p| StoredParameter {
                name: p.name().to_owned(),
                shape: p.value().shape().to_vec(),
                data: encode(p.value().data()),
            })
            .collect();
        Self {
            format: FORMAT.into(),
            version: VERSION,
            model: model.config().clone(),
            parameters,
            train_seed,
            data,
            split,
        }
    }

    pub fn to_model(&self) -> Result<SynCbModel> {
        let values = self
            .parameters
            .iter()
            .map(|p| {
                let data = decode(&p.data).with_context(|| format!("parameter '{}'", p.name))?;
                Ok((p.name.clone(), Tensor::new(p.shape.clone(), data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SynCbModel::from_parameters(self.model.clone(), values)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).context("checkpoint is not JSON")?;
        let format = value.get("format").and_then(|f| f.as_str());
        if format != Some(FORMAT) {
            bail!("not a syncb checkpoint (format {:?})", format);
        }
        let version = value.get("version").and_then(|v| v.as_u64());
        if version != Some(u64::from(VERSION)) {
            return Err(anyhow!("unsupported checkpoint version {:?}, expected {VERSION}", version));
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_is_bit_exact() {
        let values = [0.1, -0.0, f64::MIN_POSITIVE, 1e308, -3.5, f64::EPSILON];
        let back = decode(&encode(&values)).unwrap();
        assert_eq!(
            values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            back.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(decode("AAAA").is_err());
    }

    #[test]
    fn rejects_foreign_documents() {
        assert!(Checkpoint::from_json("{}").is_err());
        assert!(Checkpoint::from_json(r#"{"format": "syncb-checkpoint", "version": 99}"#).is_err());
    }
}
