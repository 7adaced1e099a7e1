//! Checkpoint files: a JSON document holding the configuration and every
//! named tensor. Floats are written in shortest round-trip form, so a saved
//! model reloads bit-for-bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::Parameters;
use super::{ModelConfig, ModelWeights};
use crate::error::{Error, Result};

const FORMAT: &str = "mcrecon-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorRecord>,
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, weights: &ModelWeights) -> Result<()> {
    weights.check_config(cfg)?;
    let mut tensors = Vec::new();
    weights.visit("", &mut |name, shape, values| {
        tensors.push(TensorRecord {
            name: name.to_string(),
            shape: shape.to_vec(),
            values: values.to_vec(),
        })
    });
    let file = CheckpointFile {
        format: FORMAT.into(),
        version: VERSION,
        config: cfg.clone(),
        tensors,
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelWeights)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if file.format != FORMAT || file.version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint {} v{}", file.format, file.version),
        ));
    }
    file.config.validate()?;
    let mut weights = ModelWeights::zeros(&file.config);
    let mut records = file.tensors.into_iter();
    let mut failure = None;
    weights.visit_mut("", &mut |name, values| {
        if failure.is_some() {
            return;
        }
        match records.next() {
            Some(r) if r.name == name && r.values.len() == values.len() => values.copy_from_slice(&r.values),
            Some(r) => failure = Some(format!("tensor {} does not match expected {name}", r.name)),
            None => failure = Some(format!("missing tensor {name}")),
        }
    });
    if records.next().is_some() {
        failure.get_or_insert_with(|| "unexpected extra tensors".into());
    }
    match failure {
        Some(msg) => Err(Error::format(path, msg)),
        None => Ok((file.config, weights)),
    }
}
