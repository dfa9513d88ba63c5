//! Checkpoint directories: `config.json`, `weights.bin` and
//! `weights.index.json`.
//!
//! `weights.bin` holds every array as little-endian `f32`, concatenated in
//! index order. Optimizer moments follow the model weights under the names
//! `optim.m.<param>` and `optim.v.<param>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, S3poError};
use crate::model::{ModelConfig, ParamArray, ParameterSet};
use crate::trainer::{AdamState, TrainConfig};

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const INDEX_FILE: &str = "weights.index.json";
const FORMAT_VERSION: u32 = 1;
const MOMENT_M: &str = "optim.m.";
const MOMENT_V: &str = "optim.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParameterSet,
    pub optimizer: Option<AdamState>,
    pub train: Option<TrainConfig>,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    format_version: u32,
    model: ModelConfig,
    train: Option<TrainConfig>,
    epoch: usize,
    loss_history: Vec<f64>,
    optimizer_step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

impl Checkpoint {
    /// Inference-only checkpoint without training state.
    pub fn from_model(model: ModelConfig, params: ParameterSet) -> Self {
        Checkpoint {
            model,
            params,
            optimizer: None,
            train: None,
            epoch: 0,
            loss_history: Vec::new(),
        }
    }

    /// Writes the three files into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| S3poError::io(dir, e))?;

        let config = ConfigFile {
            format_version: FORMAT_VERSION,
            model: self.model.clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            loss_history: self.loss_history.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
        };
        write_json(&dir.join(CONFIG_FILE), &config)?;

        let mut blobs: Vec<(String, Vec<usize>, &[f64])> = self
            .params
            .arrays()
            .iter()
            .map(|a| (a.name.clone(), a.shape.clone(), a.values.as_slice()))
            .collect();
        if let Some(opt) = &self.optimizer {
            for (prefix, moments) in [(MOMENT_M, &opt.m), (MOMENT_V, &opt.v)] {
                for (a, values) in self.params.arrays().iter().zip(moments) {
                    blobs.push((format!("{prefix}{}", a.name), a.shape.clone(), values));
                }
            }
        }

        let mut bytes = Vec::new();
        let mut index = Vec::with_capacity(blobs.len());
        for (name, shape, values) in blobs {
            let offset = bytes.len() as u64;
            for &v in values {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
            index.push(IndexEntry {
                name,
                shape,
                byte_offset: offset,
                byte_length: bytes.len() as u64 - offset,
            });
        }
        let weights = dir.join(WEIGHTS_FILE);
        fs::write(&weights, bytes).map_err(|e| S3poError::io(weights, e))?;
        write_json(&dir.join(INDEX_FILE), &index)
    }

    /// Reads a checkpoint and checks its weights against its own model
    /// configuration.
    pub fn load(dir: &Path) -> Result<Self> {
        let config: ConfigFile = read_json(&dir.join(CONFIG_FILE), CONFIG_FILE)?;
        if config.format_version != FORMAT_VERSION {
            return Err(S3poError::format(
                "format_version",
                format!("unsupported version {}", config.format_version),
            ));
        }
        let index: Vec<IndexEntry> = read_json(&dir.join(INDEX_FILE), INDEX_FILE)?;
        let path = dir.join(WEIGHTS_FILE);
        let bytes = fs::read(&path).map_err(|e| S3poError::io(&path, e))?;

        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for entry in &index {
            let values = decode(entry, &bytes)?;
            let array = ParamArray {
                name: entry.name.clone(),
                shape: entry.shape.clone(),
                values,
            };
            if let Some(base) = entry.name.strip_prefix(MOMENT_M) {
                m.push((base.to_string(), array));
            } else if let Some(base) = entry.name.strip_prefix(MOMENT_V) {
                v.push((base.to_string(), array));
            } else {
                params.push(array);
            }
        }
        let params = ParameterSet::from_arrays(params)?;
        params.check_layout(&config.model)?;

        let optimizer = match config.optimizer_step {
            None if m.is_empty() && v.is_empty() => None,
            None => {
                return Err(S3poError::format(
                    CONFIG_FILE,
                    "optimizer moments present but optimizer_step missing",
                ))
            }
            Some(step) => Some(AdamState {
                step,
                m: align_moments(&params, m, MOMENT_M)?,
                v: align_moments(&params, v, MOMENT_V)?,
            }),
        };

        Ok(Checkpoint {
            model: config.model,
            params,
            optimizer,
            train: config.train,
            epoch: config.epoch,
            loss_history: config.loss_history,
        })
    }

    /// Loads a checkpoint that must fit `cfg`. Shape mismatches list every
    /// offending tensor.
    pub fn load_for(dir: &Path, cfg: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(dir)?;
        ckpt.params.check_layout(cfg)?;
        Ok(ckpt)
    }
}

/// Whether `dir` looks like a checkpoint directory.
pub fn exists(dir: &Path) -> bool {
    [CONFIG_FILE, WEIGHTS_FILE, INDEX_FILE]
        .iter()
        .all(|f| dir.join(f).is_file())
}

fn decode(entry: &IndexEntry, bytes: &[u8]) -> Result<Vec<f64>> {
    let count: usize = entry.shape.iter().product();
    if entry.byte_length != 4 * count as u64 {
        return Err(S3poError::format(
            &entry.name,
            format!(
                "byte_length {} does not match shape {:?}",
                entry.byte_length, entry.shape
            ),
        ));
    }
    let end = entry.byte_offset.checked_add(entry.byte_length);
    let range = match end {
        Some(end) if end <= bytes.len() as u64 => entry.byte_offset as usize..end as usize,
        _ => {
            return Err(S3poError::format(
                &entry.name,
                format!(
                    "bytes {}..{} lie beyond the end of {WEIGHTS_FILE} ({} bytes); file is truncated",
                    entry.byte_offset,
                    entry.byte_offset.saturating_add(entry.byte_length),
                    bytes.len()
                ),
            ))
        }
    };
    Ok(bytes[range]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn align_moments(
    params: &ParameterSet,
    moments: Vec<(String, ParamArray)>,
    prefix: &str,
) -> Result<Vec<Vec<f64>>> {
    let mut by_name: std::collections::HashMap<String, ParamArray> = moments.into_iter().collect();
    let mut out = Vec::with_capacity(params.len());
    let mut missing = Vec::new();
    for a in params.arrays() {
        match by_name.remove(&a.name) {
            Some(m) if m.shape == a.shape => out.push(m.values),
            Some(_) => missing.push(format!("{prefix}{} (shape)", a.name)),
            None => missing.push(format!("{prefix}{}", a.name)),
        }
    }
    missing.extend(by_name.into_keys().map(|n| format!("{prefix}{n} (unexpected)")));
    if !missing.is_empty() {
        missing.sort();
        return Err(S3poError::shape(format!(
            "optimizer state does not fit the parameters: {}",
            missing.join(", ")
        )));
    }
    Ok(out)
}

/// Pretty JSON with object keys in sorted order.
pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let value = serde_json::to_value(value)
        .map_err(|e| S3poError::format(path.display().to_string(), e.to_string()))?;
    let mut text = serde_json::to_string_pretty(&value)
        .map_err(|e| S3poError::format(path.display().to_string(), e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| S3poError::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path, field: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| S3poError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| S3poError::format(field, e.to_string()))
}
