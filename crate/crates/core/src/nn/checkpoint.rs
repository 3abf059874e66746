//! Parameter checkpoint: a JSON container of named arrays.
//!
//! Each parameter contributes four entries: `<name>`, `<name>@shadow`,
//! `<name>@adam_m` and `<name>@adam_v`. Floats are written in shortest
//! round-trip form, so save/load is bit-exact.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::model::Param;
use super::{Architecture, Group, ModelParams};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "vmt-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    fn new(name: String, t: &Tensor) -> Self {
        NamedArray {
            name,
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<T = ()> {
    pub format: String,
    pub config_hash: String,
    pub architecture: Architecture,
    pub arrays: Vec<NamedArray>,
    pub extra: T,
}

const SUFFIXES: [&str; 4] = ["", "@shadow", "@adam_m", "@adam_v"];

impl ModelParams {
    pub fn to_arrays(&self) -> Vec<NamedArray> {
        let mut out = Vec::with_capacity(4 * self.len());
        for p in self.params() {
            for (suffix, t) in SUFFIXES.iter().zip([&p.value, &p.shadow, &p.adam_m, &p.adam_v]) {
                out.push(NamedArray::new(format!("{}{suffix}", p.name), t));
            }
        }
        out
    }

    /// Rebuilds parameters for `arch` from named arrays, checking every
    /// name and shape.
    pub fn from_arrays(arch: &Architecture, arrays: &[NamedArray]) -> Result<Self> {
        let template = ModelParams::zeros(arch)?;
        let lookup = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let a = arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| Error::ArchitectureMismatch(format!("checkpoint has no array `{name}`")))?;
            if a.shape != shape {
                return Err(Error::ArchitectureMismatch(format!(
                    "`{name}` has shape {:?}, architecture expects {shape:?}",
                    a.shape
                )));
            }
            Tensor::new(a.shape.clone(), a.data.clone())
        };
        let mut params = Vec::with_capacity(template.len());
        for p in template.params() {
            let shape = p.value.shape();
            params.push(Param {
                name: p.name.clone(),
                group: p.group,
                value: lookup(&p.name, shape)?,
                shadow: lookup(&format!("{}@shadow", p.name), shape)?,
                adam_m: lookup(&format!("{}@adam_m", p.name), shape)?,
                adam_v: lookup(&format!("{}@adam_v", p.name), shape)?,
            });
        }
        if arrays.len() != 4 * params.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "checkpoint has {} arrays, architecture expects {}",
                arrays.len(),
                4 * params.len()
            )));
        }
        Ok(ModelParams::from_parts(arch.clone(), params))
    }

    pub fn group_of(&self, name: &str) -> Option<Group> {
        self.params().iter().find(|p| p.name == name).map(|p| p.group)
    }
}

impl<T> Checkpoint<T> {
    pub fn new(params: &ModelParams, config_hash: impl Into<String>, extra: T) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config_hash: config_hash.into(),
            architecture: params.architecture().clone(),
            arrays: params.to_arrays(),
            extra,
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        ModelParams::from_arrays(&self.architecture, &self.arrays)
    }
}

/// Writes to a sibling temp file and renames it into place.
pub fn save_checkpoint<T: Serialize>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let json = serde_json::to_string(ckpt).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    crate::harness::write_atomic(path, json.as_bytes())
}

pub fn load_checkpoint<T: DeserializeOwned>(path: &Path) -> Result<Checkpoint<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint<T> = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("unsupported checkpoint format `{}`", ckpt.format),
        });
    }
    Ok(ckpt)
}
