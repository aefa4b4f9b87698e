//! Parameter files: a flat little-endian `f64` blob plus a JSON manifest of
//! tensor names, shapes and offsets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

use super::config::ModelConfig;
use super::params::ModelParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset in floats from the start of the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamManifest {
    pub schema: u32,
    pub dtype: String,
    pub total: usize,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn params_to_bytes(params: &ModelParams, model: &ModelConfig) -> (Vec<u8>, ParamManifest) {
    let mut bytes = Vec::with_capacity(params.num_scalars() * 8);
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, m) in params.tensors() {
        tensors.push(TensorEntry {
            name,
            rows: m.rows(),
            cols: m.cols(),
            offset,
        });
        offset += m.len();
        for x in m.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = ParamManifest {
        schema: 1,
        dtype: "f64le".into(),
        total: offset,
        model: model.clone(),
        tensors,
    };
    (bytes, manifest)
}

pub fn params_from_bytes(bytes: &[u8], manifest: &ParamManifest) -> Result<ModelParams> {
    if bytes.len() != manifest.total * 8 {
        return Err(invalid(format!(
            "parameter blob holds {} bytes, manifest expects {}",
            bytes.len(),
            manifest.total * 8
        )));
    }
    let template = ModelParams::init(
        &ModelConfig {
            init_std: 0.0,
            ..manifest.model.clone()
        },
        &mut crate::rng::Rng::new(0),
    )?;
    let mut params = template;
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    if names.len() != manifest.tensors.len() {
        return Err(invalid("manifest tensor count does not match the model config"));
    }
    for ((t, entry), name) in params.tensors_mut().into_iter().zip(&manifest.tensors).zip(&names) {
        if entry.name != *name || (entry.rows, entry.cols) != t.shape() {
            return Err(invalid(format!("manifest entry {} does not match tensor {name}", entry.name)));
        }
        for (i, x) in t.data_mut().iter_mut().enumerate() {
            let at = (entry.offset + i) * 8;
            *x = f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8-byte slice"));
        }
    }
    Ok(params)
}

/// Writes `<stem>.bin` and `<stem>.json` into `dir`.
pub fn save_params(params: &ModelParams, model: &ModelConfig, dir: &Path, stem: &str) -> std::io::Result<()> {
    let (bytes, manifest) = params_to_bytes(params, model);
    fs::write(dir.join(format!("{stem}.bin")), bytes)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
    fs::write(dir.join(format!("{stem}.json")), json + "\n")
}

pub fn load_params(dir: &Path, stem: &str) -> Result<(ModelParams, ModelConfig)> {
    let read = |ext: &str| fs::read(dir.join(format!("{stem}.{ext}"))).map_err(|e| invalid(format!("{stem}.{ext}: {e}")));
    let manifest: ParamManifest =
        serde_json::from_slice(&read("json")?).map_err(|e| invalid(format!("{stem}.json: {e}")))?;
    let params = params_from_bytes(&read("bin")?, &manifest)?;
    Ok((params, manifest.model))
}
