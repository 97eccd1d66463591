//! Checkpoints: a JSON manifest (spec + parameter names/shapes + seed) next
//! to a raw blob of little-endian f64 values, concatenated in manifest order.
//! BatchNorm running statistics and (optionally) optimizer momentum buffers
//! ride along as extra manifest entries.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archspec::{parse_spec, serialize_spec};
use crate::emit::atomic_write;
use crate::error::{Error, Result};

use super::model::{Model, ParamRole};
use super::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: String,
    pub layer: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerCkpt {
    pub epoch: usize,
    pub step: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: serde_json::Value,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainer: Option<TrainerCkpt>,
}

pub fn manifest_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, "json")
}

pub fn blob_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, "bin")
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `<prefix>.json` and `<prefix>.bin`.
pub fn save_checkpoint(
    model: &Model,
    prefix: &Path,
    trainer: Option<(&TrainerCkpt, &[Tensor])>,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, role: &str, layer: usize, data: &[f64]| {
        entries.push(ManifestEntry { name, shape, role: role.into(), layer });
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in &model.params {
        push(p.name.clone(), p.value.shape().to_vec(), p.role.as_str(), p.layer_index, p.value.data());
    }
    for (i, s) in model.bn_states.iter().enumerate() {
        push(format!("bn{i}.running_mean"), vec![s.running_mean.len()], "running_mean", i, &s.running_mean);
        push(format!("bn{i}.running_var"), vec![s.running_var.len()], "running_var", i, &s.running_var);
    }
    if let Some((_, momentum)) = trainer {
        for (p, m) in model.params.iter().zip(momentum) {
            push(format!("{}.momentum", p.name), m.shape().to_vec(), "momentum", p.layer_index, m.data());
        }
    }
    let manifest = Manifest {
        spec: serde_json::from_str(&serialize_spec(&model.spec))?,
        seed: model.seed,
        entries,
        trainer: trainer.map(|(t, _)| t.clone()),
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    atomic_write(&manifest_path(prefix), json.as_bytes())?;
    atomic_write(&blob_path(prefix), &blob)?;
    Ok(())
}

/// Loads a checkpoint written by [`save_checkpoint`]. Returns the model and,
/// when present, the trainer state with its momentum buffers.
pub fn load_checkpoint(prefix: &Path) -> Result<(Model, Option<(TrainerCkpt, Vec<Tensor>)>)> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(manifest_path(prefix))?)?;
    let blob = std::fs::read(blob_path(prefix))?;
    let total: usize = manifest.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if blob.len() != total * 8 {
        return Err(Error::Format(format!(
            "checkpoint blob holds {} bytes but the manifest describes {}",
            blob.len(),
            total * 8
        )));
    }
    let spec = parse_spec(&serde_json::to_string(&manifest.spec)?)?;
    let mut model = Model::init(&spec, manifest.seed)?;

    let mut cursor = 0usize;
    let mut read = |shape: &[usize]| -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = blob[cursor..cursor + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        cursor += 8 * n;
        Tensor::new(shape.to_vec(), data)
    };

    let mut momentum: Vec<Tensor> = Vec::new();
    let mut param_i = 0usize;
    for entry in &manifest.entries {
        match entry.role.as_str() {
            "running_mean" | "running_var" => {
                let t = read(&entry.shape);
                let state = model
                    .bn_states
                    .get_mut(entry.layer)
                    .ok_or_else(|| Error::Format(format!("manifest names batchnorm state {}", entry.layer)))?;
                if entry.role == "running_mean" {
                    state.running_mean = t.data().to_vec();
                } else {
                    state.running_var = t.data().to_vec();
                }
            }
            "momentum" => momentum.push(read(&entry.shape)),
            role => {
                ParamRole::from_str(role)
                    .ok_or_else(|| Error::Format(format!("unknown manifest role `{role}`")))?;
                let p = model
                    .params
                    .get_mut(param_i)
                    .ok_or_else(|| Error::Format("manifest lists more parameters than the spec has".into()))?;
                if p.name != entry.name || p.value.shape() != entry.shape.as_slice() {
                    return Err(Error::Format(format!(
                        "manifest entry `{}` {:?} does not match parameter `{}` {:?}",
                        entry.name,
                        entry.shape,
                        p.name,
                        p.value.shape()
                    )));
                }
                p.value = read(&entry.shape);
                param_i += 1;
            }
        }
    }
    let trainer = manifest.trainer.map(|t| (t, momentum));
    Ok((model, trainer))
}
