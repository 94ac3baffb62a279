//! Model parameter files: a JSON manifest listing layer kinds and shapes
//! plus a raw blob of f32le arrays concatenated in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{
    Architecture, BatchNormLayer, ConvLayer, DenseLayer, Layer, ModelParams,
};

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {reason}")]
    MalformedManifest { path: PathBuf, reason: String },
    #[error("unknown layer kind {kind:?} in layer {name:?}")]
    UnknownLayerKind { name: String, kind: String },
    #[error("layer {name:?} expects {want} floats but the blob holds {got} at its offset")]
    ShapeBlobMismatch { name: String, want: usize, got: usize },
    #[error("unknown architecture {0:?}")]
    UnknownArchitecture(String),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    name: String,
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    in_ch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    out_ch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    in_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    out_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    arch: String,
    sh_order: usize,
    layers: Vec<LayerEntry>,
}

fn model_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let base = if let Some(stripped) = s.strip_suffix(".model.json") {
        stripped.to_string()
    } else if let Some(stripped) = s.strip_suffix(".model.raw") {
        stripped.to_string()
    } else if let Some(stripped) = s.strip_suffix(".model") {
        stripped.to_string()
    } else {
        s.into_owned()
    };
    (PathBuf::from(format!("{base}.model.json")), PathBuf::from(format!("{base}.model.raw")))
}

fn arch_name(arch: Architecture) -> &'static str {
    match arch {
        Architecture::PatchCnn => "patch_cnn",
        Architecture::VoxelMlp => "voxel_mlp",
    }
}

/// The f32 arrays of one layer in their fixed blob order.
fn layer_arrays(layer: &Layer) -> Vec<&[f32]> {
    match layer {
        Layer::Conv3(c) => vec![&c.weight, &c.bias],
        Layer::Dense(d) => vec![&d.weight, &d.bias],
        Layer::BatchNorm(b) => vec![&b.gamma, &b.beta, &b.running_mean, &b.running_var],
    }
}

/// Writes `<base>.model.json` + `<base>.model.raw`.
pub fn write_model(params: &ModelParams, path: &Path) -> Result<(), ModelIoError> {
    let (manifest_path, raw_path) = model_paths(path);
    let io_err = |path: &PathBuf, source| ModelIoError::IoFailure { path: path.clone(), source };
    let mut entries = Vec::new();
    for (i, layer) in params.layers.iter().enumerate() {
        let mut entry = LayerEntry {
            name: format!("layer{i:02}"),
            kind: String::new(),
            in_ch: None,
            out_ch: None,
            in_dim: None,
            out_dim: None,
            channels: None,
            momentum: None,
            eps: None,
        };
        match layer {
            Layer::Conv3(c) => {
                entry.kind = "conv3".into();
                entry.in_ch = Some(c.in_ch);
                entry.out_ch = Some(c.out_ch);
            }
            Layer::Dense(d) => {
                entry.kind = "dense".into();
                entry.in_dim = Some(d.in_dim);
                entry.out_dim = Some(d.out_dim);
            }
            Layer::BatchNorm(b) => {
                entry.kind = "batchnorm".into();
                entry.channels = Some(b.channels);
                entry.momentum = Some(b.momentum);
                entry.eps = Some(b.eps);
            }
        }
        entries.push(entry);
    }
    let manifest = Manifest {
        format: "fodf-model".into(),
        version: 1,
        arch: arch_name(params.arch).into(),
        sh_order: params.sh_order,
        layers: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text).map_err(|e| io_err(&manifest_path, e))?;

    let mut bytes = Vec::new();
    for layer in &params.layers {
        for array in layer_arrays(layer) {
            for v in array {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(&raw_path, bytes).map_err(|e| io_err(&raw_path, e))
}

fn missing(name: &str, field: &str, path: &Path) -> ModelIoError {
    ModelIoError::MalformedManifest {
        path: path.to_path_buf(),
        reason: format!("layer {name:?} is missing {field}"),
    }
}

/// Reads a model written by [`write_model`], checking that every layer's
/// declared shapes are exactly covered by the blob.
pub fn read_model(path: &Path) -> Result<ModelParams, ModelIoError> {
    let (manifest_path, raw_path) = model_paths(path);
    let io_err = |path: &PathBuf, source| ModelIoError::IoFailure { path: path.clone(), source };
    let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
        ModelIoError::MalformedManifest { path: manifest_path.clone(), reason: e.to_string() }
    })?;
    if manifest.format != "fodf-model" || manifest.version != 1 {
        return Err(ModelIoError::MalformedManifest {
            path: manifest_path.clone(),
            reason: format!("unknown format {}/{}", manifest.format, manifest.version),
        });
    }
    let arch = match manifest.arch.as_str() {
        "patch_cnn" => Architecture::PatchCnn,
        "voxel_mlp" => Architecture::VoxelMlp,
        other => return Err(ModelIoError::UnknownArchitecture(other.into())),
    };
    let bytes = fs::read(&raw_path).map_err(|e| io_err(&raw_path, e))?;
    let floats_total = bytes.len() / 4;
    let mut floats = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    let mut consumed = 0usize;
    let mut take = |n: usize, name: &str| -> Result<Vec<f32>, ModelIoError> {
        if consumed + n > floats_total {
            return Err(ModelIoError::ShapeBlobMismatch {
                name: name.into(),
                want: n,
                got: floats_total - consumed,
            });
        }
        consumed += n;
        Ok(floats.by_ref().take(n).collect())
    };

    let mut layers = Vec::new();
    for entry in &manifest.layers {
        let layer = match entry.kind.as_str() {
            "conv3" => {
                let in_ch = entry.in_ch.ok_or_else(|| missing(&entry.name, "in_ch", &manifest_path))?;
                let out_ch =
                    entry.out_ch.ok_or_else(|| missing(&entry.name, "out_ch", &manifest_path))?;
                let weight = take(27 * in_ch * out_ch, &entry.name)?;
                let bias = take(out_ch, &entry.name)?;
                Layer::Conv3(ConvLayer { in_ch, out_ch, weight, bias })
            }
            "dense" => {
                let in_dim =
                    entry.in_dim.ok_or_else(|| missing(&entry.name, "in_dim", &manifest_path))?;
                let out_dim =
                    entry.out_dim.ok_or_else(|| missing(&entry.name, "out_dim", &manifest_path))?;
                let weight = take(in_dim * out_dim, &entry.name)?;
                let bias = take(out_dim, &entry.name)?;
                Layer::Dense(DenseLayer { in_dim, out_dim, weight, bias })
            }
            "batchnorm" => {
                let channels =
                    entry.channels.ok_or_else(|| missing(&entry.name, "channels", &manifest_path))?;
                let gamma = take(channels, &entry.name)?;
                let beta = take(channels, &entry.name)?;
                let running_mean = take(channels, &entry.name)?;
                let running_var = take(channels, &entry.name)?;
                Layer::BatchNorm(BatchNormLayer {
                    channels,
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    momentum: entry.momentum.unwrap_or(0.1),
                    eps: entry.eps.unwrap_or(1e-5),
                })
            }
            other => {
                return Err(ModelIoError::UnknownLayerKind {
                    name: entry.name.clone(),
                    kind: other.into(),
                })
            }
        };
        layers.push(layer);
    }
    if consumed != floats_total {
        return Err(ModelIoError::ShapeBlobMismatch {
            name: "<trailing>".into(),
            want: 0,
            got: floats_total - consumed,
        });
    }
    Ok(ModelParams { arch, sh_order: manifest.sh_order, layers })
}
