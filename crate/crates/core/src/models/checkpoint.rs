//! Checkpoints are a JSON manifest (`<path>.json`) next to a raw parameter
//! blob (`<path>`). The blob holds every parameter tensor concatenated in
//! construction order as little-endian floats of the recorded dtype.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ArchitectureTag, ModelHandle, NetSpec, Role};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub role: Role,
    pub arch: ArchitectureTag,
    pub spec: NetSpec,
    pub seed: u64,
    pub step: u64,
    pub param_count: usize,
    pub dtype: Dtype,
    pub sha256: String,
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Write `handle` at `path`. `F64` is lossless and is what training uses so
/// that resumed runs continue bit-identically.
pub fn save_checkpoint(handle: &ModelHandle, path: &Path, dtype: Dtype) -> Result<CheckpointManifest> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut blob = Vec::with_capacity(handle.param_count() * dtype.width());
    for v in handle.params().iter().flat_map(|t| t.data().iter()) {
        match dtype {
            Dtype::F32 => blob.extend_from_slice(&(*v as f32).to_le_bytes()),
            Dtype::F64 => blob.extend_from_slice(&v.to_le_bytes()),
        }
    }
    let manifest = CheckpointManifest {
        role: handle.role,
        arch: handle.arch,
        spec: handle.spec,
        seed: handle.seed,
        step: handle.step,
        param_count: handle.param_count(),
        dtype,
        sha256: handle.param_hash(),
    };
    fs::write(path, blob)?;
    fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelHandle> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(manifest_path(path))?)?;
    let mut handle = ModelHandle::build(manifest.arch, manifest.role, manifest.spec, manifest.seed)?;
    if handle.param_count() != manifest.param_count {
        return Err(malformed(path, "parameter count does not match architecture"));
    }
    let blob = fs::read(path)?;
    let width = manifest.dtype.width();
    if blob.len() != manifest.param_count * width {
        return Err(malformed(
            path,
            format!("expected {} bytes, found {}", manifest.param_count * width, blob.len()),
        ));
    }
    let mut values = blob.chunks_exact(width).map(|b| match manifest.dtype {
        Dtype::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
        Dtype::F64 => f64::from_le_bytes(b.try_into().unwrap()),
    });
    let params = handle
        .params()
        .iter()
        .map(|t| Tensor::from_vec(t.shape(), values.by_ref().take(t.numel()).collect()))
        .collect();
    handle.set_params(params)?;
    handle.step = manifest.step;
    if manifest.dtype == Dtype::F64 && handle.param_hash() != manifest.sha256 {
        return Err(malformed(path, "parameter hash mismatch"));
    }
    Ok(handle)
}

/// Read only the manifest, e.g. to check a role before loading.
pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    Ok(serde_json::from_str(&fs::read_to_string(manifest_path(path))?)?)
}
