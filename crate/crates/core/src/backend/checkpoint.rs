//! `<run>/checkpoints/<id>/{params.bin, manifest.json}`.
//!
//! `params.bin` is the raw little-endian `f64` parameter vector. The manifest
//! is plain JSON so lineage can be audited without touching the weights.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{content_digest, restore_backend, LineageEntry, ModelHandle, Role};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointStatus {
    Complete,
    /// Last good parameters of a step that hit a training fault.
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub id: String,
    pub parent_id: Option<String>,
    pub role: Role,
    pub status: CheckpointStatus,
    pub backend_kind: String,
    pub backend_config: serde_json::Value,
    pub latent_shape: Vec<usize>,
    pub t_max: usize,
    pub removed_concepts: Vec<String>,
    pub lineage: Vec<LineageEntry>,
    pub hyperparameters: serde_json::Value,
    pub content_hash: String,
}

pub fn checkpoint_dir(run_dir: &Path, id: &str) -> PathBuf {
    run_dir.join("checkpoints").join(id)
}

/// Writes `model` under `<run_dir>/checkpoints/<id>` and returns the id.
///
/// The directory is staged next to its final location and renamed into
/// place, so a reader never sees a half-written checkpoint.
pub fn save_checkpoint(
    model: &mut ModelHandle,
    run_dir: &Path,
    id: &str,
    hyperparameters: serde_json::Value,
) -> Result<String> {
    save_with_status(model, run_dir, id, hyperparameters, CheckpointStatus::Complete)
}

pub(crate) fn save_with_status(
    model: &mut ModelHandle,
    run_dir: &Path,
    id: &str,
    hyperparameters: serde_json::Value,
    status: CheckpointStatus,
) -> Result<String> {
    if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
        return Err(Error::Input(format!("invalid checkpoint id `{id}`")));
    }
    let root = run_dir.join("checkpoints");
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let final_dir = root.join(id);
    let staging = root.join(format!(".{id}.staging-{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;

    let blob: Vec<u8> = model.params().iter().flat_map(|p| p.to_le_bytes()).collect();
    let params_path = staging.join("params.bin");
    fs::write(&params_path, &blob).map_err(|e| Error::io(&params_path, e))?;

    let parent_id = model.parent_id().map(str::to_string);
    let manifest = CheckpointManifest {
        id: id.to_string(),
        parent_id: parent_id.clone(),
        role: model.role(),
        status,
        backend_kind: model.backend().kind().to_string(),
        backend_config: model.backend().config(),
        latent_shape: model.latent_shape().to_vec(),
        t_max: model.t_max(),
        removed_concepts: model.removed_concepts(),
        lineage: model.lineage().to_vec(),
        hyperparameters,
        content_hash: model.content_hash().to_string(),
    };
    let manifest_path = staging.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;

    if final_dir.exists() {
        fs::remove_dir_all(&final_dir).map_err(|e| Error::io(&final_dir, e))?;
    }
    fs::rename(&staging, &final_dir).map_err(|e| Error::io(&final_dir, e))?;
    model.set_ids(Some(id.to_string()), parent_id);
    Ok(id.to_string())
}

pub fn read_manifest(run_dir: &Path, id: &str) -> Result<CheckpointManifest> {
    let path = checkpoint_dir(run_dir, id).join("manifest.json");
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::NotFound(format!("checkpoint `{id}` in {}", run_dir.display())))
        }
        Err(e) => return Err(Error::io(&path, e)),
    };
    serde_json::from_str(&text).map_err(|e| Error::Corruption(format!("{}: {e}", path.display())))
}

/// Loads and integrity-checks a checkpoint.
pub fn load_checkpoint(run_dir: &Path, id: &str) -> Result<ModelHandle> {
    let manifest = read_manifest(run_dir, id)?;
    let path = checkpoint_dir(run_dir, id).join("params.bin");
    let blob = fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Corruption(format!("{} missing", path.display())),
        _ => Error::io(&path, e),
    })?;
    if blob.len() % 8 != 0 {
        return Err(Error::Corruption(format!("{} is truncated", path.display())));
    }
    let params: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let digest = content_digest(&manifest.backend_kind, &manifest.backend_config, &params);
    if digest != manifest.content_hash {
        return Err(Error::Corruption(format!(
            "checkpoint `{id}`: content hash {digest} does not match manifest {}",
            manifest.content_hash
        )));
    }
    let backend = restore_backend(&manifest.backend_kind, &manifest.backend_config, params)
        .map_err(|e| Error::Corruption(e.to_string()))?;
    let mut model = ModelHandle::from_boxed(manifest.role, backend);
    if model.latent_shape() != manifest.latent_shape.as_slice() || model.t_max() != manifest.t_max {
        return Err(Error::Corruption(format!("checkpoint `{id}`: shape metadata disagrees with config")));
    }
    model.set_lineage(manifest.lineage);
    model.set_ids(Some(manifest.id), manifest.parent_id);
    Ok(model)
}
