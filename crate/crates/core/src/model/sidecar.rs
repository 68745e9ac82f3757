//! Model checkpoints: a tensor checkpoint plus a JSON sidecar carrying the
//! config and per-tensor tags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ParamGroupTag};
use crate::error::{Error, Result};
use crate::tensor::{load_checkpoint, save_checkpoint, ParamStore};

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    config: ModelConfig,
    tags: Vec<(String, ParamGroupTag)>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_model(path: &Path, config: &ModelConfig, params: &ParamStore) -> Result<()> {
    params.check_tagged()?;
    save_checkpoint(params, path)?;
    let sidecar = Sidecar {
        config: *config,
        tags: params
            .iter_tagged()
            .map(|(n, _, t)| (n.to_string(), t.expect("checked")))
            .collect(),
    };
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(side, e))
}

pub fn load_model(path: &Path) -> Result<(ModelConfig, ParamStore)> {
    let raw = load_checkpoint(path)?;
    let side = sidecar_path(path);
    let bytes = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_slice(&bytes)?;
    if sidecar.tags.len() != raw.len() {
        return Err(Error::Format(format!(
            "sidecar lists {} tensors, checkpoint holds {}",
            sidecar.tags.len(),
            raw.len()
        )));
    }
    let mut params = ParamStore::new();
    for ((name, tensor), (tname, tag)) in raw.iter().zip(&sidecar.tags) {
        if name != tname {
            return Err(Error::Format(format!("sidecar order mismatch at `{name}`")));
        }
        params.insert(name, tensor.clone(), Some(*tag))?;
    }
    Ok((sidecar.config, params))
}
