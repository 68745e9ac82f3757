//! Saved pipeline stages under `<out-dir>/stages`, reused when the settings
//! that produced them are unchanged.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::adaptation::{DomainRecord, PipelineState};
use crate::error::{Error, Result, StageContext};
use crate::masks::{load_masks, save_masks};
use crate::train::Trainer;

const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone)]
pub struct StageStore {
    dir: PathBuf,
}

impl StageStore {
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(StageStore { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.ckpt"))
    }

    pub fn masks_path(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.masks"))
    }

    fn history_path(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.history.json"))
    }

    /// Stage name to the settings it was produced with.
    pub fn manifest(&self) -> Result<BTreeMap<String, Value>> {
        let path = self.dir.join(MANIFEST);
        if !path.exists() {
            return Ok(BTreeMap::new());
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    fn record(&self, name: &str, key: &Value) -> Result<()> {
        let mut m = self.manifest()?;
        m.insert(name.to_string(), key.clone());
        let path = self.dir.join(MANIFEST);
        std::fs::write(&path, serde_json::to_vec_pretty(&m)?).map_err(|e| Error::io(path, e))
    }

    pub fn contains(&self, name: &str) -> Result<bool> {
        Ok(self.manifest()?.contains_key(name) && self.checkpoint_path(name).exists())
    }

    pub fn save(&self, name: &str, key: &Value, state: &PipelineState) -> Result<()> {
        state.trainer.save(&self.checkpoint_path(name))?;
        save_masks(&state.registry, &self.masks_path(name))?;
        let h = self.history_path(name);
        std::fs::write(&h, serde_json::to_vec_pretty(&state.history)?).map_err(|e| Error::io(h, e))?;
        self.record(name, key)
    }

    pub fn load(&self, name: &str) -> Result<PipelineState> {
        let run = || -> Result<PipelineState> {
            let trainer = Trainer::load(&self.checkpoint_path(name))?;
            let registry = load_masks(&self.masks_path(name))?;
            registry.matches(&trainer.params)?;
            let h = self.history_path(name);
            let bytes = std::fs::read(&h).map_err(|e| Error::io(&h, e))?;
            let history: Vec<DomainRecord> = serde_json::from_slice(&bytes)?;
            Ok(PipelineState {
                trainer,
                registry,
                history,
            })
        };
        run().stage(&format!("loading stage `{name}`"))
    }

    /// The saved stage if it was produced with `key`, otherwise `compute()`,
    /// which is then saved.
    pub fn load_or(
        &self,
        name: &str,
        key: &Value,
        compute: impl FnOnce() -> Result<PipelineState>,
    ) -> Result<PipelineState> {
        if self.manifest()?.get(name) == Some(key) && self.checkpoint_path(name).exists() {
            log::info!("reusing saved stage `{name}`");
            return self.load(name);
        }
        let state = compute().stage(name)?;
        self.save(name, key, &state)?;
        Ok(state)
    }
}
