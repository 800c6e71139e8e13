//! On-disk model registry: one model file per entry plus `index.json`.
//!
//! Loaded forests are immutable and shared through `Arc`. A re-train builds
//! and persists the new forest first, then swaps the pointer under a short
//! write lock, so readers see either the old model or the new one.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use cfsched::forest::{TaskTypeScope, TrainingMetrics};
use cfsched::{Forest, Hyperparams};
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

const INDEX_FILE: &str = "index.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRegistryEntry {
    pub model_id: String,
    pub task_type_scope: TaskTypeScope,
    /// Epoch seconds.
    pub created_ts: u64,
    pub hyperparams: Hyperparams,
    pub training_metrics: TrainingMetrics,
    /// File name relative to the registry directory.
    pub file: PathBuf,
}

#[derive(Default)]
struct Loaded {
    entries: Vec<ModelRegistryEntry>,
    models: HashMap<String, Arc<Forest>>,
}

pub struct Registry {
    dir: PathBuf,
    loaded: RwLock<Loaded>,
    writer: Mutex<()>,
}

/// Model ids double as file names.
pub fn valid_model_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

impl Registry {
    /// Opens `dir`, creating it if needed, and loads every indexed model.
    /// Fails if any indexed model file is missing or does not validate.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Registry, ServiceError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| ServiceError::Persistence(format!("{}: {e}", dir.display())))?;
        let mut loaded = Loaded::default();
        let index = dir.join(INDEX_FILE);
        if index.exists() {
            let text =
                fs::read(&index).map_err(|e| ServiceError::Persistence(format!("{}: {e}", index.display())))?;
            let entries: Vec<ModelRegistryEntry> = serde_json::from_slice(&text)
                .map_err(|e| ServiceError::Persistence(format!("{}: {e}", index.display())))?;
            for entry in entries {
                let forest = Forest::load(&dir.join(&entry.file))
                    .map_err(|e| ServiceError::Persistence(format!("model `{}`: {e}", entry.model_id)))?;
                loaded.models.insert(entry.model_id.clone(), Arc::new(forest));
                loaded.entries.push(entry);
            }
            log::info!("loaded {} models from {}", loaded.entries.len(), dir.display());
        }
        Ok(Registry {
            dir,
            loaded: RwLock::new(loaded),
            writer: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn get(&self, model_id: &str) -> Option<Arc<Forest>> {
        self.read().models.get(model_id).cloned()
    }

    pub fn entries(&self) -> Vec<ModelRegistryEntry> {
        self.read().entries.clone()
    }

    /// Serializes writers. Training holds this for its whole duration so
    /// concurrent re-trains of one id publish in request order.
    pub fn lock_writer(&self) -> MutexGuard<'_, ()> {
        self.writer.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Persists `forest` and publishes it under `model_id` (derived from the
    /// model bytes when `None`), replacing any previous model with that id.
    /// The caller must hold [`Registry::lock_writer`].
    pub fn publish(&self, model_id: Option<String>, forest: Forest) -> Result<ModelRegistryEntry, ServiceError> {
        let bytes = forest.to_bytes().map_err(|e| ServiceError::Persistence(e.to_string()))?;
        let model_id = model_id.unwrap_or_else(|| format!("m-{}", short_digest(&bytes)));
        let file = PathBuf::from(format!("{model_id}.json"));
        write_atomic(&self.dir.join(&file), &bytes)?;

        let entry = ModelRegistryEntry {
            model_id: model_id.clone(),
            task_type_scope: forest.task_type_scope,
            created_ts: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            hyperparams: forest.hyperparams.clone(),
            training_metrics: forest.metrics.clone(),
            file,
        };
        let mut entries = self.entries();
        match entries.iter_mut().find(|e| e.model_id == model_id) {
            Some(slot) => *slot = entry.clone(),
            None => entries.push(entry.clone()),
        }
        let index = serde_json::to_vec_pretty(&entries).map_err(|e| ServiceError::Persistence(e.to_string()))?;
        write_atomic(&self.dir.join(INDEX_FILE), &index)?;

        let forest = Arc::new(forest);
        let mut loaded = self.loaded.write().unwrap_or_else(|e| e.into_inner());
        loaded.entries = entries;
        loaded.models.insert(model_id, forest);
        Ok(entry)
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Loaded> {
        self.loaded.read().unwrap_or_else(|e| e.into_inner())
    }
}

/// First 12 hex digits of the checksum trailer of a serialized model.
fn short_digest(model_bytes: &[u8]) -> String {
    let text = String::from_utf8_lossy(model_bytes);
    let hex = text.trim_end().rsplit_once("sha256:").map(|(_, h)| h).unwrap_or_default();
    hex.chars().take(12).collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ServiceError> {
    let fail = |e: std::io::Error| ServiceError::Persistence(format!("{}: {e}", path.display()));
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(fail)?;
    file.write_all(bytes).map_err(fail)?;
    file.sync_all().map_err(fail)?;
    fs::rename(&tmp, path).map_err(fail)
}
