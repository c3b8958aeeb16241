//! Checkpoints available to the service and the one currently active.

use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use inpaint_core::models::{load_bundle, ModelBundle};
use serde::Serialize;

pub const BUNDLE_EXTENSION: &str = "ckpt";

#[derive(Clone)]
pub struct ActiveBundle {
    pub name: String,
    pub bundle: Arc<ModelBundle>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BundleEntry {
    pub name: String,
    pub path: PathBuf,
    pub resolution: Option<usize>,
    pub networks: Vec<String>,
    pub loaded: bool,
}

pub enum LoadError {
    NotFound(String),
    Corrupt(String),
}

pub struct BundleRegistry {
    dir: PathBuf,
    active: RwLock<Option<ActiveBundle>>,
}

/// Bundle names are file stems; anything that could escape the directory is refused.
fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !name.starts_with('.')
}

impl BundleRegistry {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            active: RwLock::new(None),
        }
    }

    pub fn path_of(&self, name: &str) -> Option<PathBuf> {
        valid_name(name).then(|| self.dir.join(format!("{name}.{BUNDLE_EXTENSION}")))
    }

    pub fn active(&self) -> Option<ActiveBundle> {
        self.active.read().expect("bundle lock").clone()
    }

    /// Checkpoint files in the bundles directory, sorted by name.
    pub fn list(&self) -> Vec<BundleEntry> {
        let active = self.active().map(|a| a.name);
        let mut names: Vec<String> = std::fs::read_dir(&self.dir)
            .into_iter()
            .flatten()
            .flatten()
            .map(|e| e.path())
            .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == BUNDLE_EXTENSION))
            .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .filter(|n| valid_name(n))
            .collect();
        names.sort();
        names
            .into_iter()
            .map(|name| {
                let path = self.dir.join(format!("{name}.{BUNDLE_EXTENSION}"));
                let loaded = active.as_deref() == Some(name.as_str());
                let (resolution, networks) = match (loaded, self.active()) {
                    (true, Some(a)) => (Some(a.bundle.arch.resolution), nets(&a.bundle)),
                    _ => match load_bundle(&path) {
                        Ok(b) => (Some(b.arch.resolution), nets(&b)),
                        Err(_) => (None, Vec::new()),
                    },
                };
                BundleEntry {
                    name,
                    path,
                    resolution,
                    networks,
                    loaded,
                }
            })
            .collect()
    }

    /// Loads `name` and makes it active. On failure the previous bundle stays.
    pub fn load(&self, name: &str) -> Result<BundleEntry, LoadError> {
        let path = self
            .path_of(name)
            .filter(|p| p.is_file())
            .ok_or_else(|| LoadError::NotFound(format!("no bundle named {name:?}")))?;
        let bundle = load_bundle(&path).map_err(|e| LoadError::Corrupt(e.to_string()))?;
        if bundle.generator.is_none() || bundle.encoder.is_none() {
            return Err(LoadError::Corrupt(format!(
                "bundle {name:?} lacks a generator or encoder and cannot inpaint"
            )));
        }
        let entry = BundleEntry {
            name: name.to_string(),
            path,
            resolution: Some(bundle.arch.resolution),
            networks: nets(&bundle),
            loaded: true,
        };
        *self.active.write().expect("bundle lock") = Some(ActiveBundle {
            name: name.to_string(),
            bundle: Arc::new(bundle),
        });
        log::info!("bundle {name} loaded");
        Ok(entry)
    }
}

fn nets(b: &ModelBundle) -> Vec<String> {
    b.networks().into_iter().map(String::from).collect()
}
