use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{open_dataset, DatasetHandle, Split, TokenType};
use crate::error::{Error, Result};

/// Groups dataset files into one experiment. Relative paths resolve against
/// the manifest's own directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
    /// Patch grid per model tag.
    pub models: BTreeMap<String, ModelGrid>,
    #[serde(skip)]
    base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub model_tag: String,
    pub token_type: TokenType,
    pub split: Split,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelGrid {
    pub rows: u16,
    pub cols: u16,
    /// Patch side in pixels, used when rendering pixel masks.
    #[serde(default = "default_patch_size")]
    pub patch_size: u32,
}

fn default_patch_size() -> u32 {
    1
}

impl Manifest {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        Self {
            files: Vec::new(),
            models: BTreeMap::new(),
            base_dir: base_dir.into(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        manifest.base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn add(
        &mut self,
        model_tag: impl Into<String>,
        token_type: TokenType,
        split: Split,
        path: impl Into<PathBuf>,
    ) {
        self.files.push(ManifestEntry {
            model_tag: model_tag.into(),
            token_type,
            split,
            path: path.into(),
        });
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn lookup(&self, model_tag: &str, token_type: TokenType, split: Split) -> Result<PathBuf> {
        let mut hits = self
            .files
            .iter()
            .filter(|e| e.model_tag == model_tag && e.token_type == token_type && e.split == split);
        let entry = hits.next().ok_or_else(|| {
            Error::Manifest(format!("no file for ({model_tag}, {token_type}, {split})"))
        })?;
        if hits.next().is_some() {
            return Err(Error::Manifest(format!(
                "duplicate entries for ({model_tag}, {token_type}, {split})"
            )));
        }
        Ok(self.resolve(&entry.path))
    }

    pub fn open(&self, model_tag: &str, token_type: TokenType, split: Split) -> Result<DatasetHandle> {
        open_dataset(self.lookup(model_tag, token_type, split)?)
    }

    pub fn grid(&self, model_tag: &str) -> Result<ModelGrid> {
        self.models
            .get(model_tag)
            .copied()
            .ok_or_else(|| Error::Manifest(format!("no patch grid for model {model_tag}")))
    }

    pub fn model_tags(&self) -> Vec<String> {
        let mut tags: Vec<_> = self.files.iter().map(|e| e.model_tag.clone()).collect();
        tags.sort();
        tags.dedup();
        tags
    }
}

/// Summary of a consistent manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestSummary {
    pub files: usize,
    pub models: Vec<String>,
}

/// Open every file of the manifest and check it against its entry and its
/// siblings: header fields must match the entry, all files of a model share
/// one dimension and all files of a (model, split) cover the same image
/// records in the same order.
pub fn validate_manifest(manifest: &Manifest) -> Result<ManifestSummary> {
    let mut seen = BTreeMap::new();
    let mut dims: BTreeMap<&str, (u32, TokenType)> = BTreeMap::new();
    let mut layouts: BTreeMap<(&str, Split), (u64, TokenType)> = BTreeMap::new();

    for entry in &manifest.files {
        let key = (entry.model_tag.as_str(), entry.token_type, entry.split);
        if seen.insert(key, ()).is_some() {
            return Err(Error::Manifest(format!(
                "duplicate entries for ({}, {}, {})",
                entry.model_tag, entry.token_type, entry.split
            )));
        }
        let handle = open_dataset(manifest.resolve(&entry.path))?;
        let h = handle.header();
        if h.model_tag != entry.model_tag || h.token_type != entry.token_type || h.split != entry.split {
            return Err(Error::Manifest(format!(
                "{} declares ({}, {}, {}) but is listed as ({}, {}, {})",
                entry.path.display(),
                h.model_tag,
                h.token_type,
                h.split,
                entry.model_tag,
                entry.token_type,
                entry.split
            )));
        }
        if !manifest.models.contains_key(&entry.model_tag) {
            return Err(Error::Manifest(format!(
                "no patch grid for model {}",
                entry.model_tag
            )));
        }
        match dims.get(entry.model_tag.as_str()) {
            Some(&(d, other)) if d != h.dim => {
                return Err(Error::Manifest(format!(
                    "model {}: {} has D={} but {} has D={d}",
                    entry.model_tag, entry.token_type, h.dim, other
                )))
            }
            Some(_) => {}
            None => {
                dims.insert(&entry.model_tag, (h.dim, entry.token_type));
            }
        }
        let lk = (entry.model_tag.as_str(), entry.split);
        match layouts.get(&lk) {
            Some(&(digest, other)) if digest != handle.layout_digest() => {
                return Err(Error::Manifest(format!(
                    "model {} split {}: image records of {} differ from {}",
                    entry.model_tag, entry.split, entry.token_type, other
                )))
            }
            Some(_) => {}
            None => {
                layouts.insert(lk, (handle.layout_digest(), entry.token_type));
            }
        }
    }

    Ok(ManifestSummary {
        files: manifest.files.len(),
        models: manifest.model_tags(),
    })
}
