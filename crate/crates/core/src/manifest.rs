//! Dataset manifest: file roles plus per-volume 7-bit category labels.
//!
//! Paths are stored relative to the manifest's own directory so a dataset
//! directory can be moved (or regenerated elsewhere) without changing a
//! byte of its contents.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub const NUM_CATEGORIES: usize = 7;

/// Category column names, fixed order.
pub const CATEGORY_NAMES: [&str; NUM_CATEGORIES] = [
    "bowel_healthy",
    "bowel_injury",
    "liver_healthy",
    "liver_high_grade",
    "kidney_high_grade",
    "spleen_healthy",
    "extravasation",
];

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("manifest parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub labeled: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unlabeled: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    /// Relative path -> 7 binary category labels.
    pub labels: BTreeMap<String, [u8; NUM_CATEGORIES]>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let mut body = serde_json::to_string_pretty(self)?;
        body.push('\n');
        fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DatasetManifest, ManifestError> {
        let body = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&body)?)
    }

    /// Resolve a stored relative path against the manifest directory.
    pub fn resolve(&self, manifest_path: &Path, rel: &str) -> PathBuf {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(rel)
    }

    pub fn all_paths(&self) -> impl Iterator<Item = &String> {
        self.labeled
            .iter()
            .chain(&self.unlabeled)
            .chain(&self.val)
            .chain(&self.test)
    }
}
