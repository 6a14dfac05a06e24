use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// One completed stage. Paths are relative to the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub params_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub completed_unix: u64,
    /// Wall-clock duration of the stage body.
    #[serde(default)]
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load_or_new(path: &Path, config_hash: &str) -> Result<Self> {
        if path.exists() {
            let m: RunManifest = io::read_json(path)?;
            if m.config_hash != config_hash {
                return Err(Error::HashMismatch {
                    artifact: path.display().to_string(),
                    expected: config_hash.to_owned(),
                    found: m.config_hash,
                });
            }
            Ok(m)
        } else {
            Ok(Self {
                config_hash: config_hash.to_owned(),
                stages: BTreeMap::new(),
            })
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }
}

/// Hashes `files` (relative to `root`); a missing file is an error.
pub fn hash_files(root: &Path, files: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(f);
        out.insert(rel.to_string_lossy().into_owned(), io::file_hash(&root.join(rel))?);
    }
    Ok(out)
}

/// True when every recorded file still exists with its recorded hash.
pub fn files_match(root: &Path, files: &BTreeMap<String, String>) -> bool {
    files
        .iter()
        .all(|(rel, h)| io::file_hash(&root.join(rel)).map(|f| &f == h).unwrap_or(false))
}
