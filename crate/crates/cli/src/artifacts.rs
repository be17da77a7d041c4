use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Result, StageExt};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Nonprivate,
    Dp,
}

/// Content hashes of the inputs plus the resolved configuration. Hashing
/// its JSON form names the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub mode: Mode,
    /// Input role to SHA-256 of the file contents.
    pub inputs: BTreeMap<String, String>,
    pub config: RunConfig,
    /// `(epsilon, delta)` actually used in private mode.
    pub privacy: Option<(f64, f64)>,
    pub seeds: BTreeMap<String, u64>,
}

impl Manifest {
    pub fn new(command: &str, mode: Mode, config: RunConfig) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            mode,
            inputs: BTreeMap::new(),
            config,
            privacy: None,
            seeds: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialization cannot fail")
    }

    pub fn id(&self) -> String {
        hex::encode(&Sha256::digest(self.to_json().as_bytes())[..8])
    }

    /// Creates `root/<command>-<id>` and writes the manifest into it.
    pub fn open_dir(&self, root: &Path) -> Result<PathBuf> {
        let dir = root.join(format!("{}-{}", self.command, self.id()));
        std::fs::create_dir_all(&dir).at("output")?;
        write_atomic(&dir.join(MANIFEST), self.to_json().as_bytes())?;
        Ok(dir)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| CliError::Stage {
        stage: "output",
        message: format!("{}: {e}", path.display()),
    })
}

/// Renders into memory with `f`, then writes atomically.
pub fn write_with<E: std::fmt::Display>(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::result::Result<(), E>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| CliError::Stage {
        stage: "output",
        message: format!("{}: {e}", path.display()),
    })?;
    write_atomic(path, &buf)
}
