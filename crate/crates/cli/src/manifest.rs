//! Content hashes and the per-command replay manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

/// SHA-256 of `"blob <len>\0" ++ bytes`, the git object framing.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn file_hash(path: &Path) -> Result<String, CliError> {
    Ok(blob_hash(&std::fs::read(path).map_err(|e| CliError::io(path, e))?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub hash: String,
}

impl FileHash {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        Ok(Self {
            path: path.to_path_buf(),
            hash: file_hash(path)?,
        })
    }
}

/// What ran, on which inputs, and what it produced. `input_hash` covers the
/// command, its arguments, the configs and every input file hash, so two
/// manifests with equal `input_hash` describe the same computation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub args: serde_json::Value,
    /// Configs of every run involved; empty for `gradcheck`.
    pub configs: Vec<RunConfig>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub input_hash: String,
}

impl Manifest {
    pub fn new(command: &str, args: serde_json::Value, configs: &[RunConfig], inputs: &[&Path], outputs: &[&Path]) -> Result<Self, CliError> {
        let inputs: Vec<FileHash> = inputs.iter().map(|p| FileHash::of(p)).collect::<Result<_, _>>()?;
        let outputs: Vec<FileHash> = outputs.iter().map(|p| FileHash::of(p)).collect::<Result<_, _>>()?;
        // Paths are left out: the same inputs moved elsewhere hash equal.
        let keyed = serde_json::json!({
            "command": command,
            "args": args,
            "configs": configs.iter().map(RunConfig::replayable).collect::<Vec<_>>(),
            "inputs": inputs.iter().map(|f| &f.hash).collect::<Vec<_>>(),
        });
        let input_hash = blob_hash(&serde_json::to_vec(&keyed)?);
        Ok(Self {
            command: command.to_string(),
            args,
            configs: configs.to_vec(),
            inputs,
            outputs,
            input_hash,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        write_json(path, self)
    }
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_uses_git_framing() {
        // sha256 of "blob 0\0", the same framing git uses for object ids.
        let mut h = Sha256::new();
        h.update(b"blob 0\0");
        assert_eq!(blob_hash(b""), hex::encode(h.finalize()));
        assert_ne!(blob_hash(b"a"), blob_hash(b"b"));
    }
}
