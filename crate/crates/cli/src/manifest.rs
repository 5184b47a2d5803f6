use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// One line of `manifest.jsonl`. Only the two timestamps vary between
/// identical runs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub input_hash: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub exit_code: i32,
    pub error: Option<String>,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    /// Relative to the output location.
    pub path: String,
    pub sha256: String,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `sha256("blob <len>\0" ‖ content)`.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex(&h.finalize())
}

pub fn file_hash(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(blob_hash(&bytes))
}

/// Combined hash of the input files (in argument order) and the resolved config.
pub fn input_hash(inputs: &[PathBuf], config: &serde_json::Value) -> Result<String, CliError> {
    let mut h = Sha256::new();
    for p in inputs {
        h.update(file_hash(p)?.as_bytes());
        h.update(b"\n");
    }
    h.update(blob_hash(config.to_string().as_bytes()).as_bytes());
    Ok(hex(&h.finalize()))
}

pub fn artifacts(base: &Path, paths: &[PathBuf]) -> Result<Vec<Artifact>, CliError> {
    paths
        .iter()
        .map(|p| {
            let rel = p.strip_prefix(base).unwrap_or(p);
            Ok(Artifact {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: file_hash(p)?,
            })
        })
        .collect()
}

/// Appends the manifest as one JSON line.
pub fn append(path: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut line = serde_json::to_string(manifest).expect("manifest serializes");
    line.push('\n');
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .and_then(|mut f| f.write_all(line.as_bytes()))
        .map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_framing() {
        let mut h = Sha256::new();
        h.update(b"blob 5\0hello");
        assert_eq!(blob_hash(b"hello"), hex(&h.finalize()));
    }

    #[test]
    fn append_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let m = RunManifest {
            command: "x".into(),
            args: vec![],
            config: serde_json::Value::Null,
            seed: Some(1),
            input_hash: String::new(),
            started_unix: 0.0,
            finished_unix: 0.0,
            exit_code: 0,
            error: None,
            artifacts: vec![],
        };
        append(&path, &m).unwrap();
        append(&path, &m).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
    }
}
