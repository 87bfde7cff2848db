//! Artifact emission and the run report with its content manifest.

use std::fs;
use std::path::{Path, PathBuf};

use cpclab_core::io::{to_json_pretty, write_pgm};
use cpclab_core::{GridShape, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the report's directory.
    pub path: String,
    pub sha256: String,
}

/// Single writer for one command's output directory; every file goes through it.
pub struct ArtifactSink {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ArtifactSink {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf(), entries: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn record(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path)?;
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        self.entries.push(ManifestEntry {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<String> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.record(&path)?;
        Ok(rel.to_string())
    }

    /// Writes `<sub>/<stem>.pgm` and its sidecar.
    pub fn pgm(&mut self, sub: &str, stem: &str, shape: GridShape, values: &[f64], extra: Option<serde_json::Value>) -> Result<()> {
        let dir = self.root.join(sub);
        fs::create_dir_all(&dir)?;
        for p in write_pgm(&dir, stem, shape, values, extra)? {
            self.record(&p)?;
        }
        Ok(())
    }

    /// Writes `report.json` last; the report does not list itself.
    pub fn finish<T: Serialize>(self, command: &str, cfg: &ExperimentConfig, passed: bool, results: T) -> Result<RunReport<T>> {
        let report = RunReport {
            command: command.to_string(),
            config: cfg.clone(),
            passed,
            results,
            manifest: self.entries,
        };
        fs::write(self.root.join(REPORT_FILE), to_json_pretty(&report)?)?;
        Ok(report)
    }
}

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport<T> {
    pub command: String,
    pub config: ExperimentConfig,
    pub passed: bool,
    pub results: T,
    pub manifest: Vec<ManifestEntry>,
}

/// Re-hashes every manifest entry under `dir`; returns the mismatching paths.
pub fn verify_manifest(dir: &Path) -> Result<Vec<String>> {
    let report: RunReport<serde_json::Value> = serde_json::from_slice(&fs::read(dir.join(REPORT_FILE))?)?;
    let mut bad = Vec::new();
    for e in report.manifest {
        match fs::read(dir.join(&e.path)) {
            Ok(b) if sha256_hex(&b) == e.sha256 => {}
            _ => bad.push(e.path),
        }
    }
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let mut sink = ArtifactSink::create(dir.path()).unwrap();
        sink.write("a/b.txt", b"hello").unwrap();
        sink.pgm("img", "x", GridShape::new(2, 2).unwrap(), &[0.0, 1.0, 2.0, 3.0], None).unwrap();
        let r = sink.finish("test", &ExperimentConfig::default(), true, 7).unwrap();
        assert_eq!(r.manifest.len(), 3);
        assert_eq!(r.manifest[0].sha256, sha256_hex(b"hello"));
        assert!(verify_manifest(dir.path()).unwrap().is_empty());
        fs::write(dir.path().join("a/b.txt"), b"changed").unwrap();
        assert_eq!(verify_manifest(dir.path()).unwrap(), vec!["a/b.txt".to_string()]);
    }
}
