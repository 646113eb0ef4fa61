//! Per-run output directory bookkeeping.
//!
//! Every command records what it produced: content files are listed with
//! their sha256 so reruns can be compared hash-for-hash, while logs that
//! carry wall-clock times are listed without hashes. `finish` writes the
//! resolved configuration and the artifact manifest next to the outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use sonargen_core::checkpoint::sha256_file;
use sonargen_core::{Error, Result};

#[derive(Debug, serde::Serialize)]
struct FileRecord {
    sha256: String,
    bytes: u64,
}

pub struct RunContext {
    command: &'static str,
    out_dir: PathBuf,
    files: BTreeMap<String, FileRecord>,
    logs: BTreeSet<String>,
}

impl RunContext {
    pub fn new(command: &'static str, out_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(out_dir)?;
        Ok(Self {
            command,
            out_dir: out_dir.to_path_buf(),
            files: BTreeMap::new(),
            logs: BTreeSet::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out_dir.join(rel)
    }

    fn relative(&self, path: &Path) -> Result<String> {
        let rel = path.strip_prefix(&self.out_dir).map_err(|_| {
            Error::Validation(format!(
                "artifact {} lies outside the run directory {}",
                path.display(),
                self.out_dir.display()
            ))
        })?;
        Ok(rel.to_string_lossy().replace(std::path::MAIN_SEPARATOR, "/"))
    }

    /// Record one deterministic output file by content hash.
    pub fn add_file(&mut self, path: &Path) -> Result<()> {
        let rel = self.relative(path)?;
        let bytes = std::fs::metadata(path)?.len();
        self.files.insert(rel, FileRecord { sha256: sha256_file(path)?, bytes });
        Ok(())
    }

    pub fn add_files<'a>(&mut self, paths: impl IntoIterator<Item = &'a PathBuf>) -> Result<()> {
        for path in paths {
            self.add_file(path)?;
        }
        Ok(())
    }

    /// Record a log whose bytes include timings and so are not hashed.
    pub fn add_log(&mut self, path: &Path) -> Result<()> {
        let rel = self.relative(path)?;
        self.logs.insert(rel);
        Ok(())
    }

    /// Serialize a value as pretty JSON into the run directory and record
    /// it as a content file.
    pub fn write_json(&mut self, rel: &str, value: &serde_json::Value) -> Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, serde_json::to_string_pretty(value)?)?;
        self.add_file(&path)
    }

    /// Write a rendered text table into the run directory and record it.
    pub fn write_text(&mut self, rel: &str, text: &str) -> Result<()> {
        let path = self.path(rel);
        std::fs::write(&path, text)?;
        self.add_file(&path)
    }

    /// Write `resolved_config.json` and `artifacts.json`. The resolved
    /// config names input paths and the output directory, so it is listed
    /// as a log; the artifact manifest itself depends only on produced
    /// content and is byte-comparable across reruns.
    pub fn finish(mut self, resolved: serde_json::Value) -> Result<()> {
        let config_path = self.path("resolved_config.json");
        std::fs::write(&config_path, serde_json::to_string_pretty(&resolved)?)?;
        self.logs.insert("resolved_config.json".to_string());

        let manifest = serde_json::json!({
            "command": self.command,
            "files": self.files,
            "logs": self.logs,
        });
        std::fs::write(self.path("artifacts.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_files_with_hashes_and_logs_without() {
        let dir = tempfile::tempdir().unwrap();
        let mut ctx = RunContext::new("probe", dir.path()).unwrap();
        std::fs::write(ctx.path("a.txt"), b"alpha").unwrap();
        std::fs::write(ctx.path("b.log"), b"t=123ms").unwrap();
        ctx.add_file(&ctx.path("a.txt")).unwrap();
        ctx.add_log(&ctx.path("b.log")).unwrap();
        ctx.finish(serde_json::json!({"command": "probe"})).unwrap();

        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("artifacts.json")).unwrap())
                .unwrap();
        assert_eq!(manifest["command"], "probe");
        assert_eq!(manifest["files"]["a.txt"]["bytes"], 5);
        assert!(manifest["files"]["a.txt"]["sha256"].as_str().unwrap().len() == 64);
        assert_eq!(manifest["logs"][0], "b.log");
        assert_eq!(manifest["logs"][1], "resolved_config.json");
        assert!(dir.path().join("resolved_config.json").is_file());
    }

    #[test]
    fn artifacts_outside_the_run_directory_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let other = tempfile::tempdir().unwrap();
        let stray = other.path().join("stray.txt");
        std::fs::write(&stray, b"x").unwrap();
        let mut ctx = RunContext::new("probe", dir.path()).unwrap();
        assert!(matches!(ctx.add_file(&stray), Err(Error::Validation(_))));
    }
}
