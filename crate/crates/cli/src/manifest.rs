//! Per-run provenance: every subcommand writes a manifest.json recording the
//! effective config hash, seed, a git describe string, and a checksum for
//! each artifact it produced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub git: String,
    pub threads: usize,
    /// Relative artifact path -> sha256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// Parallelism cap from the environment; all current kernels run on one
/// thread, so this is recorded for provenance and future use.
pub fn thread_cap() -> usize {
    std::env::var("IMAGEOME_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Collects artifacts under one output directory and writes manifest.json.
pub struct RunRecorder {
    out_dir: PathBuf,
    manifest: RunManifest,
}

impl RunRecorder {
    pub fn new(out_dir: &Path, command: &str, seed: u64, config_json: &str) -> Result<RunRecorder> {
        std::fs::create_dir_all(out_dir)
            .with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(RunRecorder {
            out_dir: out_dir.to_path_buf(),
            manifest: RunManifest {
                schema: 1,
                command: command.to_string(),
                seed,
                config_sha256: sha256_hex(config_json.as_bytes()),
                git: git_describe(),
                threads: thread_cap(),
                artifacts: BTreeMap::new(),
            },
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    /// Write one artifact relative to the output directory and checksum it.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out_dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.manifest
            .artifacts
            .insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// Checksum files an earlier step already wrote under the output
    /// directory (e.g. checkpoints saved by the trainer).
    pub fn record_existing(&mut self, rel: &str) -> Result<()> {
        let path = self.out_dir.join(rel);
        if path.is_dir() {
            let mut files = Vec::new();
            collect_files(&path, &mut files)?;
            files.sort();
            for f in files {
                let sub = f
                    .strip_prefix(&self.out_dir)
                    .expect("artifact inside out dir")
                    .to_string_lossy()
                    .into_owned();
                let bytes = std::fs::read(&f)?;
                self.manifest.artifacts.insert(sub, sha256_hex(&bytes));
            }
        } else {
            let bytes =
                std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            self.manifest
                .artifacts
                .insert(rel.to_string(), sha256_hex(&bytes));
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(self.out_dir.join("manifest.json"), json)?;
        Ok(())
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}
