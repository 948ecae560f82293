// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run-directory layout, the exclusive lock, the manifest and archiving.

use std::collections::BTreeMap;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{PipelineError, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = ".lock";
pub const HISTORY: &str = "history";

pub const MODEL: &str = "model.atrw";
pub const SAE_IN: &str = "sae_in.atrw";
pub const SAE_OUT: &str = "sae_out.atrw";
pub const PLANTS: &str = "plants.json";
pub const CORPUS: &str = "corpus.txt";
pub const INDEX: &str = "index.jsonl";
pub const INDEX_SUMMARY: &str = "index_summary.json";
pub const DATASETS: &str = "datasets";
pub const RULES: &str = "rules";
pub const REPORTS: &str = "reports";
pub const CHECKPOINTS: &str = "checkpoints";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// Completed stages in first-completion order.
    pub stages: Vec<String>,
    /// Relative path → SHA-256 of every file in the run except the manifest
    /// and the lock.
    pub artifacts: BTreeMap<String, String>,
}

/// Holds `.lock` for as long as it lives.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => {
                fs::write(&path, std::process::id().to_string())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(PipelineError::Dependency(format!(
                "{} is locked by another process (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        if let Err(e) = fs::remove_file(&self.path) {
            log::warn!("could not remove {}: {e}", self.path.display());
        }
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if e.file_type()?.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("walked below root");
            let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            if rel != MANIFEST && rel != LOCK {
                out.push(rel);
            }
        }
    }
    Ok(())
}

/// Hashes of every artifact currently in `dir`.
pub fn hash_artifacts(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files
        .into_iter()
        .map(|rel| {
            let h = sha256_file(&dir.join(&rel))?;
            Ok((rel, h))
        })
        .collect()
}

pub fn read_manifest(dir: &Path) -> Result<Option<Manifest>> {
    match fs::read_to_string(dir.join(MANIFEST)) {
        Ok(s) => Ok(Some(serde_json::from_str(&s)?)),
        Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Rewrites the manifest after `stage` completed.
pub fn write_manifest(dir: &Path, cfg: &RunConfig, stage: &str) -> Result<Manifest> {
    let mut stages = read_manifest(dir)?.map(|m| m.stages).unwrap_or_default();
    if !stages.iter().any(|s| s == stage) {
        stages.push(stage.to_string());
    }
    let root = cfg.seeds();
    let seeds = ["corpus", "sae_in", "sae_out", "datasets", "counting"]
        .into_iter()
        .map(|l| (l.to_string(), root.child(l).root()))
        .chain([("root".to_string(), cfg.run.seed)])
        .collect();
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: serde_json::to_value(cfg)?,
        seeds,
        stages,
        artifacts: hash_artifacts(dir)?,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST), text)?;
    Ok(manifest)
}

/// Compares the manifest against the directory. Returns one line per
/// problem: missing, altered or unlisted files.
pub fn verify(dir: &Path) -> Result<Vec<String>> {
    let manifest = read_manifest(dir)?
        .ok_or_else(|| PipelineError::Integrity(format!("{} has no {MANIFEST}", dir.display())))?;
    let actual = hash_artifacts(dir)?;
    let mut problems = Vec::new();
    for (path, want) in &manifest.artifacts {
        match actual.get(path) {
            None => problems.push(format!("missing: {path}")),
            Some(got) if got != want => problems.push(format!("hash mismatch: {path}")),
            Some(_) => {}
        }
    }
    for path in actual.keys().filter(|p| !manifest.artifacts.contains_key(*p)) {
        problems.push(format!("not in manifest: {path}"));
    }
    Ok(problems)
}

/// Moves whichever of `outputs` exist into `history/<stage>-<n>/`, keeping
/// their relative paths, with `n` the first unused number. Returns the
/// archive directory when something was moved.
pub fn archive(dir: &Path, stage: &str, outputs: &[&str]) -> Result<Option<PathBuf>> {
    let existing: Vec<&str> = outputs.iter().copied().filter(|o| dir.join(o).exists()).collect();
    if existing.is_empty() {
        return Ok(None);
    }
    let mut n = 1;
    let target = loop {
        let t = dir.join(HISTORY).join(format!("{stage}-{n}"));
        if !t.exists() {
            break t;
        }
        n += 1;
    };
    for rel in existing {
        let dest = target.join(rel);
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::rename(dir.join(rel), dest)?;
    }
    log::info!("archived previous {stage} outputs to {}", target.display());
    Ok(Some(target))
}

/// File name of a feature's rules or dataset JSON.
pub fn feature_file(kind: &str, feature_id: &str) -> String {
    format!("{kind}/{feature_id}.json")
}
