//! Run manifests written beside every command's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use iconoforge::ingest::md5_hex;
use serde::Serialize;
use serde_json::Value;

pub const RUNS_DIR: &str = "runs";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub md5: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub started_at: String,
    pub finished_at: String,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<PathBuf>,
    pub summary: Value,
    pub version: String,
}

/// Hashes a file, or every regular file directly inside a directory.
pub fn hash_inputs(paths: &[PathBuf]) -> Vec<InputHash> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut names: Vec<PathBuf> = fs::read_dir(p)
                .map(|rd| rd.filter_map(|e| e.ok()).map(|e| e.path()).filter(|q| q.is_file()).collect())
                .unwrap_or_default();
            names.sort();
            out.extend(names.into_iter().map(|q| hash_one(&q)));
        } else {
            out.push(hash_one(p));
        }
    }
    out
}

fn hash_one(path: &Path) -> InputHash {
    InputHash {
        path: path.to_path_buf(),
        md5: fs::read(path).ok().map(|b| md5_hex(&b)),
    }
}

/// Writes `runs/<timestamp>-<command>.json` under `dir`; never overwrites.
pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<PathBuf> {
    let runs = dir.join(RUNS_DIR);
    fs::create_dir_all(&runs).with_context(|| format!("create {}", runs.display()))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    let mut path = runs.join(format!("{stamp}-{}.json", manifest.command));
    let mut n = 1;
    while path.exists() {
        path = runs.join(format!("{stamp}-{}-{n}.json", manifest.command));
        n += 1;
    }
    fs::write(&path, serde_json::to_vec_pretty(manifest)?).with_context(|| format!("write {}", path.display()))?;
    Ok(path)
}
