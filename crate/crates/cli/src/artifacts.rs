//! Output locations, atomic writes, content hashes and run manifests.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;

/// Environment variable naming the root for relative output paths.
pub const OUT_ENV: &str = "PRIMDIFF_OUT";

pub const MANIFEST_FILE: &str = "manifest.json";

/// `$PRIMDIFF_OUT`, or `runs` in the working directory, made absolute.
pub fn output_root() -> PathBuf {
    let root = std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    std::path::absolute(&root).unwrap_or(root)
}

/// Relative output paths live under [`output_root`].
pub fn resolve_out(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        output_root().join(p)
    }
}

/// Writes through a temporary file in the same directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Serializes with `f` into memory, then writes atomically.
pub fn write_with(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_atomic(path, &buf)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileRef {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

/// Everything needed to reproduce one command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    /// `git rev-parse HEAD` of the working directory, when available.
    pub git: Option<String>,
    /// Command-specific arguments after flag resolution.
    pub args: serde_json::Value,
    pub seeds: Vec<u64>,
    pub config: Config,
    pub inputs: Vec<FileRef>,
    pub outputs: Vec<FileRef>,
    /// Derived numbers worth keeping next to the artifacts.
    pub notes: serde_json::Map<String, serde_json::Value>,
    pub started_unix_s: u64,
    pub wall_time_s: f64,
}

/// Collects a manifest while a command runs.
pub struct ManifestBuilder {
    m: Manifest,
    started: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn start(command: &str, args: serde_json::Value, seeds: Vec<u64>, config: &Config) -> Self {
        Self {
            m: Manifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                git: git_stamp(),
                args,
                seeds,
                config: config.clone(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                notes: serde_json::Map::new(),
                started_unix_s: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
                wall_time_s: 0.0,
            },
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.m
            .notes
            .insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    /// Hashes inputs and outputs and writes `dir/manifest.json`.
    pub fn finish(mut self, dir: &Path) -> Result<Manifest> {
        self.m.inputs = self
            .inputs
            .iter()
            .map(|p| FileRef::of(p))
            .collect::<Result<_>>()?;
        self.m.outputs = self
            .outputs
            .iter()
            .map(|p| FileRef::of(p))
            .collect::<Result<_>>()?;
        self.m.wall_time_s = self.started.elapsed().as_secs_f64();
        let json = serde_json::to_vec_pretty(&self.m)?;
        write_atomic(&dir.join(MANIFEST_FILE), &json)?;
        Ok(self.m)
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn git_stamp() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}
