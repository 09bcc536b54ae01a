use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

impl Artifact {
    pub fn of(path: &Path) -> std::io::Result<Self> {
        let content = std::fs::read(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(&content)),
            bytes: content.len() as u64,
        })
    }
}

/// Record of one invocation: what was asked, what was read and what was written.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub started_unix_seconds: f64,
    pub wall_clock_seconds: f64,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub checkpoints: Vec<(String, PathBuf)>,
}

pub struct ManifestBuilder {
    manifest: RunManifest,
    clock: Instant,
}

impl ManifestBuilder {
    pub fn start(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        let started = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        Self {
            manifest: RunManifest {
                command: command.to_owned(),
                argv: std::env::args().collect(),
                config,
                seed,
                tool_version: env!("CARGO_PKG_VERSION").to_owned(),
                started_unix_seconds: started,
                wall_clock_seconds: 0.0,
                inputs: Vec::new(),
                outputs: Vec::new(),
                checkpoints: Vec::new(),
            },
            clock: Instant::now(),
        }
    }

    /// Fingerprints an input file, or every file below an input directory.
    pub fn input(&mut self, path: &Path) -> std::io::Result<()> {
        for file in files_below(path)? {
            self.manifest.inputs.push(Artifact::of(&file)?);
        }
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> std::io::Result<()> {
        for file in files_below(path)? {
            self.manifest.outputs.push(Artifact::of(&file)?);
        }
        Ok(())
    }

    pub fn checkpoints(&mut self, checkpoints: &[(String, PathBuf)]) {
        self.manifest.checkpoints = checkpoints.to_vec();
    }

    /// Stamps the wall clock and writes the manifest as pretty JSON.
    pub fn finish(mut self, path: &Path) -> std::io::Result<RunManifest> {
        self.manifest.wall_clock_seconds = self.clock.elapsed().as_secs_f64();
        self.manifest.outputs.retain(|a| a.path != path);
        let json = serde_json::to_string_pretty(&self.manifest).map_err(std::io::Error::other)?;
        std::fs::write(path, json + "\n")?;
        Ok(self.manifest)
    }
}

/// The path itself when it is a file, otherwise every regular file below it in sorted order.
pub fn files_below(path: &Path) -> std::io::Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    let mut pending = vec![path.to_path_buf()];
    while let Some(dir) = pending.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let entry = entry?.path();
            if entry.is_dir() {
                pending.push(entry);
            } else {
                files.push(entry);
            }
        }
    }
    files.sort();
    Ok(files)
}

pub fn read_manifest(path: &Path) -> std::io::Result<RunManifest> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(std::io::Error::other)
}
