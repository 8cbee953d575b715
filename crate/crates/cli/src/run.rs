//! Artifact directory of one command. Files go to a staging directory that is
//! swapped into place only when the command succeeds, so a failed run never
//! leaves a partial artifact set behind.

use std::fs;
use std::path::{Path, PathBuf};

use panelrl::config::RunConfig;
use panelrl::io::{sha256_hex, write_atomic};
use panelrl::ndgrad::CHECKPOINT_VERSION;
use serde::Serialize;

#[derive(Serialize)]
struct Digest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    seed: u64,
    tool_version: String,
    checkpoint_version: u32,
    config_sha256: String,
    /// Resolved configuration; paths of artifacts are relative to the output root.
    config: serde_json::Value,
    inputs: Vec<Digest>,
    artifacts: Vec<Digest>,
}

pub struct Run {
    root: PathBuf,
    command: String,
    staging: PathBuf,
    inputs: Vec<Digest>,
    artifacts: Vec<Digest>,
    finished: bool,
}

impl Run {
    pub fn start(cfg: &RunConfig, command: &str) -> anyhow::Result<Self> {
        let root = cfg.output_dir.clone();
        let staging = root.join(format!(".{command}.staging-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;
        Ok(Self {
            root,
            command: command.to_string(),
            staging,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            finished: false,
        })
    }

    /// Location inside the staging directory for writers that handle files themselves.
    pub fn path(&self, name: &str) -> PathBuf {
        self.staging.join(name)
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        write_atomic(&self.path(name), bytes)?;
        self.artifacts.push(Digest {
            path: format!("{}/{name}", self.command),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    /// Adds a file already written under the staging directory.
    pub fn record(&mut self, name: &str) -> anyhow::Result<()> {
        let bytes = fs::read(self.path(name))?;
        self.artifacts.push(Digest {
            path: format!("{}/{name}", self.command),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        let bytes = fs::read(path)?;
        self.inputs.push(Digest {
            path: self.relative(path),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    /// Writes the manifest and moves the staging directory to `<root>/<command>`.
    pub fn finish(mut self, cfg: &RunConfig) -> anyhow::Result<()> {
        let mut portable = cfg.clone();
        portable.output_dir = PathBuf::new();
        let config = serde_json::to_value(&portable)?;
        let manifest = Manifest {
            command: self.command.clone(),
            seed: cfg.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_version: CHECKPOINT_VERSION,
            config_sha256: sha256_hex(serde_json::to_string(&config)?.as_bytes()),
            config,
            inputs: std::mem::take(&mut self.inputs),
            artifacts: std::mem::take(&mut self.artifacts),
        };
        write_atomic(&self.path("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        let dest = self.root.join(&self.command);
        if dest.exists() {
            fs::remove_dir_all(&dest)?;
        }
        fs::rename(&self.staging, &dest)?;
        self.finished = true;
        Ok(())
    }
}

impl Drop for Run {
    fn drop(&mut self) {
        if !self.finished {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}
