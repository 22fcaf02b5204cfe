//! Per-run manifest written next to each command's outputs.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use anyhow::Result;

pub struct RunManifest {
    command: String,
    seed: Option<u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    started: Instant,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn input(&mut self, path: impl AsRef<Path>) {
        self.inputs.push(path.as_ref().display().to_string());
    }

    pub fn output(&mut self, path: impl AsRef<Path>) {
        self.outputs.push(path.as_ref().display().to_string());
    }

    /// Write `run_manifest.json` into `dir`. The manifest records wall-clock
    /// time and is the one run artifact excluded from byte-identity checks.
    pub fn write(&self, dir: &Path, config: &BTreeMap<String, String>) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let doc = serde_json::json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "config": config,
            "wall_clock_secs": self.started.elapsed().as_secs_f64(),
        });
        let mut bytes = serde_json::to_vec_pretty(&doc)?;
        bytes.push(b'\n');
        std::fs::write(dir.join("run_manifest.json"), bytes)?;
        Ok(())
    }
}
