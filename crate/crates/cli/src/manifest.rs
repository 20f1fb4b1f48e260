//! The single record each command leaves in its output directory.

use crate::failure::Failure;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// Merged configuration after flag overrides.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<String>,
    /// Relative to the output directory.
    pub outputs: Vec<String>,
    pub tool_version: String,
    pub threads: usize,
    pub wall_clock_seconds: f64,
}

/// Collects a command's provenance while it runs.
pub struct Recorder {
    manifest: RunManifest,
    out_dir: PathBuf,
    started: Instant,
}

impl Recorder {
    /// Creates `out_dir` and starts the clock.
    pub fn start(command: &str, out_dir: &Path) -> Result<Self, Failure> {
        std::fs::create_dir_all(out_dir)
            .map_err(|e| Failure::other(format!("cannot create {}: {e}", out_dir.display())))?;
        Ok(Self {
            manifest: RunManifest {
                command: command.into(),
                args: std::env::args().skip(1).collect(),
                config: serde_json::Value::Null,
                seeds: BTreeMap::new(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                tool_version: env!("CARGO_PKG_VERSION").into(),
                threads: rayon::current_num_threads(),
                wall_clock_seconds: 0.0,
            },
            out_dir: out_dir.to_path_buf(),
            started: Instant::now(),
        })
    }

    pub fn config(&mut self, value: &impl Serialize) {
        self.manifest.config = serde_json::to_value(value).expect("configs serialize to json");
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.manifest.seeds.insert(name.into(), seed);
    }

    pub fn input(&mut self, path: &Path) {
        self.manifest.inputs.push(path.display().to_string());
    }

    /// Path of output `name` inside the directory, recorded as written.
    pub fn output(&mut self, name: &str) -> PathBuf {
        self.manifest.outputs.push(name.into());
        self.out_dir.join(name)
    }

    /// Records files written by another routine, given their full paths.
    pub fn outputs_written(&mut self, paths: &[PathBuf]) {
        for p in paths {
            let rel = p.strip_prefix(&self.out_dir).unwrap_or(p);
            self.manifest.outputs.push(rel.display().to_string());
        }
    }

    pub fn finish(mut self) -> Result<(), Failure> {
        self.manifest.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        let path = self.out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Failure::other(format!("cannot write {}: {e}", path.display())))
    }
}
