//! `run_manifest.json`: one per invocation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use dropvid::checkpoint::file_hash;
use serde::Serialize;
use serde_json::Value;

use crate::failure::Failure;

pub const FILE_NAME: &str = "run_manifest.json";

#[derive(Clone, Debug, Serialize)]
pub struct ArtifactHash {
    pub path: String,
    pub hash: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Value,
    pub seed: Option<u64>,
    pub consumed: Vec<ArtifactHash>,
    pub produced: Vec<ArtifactHash>,
    pub started_at: String,
    pub finished_at: String,
    pub status: String,
    pub details: BTreeMap<String, Value>,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Accumulates the manifest while a command runs.
pub struct Run {
    pub manifest: RunManifest,
    path: Option<PathBuf>,
}

impl Run {
    pub fn start(command: &str) -> Self {
        Self {
            manifest: RunManifest {
                command: command.into(),
                args: std::env::args().collect(),
                config: Value::Null,
                seed: None,
                consumed: Vec::new(),
                produced: Vec::new(),
                started_at: now(),
                finished_at: String::new(),
                status: String::new(),
                details: BTreeMap::new(),
            },
            path: None,
        }
    }

    /// Where the manifest goes once the command finishes.
    pub fn write_to(&mut self, path: PathBuf) {
        self.path = Some(path);
    }

    fn hash(path: &Path) -> Result<ArtifactHash, Failure> {
        Ok(ArtifactHash {
            path: path.display().to_string(),
            hash: file_hash(path)?,
        })
    }

    pub fn consumed(&mut self, path: &Path) -> Result<(), Failure> {
        let h = Self::hash(path)?;
        self.manifest.consumed.push(h);
        Ok(())
    }

    pub fn produced(&mut self, path: &Path) -> Result<(), Failure> {
        let h = Self::hash(path)?;
        self.manifest.produced.push(h);
        Ok(())
    }

    pub fn detail(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("manifest detail serialises");
        self.manifest.details.insert(key.into(), v);
    }

    /// Stamps the outcome and writes the manifest if a location was set.
    pub fn finish(mut self, outcome: &Result<(), Failure>) -> Result<(), Failure> {
        self.manifest.finished_at = now();
        self.manifest.status = match outcome {
            Ok(()) => "ok".into(),
            Err(f) => format!("failed ({}): {}", f.code, f.message),
        };
        let Some(path) = self.path else {
            return Ok(());
        };
        if let Some(p) = path.parent() {
            fs::create_dir_all(p).map_err(|e| Failure::io(p, e))?;
        }
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serialises");
        fs::write(&path, json + "\n").map_err(|e| Failure::io(&path, e))
    }
}
