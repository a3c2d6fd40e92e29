//! Output directory bookkeeping and the run manifest.
//!
//! Artifacts never carry timestamps; `manifest.json` records one entry per
//! subcommand with the wall-clock time and the digest of every file written.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use loci_core::Result;

pub const MANIFEST: &str = "manifest.json";

pub struct Session {
    dir: PathBuf,
    command: String,
    scenario: Option<(String, String)>,
    files: Vec<String>,
}

impl Session {
    pub fn open(dir: &Path, command: &str) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            scenario: None,
            files: Vec::new(),
        })
    }

    pub fn scenario(&mut self, path: &Path, hash: &str) {
        self.scenario = Some((path.display().to_string(), hash.to_string()));
    }

    /// Path of an artifact, recorded for the manifest.
    pub fn file(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn finish(self, status: &str) -> Result<()> {
        let path = self.dir.join(MANIFEST);
        let mut root: Map<String, Value> = std::fs::read_to_string(&path)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default();
        let mut files = Vec::new();
        for name in &self.files {
            let bytes = std::fs::read(self.dir.join(name))?;
            files.push(json!({
                "name": name,
                "bytes": bytes.len(),
                "sha256": hex::encode(Sha256::digest(&bytes)),
            }));
        }
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let entry = json!({
            "tool": concat!("loci-lab ", env!("CARGO_PKG_VERSION")),
            "scenario_file": self.scenario.as_ref().map(|s| s.0.clone()),
            "scenario_hash": self.scenario.as_ref().map(|s| s.1.clone()),
            "status": status,
            "finished_unix": secs,
            "files": files,
        });
        root.insert(self.command, entry);
        let mut text = serde_json::to_string_pretty(&Value::Object(root))?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}
