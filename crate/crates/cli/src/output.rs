//! Output directory bookkeeping: every written file is hashed into the
//! run manifest next to the resolved configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::settings::Settings;

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Pretty JSON with a trailing newline.
pub fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("output values serialize");
    s.push('\n');
    s
}

pub struct OutputDir {
    root: PathBuf,
    files: BTreeMap<String, String>,
    started_unix: f64,
    clock: Instant,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        Ok(OutputDir {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
            started_unix,
            clock: Instant::now(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `bytes` to `rel` (a `/`-separated path under the root).
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.files.insert(rel.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, v: &T) -> Result<PathBuf> {
        self.write(rel, pretty(v).as_bytes())
    }

    /// Writes `config.json` and `manifest.json`. Wall-clock values live
    /// only under the manifest's `timing` key.
    pub fn finish(mut self, command: &str, settings: &Settings, summary: Value) -> Result<PathBuf> {
        self.write_json(CONFIG_FILE, settings.resolved())?;
        let finished = self.started_unix + self.clock.elapsed().as_secs_f64();
        let manifest = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": settings.resolved(),
            "outputs": self.files,
            "summary": summary,
            "timing": {
                "started_unix": self.started_unix,
                "finished_unix": finished,
                "elapsed_seconds": self.clock.elapsed().as_secs_f64(),
            },
        });
        let path = self.root.join(MANIFEST_FILE);
        std::fs::write(&path, pretty(&manifest)).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
