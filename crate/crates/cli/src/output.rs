//! Output files: every one carries the run's provenance and is written
//! atomically.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Value};

use crate::config::RunConfig;

pub struct Output {
    dir: PathBuf,
    provenance: Value,
}

impl Output {
    pub fn new(dir: &Path, command: &str, config: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            provenance: json!({
                "tool": "dwac",
                "version": env!("CARGO_PKG_VERSION"),
                "command": command,
                "seed": config.seed,
                "config": config,
            }),
        })
    }

    pub fn provenance(&self) -> &Value {
        &self.provenance
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// CSV body preceded by a `# provenance: {...}` comment line.
    pub fn csv(&self, name: &str, body: &str) -> Result<PathBuf> {
        let text = format!("# provenance: {}\n{body}", self.provenance);
        self.write(name, text.as_bytes())
    }

    /// JSON object with a `provenance` member added.
    pub fn json(&self, name: &str, mut value: Value) -> Result<PathBuf> {
        if let Value::Object(map) = &mut value {
            map.insert("provenance".into(), self.provenance.clone());
        }
        let mut text = serde_json::to_string_pretty(&value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        dwac::write_atomic(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
