use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use serde_json::Value;

/// Record of one command invocation, written as JSON next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: BTreeMap<String, Value>,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub format_versions: BTreeMap<String, String>,
    pub started_at: String,
    pub finished_at: String,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: BTreeMap::new(),
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            format_versions: BTreeMap::new(),
            started_at: now(),
            finished_at: String::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        self.config
            .insert(key.to_string(), serde_json::to_value(value).expect("plain values serialize"));
        self
    }

    pub fn input(&mut self, p: impl AsRef<Path>) -> &mut Self {
        self.inputs.push(p.as_ref().display().to_string());
        self
    }

    pub fn output(&mut self, p: impl AsRef<Path>) -> &mut Self {
        self.outputs.push(p.as_ref().display().to_string());
        self
    }

    pub fn format(&mut self, name: &str, version: impl ToString) -> &mut Self {
        self.format_versions.insert(name.to_string(), version.to_string());
        self
    }

    /// Stamp the finish time and write to `path`.
    pub fn finish(mut self, path: &Path) -> std::io::Result<PathBuf> {
        self.finished_at = now();
        let mut text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text)?;
        Ok(path.to_path_buf())
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// `<path>.manifest.json`, keeping the full original file name.
pub fn beside(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}
