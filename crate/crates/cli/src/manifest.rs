//! The `manifest.json` written at the root of every run directory.

use std::path::Path;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesEntry {
    pub id: String,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    /// `usage`, `data` or `numeric`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error_kind: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub started: String,
    pub finished: String,
    /// Effective configuration, relative to the run directory.
    pub config: String,
    pub exit_code: i32,
    pub series: Vec<SeriesEntry>,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true)
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            started: now(),
            finished: String::new(),
            config: "config.toml".into(),
            exit_code: 0,
            series: Vec::new(),
        }
    }

    pub fn failures(&self) -> impl Iterator<Item = &SeriesEntry> {
        self.series.iter().filter(|s| s.status == Status::Failed)
    }

    pub fn write(&mut self, dir: &Path, exit_code: i32) -> std::io::Result<()> {
        self.finished = now();
        self.exit_code = exit_code;
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(dir.join(format!("manifest_{}.json", self.command)), &text)?;
        std::fs::write(dir.join("manifest.json"), text)
    }
}
