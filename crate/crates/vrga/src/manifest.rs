//! Run manifests recorded with every artifact.

use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::fsutil::{read, sha256_hex, to_json_bytes, write_atomic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved configuration, defaults included.
    pub config: serde_json::Value,
    pub inputs: Vec<InputHash>,
    pub tool_version: String,
    /// RFC 3339; `null` unless a time source was requested.
    pub timestamp: Option<String>,
}

/// Timestamp policy: `SOURCE_DATE_EPOCH` wins when set; otherwise the wall
/// clock is used only when `stamp_time` is on, and the field stays `null` so
/// repeated runs are byte-identical.
pub fn timestamp(stamp_time: bool) -> AppResult<Option<String>> {
    if let Ok(epoch) = std::env::var("SOURCE_DATE_EPOCH") {
        let secs: i64 = epoch
            .trim()
            .parse()
            .map_err(|_| AppError::validation(format!("SOURCE_DATE_EPOCH {epoch:?} is not an integer")))?;
        let t = DateTime::<Utc>::from_timestamp(secs, 0)
            .ok_or_else(|| AppError::validation(format!("SOURCE_DATE_EPOCH {secs} out of range")))?;
        return Ok(Some(t.to_rfc3339_opts(SecondsFormat::Secs, true)));
    }
    Ok(stamp_time.then(|| Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true)))
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, stamp_time: bool) -> AppResult<Self> {
        Ok(Self {
            command: command.into(),
            config,
            inputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            timestamp: timestamp(stamp_time)?,
        })
    }

    /// Hashes `path` and records it as an input.
    pub fn add_input(&mut self, path: &Path) -> AppResult<()> {
        let bytes = read(path)?;
        self.add_input_bytes(path, &bytes);
        Ok(())
    }

    pub fn add_input_bytes(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.push(InputHash {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("manifest serializes")
    }

    /// Writes `<file>.manifest.json` next to a non-JSON artifact.
    pub fn write_sidecar(&self, artifact: &Path) -> AppResult<()> {
        let mut name = artifact.as_os_str().to_owned();
        name.push(".manifest.json");
        write_atomic(Path::new(&name), &to_json_bytes(self)?)
    }
}
