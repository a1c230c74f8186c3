// SPDX-License-Identifier: MIT OR Apache-2.0

//! Writers for report tables and pipeline artifacts.
//!
//! Report tables go out as CSV or JSON and may carry a single timestamp
//! header line. Artifacts (detectors, concept files, attribution maps) never
//! carry a timestamp, so reruns with the same inputs are byte-identical.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Json => "json",
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::InvalidArgument(format!("unknown report format `{other}`"))),
        }
    }
}

/// Prefix of the CSV timestamp line; readers skip lines starting with `#`.
pub const TIMESTAMP_PREFIX: &str = "# generated_at_unix=";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReportWriter {
    pub format: ReportFormat,
    pub timestamp: bool,
}

impl ReportWriter {
    pub fn new(format: ReportFormat, timestamp: bool) -> Self {
        Self { format, timestamp }
    }

    /// Writes `rows` to `<dir>/<stem>.<ext>` and returns the path.
    pub fn write_table<T: Serialize>(&self, dir: &Path, stem: &str, rows: &[T]) -> Result<PathBuf> {
        let path = dir.join(format!("{stem}.{}", self.format.extension()));
        let bytes = match self.format {
            ReportFormat::Csv => self.csv_bytes(rows)?,
            ReportFormat::Json => self.json_bytes(rows)?,
        };
        write_file(&path, &bytes)?;
        Ok(path)
    }

    fn csv_bytes<T: Serialize>(&self, rows: &[T]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        if self.timestamp {
            out.extend_from_slice(format!("{TIMESTAMP_PREFIX}{}\n", unix_now()).as_bytes());
        }
        let mut w = csv::Writer::from_writer(out);
        for r in rows {
            w.serialize(r)?;
        }
        w.into_inner()
            .map_err(|e| Error::InvalidArgument(format!("csv flush failed: {e}")))
    }

    fn json_bytes<T: Serialize>(&self, rows: &[T]) -> Result<Vec<u8>> {
        #[derive(Serialize)]
        struct Table<'a, T> {
            #[serde(skip_serializing_if = "Option::is_none")]
            generated_at_unix: Option<u64>,
            rows: &'a [T],
        }
        let table = Table {
            generated_at_unix: self.timestamp.then(unix_now),
            rows,
        };
        let mut bytes = serde_json::to_vec_pretty(&table)?;
        bytes.push(b'\n');
        Ok(bytes)
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Pretty JSON with a trailing newline, no timestamp.
pub fn write_json_artifact<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

pub fn read_json_artifact<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
