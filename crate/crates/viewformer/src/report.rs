//! CSV tables and JSON-lines event logs.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Appends rows to a CSV file, writing the header only when the file is new
/// or empty.
pub fn append_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(Error::io(path))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for row in rows {
        w.serialize(row).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    if path.exists() {
        fs::remove_file(path).map_err(Error::io(path))?;
    }
    append_csv(path, rows)
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(Error::io(path))
}

/// Appends one JSON object per line.
pub fn log_event<V: Serialize>(path: &Path, event: &V) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(Error::io(path))?;
    let line = serde_json::to_string(event).expect("event serializes");
    writeln!(f, "{line}").map_err(Error::io(path))
}
