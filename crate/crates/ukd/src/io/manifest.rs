//! Sidecar manifest for a feature store: one JSON object per line, mapping
//! dataset entries to store rows with optional task annotations.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UkdError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub row_index: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bag_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_key: Option<String>,
}

impl ManifestEntry {
    pub fn new(id: impl Into<String>, row_index: u64) -> Self {
        ManifestEntry {
            id: id.into(),
            row_index,
            label: None,
            bag_id: None,
            time: None,
            event: None,
            view_key: None,
        }
    }
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path)?;
    let mut entries = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(&line).map_err(|err| {
            UkdError::Corrupt(format!("manifest line {}: {err}", lineno + 1))
        })?;
        entries.push(e);
    }
    Ok(entries)
}

/// Check the manifest invariant against a store of `count` rows:
/// row indices unique and in range.
pub fn validate_manifest(entries: &[ManifestEntry], count: usize) -> Result<()> {
    let mut seen = vec![false; count];
    for e in entries {
        let r = e.row_index as usize;
        if e.row_index >= count as u64 {
            return Err(UkdError::Contract(format!(
                "manifest '{}': row {} outside store of {count}",
                e.id, e.row_index
            )));
        }
        if seen[r] {
            return Err(UkdError::Contract(format!(
                "manifest '{}': row {} referenced twice",
                e.id, e.row_index
            )));
        }
        seen[r] = true;
    }
    Ok(())
}
