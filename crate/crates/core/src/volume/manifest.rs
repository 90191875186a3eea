//! Dataset manifests: one `case_id volume_path label_path` line per case.
//!
//! Relative paths are resolved against the manifest's directory. Blank lines
//! and `#` comments are skipped.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub case_id: String,
    pub volume: PathBuf,
    pub labels: PathBuf,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, vol, lab] = fields[..] else {
            return Err(Error::Format(format!(
                "{}:{}: expected `case_id volume label`, got {} fields",
                path.display(),
                n + 1,
                fields.len()
            )));
        };
        if entries.iter().any(|e: &ManifestEntry| e.case_id == id) {
            return Err(Error::Format(format!("{}:{}: duplicate case `{id}`", path.display(), n + 1)));
        }
        entries.push(ManifestEntry {
            case_id: id.to_string(),
            volume: base.join(vol),
            labels: base.join(lab),
        });
    }
    if entries.is_empty() {
        return Err(Error::Format(format!("{}: manifest lists no cases", path.display())));
    }
    Ok(entries)
}

/// Writes entries verbatim; paths should be relative to the manifest's directory.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        let fields = [e.case_id.clone(), e.volume.display().to_string(), e.labels.display().to_string()];
        if fields.iter().any(|f| f.is_empty() || f.contains(char::is_whitespace) || f.contains('#')) {
            return Err(Error::Param(format!("manifest fields must be nonempty without spaces or `#`: {fields:?}")));
        }
        text.push_str(&fields.join(" "));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
