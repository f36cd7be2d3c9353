//! Scene manifest: a CSV with columns `scene_id, path, doas_deg, references`.
//! Only `path` is required. List-valued columns are separated by `;` and
//! relative paths are resolved against the manifest's directory.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 4] = ["scene_id", "path", "doas_deg", "references"];

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub scene_id: String,
    pub path: PathBuf,
    /// Ground-truth azimuths, used for evaluation only.
    pub doas_deg: Vec<f64>,
    /// One single-channel reference WAV per source.
    pub references: Vec<PathBuf>,
}

#[derive(Deserialize)]
struct Row {
    #[serde(default)]
    scene_id: String,
    path: String,
    #[serde(default)]
    doas_deg: String,
    #[serde(default)]
    references: String,
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(';').map(str::trim).filter(|v| !v.is_empty())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut entries = Vec::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let doas_deg = split_list(&row.doas_deg)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::format(path, format!("row {}: bad azimuth {v:?}", i + 1)))
            })
            .collect::<Result<_>>()?;
        let wav = base.join(&row.path);
        let scene_id = if row.scene_id.is_empty() {
            wav.file_stem()
                .map_or_else(|| format!("scene_{i}"), |s| s.to_string_lossy().into_owned())
        } else {
            row.scene_id
        };
        entries.push(ManifestEntry {
            scene_id,
            path: wav,
            doas_deg,
            references: split_list(&row.references).map(|r| base.join(r)).collect(),
        });
    }
    Ok(entries)
}

/// Writes entries with their paths exactly as given.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(MANIFEST_HEADER).map_err(|e| csv_error(path, e))?;
    for e in entries {
        let doas = e
            .doas_deg
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let refs = e
            .references
            .iter()
            .map(|r| r.to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([e.scene_id.as_str(), &e.path.to_string_lossy(), &doas, &refs])
            .map_err(|err| csv_error(path, err))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}
