//! Dataset manifests: CSV rows of (path, reference_id, kind, level, score).
//!
//! The score column is empty for pretext rows and holds a real quality label
//! for fine-tune/eval rows. Image paths are stored relative to the manifest
//! file so a corpus directory can be moved wholesale.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::degrade::{DegradationKind, DegradeError, MAX_LEVEL};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Degrade(#[from] DegradeError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    /// Image location, relative to the manifest's base directory.
    pub path: String,
    pub reference_id: String,
    pub kind: DegradationKind,
    pub level: u8,
    pub score: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
    /// Directory that row paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(rows: Vec<ManifestRow>, base_dir: PathBuf) -> Self {
        DatasetManifest { rows, base_dir }
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path)?;
        let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line.trim() != "path,reference_id,kind,level,score" {
                    return Err(ManifestError::Malformed {
                        line: 1,
                        message: format!("bad header: {line}"),
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(ManifestError::Malformed {
                    line: i + 1,
                    message: format!("expected 5 fields, got {}", fields.len()),
                });
            }
            let kind: DegradationKind = fields[2].parse()?;
            let level: u8 = fields[3].parse().map_err(|_| ManifestError::Malformed {
                line: i + 1,
                message: format!("bad level: {}", fields[3]),
            })?;
            if level > MAX_LEVEL {
                return Err(ManifestError::Degrade(DegradeError::LevelOutOfRange(level)));
            }
            let score = if fields[4].is_empty() {
                None
            } else {
                Some(fields[4].parse().map_err(|_| ManifestError::Malformed {
                    line: i + 1,
                    message: format!("bad score: {}", fields[4]),
                })?)
            };
            rows.push(ManifestRow {
                path: fields[0].to_string(),
                reference_id: fields[1].to_string(),
                kind,
                level,
                score,
            });
        }
        Ok(DatasetManifest { rows, base_dir })
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let mut out = String::from("path,reference_id,kind,level,score\n");
        for row in &self.rows {
            let score = row.score.map(|s| s.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.path, row.reference_id, row.kind, row.level, score
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        self.base_dir.join(&row.path)
    }

    /// Row indices grouped by reference id, in first-appearance order.
    pub fn groups_by_reference(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<String> = Vec::new();
        let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, row) in self.rows.iter().enumerate() {
            if !map.contains_key(&row.reference_id) {
                order.push(row.reference_id.clone());
            }
            map.entry(row.reference_id.clone()).or_default().push(i);
        }
        order
            .into_iter()
            .map(|id| {
                let idx = map.remove(&id).unwrap();
                (id, idx)
            })
            .collect()
    }

    pub fn reference_ids(&self) -> Vec<String> {
        self.groups_by_reference().into_iter().map(|(id, _)| id).collect()
    }

    pub fn all_scored(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.score.is_some())
    }

    /// Manifest restricted to rows whose reference id passes `keep`.
    pub fn filter_refs(&self, keep: impl Fn(&str) -> bool) -> DatasetManifest {
        DatasetManifest {
            rows: self
                .rows
                .iter()
                .filter(|r| keep(&r.reference_id))
                .cloned()
                .collect(),
            base_dir: self.base_dir.clone(),
        }
    }
}
