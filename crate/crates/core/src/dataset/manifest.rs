use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 4] = ["pair_id", "subject_id", "ear_path", "face_path"];

/// One ear/face pair. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub pair_id: String,
    pub subject_id: String,
    pub ear_path: PathBuf,
    pub face_path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub dataset_name: String,
    /// Directory that entry paths are resolved against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

fn dataset_name_for(root: &Path) -> String {
    root.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string())
}

impl DatasetManifest {
    /// Build and validate an in-memory manifest.
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let root = root.into();
        let manifest = Self {
            dataset_name: dataset_name_for(&root),
            root,
            entries,
        };
        manifest.validate(Path::new("<memory>"))?;
        Ok(manifest)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(file);
        let malformed = |line: usize, message: String| Error::Manifest {
            path: path.to_path_buf(),
            line,
            message,
        };
        let header = reader
            .headers()
            .map_err(|e| malformed(1, e.to_string()))?
            .clone();
        if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(malformed(
                1,
                format!(
                    "expected header `{}`, found `{}`",
                    MANIFEST_HEADER.join(","),
                    header.iter().collect::<Vec<_>>().join(",")
                ),
            ));
        }
        let mut entries = Vec::new();
        for (idx, record) in reader.deserialize::<ManifestEntry>().enumerate() {
            let line = idx + 2;
            let entry = record.map_err(|e| malformed(line, e.to_string()))?;
            entries.push(entry);
        }
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let root = if root.as_os_str().is_empty() {
            PathBuf::from(".")
        } else {
            root
        };
        let manifest = Self {
            dataset_name: dataset_name_for(&std::fs::canonicalize(&root).unwrap_or(root.clone())),
            root,
            entries,
        };
        manifest.validate(path)?;
        Ok(manifest)
    }

    /// Row numbers in errors are file line numbers (the header is line 1).
    fn validate(&self, path: &Path) -> Result<()> {
        let mut pair_ids = HashSet::new();
        let mut files = HashSet::new();
        for (idx, e) in self.entries.iter().enumerate() {
            let line = idx + 2;
            let err = |message: String| Error::Manifest {
                path: path.to_path_buf(),
                line,
                message,
            };
            if e.pair_id.is_empty() {
                return Err(err("empty pair_id".into()));
            }
            if e.subject_id.is_empty() {
                return Err(err("empty subject_id".into()));
            }
            if e.ear_path.as_os_str().is_empty() || e.face_path.as_os_str().is_empty() {
                return Err(err("empty image path".into()));
            }
            if !pair_ids.insert(e.pair_id.as_str()) {
                return Err(err(format!("duplicate pair_id `{}`", e.pair_id)));
            }
            if !files.insert((e.ear_path.as_path(), e.face_path.as_path())) {
                return Err(err(format!(
                    "duplicate ear/face pair ({}, {})",
                    e.ear_path.display(),
                    e.face_path.display()
                )));
            }
        }
        Ok(())
    }

    /// Write as CSV to `path`; entry paths are written as stored.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut writer = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Config(format!("{other:?}")),
        })?;
        for e in &self.entries {
            writer.serialize(e).map_err(|err| Error::Manifest {
                path: path.to_path_buf(),
                line: 0,
                message: err.to_string(),
            })?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn entry(&self, pair_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.pair_id == pair_id)
    }

    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.root.join(relative)
    }

    pub fn subjects(&self) -> Vec<&str> {
        let mut s: Vec<&str> = self.entries.iter().map(|e| e.subject_id.as_str()).collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}
