//! Dataset manifests: one JSON array of image records with their landmarks.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prep::{LandmarkSet, Modality, PrepError};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse manifest {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("image {path} does not exist")]
    MissingFile { path: PathBuf },
    #[error("{image}: {source}")]
    Landmarks { image: PathBuf, source: PrepError },
    #[error("invalid subject id {0:?} (use letters, digits, '.', '_' or '-')")]
    BadSubjectId(String),
    #[error("{0}")]
    Protocol(String),
}

pub const GALLERY_SESSION: u32 = 1;
pub const PROBE_SESSION: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_path: PathBuf,
    pub modality: Modality,
    pub subject_id: String,
    pub session: u32,
    pub landmarks: BTreeMap<String, [f64; 2]>,
    /// Image is already geometrically and photometrically normalized.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub normalized: bool,
}

impl ManifestRecord {
    pub fn landmark_set(&self) -> Result<LandmarkSet, ManifestError> {
        LandmarkSet::from_map(self.modality, &self.landmarks).map_err(|source| {
            ManifestError::Landmarks {
                image: self.image_path.clone(),
                source,
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Records with `image_path` resolved against the manifest directory.
    pub records: Vec<ManifestRecord>,
}

pub fn valid_subject_id(id: &str) -> bool {
    !id.is_empty()
        && id != crate::gmm::BACKGROUND_ID
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
        && !id.starts_with('.')
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut records: Vec<ManifestRecord> =
            serde_json::from_str(&text).map_err(|e| ManifestError::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for r in &mut records {
            if r.image_path.is_relative() {
                r.image_path = base.join(&r.image_path);
            }
        }
        let manifest = Self { records };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Checks subject ids, landmark labels and that every image exists.
    pub fn validate(&self) -> Result<(), ManifestError> {
        for r in &self.records {
            if !valid_subject_id(&r.subject_id) {
                return Err(ManifestError::BadSubjectId(r.subject_id.clone()));
            }
            r.landmark_set()?;
            if !r.image_path.is_file() {
                return Err(ManifestError::MissingFile {
                    path: r.image_path.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn to_json(records: &[ManifestRecord]) -> String {
        serde_json::to_string_pretty(records).expect("manifest serializes")
    }

    pub fn subjects(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.subject_id.as_str()).collect()
    }

    pub fn select(&self, modality: Modality, session: u32) -> BTreeMap<&str, Vec<&ManifestRecord>> {
        let mut out: BTreeMap<&str, Vec<&ManifestRecord>> = BTreeMap::new();
        for r in &self.records {
            if r.modality == modality && r.session == session {
                out.entry(r.subject_id.as_str()).or_default().push(r);
            }
        }
        out
    }
}
