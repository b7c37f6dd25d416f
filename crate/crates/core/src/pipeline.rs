//! End-to-end verification pipeline: prep → Gabor → GMM → DS fusion.
//!
//! Model directory layout, per modality:
//!
//! ```text
//! <model_dir>/<modality>/client_<subject>.json   client GMM
//! <model_dir>/<modality>/background.json         modality-wide GMM
//! <model_dir>/<modality>/stats.json              standardizer + score calibration
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig};
use crate::ds::{self, bpa_from_score, Calibration, DsError, Frame, FusionDecision};
use crate::eval::{self, ErrorReport, EvalError, TrialLabel, TrialRecord};
use crate::gabor::{build_bank, FftConvolver, GaborError, GaborKernel};
use crate::gmm::{em_fit, match_score, GmmError, GmmModel, ModelDocument, BACKGROUND_ID};
use crate::image::{load_pgm, GrayImage, PgmError};
use crate::manifest::{Manifest, ManifestError, ManifestRecord, GALLERY_SESSION, PROBE_SESSION};
use crate::observation::{downsample, ObservationError, ObservationSet, Standardizer};
use crate::prep::{prepare, CanonicalLayout, Modality, PrepError};

pub const STATS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: PgmError },
    #[error("{path}: {source}")]
    Prep { path: PathBuf, source: PrepError },
    #[error(transparent)]
    Gabor(#[from] GaborError),
    #[error(transparent)]
    Observation(#[from] ObservationError),
    #[error("{context}: {source}")]
    Gmm { context: String, source: GmmError },
    #[error(transparent)]
    Fusion(#[from] DsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("no {modality} model for subject {subject:?} in {dir}")]
    MissingModel {
        subject: String,
        modality: Modality,
        dir: PathBuf,
    },
    #[error("{path}: {message}")]
    BadFile { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), PipelineError> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(|source| {
        let _ = std::fs::remove_file(&tmp);
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    })
}

/// Loads a record's image and normalizes it unless it is marked normalized
/// and already has the canonical size.
pub fn load_normalized(
    record: &ManifestRecord,
    layout: &CanonicalLayout,
) -> Result<GrayImage, PipelineError> {
    let img = load_pgm(&record.image_path).map_err(|source| PipelineError::Image {
        path: record.image_path.clone(),
        source,
    })?;
    if record.normalized && img.width() == layout.width && img.height() == layout.height {
        return Ok(img);
    }
    let marks = record.landmark_set()?;
    prepare(&img, &marks, layout).map_err(|source| PipelineError::Prep {
        path: record.image_path.clone(),
        source,
    })
}

/// Gabor bank, FFT engine and optional on-disk observation cache.
pub struct FeatureExtractor {
    bank: Vec<GaborKernel>,
    convolver: FftConvolver,
    stride: usize,
    params_key: String,
    cache_dir: Option<PathBuf>,
}

impl FeatureExtractor {
    pub fn new(config: &PipelineConfig) -> Result<Self, PipelineError> {
        let bank = build_bank(&config.gabor.params)?;
        let convolver = FftConvolver::new(&bank, config.prep.width, config.prep.height)?;
        let params_json = serde_json::to_vec(&config.gabor).expect("gabor config serializes");
        let params_key = hex::encode(&Sha256::digest(&params_json)[..8]);
        Ok(Self {
            bank,
            convolver,
            stride: config.gabor.stride,
            params_key,
            cache_dir: config.cache_dir().map(Path::to_path_buf),
        })
    }

    pub fn bank(&self) -> &[GaborKernel] {
        &self.bank
    }

    fn cache_path(&self, img: &GrayImage) -> Option<PathBuf> {
        let dir = self.cache_dir.as_ref()?;
        let mut hasher = Sha256::new();
        hasher.update((img.width() as u64).to_le_bytes());
        hasher.update((img.height() as u64).to_le_bytes());
        hasher.update(img.pixels());
        let image_key = hex::encode(&hasher.finalize()[..16]);
        Some(dir.join(format!("{image_key}_{}.obs", self.params_key)))
    }

    /// Raw (unstandardized) observations of a normalized image.
    pub fn extract(&self, img: &GrayImage) -> Result<ObservationSet, PipelineError> {
        let cache = self.cache_path(img);
        if let Some(path) = &cache {
            if let Ok(bytes) = std::fs::read(path) {
                if let Ok(obs) = ObservationSet::read_binary(bytes.as_slice()) {
                    return Ok(obs);
                }
            }
        }
        let field = self.convolver.convolve(img)?;
        let obs = downsample(&field, self.stride);
        if let Some(path) = &cache {
            let mut bytes = Vec::new();
            obs.write_binary(&mut bytes).map_err(io_err(path))?;
            write_atomic(path, &bytes)?;
        }
        Ok(obs)
    }
}

/// Standardizer and calibration bounds stored next to a modality's models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityStats {
    pub format_version: u32,
    pub modality: Modality,
    pub standardizer: Standardizer,
    pub calibration: Calibration,
}

/// Fitted models for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityModels {
    pub modality: Modality,
    pub standardizer: Standardizer,
    pub background: GmmModel,
    pub clients: BTreeMap<String, GmmModel>,
    pub calibration: Calibration,
}

impl ModalityModels {
    /// Likelihood-ratio score of raw observations against `subject`.
    pub fn score(&self, subject: &str, raw: &ObservationSet) -> Result<f64, PipelineError> {
        let client = self
            .clients
            .get(subject)
            .ok_or_else(|| PipelineError::MissingModel {
                subject: subject.to_string(),
                modality: self.modality,
                dir: PathBuf::new(),
            })?;
        let obs = self.standardizer.apply(raw)?;
        match_score(client, Some(&self.background), &obs).map_err(|source| PipelineError::Gmm {
            context: format!("scoring {} probe against {subject}", self.modality),
            source,
        })
    }

    pub fn stats(&self) -> ModalityStats {
        ModalityStats {
            format_version: STATS_FORMAT_VERSION,
            modality: self.modality,
            standardizer: self.standardizer.clone(),
            calibration: self.calibration,
        }
    }

    fn dir(model_dir: &Path, modality: Modality) -> PathBuf {
        model_dir.join(modality.as_str())
    }

    /// Writes every client model, the background model and the stats file.
    pub fn save(&self, model_dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
        let dir = Self::dir(model_dir, self.modality);
        let mut written = Vec::new();
        for (subject, model) in &self.clients {
            let path = dir.join(format!("client_{subject}.json"));
            let doc = ModelDocument::from_model(model, self.modality, subject);
            write_atomic(&path, doc.to_json().as_bytes())?;
            written.push(path);
        }
        let path = dir.join("background.json");
        let doc = ModelDocument::from_model(&self.background, self.modality, BACKGROUND_ID);
        write_atomic(&path, doc.to_json().as_bytes())?;
        written.push(path);
        let path = dir.join("stats.json");
        let stats = serde_json::to_string_pretty(&self.stats()).expect("stats serialize");
        write_atomic(&path, stats.as_bytes())?;
        written.push(path);
        Ok(written)
    }

    /// Loads the background, stats and the client models of `subjects`.
    pub fn load(
        model_dir: &Path,
        modality: Modality,
        subjects: &[&str],
    ) -> Result<Self, PipelineError> {
        let dir = Self::dir(model_dir, modality);
        let read = |path: &Path| std::fs::read_to_string(path).map_err(io_err(path));
        let load_model = |path: &Path, expect_subject: &str| -> Result<GmmModel, PipelineError> {
            let (doc, model) =
                ModelDocument::from_json(&read(path)?).map_err(|e| PipelineError::BadFile {
                    path: path.to_path_buf(),
                    message: e.to_string(),
                })?;
            if doc.modality != modality || doc.subject_id != expect_subject {
                return Err(PipelineError::BadFile {
                    path: path.to_path_buf(),
                    message: format!(
                        "holds the {} model of {:?}, expected {modality} / {expect_subject:?}",
                        doc.modality, doc.subject_id
                    ),
                });
            }
            Ok(model)
        };

        let stats_path = dir.join("stats.json");
        let stats: ModalityStats =
            serde_json::from_str(&read(&stats_path)?).map_err(|e| PipelineError::BadFile {
                path: stats_path.clone(),
                message: e.to_string(),
            })?;
        if stats.format_version != STATS_FORMAT_VERSION || stats.modality != modality {
            return Err(PipelineError::BadFile {
                path: stats_path,
                message: "unexpected stats version or modality".into(),
            });
        }
        let calibration = Calibration::new(stats.calibration.min, stats.calibration.max)?;
        let background = load_model(&dir.join("background.json"), BACKGROUND_ID)?;
        let mut clients = BTreeMap::new();
        for &subject in subjects {
            let path = dir.join(format!("client_{subject}.json"));
            if !crate::manifest::valid_subject_id(subject) || !path.is_file() {
                return Err(PipelineError::MissingModel {
                    subject: subject.to_string(),
                    modality,
                    dir,
                });
            }
            clients.insert(subject.to_string(), load_model(&path, subject)?);
        }
        Ok(Self {
            modality,
            standardizer: stats.standardizer,
            background,
            clients,
            calibration,
        })
    }
}

/// Per-subject seed derived from the configured base seed.
fn subject_seed(base: u64, subject: &str) -> u64 {
    let digest = Sha256::digest(subject.as_bytes());
    base ^ u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Raw observations of every listed image, grouped by subject.
fn extract_grouped(
    groups: &BTreeMap<&str, Vec<&ManifestRecord>>,
    extractor: &FeatureExtractor,
    layout: &CanonicalLayout,
) -> Result<BTreeMap<String, ObservationSet>, PipelineError> {
    let mut out = BTreeMap::new();
    for (subject, records) in groups {
        let sets = records
            .iter()
            .map(|r| extractor.extract(&load_normalized(r, layout)?))
            .collect::<Result<Vec<_>, PipelineError>>()?;
        out.insert(subject.to_string(), ObservationSet::concat(&sets)?);
    }
    Ok(out)
}

/// Fits the standardizer, background and client models of one modality
/// from gallery observations, and calibrates scores on the gallery.
pub fn train_modality(
    modality: Modality,
    gallery: &BTreeMap<String, ObservationSet>,
    config: &PipelineConfig,
) -> Result<ModalityModels, PipelineError> {
    let em = config.gmm.for_modality(modality);
    let pooled = ObservationSet::concat(gallery.values())
        .map_err(|_| ManifestError::Protocol(format!("no {modality} gallery images")))?;
    let standardizer = Standardizer::fit(&pooled)?;
    let pooled = standardizer.apply(&pooled)?;
    let background = em_fit(&pooled, em)
        .map_err(|source| PipelineError::Gmm {
            context: format!("{modality} background model"),
            source,
        })?
        .model;

    let standardized = gallery
        .iter()
        .map(|(s, obs)| Ok((s.clone(), standardizer.apply(obs)?)))
        .collect::<Result<BTreeMap<_, _>, PipelineError>>()?;
    let fitted: Vec<(String, GmmModel)> = standardized
        .par_iter()
        .map(|(subject, obs)| {
            let cfg = crate::gmm::EmConfig {
                seed: subject_seed(em.seed, subject),
                ..em.clone()
            };
            em_fit(obs, &cfg)
                .map(|fit| (subject.clone(), fit.model))
                .map_err(|source| PipelineError::Gmm {
                    context: format!("{modality} model of subject {subject:?}"),
                    source,
                })
        })
        .collect::<Result<_, _>>()?;
    let clients: BTreeMap<String, GmmModel> = fitted.into_iter().collect();

    let mut scores = Vec::with_capacity(clients.len() * standardized.len());
    for obs in standardized.values() {
        for client in clients.values() {
            let s = match_score(client, Some(&background), obs).map_err(|source| {
                PipelineError::Gmm {
                    context: format!("{modality} calibration scoring"),
                    source,
                }
            })?;
            scores.push(s);
        }
    }
    let calibration = Calibration::from_scores(&scores)?;
    Ok(ModalityModels {
        modality,
        standardizer,
        background,
        clients,
        calibration,
    })
}

/// Gallery observations per modality, keyed by subject.
fn gallery_observations(
    manifest: &Manifest,
    extractor: &FeatureExtractor,
    config: &PipelineConfig,
    modality: Modality,
) -> Result<BTreeMap<String, ObservationSet>, PipelineError> {
    let groups = manifest.select(modality, GALLERY_SESSION);
    extract_grouped(&groups, extractor, &config.prep)
}

/// Trains both modalities from a manifest's gallery session.
pub fn train(
    manifest: &Manifest,
    config: &PipelineConfig,
) -> Result<Vec<ModalityModels>, PipelineError> {
    let extractor = FeatureExtractor::new(config)?;
    let subjects = manifest.subjects();
    let mut out = Vec::new();
    for modality in Modality::ALL {
        let gallery = gallery_observations(manifest, &extractor, config, modality)?;
        for s in &subjects {
            if !gallery.contains_key(*s) {
                return Err(ManifestError::Protocol(format!(
                    "subject {s:?} has no {modality} gallery image (session {GALLERY_SESSION})"
                ))
                .into());
            }
        }
        out.push(train_modality(modality, &gallery, config)?);
    }
    Ok(out)
}

/// Full image experiment: trials are every probe against every enrolled
/// identity; face, ear and fused curves go into the report.
pub fn run_image_experiment(
    manifest: &Manifest,
    config: &PipelineConfig,
) -> Result<(ErrorReport, Vec<TrialRecord>), PipelineError> {
    let subjects = manifest.subjects();
    if subjects.len() < 2 {
        return Err(ManifestError::Protocol(format!(
            "need at least 2 subjects, manifest has {}",
            subjects.len()
        ))
        .into());
    }
    let probe_session = if config.eval.train_on_test {
        GALLERY_SESSION
    } else {
        PROBE_SESSION
    };
    for modality in Modality::ALL {
        for session in [GALLERY_SESSION, probe_session] {
            let present = manifest.select(modality, session);
            if let Some(s) = subjects.iter().find(|s| !present.contains_key(**s)) {
                return Err(ManifestError::Protocol(format!(
                    "subject {s:?} has no {modality} image in session {session}"
                ))
                .into());
            }
        }
    }

    let models = train(manifest, config)?;
    let extractor = FeatureExtractor::new(config)?;
    let probes: Vec<BTreeMap<String, ObservationSet>> = Modality::ALL
        .iter()
        .map(|&m| extract_grouped(&manifest.select(m, probe_session), &extractor, &config.prep))
        .collect::<Result<_, _>>()?;
    let (face, ear) = (&models[0], &models[1]);
    let frame = Frame::verification();
    let weights = config.fusion.weights();

    let mut trials = Vec::new();
    for truth in &subjects {
        for claimed in &subjects {
            let face_score = face.score(claimed, &probes[0][*truth])?;
            let ear_score = ear.score(claimed, &probes[1][*truth])?;
            let fused = eval::fuse_scores(
                &frame,
                face_score,
                ear_score,
                &face.calibration,
                &ear.calibration,
                &weights,
            )?;
            trials.push(TrialRecord {
                claimed_subject: claimed.to_string(),
                true_subject: truth.to_string(),
                face_score,
                ear_score,
                fused_genuine_mass: fused.genuine_mass,
                label: TrialRecord::label_for(claimed, truth),
                total_conflict: fused.total_conflict,
            });
        }
    }
    let report = eval::report_from_trials(&trials, config.eval.sweep)?;
    Ok((report, trials))
}

/// Result of one verification claim.
#[derive(Debug, Clone, PartialEq)]
pub struct Verification {
    pub claimed_subject: String,
    pub face_score: f64,
    pub ear_score: f64,
    pub decision: FusionDecision,
}

impl Verification {
    pub fn summary_line(&self) -> String {
        format!(
            "{} m_genuine={:.6} conflict={:.6}",
            if self.decision.accepted {
                "ACCEPT"
            } else {
                "REJECT"
            },
            self.decision.genuine_mass(),
            self.decision.conflict
        )
    }

    pub fn detail_json(&self) -> String {
        let detail = serde_json::json!({
            "claimed_subject": self.claimed_subject,
            "accepted": self.decision.accepted,
            "threshold": self.decision.threshold,
            "genuine_mass": self.decision.genuine_mass(),
            "conflict": self.decision.conflict,
            "face_score": self.face_score,
            "ear_score": self.ear_score,
            "combined": serde_json::from_str::<serde_json::Value>(&self.decision.combined.to_json())
                .expect("mass JSON"),
        });
        serde_json::to_string(&detail).expect("detail serializes")
    }
}

/// Scores normalized face and ear probe images against `claimed` and
/// applies the fusion threshold.
pub fn verify(
    face_probe: &GrayImage,
    ear_probe: &GrayImage,
    claimed: &str,
    config: &PipelineConfig,
) -> Result<Verification, PipelineError> {
    let face = ModalityModels::load(&config.paths.model_dir, Modality::Face, &[claimed])?;
    let ear = ModalityModels::load(&config.paths.model_dir, Modality::Ear, &[claimed])?;
    let extractor = FeatureExtractor::new(config)?;
    let face_score = face.score(claimed, &extractor.extract(face_probe)?)?;
    let ear_score = ear.score(claimed, &extractor.extract(ear_probe)?)?;
    let frame = Frame::verification();
    let m_face = bpa_from_score(
        &frame,
        face_score,
        &face.calibration,
        config.fusion.alpha_face,
    )?;
    let m_ear = bpa_from_score(&frame, ear_score, &ear.calibration, config.fusion.alpha_ear)?;
    let decision = match ds::decide(&m_face, &m_ear, config.fusion.threshold) {
        Ok(d) => d,
        // rejected with the conflict flagged, combined evidence left vacuous
        Err(DsError::TotalConflict(k)) => FusionDecision {
            combined: ds::MassFunction::vacuous(Arc::clone(&frame)),
            conflict: k,
            threshold: config.fusion.threshold,
            accepted: false,
        },
        Err(e) => return Err(e.into()),
    };
    Ok(Verification {
        claimed_subject: claimed.to_string(),
        face_score,
        ear_score,
        decision,
    })
}

/// Loads a probe that must already be at canonical size.
pub fn load_probe(path: &Path, layout: &CanonicalLayout) -> Result<GrayImage, PipelineError> {
    let img = load_pgm(path).map_err(|source| PipelineError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    if img.width() != layout.width || img.height() != layout.height {
        return Err(PipelineError::BadFile {
            path: path.to_path_buf(),
            message: format!(
                "probe is {}x{}, expected a normalized {}x{} image (run `prep` first)",
                img.width(),
                img.height(),
                layout.width,
                layout.height
            ),
        });
    }
    Ok(img)
}

/// Trial list as CSV.
pub fn trials_csv(trials: &[TrialRecord]) -> String {
    let mut out = String::from(
        "claimed_subject,true_subject,label,face_score,ear_score,fused_genuine_mass,total_conflict\n",
    );
    for t in trials {
        let label = match t.label {
            TrialLabel::Genuine => "genuine",
            TrialLabel::Impostor => "impostor",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            t.claimed_subject,
            t.true_subject,
            label,
            t.face_score,
            t.ear_score,
            t.fused_genuine_mass,
            t.total_conflict
        ));
    }
    out
}

/// Normalizes every image of a manifest into `out_dir` and writes an
/// updated `manifest.json` there that points at the normalized images.
pub fn prep_dataset(
    manifest: &Manifest,
    out_dir: &Path,
    layout: &CanonicalLayout,
) -> Result<PathBuf, PipelineError> {
    let mut counters: BTreeMap<(Modality, String, u32), usize> = BTreeMap::new();
    let mut records = Vec::with_capacity(manifest.records.len());
    for record in &manifest.records {
        let img = load_normalized(record, layout)?;
        let key = (record.modality, record.subject_id.clone(), record.session);
        let n = counters.entry(key).or_default();
        let name = format!(
            "{}_{}_{}_{}.pgm",
            record.modality, record.subject_id, record.session, n
        );
        *n += 1;
        write_atomic(&out_dir.join(&name), &crate::image::encode_pgm(&img))?;
        let landmarks = layout.landmarks(record.modality).to_map();
        records.push(ManifestRecord {
            image_path: PathBuf::from(name),
            modality: record.modality,
            subject_id: record.subject_id.clone(),
            session: record.session,
            landmarks,
            normalized: true,
        });
    }
    let path = out_dir.join("manifest.json");
    write_atomic(&path, Manifest::to_json(&records).as_bytes())?;
    Ok(path)
}

/// Writes `report.csv`, `report.txt` and one `roc_<method>.csv` per method,
/// plus `trials.csv` when trials are given.
pub fn write_report(
    report: &ErrorReport,
    trials: Option<&[TrialRecord]>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, PipelineError> {
    let mut files = vec![
        ("report.csv".to_string(), report.to_csv()),
        ("report.txt".to_string(), report.to_string()),
    ];
    for (method, curve) in &report.curves {
        files.push((format!("roc_{method}.csv"), curve.to_csv()));
    }
    if let Some(trials) = trials {
        files.push(("trials.csv".to_string(), trials_csv(trials)));
    }
    let mut written = Vec::new();
    for (name, text) in files {
        let path = out_dir.join(name);
        write_atomic(&path, text.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}
