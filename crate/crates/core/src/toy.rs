//! Tiny synthetic image corpus: each subject is a sinusoidal grating with a
//! subject-specific orientation, one face and one ear image per session.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::image::{encode_pgm, GrayImage};
use crate::manifest::{Manifest, ManifestRecord, GALLERY_SESSION, PROBE_SESSION};
use crate::pipeline::{write_atomic, PipelineError};
use crate::prep::{CanonicalLayout, Modality};

/// Raw images are larger than the canonical frame and offset by this much.
const MARGIN: usize = 16;
const PERIOD: f64 = 9.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    /// Grating orientation per subject, radians. Subject ids are `s1`, `s2`, ...
    pub orientations: Vec<f64>,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            orientations: vec![0.0, PI / 2.0],
            noise_std: 10.0,
            seed: 7,
        }
    }
}

fn render(layout: &CanonicalLayout, theta: f64, phase: f64, noise: f64, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let (c, s) = (theta.cos(), theta.sin());
    let w = layout.width + 2 * MARGIN;
    let h = layout.height + 2 * MARGIN;
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let t = (x as f64 * c + y as f64 * s) * 2.0 * PI / PERIOD + phase;
            let v = 128.0 + 60.0 * t.sin() + normal.sample(&mut rng);
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage::new(w, h, pixels).expect("consistent size")
}

/// Writes the corpus images and `manifest.json` into `dir`; returns the
/// manifest path.
pub fn write_corpus(
    dir: &Path,
    spec: &ToySpec,
    layout: &CanonicalLayout,
) -> Result<PathBuf, PipelineError> {
    let mut records = Vec::new();
    for (i, &theta) in spec.orientations.iter().enumerate() {
        let subject = format!("s{}", i + 1);
        for (mi, modality) in Modality::ALL.into_iter().enumerate() {
            // ear gratings are rotated so the two modalities differ
            let theta = theta + mi as f64 * PI / 4.0;
            for session in [GALLERY_SESSION, PROBE_SESSION] {
                let seed = spec.seed ^ ((i as u64) << 32 | (mi as u64) << 16 | session as u64);
                let img = render(layout, theta, session as f64, spec.noise_std, seed);
                let name = format!("{modality}_{subject}_{session}.pgm");
                write_atomic(&dir.join(&name), &encode_pgm(&img))?;
                let mut landmarks = layout.landmarks(modality).to_map();
                for p in landmarks.values_mut() {
                    p[0] += MARGIN as f64;
                    p[1] += MARGIN as f64;
                }
                records.push(ManifestRecord {
                    image_path: PathBuf::from(name),
                    modality,
                    subject_id: subject.clone(),
                    session,
                    landmarks,
                    normalized: false,
                });
            }
        }
    }
    let path = dir.join("manifest.json");
    write_atomic(&path, Manifest::to_json(&records).as_bytes())?;
    Ok(path)
}
