//! Landmark-driven geometric normalization and photometric normalization.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::GrayImage;

/// Canonical post-crop width in pixels.
pub const CANONICAL_WIDTH: usize = 200;
/// Canonical post-crop height in pixels.
pub const CANONICAL_HEIGHT: usize = 220;

#[derive(Debug, Error, PartialEq)]
pub enum PrepError {
    #[error("{modality} landmarks are missing label `{label}`")]
    MissingLandmark { modality: Modality, label: String },
    #[error("unknown {modality} landmark label `{label}`")]
    UnknownLandmark { modality: Modality, label: String },
    #[error("landmark `{label}` at ({x}, {y}) lies outside the {width}x{height} source image")]
    LandmarkOutOfBounds {
        label: String,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("landmarks `{0}` and `{1}` coincide; similarity scale is undefined")]
    DegenerateLandmarks(String, String),
    #[error("invalid target size {0}x{1}")]
    InvalidTarget(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Face,
    Ear,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Face, Modality::Ear];

    /// Landmark labels in the order they are stored.
    pub fn landmark_labels(self) -> &'static [&'static str] {
        match self {
            Modality::Face => &["left_eye", "right_eye", "mouth_center"],
            Modality::Ear => &["triangular_fossa", "antitragus"],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Face => "face",
            Modality::Ear => "ear",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Labeled landmark coordinates in source-image pixel space.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    modality: Modality,
    points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    /// Builds a set from labeled points; every label of the modality must be
    /// present exactly once and no other label is accepted.
    pub fn from_labeled<'a, I>(modality: Modality, labeled: I) -> Result<Self, PrepError>
    where
        I: IntoIterator<Item = (&'a str, [f64; 2])>,
    {
        let labels = modality.landmark_labels();
        let mut found: Vec<Option<[f64; 2]>> = vec![None; labels.len()];
        for (label, point) in labeled {
            let idx = labels.iter().position(|l| *l == label).ok_or_else(|| {
                PrepError::UnknownLandmark {
                    modality,
                    label: label.to_string(),
                }
            })?;
            found[idx] = Some(point);
        }
        let points = found
            .into_iter()
            .zip(labels)
            .map(|(p, label)| {
                p.ok_or_else(|| PrepError::MissingLandmark {
                    modality,
                    label: label.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { modality, points })
    }

    pub fn from_map(
        modality: Modality,
        map: &BTreeMap<String, [f64; 2]>,
    ) -> Result<Self, PrepError> {
        Self::from_labeled(modality, map.iter().map(|(k, v)| (k.as_str(), *v)))
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    /// Points in [`Modality::landmark_labels`] order.
    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn to_map(&self) -> BTreeMap<String, [f64; 2]> {
        self.modality
            .landmark_labels()
            .iter()
            .zip(&self.points)
            .map(|(l, p)| (l.to_string(), *p))
            .collect()
    }

    fn check_bounds(&self, width: usize, height: usize) -> Result<(), PrepError> {
        for (label, &[x, y]) in self.modality.landmark_labels().iter().zip(&self.points) {
            let inside = x.is_finite()
                && y.is_finite()
                && x >= 0.0
                && y >= 0.0
                && x <= (width - 1) as f64
                && y <= (height - 1) as f64;
            if !inside {
                return Err(PrepError::LandmarkOutOfBounds {
                    label: label.to_string(),
                    x,
                    y,
                    width,
                    height,
                });
            }
        }
        Ok(())
    }

    fn check_distinct(&self) -> Result<(), PrepError> {
        let labels = self.modality.landmark_labels();
        for i in 0..self.points.len() {
            for j in i + 1..self.points.len() {
                let [xi, yi] = self.points[i];
                let [xj, yj] = self.points[j];
                if (xi - xj).hypot(yi - yj) < 1e-9 {
                    return Err(PrepError::DegenerateLandmarks(
                        labels[i].to_string(),
                        labels[j].to_string(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Fixed landmark destinations inside the canonical frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CanonicalLayout {
    pub width: usize,
    pub height: usize,
    pub left_eye: [f64; 2],
    pub right_eye: [f64; 2],
    pub mouth_center: [f64; 2],
    pub triangular_fossa: [f64; 2],
    pub antitragus: [f64; 2],
}

impl Default for CanonicalLayout {
    fn default() -> Self {
        Self {
            width: CANONICAL_WIDTH,
            height: CANONICAL_HEIGHT,
            left_eye: [60.0, 70.0],
            right_eye: [140.0, 70.0],
            mouth_center: [100.0, 170.0],
            triangular_fossa: [100.0, 60.0],
            antitragus: [100.0, 160.0],
        }
    }
}

impl CanonicalLayout {
    pub fn landmarks(&self, modality: Modality) -> LandmarkSet {
        let points = match modality {
            Modality::Face => vec![self.left_eye, self.right_eye, self.mouth_center],
            Modality::Ear => vec![self.triangular_fossa, self.antitragus],
        };
        LandmarkSet { modality, points }
    }
}

/// `p' = [a -b; b a] p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Similarity {
    pub fn apply(&self, [x, y]: [f64; 2]) -> [f64; 2] {
        [
            self.a * x - self.b * y + self.tx,
            self.b * x + self.a * y + self.ty,
        ]
    }

    pub fn inverse(&self) -> Similarity {
        let det = self.a * self.a + self.b * self.b;
        let (a, b) = (self.a / det, -self.b / det);
        Similarity {
            a,
            b,
            tx: -(a * self.tx - b * self.ty),
            ty: -(b * self.tx + a * self.ty),
        }
    }

    /// Least-squares similarity taking `src[i]` onto `dst[i]`; exact for two
    /// distinct points.
    pub fn fit(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Option<Similarity> {
        assert_eq!(src.len(), dst.len());
        let n = src.len() as f64;
        let centroid = |pts: &[[f64; 2]]| {
            let (sx, sy) = pts
                .iter()
                .fold((0.0, 0.0), |(sx, sy), p| (sx + p[0], sy + p[1]));
            [sx / n, sy / n]
        };
        let cs = centroid(src);
        let cd = centroid(dst);
        let (mut num_a, mut num_b, mut den) = (0.0, 0.0, 0.0);
        for (s, d) in src.iter().zip(dst) {
            let (sx, sy) = (s[0] - cs[0], s[1] - cs[1]);
            let (dx, dy) = (d[0] - cd[0], d[1] - cd[1]);
            num_a += sx * dx + sy * dy;
            num_b += sx * dy - sy * dx;
            den += sx * sx + sy * sy;
        }
        if den <= f64::EPSILON {
            return None;
        }
        let (a, b) = (num_a / den, num_b / den);
        if a * a + b * b <= f64::EPSILON {
            return None;
        }
        Some(Similarity {
            a,
            b,
            tx: cd[0] - (a * cs[0] - b * cs[1]),
            ty: cd[1] - (b * cs[0] + a * cs[1]),
        })
    }
}

/// Bilinear sample at a real-valued position; 0 outside the image.
fn sample_bilinear(img: &GrayImage, x: f64, y: f64) -> f64 {
    const EDGE: f64 = 1e-9;
    let (w, h) = (img.width(), img.height());
    if !(x >= -EDGE && y >= -EDGE && x <= (w - 1) as f64 + EDGE && y <= (h - 1) as f64 + EDGE) {
        return 0.0;
    }
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let p = |xx, yy| f64::from(img.get(xx, yy));
    let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
    let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Maps the landmarks onto their canonical positions with a similarity
/// transform and resamples the canonical `target` rectangle.
pub fn geometric_normalize(
    img: &GrayImage,
    marks: &LandmarkSet,
    layout: &CanonicalLayout,
) -> Result<GrayImage, PrepError> {
    let (tw, th) = (layout.width, layout.height);
    if tw == 0 || th == 0 {
        return Err(PrepError::InvalidTarget(tw, th));
    }
    marks.check_bounds(img.width(), img.height())?;
    marks.check_distinct()?;
    let canonical = layout.landmarks(marks.modality());
    let labels = marks.modality().landmark_labels();
    let forward = Similarity::fit(marks.points(), canonical.points()).ok_or_else(|| {
        PrepError::DegenerateLandmarks(labels[0].to_string(), labels[1].to_string())
    })?;
    let back = forward.inverse();
    Ok(GrayImage::from_fn(tw, th, |x, y| {
        let [sx, sy] = back.apply([x as f64, y as f64]);
        sample_bilinear(img, sx, sy).round().clamp(0.0, 255.0) as u8
    }))
}

/// Global histogram equalization by CDF remapping.
///
/// A constant image is returned unchanged.
pub fn histogram_equalize(img: &GrayImage) -> GrayImage {
    let lut = equalization_lut(img);
    let pixels = img.pixels().iter().map(|&p| lut[p as usize]).collect();
    GrayImage::new(img.width(), img.height(), pixels).expect("same dimensions")
}

/// The intensity mapping applied by [`histogram_equalize`].
pub fn equalization_lut(img: &GrayImage) -> [u8; 256] {
    let mut hist = [0u64; 256];
    for &p in img.pixels() {
        hist[p as usize] += 1;
    }
    let total = img.pixels().len() as f64;
    let first = hist.iter().position(|&c| c > 0).expect("nonempty image");
    let cdf_min = hist[first] as f64 / total;
    let mut lut = [0u8; 256];
    if cdf_min >= 1.0 {
        for (v, slot) in lut.iter_mut().enumerate() {
            *slot = v as u8;
        }
        return lut;
    }
    let mut running = 0u64;
    for (v, slot) in lut.iter_mut().enumerate() {
        running += hist[v];
        let cdf = running as f64 / total;
        let mapped = 255.0 * (cdf - cdf_min) / (1.0 - cdf_min);
        *slot = mapped.round().clamp(0.0, 255.0) as u8;
    }
    lut
}

/// Geometric normalization followed by histogram equalization of the crop.
pub fn prepare(
    img: &GrayImage,
    marks: &LandmarkSet,
    layout: &CanonicalLayout,
) -> Result<GrayImage, PrepError> {
    Ok(histogram_equalize(&geometric_normalize(
        img, marks, layout,
    )?))
}
