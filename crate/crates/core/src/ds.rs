//! Dempster-Shafer evidence over finite frames of discernment.
//!
//! Subsets of a frame with `n ≤ 16` hypotheses are bit sets: bit `i` stands
//! for the `i`-th label. Mass functions are stored sparsely over their focal
//! elements, in a `BTreeMap` so iteration order is fixed.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_FRAME_SIZE: usize = 16;
/// Mass functions must sum to one within this tolerance.
pub const MASS_TOLERANCE: f64 = 1e-9;
/// Conflict at or above `1 - TOTAL_CONFLICT_EPS` leaves nothing to normalize.
pub const TOTAL_CONFLICT_EPS: f64 = 1e-12;

pub const GENUINE: &str = "genuine";
pub const IMPOSTOR: &str = "impostor";

#[derive(Debug, Error, PartialEq)]
pub enum DsError {
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("mass functions are defined on different frames")]
    FrameMismatch,
    #[error("total conflict (K = {0}); Dempster normalization is undefined")]
    TotalConflict(f64),
    #[error("invalid mass function: {0}")]
    InvalidMass(String),
    #[error("calibration bounds are degenerate (min {0} must be < max {1})")]
    DegenerateCalibration(f64, f64),
    #[error("discount factor {0} is outside [0, 1]")]
    InvalidDiscount(f64),
}

/// A subset of a frame, encoded as a bit set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Subset(pub u32);

impl Subset {
    pub const EMPTY: Subset = Subset(0);

    pub fn singleton(i: usize) -> Subset {
        Subset(1 << i)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn intersect(self, other: Subset) -> Subset {
        Subset(self.0 & other.0)
    }

    pub fn is_subset_of(self, other: Subset) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn contains(self, i: usize) -> bool {
        self.0 >> i & 1 == 1
    }
}

/// Ordered, distinct hypothesis labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    labels: Vec<String>,
}

impl Frame {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self, DsError> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() || labels.len() > MAX_FRAME_SIZE {
            return Err(DsError::InvalidFrame(format!(
                "{} hypotheses (need 1..={MAX_FRAME_SIZE})",
                labels.len()
            )));
        }
        for (i, l) in labels.iter().enumerate() {
            if l.is_empty() || l.contains(',') {
                return Err(DsError::InvalidFrame(format!("bad label {l:?}")));
            }
            if labels[..i].contains(l) {
                return Err(DsError::InvalidFrame(format!("duplicate label {l:?}")));
            }
        }
        Ok(Self { labels })
    }

    /// The `{genuine, impostor}` verification frame.
    pub fn verification() -> Arc<Frame> {
        Arc::new(Frame::new([GENUINE, IMPOSTOR]).expect("static frame"))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Θ, the full set.
    pub fn theta(&self) -> Subset {
        Subset(((1u64 << self.labels.len()) - 1) as u32)
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn singleton(&self, label: &str) -> Option<Subset> {
        self.index_of(label).map(Subset::singleton)
    }

    pub fn subset<'a>(&self, labels: impl IntoIterator<Item = &'a str>) -> Option<Subset> {
        labels
            .into_iter()
            .try_fold(0u32, |acc, l| self.index_of(l).map(|i| acc | 1 << i))
            .map(Subset)
    }

    pub fn complement(&self, a: Subset) -> Subset {
        Subset(self.theta().0 & !a.0)
    }

    pub fn contains_subset(&self, a: Subset) -> bool {
        a.is_subset_of(self.theta())
    }

    /// Every nonempty subset, in increasing bit order.
    pub fn nonempty_subsets(&self) -> impl Iterator<Item = Subset> {
        (1..=self.theta().0).map(Subset)
    }

    /// Comma-joined, alphabetically sorted labels of `a`.
    pub fn subset_key(&self, a: Subset) -> String {
        let mut names: Vec<&str> = (0..self.len())
            .filter(|&i| a.contains(i))
            .map(|i| self.labels[i].as_str())
            .collect();
        names.sort_unstable();
        names.join(",")
    }
}

/// A basic probability assignment over the nonempty subsets of a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MassFunction {
    frame: Arc<Frame>,
    masses: BTreeMap<Subset, f64>,
}

impl MassFunction {
    /// Validates and builds a mass function; zero entries are dropped and
    /// repeated subsets accumulate.
    pub fn new(
        frame: Arc<Frame>,
        entries: impl IntoIterator<Item = (Subset, f64)>,
    ) -> Result<Self, DsError> {
        let mut masses = BTreeMap::new();
        for (a, v) in entries {
            if a.is_empty() {
                if v != 0.0 {
                    return Err(DsError::InvalidMass("mass on the empty set".into()));
                }
                continue;
            }
            if !frame.contains_subset(a) {
                return Err(DsError::InvalidMass(format!(
                    "subset {:#b} outside the frame",
                    a.0
                )));
            }
            if !(v.is_finite() && v >= 0.0) {
                return Err(DsError::InvalidMass(format!(
                    "mass {v} is not a nonnegative number"
                )));
            }
            *masses.entry(a).or_insert(0.0) += v;
        }
        masses.retain(|_, v| *v > 0.0);
        let total: f64 = masses.values().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(DsError::InvalidMass(format!("masses sum to {total}")));
        }
        Ok(Self { frame, masses })
    }

    /// Total ignorance: `m(Θ) = 1`.
    pub fn vacuous(frame: Arc<Frame>) -> Self {
        let theta = frame.theta();
        Self {
            frame,
            masses: BTreeMap::from([(theta, 1.0)]),
        }
    }

    /// Builds from `(labels, mass)` pairs.
    pub fn from_labeled<'a>(
        frame: Arc<Frame>,
        entries: impl IntoIterator<Item = (&'a [&'a str], f64)>,
    ) -> Result<Self, DsError> {
        let mut resolved = Vec::new();
        for (labels, v) in entries {
            let a = frame
                .subset(labels.iter().copied())
                .ok_or_else(|| DsError::InvalidMass(format!("unknown label in {labels:?}")))?;
            resolved.push((a, v));
        }
        Self::new(frame, resolved)
    }

    pub fn frame(&self) -> &Arc<Frame> {
        &self.frame
    }

    /// `m(A)`; zero for non-focal subsets.
    pub fn mass(&self, a: Subset) -> f64 {
        self.masses.get(&a).copied().unwrap_or(0.0)
    }

    pub fn focal_elements(&self) -> impl Iterator<Item = (Subset, f64)> + '_ {
        self.masses.iter().map(|(a, v)| (*a, *v))
    }

    pub fn total(&self) -> f64 {
        self.masses.values().sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&MassDocument::from(self)).expect("mass serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DsError> {
        let doc: MassDocument = serde_json::from_str(text)
            .map_err(|e| DsError::InvalidMass(format!("bad JSON: {e}")))?;
        doc.try_into()
    }
}

/// Sums nonnegative terms in ascending order so the result does not depend
/// on the order they were produced in.
fn canonical_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.into_iter().sum()
}

/// Dempster's orthogonal sum.
///
/// Returns the combined mass and the conflict `K = Σ_{A∩B=∅} m1(A) m2(B)`;
/// every nonempty `C` receives `Σ_{A∩B=C} m1(A) m2(B) / (1 - K)`. Products
/// are summed in sorted order, so `combine(a, b) == combine(b, a)` exactly.
pub fn combine_dempster(
    m1: &MassFunction,
    m2: &MassFunction,
) -> Result<(MassFunction, f64), DsError> {
    if m1.frame != m2.frame {
        return Err(DsError::FrameMismatch);
    }
    let mut by_subset: BTreeMap<Subset, Vec<f64>> = BTreeMap::new();
    let mut conflict_terms = Vec::new();
    for (a, va) in m1.focal_elements() {
        for (b, vb) in m2.focal_elements() {
            let c = a.intersect(b);
            let p = va * vb;
            if c.is_empty() {
                conflict_terms.push(p);
            } else {
                by_subset.entry(c).or_default().push(p);
            }
        }
    }
    let conflict = canonical_sum(conflict_terms);
    if conflict >= 1.0 - TOTAL_CONFLICT_EPS {
        return Err(DsError::TotalConflict(conflict));
    }
    let norm = 1.0 - conflict;
    let masses = by_subset
        .into_iter()
        .map(|(c, terms)| (c, canonical_sum(terms) / norm))
        .filter(|(_, v)| *v > 0.0)
        .collect();
    Ok((
        MassFunction {
            frame: Arc::clone(&m1.frame),
            masses,
        },
        conflict,
    ))
}

/// `Bel(A) = Σ_{∅ ≠ B ⊆ A} m(B)`.
pub fn belief(m: &MassFunction, a: Subset) -> f64 {
    m.focal_elements()
        .filter(|(b, _)| b.is_subset_of(a))
        .map(|(_, v)| v)
        .sum()
}

/// `Pl(A) = Σ_{B ∩ A ≠ ∅} m(B)`.
pub fn plausibility(m: &MassFunction, a: Subset) -> f64 {
    m.focal_elements()
        .filter(|(b, _)| !b.intersect(a).is_empty())
        .map(|(_, v)| v)
        .sum()
}

/// Shafer discounting by reliability `alpha`: every focal mass is scaled by
/// `alpha` and the remainder moves to Θ.
pub fn discount(m: &MassFunction, alpha: f64) -> Result<MassFunction, DsError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(DsError::InvalidDiscount(alpha));
    }
    let theta = m.frame.theta();
    let mut masses: BTreeMap<Subset, f64> = m
        .focal_elements()
        .filter(|(a, _)| *a != theta)
        .map(|(a, v)| (a, alpha * v))
        .filter(|(_, v)| *v > 0.0)
        .collect();
    let theta_mass = 1.0 - alpha + alpha * m.mass(theta);
    if theta_mass > 0.0 {
        masses.insert(theta, theta_mass);
    }
    Ok(MassFunction {
        frame: Arc::clone(&m.frame),
        masses,
    })
}

/// Min-max score calibration bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub min: f64,
    pub max: f64,
}

impl Calibration {
    pub fn new(min: f64, max: f64) -> Result<Self, DsError> {
        if min >= max || !min.is_finite() || !max.is_finite() {
            return Err(DsError::DegenerateCalibration(min, max));
        }
        Ok(Self { min, max })
    }

    /// Bounds of a nonempty score pool.
    pub fn from_scores(scores: &[f64]) -> Result<Self, DsError> {
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self::new(min, max)
    }

    /// `(score - min) / (max - min)` clamped to `[0, 1]`.
    pub fn normalize(&self, score: f64) -> f64 {
        ((score - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
    }
}

/// Simple support mass on `{genuine, impostor}` from a match score:
/// `m({g}) = α s`, `m({i}) = α (1 - s)`, `m(Θ) = 1 - α` with `s` the
/// min-max normalized score.
pub fn bpa_from_score(
    frame: &Arc<Frame>,
    score: f64,
    calibration: &Calibration,
    alpha: f64,
) -> Result<MassFunction, DsError> {
    Calibration::new(calibration.min, calibration.max)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(DsError::InvalidDiscount(alpha));
    }
    let genuine = frame
        .singleton(GENUINE)
        .ok_or_else(|| DsError::InvalidFrame("frame lacks `genuine`".into()))?;
    let impostor = frame
        .singleton(IMPOSTOR)
        .ok_or_else(|| DsError::InvalidFrame("frame lacks `impostor`".into()))?;
    let s = calibration.normalize(score);
    MassFunction::new(
        Arc::clone(frame),
        [
            (genuine, alpha * s),
            (impostor, alpha * (1.0 - s)),
            (frame.theta(), 1.0 - alpha),
        ],
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionDecision {
    pub combined: MassFunction,
    pub conflict: f64,
    pub threshold: f64,
    pub accepted: bool,
}

impl FusionDecision {
    /// Combined `m({genuine})`.
    pub fn genuine_mass(&self) -> f64 {
        genuine_mass(&self.combined)
    }
}

fn genuine_mass(m: &MassFunction) -> f64 {
    m.frame()
        .singleton(GENUINE)
        .map(|g| m.mass(g))
        .unwrap_or(0.0)
}

/// Fuses face and ear evidence and accepts when combined `m({genuine}) ≥ τ`.
pub fn decide(
    m_face: &MassFunction,
    m_ear: &MassFunction,
    threshold: f64,
) -> Result<FusionDecision, DsError> {
    if m_face.frame().singleton(GENUINE).is_none() {
        return Err(DsError::InvalidFrame("frame lacks `genuine`".into()));
    }
    let (combined, conflict) = combine_dempster(m_face, m_ear)?;
    let accepted = genuine_mass(&combined) >= threshold;
    Ok(FusionDecision {
        combined,
        conflict,
        threshold,
        accepted,
    })
}

/// JSON form `{frame: [labels], masses: {"a,b": value}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassDocument {
    pub frame: Vec<String>,
    pub masses: BTreeMap<String, f64>,
}

impl From<&MassFunction> for MassDocument {
    fn from(m: &MassFunction) -> Self {
        Self {
            frame: m.frame.labels().to_vec(),
            masses: m
                .focal_elements()
                .map(|(a, v)| (m.frame.subset_key(a), v))
                .collect(),
        }
    }
}

impl TryFrom<MassDocument> for MassFunction {
    type Error = DsError;

    fn try_from(doc: MassDocument) -> Result<Self, DsError> {
        let frame = Arc::new(Frame::new(doc.frame)?);
        let mut entries = Vec::with_capacity(doc.masses.len());
        for (key, v) in &doc.masses {
            let a = frame
                .subset(key.split(',').map(str::trim))
                .ok_or_else(|| DsError::InvalidMass(format!("unknown subset {key:?}")))?;
            entries.push((a, v.to_owned()));
        }
        MassFunction::new(frame, entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gi(g: f64, i: f64, theta: f64) -> MassFunction {
        let f = Frame::verification();
        MassFunction::from_labeled(
            f,
            [
                (&[GENUINE][..], g),
                (&[IMPOSTOR][..], i),
                (&[GENUINE, IMPOSTOR][..], theta),
            ],
        )
        .unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    const G: Subset = Subset(0b01);
    const I: Subset = Subset(0b10);
    const T: Subset = Subset(0b11);

    #[test]
    fn frame_validation() {
        assert!(Frame::new(Vec::<String>::new()).is_err());
        assert!(Frame::new(["a", "a"]).is_err());
        assert!(Frame::new(["a,b"]).is_err());
        assert!(Frame::new((0..17).map(|i| format!("h{i}"))).is_err());
        let f = Frame::new((0..16).map(|i| format!("h{i}"))).unwrap();
        assert_eq!(f.theta(), Subset(0xFFFF));
    }

    #[test]
    fn mass_validation() {
        let f = Frame::verification();
        assert!(MassFunction::new(f.clone(), [(G, 0.5)]).is_err());
        assert!(MassFunction::new(f.clone(), [(G, 1.2), (I, -0.2)]).is_err());
        assert!(MassFunction::new(f.clone(), [(Subset::EMPTY, 0.1), (G, 0.9)]).is_err());
        assert!(MassFunction::new(f.clone(), [(Subset(0b100), 1.0)]).is_err());
        let m = MassFunction::new(f, [(G, 0.0), (T, 1.0)]).unwrap();
        assert_eq!(m.focal_elements().count(), 1);
    }

    #[test]
    fn combine_without_conflict() {
        let (m, k) = combine_dempster(&gi(0.6, 0.0, 0.4), &gi(0.5, 0.0, 0.5)).unwrap();
        assert_eq!(k, 0.0);
        assert!(close(m.mass(G), 0.8, 1e-12));
        assert!(close(m.mass(T), 0.2, 1e-12));
        assert_eq!(m.mass(I), 0.0);
    }

    #[test]
    fn combine_with_conflict() {
        let (m, k) = combine_dempster(&gi(0.9, 0.0, 0.1), &gi(0.0, 0.8, 0.2)).unwrap();
        assert!(close(k, 0.72, 1e-12));
        assert!(close(m.mass(G), 0.18 / 0.28, 1e-12));
        assert!(close(m.mass(I), 0.08 / 0.28, 1e-12));
        assert!(close(m.mass(T), 0.02 / 0.28, 1e-12));
    }

    #[test]
    fn vacuous_identity() {
        let m1 = gi(0.3, 0.5, 0.2);
        let v = MassFunction::vacuous(Frame::verification());
        let (left, k) = combine_dempster(&m1, &v).unwrap();
        assert_eq!(k, 0.0);
        assert_eq!(left, m1);
        assert_eq!(combine_dempster(&v, &m1).unwrap().0, m1);
    }

    #[test]
    fn total_conflict() {
        assert!(matches!(
            combine_dempster(&gi(1.0, 0.0, 0.0), &gi(0.0, 1.0, 0.0)),
            Err(DsError::TotalConflict(_))
        ));
    }

    #[test]
    fn frame_mismatch() {
        let other = Arc::new(Frame::new(["a", "b"]).unwrap());
        let m2 = MassFunction::vacuous(other);
        assert_eq!(
            combine_dempster(&gi(0.5, 0.5, 0.0), &m2),
            Err(DsError::FrameMismatch)
        );
    }

    #[test]
    fn belief_and_plausibility() {
        let m = gi(0.5, 0.2, 0.3);
        assert!(close(belief(&m, G), 0.5, 1e-15));
        assert!(close(plausibility(&m, G), 0.8, 1e-15));
        assert!(close(belief(&m, T), 1.0, 1e-12));
        assert_eq!(belief(&m, Subset::EMPTY), 0.0);
        assert_eq!(plausibility(&m, Subset::EMPTY), 0.0);
    }

    #[test]
    fn discounting() {
        let m = gi(0.5, 0.2, 0.3);
        assert_eq!(discount(&m, 1.0).unwrap(), m);
        assert_eq!(
            discount(&m, 0.0).unwrap(),
            MassFunction::vacuous(Frame::verification())
        );
        let d = discount(&m, 0.9).unwrap();
        assert!(close(d.mass(G), 0.45, 1e-12));
        assert!(close(d.mass(I), 0.18, 1e-12));
        assert!(close(d.mass(T), 0.37, 1e-12));
        assert!(discount(&m, 1.5).is_err());
    }

    #[test]
    fn bpa_construction() {
        let f = Frame::verification();
        let cal = Calibration::new(-2.0, 4.0).unwrap();
        let top = bpa_from_score(&f, 4.0, &cal, 0.9).unwrap();
        assert!(close(top.mass(G), 0.9, 1e-12) && top.mass(I) == 0.0);
        assert!(close(top.mass(T), 0.1, 1e-12));
        let mid = bpa_from_score(&f, 1.0, &cal, 0.9).unwrap();
        assert!(close(mid.mass(G), 0.45, 1e-12) && close(mid.mass(I), 0.45, 1e-12));
        let above = bpa_from_score(&f, 100.0, &cal, 0.9).unwrap();
        assert_eq!(above, top);
        for score in [-5.0, 0.0, 9.0] {
            assert_eq!(
                bpa_from_score(&f, score, &cal, 0.0).unwrap(),
                MassFunction::vacuous(f.clone())
            );
        }
        assert_eq!(
            Calibration::new(1.0, 1.0),
            Err(DsError::DegenerateCalibration(1.0, 1.0))
        );
        let bad = Calibration { min: 1.0, max: 1.0 };
        assert!(matches!(
            bpa_from_score(&f, 1.0, &bad, 0.5),
            Err(DsError::DegenerateCalibration(..))
        ));
    }

    #[test]
    fn decisions() {
        let d = decide(&gi(0.8, 0.0, 0.2), &gi(0.7, 0.0, 0.3), 0.5).unwrap();
        assert!(d.accepted);
        assert!(close(d.genuine_mass(), 0.94, 1e-12));
        let v = MassFunction::vacuous(Frame::verification());
        let d = decide(&v, &v, 0.5).unwrap();
        assert!(!d.accepted && d.genuine_mass() == 0.0);
        assert!(
            decide(&gi(0.0, 0.9, 0.1), &gi(0.1, 0.8, 0.1), 0.0)
                .unwrap()
                .accepted
        );
    }

    #[test]
    fn json_round_trip() {
        let f = Arc::new(Frame::new(["b", "a", "c"]).unwrap());
        let m = MassFunction::new(
            f,
            [
                (Subset(0b011), 0.25),
                (Subset(0b100), 0.5),
                (Subset(0b111), 0.25),
            ],
        )
        .unwrap();
        let text = m.to_json();
        assert!(text.contains("\"a,b\": 0.25"));
        assert!(text.contains("\"a,b,c\": 0.25"));
        assert_eq!(MassFunction::from_json(&text).unwrap(), m);
    }
}
