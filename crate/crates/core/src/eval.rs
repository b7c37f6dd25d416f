//! Verification error rates, ROC sweeps and the synthetic-matcher experiment.

use std::fmt::{self, Write as _};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ds::{self, bpa_from_score, combine_dempster, Calibration, DsError, Frame};
use crate::prep::Modality;

pub const DEFAULT_SWEEP: usize = 10_001;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{0} score list is empty")]
    EmptyScoreList(&'static str),
    #[error("threshold sweep needs at least 2 points, got {0}")]
    SweepTooShort(usize),
    #[error("non-finite score")]
    NonFiniteScore,
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Fusion(#[from] DsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialLabel {
    Genuine,
    Impostor,
}

/// One verification attempt: a probe of `true_subject` claiming `claimed_subject`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub claimed_subject: String,
    pub true_subject: String,
    pub face_score: f64,
    pub ear_score: f64,
    pub fused_genuine_mass: f64,
    pub label: TrialLabel,
    /// Set when the two bpa's were in total conflict; the trial is rejected.
    #[serde(default)]
    pub total_conflict: bool,
}

impl TrialRecord {
    pub fn label_for(claimed: &str, truth: &str) -> TrialLabel {
        if claimed == truth {
            TrialLabel::Genuine
        } else {
            TrialLabel::Impostor
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Threshold sweep with FAR nonincreasing and FRR nondecreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn points(&self) -> &[RocPoint] {
        &self.points
    }

    /// `threshold,far,frr` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,far,frr\n");
        for p in &self.points {
            writeln!(out, "{},{},{}", p.threshold, p.far, p.frr).expect("string write");
        }
        out
    }

    /// The sweep point whose FAR and FRR are closest (first on ties).
    pub fn nearest_equal_error_point(&self) -> RocPoint {
        *self
            .points
            .iter()
            .fold(None::<&RocPoint>, |best, p| match best {
                Some(b) if (b.far - b.frr).abs() <= (p.far - p.frr).abs() => Some(b),
                _ => Some(p),
            })
            .expect("curve is nonempty")
    }
}

fn sorted_scores(scores: &[f64], what: &'static str) -> Result<Vec<f64>, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::EmptyScoreList(what));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted)
}

/// Sweeps `num_thresholds` uniform thresholds over the pooled score range
/// widened by a margin on both sides. A score `s` is accepted at threshold
/// `t` when `s ≥ t`.
pub fn compute_roc(
    genuine: &[f64],
    impostor: &[f64],
    num_thresholds: usize,
) -> Result<RocCurve, EvalError> {
    let genuine = sorted_scores(genuine, "genuine")?;
    let impostor = sorted_scores(impostor, "impostor")?;
    if num_thresholds < 2 {
        return Err(EvalError::SweepTooShort(num_thresholds));
    }
    let lo = genuine[0].min(impostor[0]);
    let hi = genuine[genuine.len() - 1].max(impostor[impostor.len() - 1]);
    let margin = ((hi - lo) * 1e-3).max(1e-9 * lo.abs().max(hi.abs()).max(1.0));
    let (start, end) = (lo - margin, hi + margin);
    let step = (end - start) / (num_thresholds - 1) as f64;
    let (ng, ni) = (genuine.len() as f64, impostor.len() as f64);
    let points = (0..num_thresholds)
        .map(|i| {
            let threshold = if i == num_thresholds - 1 {
                end
            } else {
                start + step * i as f64
            };
            let rejected_genuine = genuine.partition_point(|&s| s < threshold);
            let rejected_impostor = impostor.partition_point(|&s| s < threshold);
            RocPoint {
                threshold,
                far: (impostor.len() - rejected_impostor) as f64 / ni,
                frr: rejected_genuine as f64 / ng,
            }
        })
        .collect();
    Ok(RocCurve { points })
}

/// Equal error rate: the crossing of FAR and FRR, linearly interpolated
/// between the two sweep points that bracket it.
pub fn eer(roc: &RocCurve) -> f64 {
    let pts = roc.points();
    let diff = |p: &RocPoint| p.far - p.frr;
    match pts.iter().position(|p| diff(p) <= 0.0) {
        None => {
            let last = pts.last().expect("nonempty curve");
            (last.far + last.frr) / 2.0
        }
        Some(j) if diff(&pts[j]) == 0.0 || j == 0 => (pts[j].far + pts[j].frr) / 2.0,
        Some(j) => {
            let (a, b) = (&pts[j - 1], &pts[j]);
            let (da, db) = (diff(a), diff(b));
            let lambda = da / (da - db);
            a.far + lambda * (b.far - a.far)
        }
    }
}

/// One row of the error table, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub frr: f64,
    pub far: f64,
    pub eer: f64,
    pub recognition_rate: f64,
}

impl MethodRow {
    /// FAR/FRR are taken at the sweep point nearest the equal-error
    /// crossing; recognition rate is `100 - EER`.
    pub fn from_roc(method: &str, roc: &RocCurve) -> Self {
        let e = eer(roc) * 100.0;
        let op = roc.nearest_equal_error_point();
        Self {
            method: method.to_string(),
            frr: op.frr * 100.0,
            far: op.far * 100.0,
            eer: e,
            recognition_rate: 100.0 - e,
        }
    }
}

pub const METHOD_FACE: &str = "face";
pub const METHOD_EAR: &str = "ear";
pub const METHOD_FUSED: &str = "ds_fusion";

/// Face-only, ear-only and fused rows plus their ROC curves.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub rows: Vec<MethodRow>,
    pub curves: Vec<(String, RocCurve)>,
    /// Trials rejected because of total conflict.
    pub total_conflicts: usize,
}

impl ErrorReport {
    pub fn from_curves(curves: Vec<(String, RocCurve)>, total_conflicts: usize) -> Self {
        let rows = curves
            .iter()
            .map(|(name, roc)| MethodRow::from_roc(name, roc))
            .collect();
        Self {
            rows,
            curves,
            total_conflicts,
        }
    }

    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn curve(&self, method: &str) -> Option<&RocCurve> {
        self.curves
            .iter()
            .find(|(m, _)| m == method)
            .map(|(_, c)| c)
    }

    /// `method,frr,far,eer,recognition_rate` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,frr,far,eer,recognition_rate\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{:.4},{:.4},{:.4},{:.4}",
                r.method, r.frr, r.far, r.eer, r.recognition_rate
            )
            .expect("string write");
        }
        out
    }
}

impl fmt::Display for ErrorReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:>8} {:>8} {:>8} {:>18}",
            "Method", "FRR (%)", "FAR (%)", "EER (%)", "Recognition (%)"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<12} {:>8.2} {:>8.2} {:>8.2} {:>18.2}",
                r.method, r.frr, r.far, r.eer, r.recognition_rate
            )?;
        }
        if self.total_conflicts > 0 {
            writeln!(
                f,
                "({} trials rejected on total conflict)",
                self.total_conflicts
            )?;
        }
        Ok(())
    }
}

/// Gaussian genuine/impostor score model for one matcher.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatcherSpec {
    pub genuine_mean: f64,
    pub genuine_std: f64,
    pub impostor_mean: f64,
    pub impostor_std: f64,
}

impl MatcherSpec {
    /// Equal-variance matcher with separation `d'` (`Δ/σ`); its EER is `Φ(-d'/2)`.
    pub fn with_separation(d_prime: f64) -> Self {
        Self {
            genuine_mean: d_prime,
            genuine_std: 1.0,
            impostor_mean: 0.0,
            impostor_std: 1.0,
        }
    }

    fn validate(&self) -> Result<(), EvalError> {
        let ok = |s: f64| s > 0.0 && s.is_finite();
        if !ok(self.genuine_std) || !ok(self.impostor_std) {
            return Err(EvalError::InvalidSpec(
                "standard deviations must be positive".into(),
            ));
        }
        if !self.genuine_mean.is_finite() || !self.impostor_mean.is_finite() {
            return Err(EvalError::InvalidSpec("means must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub face: MatcherSpec,
    pub ear: MatcherSpec,
    pub n_genuine: usize,
    pub n_impostor: usize,
}

impl Default for SynthSpec {
    /// Face EER ≈ 8.0 %, ear EER ≈ 6.7 %.
    fn default() -> Self {
        Self {
            face: MatcherSpec::with_separation(2.81),
            ear: MatcherSpec::with_separation(3.00),
            n_genuine: 10_000,
            n_impostor: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModalityScores {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SynthScores {
    pub face: ModalityScores,
    pub ear: ModalityScores,
}

impl SynthScores {
    pub fn modality(&self, m: Modality) -> &ModalityScores {
        match m {
            Modality::Face => &self.face,
            Modality::Ear => &self.ear,
        }
    }
}

/// Draws independent scores per modality; trial `i` of each class pairs
/// `face.genuine[i]` with `ear.genuine[i]` (same for impostors).
pub fn synth_scores(spec: &SynthSpec, seed: u64) -> Result<SynthScores, EvalError> {
    spec.face.validate()?;
    spec.ear.validate()?;
    if spec.n_genuine == 0 || spec.n_impostor == 0 {
        return Err(EvalError::InvalidSpec(
            "trial counts must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |mean: f64, std: f64, n: usize| -> Vec<f64> {
        let dist = Normal::new(mean, std).expect("validated spec");
        (0..n).map(|_| dist.sample(&mut rng)).collect()
    };
    let mut gen_modality = |m: &MatcherSpec| ModalityScores {
        genuine: draw(m.genuine_mean, m.genuine_std, spec.n_genuine),
        impostor: draw(m.impostor_mean, m.impostor_std, spec.n_impostor),
    };
    let face = gen_modality(&spec.face);
    let ear = gen_modality(&spec.ear);
    Ok(SynthScores { face, ear })
}

/// Per-modality reliabilities used to discount the score evidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub alpha_face: f64,
    pub alpha_ear: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            alpha_face: 0.9,
            alpha_ear: 0.9,
        }
    }
}

/// Outcome of fusing one (face, ear) score pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedScore {
    pub genuine_mass: f64,
    pub conflict: f64,
    pub total_conflict: bool,
}

/// Converts both scores to bpa's and combines them; total conflict yields
/// a zero genuine mass with the flag set instead of an error.
pub fn fuse_scores(
    frame: &std::sync::Arc<Frame>,
    face_score: f64,
    ear_score: f64,
    face_cal: &Calibration,
    ear_cal: &Calibration,
    weights: &FusionWeights,
) -> Result<FusedScore, EvalError> {
    let m_face = bpa_from_score(frame, face_score, face_cal, weights.alpha_face)?;
    let m_ear = bpa_from_score(frame, ear_score, ear_cal, weights.alpha_ear)?;
    match combine_dempster(&m_face, &m_ear) {
        Ok((combined, conflict)) => Ok(FusedScore {
            genuine_mass: combined.mass(frame.singleton(ds::GENUINE).expect("verification frame")),
            conflict,
            total_conflict: false,
        }),
        Err(DsError::TotalConflict(k)) => Ok(FusedScore {
            genuine_mass: 0.0,
            conflict: k,
            total_conflict: true,
        }),
        Err(e) => Err(e.into()),
    }
}

/// Builds the three-row report from already-scored trials.
pub fn report_from_trials(trials: &[TrialRecord], sweep: usize) -> Result<ErrorReport, EvalError> {
    let split = |f: fn(&TrialRecord) -> f64| {
        let mut g = Vec::new();
        let mut i = Vec::new();
        for t in trials {
            match t.label {
                TrialLabel::Genuine => g.push(f(t)),
                TrialLabel::Impostor => i.push(f(t)),
            }
        }
        (g, i)
    };
    let mut curves = Vec::with_capacity(3);
    for (name, f) in [
        (
            METHOD_FACE,
            (|t: &TrialRecord| t.face_score) as fn(&TrialRecord) -> f64,
        ),
        (METHOD_EAR, |t: &TrialRecord| t.ear_score),
        (METHOD_FUSED, |t: &TrialRecord| t.fused_genuine_mass),
    ] {
        let (g, i) = split(f);
        curves.push((name.to_string(), compute_roc(&g, &i, sweep)?));
    }
    let conflicts = trials.iter().filter(|t| t.total_conflict).count();
    Ok(ErrorReport::from_curves(curves, conflicts))
}

/// Synthetic fusion experiment: unimodal ROCs from raw scores, fused ROC
/// from the combined genuine mass, with per-modality calibration taken from
/// the pooled genuine and impostor scores.
pub fn run_fusion_experiment(
    spec: &SynthSpec,
    weights: &FusionWeights,
    seed: u64,
    sweep: usize,
) -> Result<ErrorReport, EvalError> {
    let scores = synth_scores(spec, seed)?;
    let pooled =
        |m: &ModalityScores| -> Vec<f64> { m.genuine.iter().chain(&m.impostor).copied().collect() };
    let face_cal = Calibration::from_scores(&pooled(&scores.face))?;
    let ear_cal = Calibration::from_scores(&pooled(&scores.ear))?;
    let frame = Frame::verification();
    let mut trials = Vec::with_capacity(spec.n_genuine + spec.n_impostor);
    for (label, face, ear) in [
        (
            TrialLabel::Genuine,
            &scores.face.genuine,
            &scores.ear.genuine,
        ),
        (
            TrialLabel::Impostor,
            &scores.face.impostor,
            &scores.ear.impostor,
        ),
    ] {
        for (i, (&fs, &es)) in face.iter().zip(ear).enumerate() {
            let fused = fuse_scores(&frame, fs, es, &face_cal, &ear_cal, weights)?;
            let (claimed, truth) = match label {
                TrialLabel::Genuine => (format!("g{i}"), format!("g{i}")),
                TrialLabel::Impostor => (format!("c{i}"), format!("p{i}")),
            };
            trials.push(TrialRecord {
                claimed_subject: claimed,
                true_subject: truth,
                face_score: fs,
                ear_score: es,
                fused_genuine_mass: fused.genuine_mass,
                label,
                total_conflict: fused.total_conflict,
            });
        }
    }
    report_from_trials(&trials, sweep)
}
