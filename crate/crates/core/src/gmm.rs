//! Diagonal-covariance Gaussian mixture models fitted by Expectation-Maximization.

use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::observation::ObservationSet;
use crate::prep::Modality;

pub const MODEL_FORMAT_VERSION: u32 = 1;

const KMEANS_MAX_ITERS: usize = 50;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, PartialEq)]
pub enum GmmError {
    #[error("{observations} observations cannot seed {components} components")]
    TooFewObservations {
        observations: usize,
        components: usize,
    },
    #[error("dimension mismatch: model has {expected}, input has {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("observation set is empty")]
    EmptyObservationSet,
    #[error("component {0} lost all responsibility mass after re-seeding")]
    NumericalCollapse(usize),
    #[error("invalid EM configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

/// `log Σ exp(v)`, shifted by the maximum so no term overflows.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
    /// `log π_m - ½ Σ_d (ln 2π + ln σ²_md)`
    log_consts: Vec<f64>,
}

impl GmmModel {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
    ) -> Result<Self, GmmError> {
        let m = weights.len();
        if m == 0 {
            return Err(GmmError::InvalidModel("no components".into()));
        }
        if means.len() != m || variances.len() != m {
            return Err(GmmError::InvalidModel(format!(
                "{m} weights, {} means, {} variance vectors",
                means.len(),
                variances.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(GmmError::InvalidModel("zero dimension".into()));
        }
        if means.iter().chain(&variances).any(|v| v.len() != dim) {
            return Err(GmmError::InvalidModel("ragged parameter vectors".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(GmmError::InvalidModel(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(GmmError::InvalidModel(format!("weights sum to {total}")));
        }
        if means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GmmError::InvalidModel("non-finite mean".into()));
        }
        if variances
            .iter()
            .flatten()
            .any(|v| !(v.is_finite() && *v > 0.0))
        {
            return Err(GmmError::InvalidModel(
                "variances must be finite and positive".into(),
            ));
        }
        let log_consts = weights
            .iter()
            .zip(&variances)
            .map(|(w, var)| w.ln() - 0.5 * var.iter().map(|s| LN_2PI + s.ln()).sum::<f64>())
            .collect();
        Ok(Self {
            weights,
            means,
            variances,
            log_consts,
        })
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[Vec<f64>] {
        &self.variances
    }

    /// Fills `out[m]` with `log π_m + log N(x; μ_m, diag σ²_m)`.
    fn joint_log_densities(&self, x: &[f64], out: &mut [f64]) {
        for (m, slot) in out.iter_mut().enumerate() {
            let quad: f64 = x
                .iter()
                .zip(&self.means[m])
                .zip(&self.variances[m])
                .map(|((xi, mu), var)| (xi - mu) * (xi - mu) / var)
                .sum();
            *slot = self.log_consts[m] - 0.5 * quad;
        }
    }

    /// `log Σ_m π_m N(x; μ_m, diag σ²_m)`.
    pub fn log_likelihood(&self, x: &[f64]) -> Result<f64, GmmError> {
        if x.len() != self.dim() {
            return Err(GmmError::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        let mut buf = vec![0.0; self.num_components()];
        self.joint_log_densities(x, &mut buf);
        Ok(log_sum_exp(&buf))
    }

    /// Per-observation log-likelihoods in row order.
    pub fn log_likelihoods(&self, data: &ObservationSet) -> Result<Vec<f64>, GmmError> {
        if data.dim() != self.dim() {
            return Err(GmmError::DimensionMismatch {
                expected: self.dim(),
                actual: data.dim(),
            });
        }
        let mut buf = vec![0.0; self.num_components()];
        Ok(data
            .rows()
            .map(|x| {
                self.joint_log_densities(x, &mut buf);
                log_sum_exp(&buf)
            })
            .collect())
    }

    /// Sum of log-likelihoods over `data`, accumulated in row order.
    pub fn total_log_likelihood(&self, data: &ObservationSet) -> Result<f64, GmmError> {
        Ok(self.log_likelihoods(data)?.iter().sum())
    }

    /// Posterior component probabilities for one observation.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>, GmmError> {
        if x.len() != self.dim() {
            return Err(GmmError::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        let mut buf = vec![0.0; self.num_components()];
        self.joint_log_densities(x, &mut buf);
        let lse = log_sum_exp(&buf);
        Ok(buf.iter().map(|v| (v - lse).exp()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    /// Mixture size `M`.
    pub components: usize,
    pub max_iters: usize,
    /// Relative log-likelihood improvement below which EM stops.
    pub tol: f64,
    pub cov_floor: f64,
    pub seed: u64,
    pub restarts: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            components: 8,
            max_iters: 200,
            tol: 1e-6,
            cov_floor: 1e-4,
            seed: 0,
            restarts: 3,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<(), GmmError> {
        let fail = |m: &str| Err(GmmError::InvalidConfig(m.to_string()));
        if self.components < 1 {
            return fail("components must be at least 1");
        }
        if self.max_iters < 1 {
            return fail("max_iters must be at least 1");
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return fail("tol must be positive");
        }
        if !(self.cov_floor > 0.0 && self.cov_floor.is_finite()) {
            return fail("cov_floor must be positive");
        }
        if self.restarts < 1 {
            return fail("restarts must be at least 1");
        }
        Ok(())
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations; the resulting clusters
/// become mixture components.
pub fn kmeans_init(
    data: &ObservationSet,
    components: usize,
    seed: u64,
    cov_floor: f64,
) -> Result<GmmModel, GmmError> {
    let n = data.len();
    if components == 0 {
        return Err(GmmError::InvalidConfig(
            "components must be at least 1".into(),
        ));
    }
    if n < components {
        return Err(GmmError::TooFewObservations {
            observations: n,
            components,
        });
    }
    let dim = data.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(components);
    centers.push(data.row(rng.random_range(0..n)).to_vec());
    let mut d2: Vec<f64> = data
        .rows()
        .map(|x| squared_distance(x, &centers[0]))
        .collect();
    while centers.len() < components {
        let idx = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(&mut rng),
            // every point already coincides with a center
            Err(_) => rng.random_range(0..n),
        };
        let c = data.row(idx).to_vec();
        for (slot, x) in d2.iter_mut().zip(data.rows()) {
            *slot = slot.min(squared_distance(x, &c));
        }
        centers.push(c);
    }

    let mut assignment = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, x) in data.rows().enumerate() {
            let (k, _) = nearest(x, &centers);
            if assignment[i] != k {
                assignment[i] = k;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; components];
        let mut counts = vec![0usize; components];
        for (x, &k) in data.rows().zip(&assignment) {
            counts[k] += 1;
            for (s, v) in sums[k].iter_mut().zip(x) {
                *s += v;
            }
        }
        for k in 0..components {
            if counts[k] > 0 {
                centers[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            } else {
                // move an empty center onto the worst-fit point
                let far = data
                    .rows()
                    .enumerate()
                    .map(|(i, x)| (i, nearest(x, &centers).1))
                    .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
                    .0;
                centers[k] = data.row(far).to_vec();
            }
        }
    }

    let mut counts = vec![0usize; components];
    let mut variances = vec![vec![0.0; dim]; components];
    for (x, &k) in data.rows().zip(&assignment) {
        counts[k] += 1;
        for ((s, v), c) in variances[k].iter_mut().zip(x).zip(&centers[k]) {
            *s += (v - c) * (v - c);
        }
    }
    for (var, &count) in variances.iter_mut().zip(&counts) {
        for s in var.iter_mut() {
            *s = if count > 0 { *s / count as f64 } else { 0.0 }.max(cov_floor);
        }
    }
    let weights = counts.iter().map(|&c| c as f64 / n as f64).collect();
    GmmModel::new(weights, centers, variances)
}

/// Output of [`em_fit`]: the selected model and its log-likelihood trace.
#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub model: GmmModel,
    /// Total data log-likelihood before each M-step; the last entry belongs
    /// to `model`.
    pub trace: Vec<f64>,
    pub reseeded: bool,
}

impl EmFit {
    pub fn final_log_likelihood(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }
}

enum MStep {
    Updated(GmmModel),
    Collapsed(usize),
}

/// Runs EM from `restarts` k-means seedings and keeps the run with the
/// highest final log-likelihood.
pub fn em_fit(data: &ObservationSet, config: &EmConfig) -> Result<EmFit, GmmError> {
    em_fit_observed(data, config, &mut |_| {})
}

/// As [`em_fit`], invoking `observer` on every intermediate model.
pub fn em_fit_observed(
    data: &ObservationSet,
    config: &EmConfig,
    observer: &mut dyn FnMut(&GmmModel),
) -> Result<EmFit, GmmError> {
    config.validate()?;
    if data.is_empty() {
        return Err(GmmError::EmptyObservationSet);
    }
    let mut best: Option<EmFit> = None;
    let mut last_err = None;
    for r in 0..config.restarts {
        let seed = config.seed.wrapping_add(r as u64);
        let init = kmeans_init(data, config.components, seed, config.cov_floor)?;
        match run_em(data, init, config, observer) {
            Ok(fit) => {
                if best
                    .as_ref()
                    .is_none_or(|b| fit.final_log_likelihood() > b.final_log_likelihood())
                {
                    best = Some(fit);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.expect("at least one restart ran"))
}

/// Continues EM from an explicit starting model.
pub fn em_refine(
    data: &ObservationSet,
    init: GmmModel,
    config: &EmConfig,
) -> Result<EmFit, GmmError> {
    config.validate()?;
    if data.is_empty() {
        return Err(GmmError::EmptyObservationSet);
    }
    if data.dim() != init.dim() {
        return Err(GmmError::DimensionMismatch {
            expected: init.dim(),
            actual: data.dim(),
        });
    }
    run_em(data, init, config, &mut |_| {})
}

fn run_em(
    data: &ObservationSet,
    init: GmmModel,
    config: &EmConfig,
    observer: &mut dyn FnMut(&GmmModel),
) -> Result<EmFit, GmmError> {
    let n = data.len();
    let m = init.num_components();
    if n < m {
        return Err(GmmError::TooFewObservations {
            observations: n,
            components: m,
        });
    }
    let mut model = init;
    let mut resp = vec![0.0; n * m];
    let mut point_ll = vec![0.0; n];
    let mut trace = Vec::new();
    let mut reseeded = false;
    let mut converged = false;

    for _ in 0..config.max_iters {
        let ll = e_step(&model, data, &mut resp, &mut point_ll);
        trace.push(ll);
        if let [.., prev, cur] = trace[..] {
            if cur - prev < config.tol * prev.abs() {
                converged = true;
                break;
            }
        }
        match m_step(data, &resp, m, config.cov_floor) {
            MStep::Updated(next) => model = next,
            MStep::Collapsed(k) => {
                if reseeded {
                    return Err(GmmError::NumericalCollapse(k));
                }
                reseeded = true;
                model = reseed_component(&model, k, data, &point_ll, config.cov_floor);
                // the ascent restarts from the re-seeded model
                trace.clear();
            }
        }
        observer(&model);
    }
    if !converged {
        trace.push(e_step(&model, data, &mut resp, &mut point_ll));
    }
    Ok(EmFit {
        model,
        trace,
        reseeded,
    })
}

/// Writes responsibilities row-major into `resp` and returns the total
/// log-likelihood summed in row order.
fn e_step(model: &GmmModel, data: &ObservationSet, resp: &mut [f64], point_ll: &mut [f64]) -> f64 {
    let m = model.num_components();
    let mut total = 0.0;
    for (i, x) in data.rows().enumerate() {
        let row = &mut resp[i * m..(i + 1) * m];
        model.joint_log_densities(x, row);
        let lse = log_sum_exp(row);
        for r in row.iter_mut() {
            *r = (*r - lse).exp();
        }
        point_ll[i] = lse;
        total += lse;
    }
    total
}

fn m_step(data: &ObservationSet, resp: &[f64], m: usize, floor: f64) -> MStep {
    let n = data.len();
    let dim = data.dim();
    let mut mass = vec![0.0; m];
    let mut means = vec![vec![0.0; dim]; m];
    for (i, x) in data.rows().enumerate() {
        for k in 0..m {
            let g = resp[i * m + k];
            mass[k] += g;
            for (s, v) in means[k].iter_mut().zip(x) {
                *s += g * v;
            }
        }
    }
    if let Some(k) = mass
        .iter()
        .position(|&nk| nk.is_nan() || nk < f64::MIN_POSITIVE)
    {
        return MStep::Collapsed(k);
    }
    for (mean, nk) in means.iter_mut().zip(&mass) {
        mean.iter_mut().for_each(|s| *s /= nk);
    }
    let mut variances = vec![vec![0.0; dim]; m];
    for (i, x) in data.rows().enumerate() {
        for k in 0..m {
            let g = resp[i * m + k];
            for ((s, v), mu) in variances[k].iter_mut().zip(x).zip(&means[k]) {
                *s += g * (v - mu) * (v - mu);
            }
        }
    }
    for (var, nk) in variances.iter_mut().zip(&mass) {
        var.iter_mut().for_each(|s| *s = (*s / nk).max(floor));
    }
    let total: f64 = mass.iter().sum();
    let weights = mass.iter().map(|nk| nk / total).collect();
    debug_assert!((total - n as f64).abs() < 1e-6 * n as f64);
    MStep::Updated(GmmModel::new(weights, means, variances).expect("M-step preserves invariants"))
}

/// Re-centers component `k` on the observation the mixture explains worst,
/// with the pooled per-dimension data variance and weight `1/M`.
fn reseed_component(
    model: &GmmModel,
    k: usize,
    data: &ObservationSet,
    point_ll: &[f64],
    floor: f64,
) -> GmmModel {
    let worst = point_ll
        .iter()
        .enumerate()
        .fold(
            (0, f64::INFINITY),
            |a, (i, &v)| if v < a.1 { (i, v) } else { a },
        )
        .0;
    let n = data.len() as f64;
    let dim = data.dim();
    let mut mean = vec![0.0; dim];
    for x in data.rows() {
        mean.iter_mut().zip(x).for_each(|(s, v)| *s += v);
    }
    mean.iter_mut().for_each(|s| *s /= n);
    let mut var = vec![0.0; dim];
    for x in data.rows() {
        var.iter_mut()
            .zip(x.iter().zip(&mean))
            .for_each(|(s, (v, mu))| *s += (v - mu) * (v - mu));
    }
    var.iter_mut().for_each(|s| *s = (*s / n).max(floor));

    let m = model.num_components() as f64;
    let others: f64 = model
        .weights
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != k)
        .map(|(_, w)| w)
        .sum();
    let mut weights: Vec<f64> = model
        .weights
        .iter()
        .map(|w| {
            if others > 0.0 {
                w / others * (1.0 - 1.0 / m)
            } else {
                0.0
            }
        })
        .collect();
    weights[k] = if others > 0.0 { 1.0 / m } else { 1.0 };
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let mut means = model.means.clone();
    let mut variances = model.variances.clone();
    means[k] = data.row(worst).to_vec();
    variances[k] = var;
    GmmModel::new(weights, means, variances).expect("re-seeded model is valid")
}

/// Average log-likelihood under `client`, minus the average under
/// `background` when given.
pub fn match_score(
    client: &GmmModel,
    background: Option<&GmmModel>,
    obs: &ObservationSet,
) -> Result<f64, GmmError> {
    if obs.is_empty() {
        return Err(GmmError::EmptyObservationSet);
    }
    let n = obs.len() as f64;
    let client_mean = client.total_log_likelihood(obs)? / n;
    match background {
        Some(bg) => Ok(client_mean - bg.total_log_likelihood(obs)? / n),
        None => Ok(client_mean),
    }
}

/// Closed-form maximum-likelihood Gaussian (mean, population variance).
pub fn single_gaussian_ml(data: &ObservationSet) -> (Vec<f64>, Vec<f64>) {
    let n = data.len() as f64;
    let mut mean = vec![0.0; data.dim()];
    for x in data.rows() {
        mean.iter_mut().zip(x).for_each(|(s, v)| *s += v);
    }
    mean.iter_mut().for_each(|s| *s /= n);
    let mut var = vec![0.0; data.dim()];
    for x in data.rows() {
        var.iter_mut()
            .zip(x.iter().zip(&mean))
            .for_each(|(s, (v, mu))| *s += (v - mu) * (v - mu));
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

/// Serialized form of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format_version: u32,
    pub modality: Modality,
    /// Subject identifier, or `"background"` for the modality-wide model.
    pub subject_id: String,
    #[serde(rename = "M")]
    pub components: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

pub const BACKGROUND_ID: &str = "background";

impl ModelDocument {
    pub fn from_model(model: &GmmModel, modality: Modality, subject_id: &str) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            modality,
            subject_id: subject_id.to_string(),
            components: model.num_components(),
            weights: model.weights.clone(),
            means: model.means.clone(),
            variances: model.variances.clone(),
        }
    }

    /// Checks the version and every model invariant.
    pub fn to_model(&self) -> Result<GmmModel, GmmError> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(GmmError::InvalidModel(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        if self.components != self.weights.len() {
            return Err(GmmError::InvalidModel(format!(
                "M = {} but {} weights",
                self.components,
                self.weights.len()
            )));
        }
        GmmModel::new(
            self.weights.clone(),
            self.means.clone(),
            self.variances.clone(),
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model document serializes")
    }

    pub fn from_json(text: &str) -> Result<(Self, GmmModel), GmmError> {
        let doc: ModelDocument = serde_json::from_str(text)
            .map_err(|e| GmmError::InvalidModel(format!("bad model JSON: {e}")))?;
        let model = doc.to_model()?;
        Ok((doc, model))
    }
}

/// Standard normal log-density, used by tests and diagnostics.
pub fn std_normal_log_pdf(x: f64) -> f64 {
    -0.5 * x * x - 0.5 * (2.0 * PI).ln()
}
