#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use mbfusion::ds::{Frame, MassFunction, Subset};
use mbfusion::observation::ObservationSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn frame_of_size(n: usize) -> Arc<Frame> {
    Arc::new(Frame::new((0..n).map(|i| format!("h{i}"))).unwrap())
}

/// Random mass over a random selection of nonempty subsets.
pub fn random_mass(frame: &Arc<Frame>, rng: &mut ChaCha8Rng) -> MassFunction {
    let n = frame.len();
    let all: Vec<u32> = (1..(1u32 << n)).collect();
    let dense = rng.random_bool(0.5);
    let mut raw: Vec<(u32, f64)> = Vec::new();
    for &a in &all {
        if dense || rng.random_bool(0.4) {
            raw.push((a, rng.random_range(0.01..1.0)));
        }
    }
    if raw.is_empty() {
        raw.push((all[rng.random_range(0..all.len())], 1.0));
    }
    let total: f64 = raw.iter().map(|(_, v)| v).sum();
    MassFunction::new(
        Arc::clone(frame),
        raw.into_iter().map(|(a, v)| (Subset(a), v / total)),
    )
    .unwrap()
}

pub fn as_map(m: &MassFunction) -> BTreeMap<u32, f64> {
    m.focal_elements().map(|(a, v)| (a.0, v)).collect()
}

/// Dempster's rule by enumerating every pair of subsets of the frame,
/// including those with zero mass.
pub fn brute_force_dempster(
    n: usize,
    m1: &BTreeMap<u32, f64>,
    m2: &BTreeMap<u32, f64>,
) -> Option<(BTreeMap<u32, f64>, f64)> {
    let get = |m: &BTreeMap<u32, f64>, a: u32| m.get(&a).copied().unwrap_or(0.0);
    let mut joint = vec![0.0; 1 << n];
    for b in 0..(1u32 << n) {
        for c in 0..(1u32 << n) {
            joint[(b & c) as usize] += get(m1, b) * get(m2, c);
        }
    }
    let k = joint[0];
    if 1.0 - k <= 1e-12 {
        return None;
    }
    let out = (1..(1u32 << n))
        .filter(|&a| joint[a as usize] > 0.0)
        .map(|a| (a, joint[a as usize] / (1.0 - k)))
        .collect();
    Some((out, k))
}

pub fn max_abs_diff(a: &BTreeMap<u32, f64>, b: &BTreeMap<u32, f64>) -> f64 {
    let keys: std::collections::BTreeSet<u32> = a.keys().chain(b.keys()).copied().collect();
    keys.iter()
        .map(|k| (a.get(k).unwrap_or(&0.0) - b.get(k).unwrap_or(&0.0)).abs())
        .fold(0.0, f64::max)
}

/// Dataset drawn from a random diagonal mixture.
pub fn random_mixture_data(
    dim: usize,
    components: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> ObservationSet {
    let centers: Vec<Vec<f64>> = (0..components)
        .map(|_| (0..dim).map(|_| rng.random_range(-6.0..6.0)).collect())
        .collect();
    let scales: Vec<Vec<f64>> = (0..components)
        .map(|_| (0..dim).map(|_| rng.random_range(0.3..2.0)).collect())
        .collect();
    let std = Normal::new(0.0, 1.0).unwrap();
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let c = rng.random_range(0..components);
        for d in 0..dim {
            data.push(centers[c][d] + scales[c][d] * std.sample(rng));
        }
    }
    ObservationSet::new(dim, 1, data).unwrap()
}

/// Samples of `0.5·N(-5,1) + 0.5·N(5,1)`.
pub fn bimodal_samples(n: usize, seed: u64) -> ObservationSet {
    let mut rng = rng(seed);
    let std = Normal::new(0.0, 1.0).unwrap();
    let values: Vec<f64> = (0..n)
        .map(|_| {
            let mu = if rng.random_bool(0.5) { -5.0 } else { 5.0 };
            mu + std.sample(&mut rng)
        })
        .collect();
    ObservationSet::from_scalars(&values)
}

/// Plane of a sinusoid with wavevector angle `theta` and period `period`.
pub fn grating(width: usize, height: usize, theta: f64, period: f64) -> Vec<f64> {
    let (c, s) = (theta.cos(), theta.sin());
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let t = (x as f64 * c + y as f64 * s) * 2.0 * PI / period;
            out.push(128.0 + 100.0 * t.sin());
        }
    }
    out
}
