mod common;

use common::*;
use mbfusion::gmm::{
    em_fit, em_fit_observed, em_refine, match_score, single_gaussian_ml, EmConfig, GmmModel,
};
use mbfusion::observation::ObservationSet;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn config(components: usize, seed: u64) -> EmConfig {
    EmConfig {
        components,
        seed,
        ..EmConfig::default()
    }
}

fn assert_model_invariants(m: &GmmModel, floor: f64) {
    let total: f64 = m.weights().iter().sum();
    assert!((total - 1.0).abs() <= 1e-9, "weights sum to {total}");
    assert!(m.weights().iter().all(|&w| w >= 0.0));
    for v in m.variances().iter().flatten() {
        assert!(*v >= floor, "variance {v} below floor");
    }
}

#[test]
fn trace_is_nondecreasing_and_invariants_hold_every_iteration() {
    let mut r = rng(21);
    for trial in 0..60 {
        let dim = 1 + trial % 5;
        let m = 1 + trial % 4;
        let data = random_mixture_data(dim, r.random_range(1..=4), 60 + 10 * m, &mut r);
        let cfg = config(m, trial as u64);
        let mut checked = 0;
        let fit = em_fit_observed(&data, &cfg, &mut |model| {
            assert_model_invariants(model, cfg.cov_floor);
            checked += 1;
        })
        .unwrap();
        assert!(checked > 0);
        for w in fit.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "trace decreased: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn single_component_matches_closed_form() {
    let mut r = rng(22);
    for trial in 0..40 {
        let dim = 1 + trial % 5;
        let data = random_mixture_data(dim, 2, 50, &mut r);
        let fit = em_fit(&data, &config(1, trial as u64)).unwrap();
        let (mean, var) = single_gaussian_ml(&data);
        for d in 0..dim {
            assert!((fit.model.means()[0][d] - mean[d]).abs() <= 1e-9);
            assert!((fit.model.variances()[0][d] - var[d].max(1e-4)).abs() <= 1e-9);
        }
        assert_eq!(fit.model.weights(), &[1.0]);
    }
}

#[test]
fn recovers_two_well_separated_components() {
    let data = bimodal_samples(2000, 5);
    let fit = em_fit(&data, &config(2, 5)).unwrap();
    let mut comps: Vec<(f64, f64)> = fit
        .model
        .means()
        .iter()
        .zip(fit.model.weights())
        .map(|(m, &w)| (m[0], w))
        .collect();
    comps.sort_by(|a, b| a.0.total_cmp(&b.0));
    assert!((comps[0].0 + 5.0).abs() <= 0.2, "{comps:?}");
    assert!((comps[1].0 - 5.0).abs() <= 0.2, "{comps:?}");
    for (_, w) in comps {
        assert!((w - 0.5).abs() <= 0.05);
    }
}

#[test]
fn partition_example_recovers_cluster_means() {
    let data = ObservationSet::from_scalars(&[0.0, 0.1, 10.0, 10.1]);
    let fit = em_fit(&data, &config(2, 0)).unwrap();
    let mut means: Vec<f64> = fit.model.means().iter().map(|m| m[0]).collect();
    means.sort_by(f64::total_cmp);
    assert!((means[0] - 0.05).abs() < 1e-6 && (means[1] - 10.05).abs() < 1e-6);
    for w in fit.model.weights() {
        assert!((w - 0.5).abs() < 1e-9);
    }
}

#[test]
fn fitted_model_is_a_fixed_point() {
    let data = bimodal_samples(500, 9);
    let tight = EmConfig {
        tol: 1e-15,
        max_iters: 2000,
        ..config(2, 9)
    };
    let fit = em_fit(&data, &tight).unwrap();
    let again = em_refine(&data, fit.model.clone(), &tight).unwrap();
    for w in again.trace.windows(2) {
        assert!((w[1] - w[0]).abs() <= 1e-9, "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn match_score_is_positive_for_client_data() {
    let client = GmmModel::new(vec![1.0], vec![vec![0.0, 0.0]], vec![vec![1.0, 1.0]]).unwrap();
    let background = GmmModel::new(vec![1.0], vec![vec![6.0, -6.0]], vec![vec![1.0, 1.0]]).unwrap();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let positive = (0..100u64)
        .filter(|&seed| {
            let mut r = rng(seed);
            let rows: Vec<[f64; 2]> = (0..20)
                .map(|_| [normal.sample(&mut r), normal.sample(&mut r)])
                .collect();
            let obs = ObservationSet::from_rows(&rows).unwrap();
            match_score(&client, Some(&background), &obs).unwrap() > 0.0
        })
        .count();
    assert!(positive >= 99, "{positive}/100");
}

#[test]
fn fits_are_deterministic() {
    let mut r = rng(23);
    let data = random_mixture_data(3, 3, 200, &mut r);
    let a = em_fit(&data, &config(3, 77)).unwrap();
    let b = em_fit(&data, &config(3, 77)).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.trace, b.trace);
}

fn arb_model() -> impl Strategy<Value = GmmModel> {
    (1usize..=4, 1usize..=3).prop_flat_map(|(m, d)| {
        (
            prop::collection::vec(0.05f64..1.0, m),
            prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), m),
            prop::collection::vec(prop::collection::vec(0.1f64..4.0, d), m),
        )
            .prop_map(|(w, mu, var)| {
                let total: f64 = w.iter().sum();
                GmmModel::new(w.iter().map(|x| x / total).collect(), mu, var).unwrap()
            })
    })
}

proptest! {
    #[test]
    fn responsibilities_sum_to_one(model in arb_model(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let x: Vec<f64> = (0..model.dim()).map(|_| r.random_range(-20.0..20.0)).collect();
        let resp = model.responsibilities(&x).unwrap();
        prop_assert!((resp.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(resp.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn log_likelihood_ignores_component_order(model in arb_model(), shift in 0usize..4, seed in any::<u64>()) {
        let m = model.num_components();
        let order: Vec<usize> = (0..m).map(|i| (i + shift) % m).collect();
        let permuted = GmmModel::new(
            order.iter().map(|&i| model.weights()[i]).collect(),
            order.iter().map(|&i| model.means()[i].clone()).collect(),
            order.iter().map(|&i| model.variances()[i].clone()).collect(),
        ).unwrap();
        let mut r = rng(seed);
        let x: Vec<f64> = (0..model.dim()).map(|_| r.random_range(-10.0..10.0)).collect();
        let (a, b) = (model.log_likelihood(&x).unwrap(), permuted.log_likelihood(&x).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn identical_client_and_background_score_zero(model in arb_model(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..model.dim()).map(|_| r.random_range(-10.0..10.0)).collect())
            .collect();
        let obs = ObservationSet::from_rows(&rows).unwrap();
        prop_assert_eq!(match_score(&model, Some(&model), &obs).unwrap(), 0.0);
    }
}
