//! Cross-module checks on the public API: samplers feeding the subspace
//! builders, reduced posteriors against closed forms, and the scalar
//! genericity of the problem constructors.

use alis::bip::{whiten_problem, ReducedSpace, WhitenTransform};
use alis::linalg::{self, column_mean};
use alis::metrics::{hellinger2_gaussian, w2_gaussian_sq};
use alis::problems::{
    linear_posterior, linear_reduced_posterior, linear_tempered_posterior, make_linear_problem, GaussianPosterior,
    LinearProblemSpec,
};
use alis::rng;
use alis::samplers::{run_tempered_eki, EkiSchedule};
use alis::subspace::{build_space, ReductionMethod, SubspaceOptions};
use alis::{Matrix, Vector};
use proptest::prelude::*;

fn spd(d: usize, seed: u64) -> Matrix {
    let l = rng::normal_matrix::<f64>(d, d, &mut rng::stream(seed, 0));
    &l * l.transpose() + Matrix::identity(d, d) * 0.5
}

fn gaussian(d: usize, seed: u64) -> GaussianPosterior<f64> {
    let mean = rng::normal_vector::<f64>(d, &mut rng::stream(seed, 1));
    GaussianPosterior::new(mean, spd(d, seed)).unwrap()
}

#[test]
fn eki_mean_tracks_linear_posterior() {
    let lp = make_linear_problem::<f64>(&LinearProblemSpec::new(6, 4, 3)).unwrap();
    let mut r = rng::stream(5, 0);
    let ens = run_tempered_eki(&lp.problem, 4000, &[0.5, 1.0], EkiSchedule::default(), &mut r).unwrap();
    for alpha in [0.5, 1.0] {
        let exact = linear_tempered_posterior(&lp.problem, &lp.a, alpha).unwrap();
        let m = column_mean(&ens.ensembles[ens.position(alpha).unwrap()]);
        for i in 0..6 {
            let z = (m[i] - exact.mean[i]) / exact.cov[(i, i)].sqrt();
            // Standard error of the ensemble mean is about 1/sqrt(4000).
            assert!(z.abs() < 0.1, "alpha {alpha}, component {i}: z = {z}");
        }
    }
}

#[test]
fn full_rank_spaces_from_eki_recover_the_posterior() {
    let lp = make_linear_problem::<f64>(&LinearProblemSpec::new(8, 6, 7)).unwrap();
    let mut r = rng::stream(8, 0);
    let ens = run_tempered_eki(&lp.problem, 50, &[0.5, 1.0], EkiSchedule::default(), &mut r).unwrap();
    let exact = linear_posterior(&lp.problem, &lp.a).unwrap();
    for method in [
        ReductionMethod::Lis { alpha: 0.0 },
        ReductionMethod::Lis { alpha: 1.0 },
        ReductionMethod::Accumulated { alpha_min: 0.0, alpha_max: 1.0 },
    ] {
        let space = build_space(&lp.problem, &ens, &method, 8, 6, SubspaceOptions::default(), &mut r).unwrap();
        let approx = linear_reduced_posterior(&lp.problem, &lp.a, &space.original).unwrap();
        let w2 = w2_gaussian_sq(&approx, &exact).unwrap();
        assert!(w2 < 1e-10, "{}: {w2}", method.label());
    }
}

#[test]
fn empty_space_returns_the_prior() {
    let lp = make_linear_problem::<f64>(&LinearProblemSpec::new(6, 6, 2)).unwrap();
    let p = &lp.problem;
    let prior = GaussianPosterior::new(p.prior_mean().clone(), p.gamma0().clone()).unwrap();
    let empty = ReducedSpace::new(Matrix::zeros(6, 0), Matrix::zeros(6, 0), false).unwrap();
    let reduced = linear_reduced_posterior(p, &lp.a, &empty).unwrap();
    assert!(w2_gaussian_sq(&reduced, &prior).unwrap() < 1e-20);
}

#[test]
fn whitened_problem_has_identity_covariances() {
    let lp = make_linear_problem::<f64>(&LinearProblemSpec::new(5, 3, 1)).unwrap();
    let (wp, t) = whiten_problem(&lp.problem).unwrap();
    assert_eq!(wp.gamma0(), &Matrix::identity(5, 5));
    assert_eq!(wp.gamma(), &Matrix::identity(3, 3));
    let mut r = rng::stream(1, 0);
    let x = lp.problem.sample_prior(&mut r);
    let g = lp.problem.evaluate_clean(&x, &mut r).unwrap();
    let gw = wp.evaluate_clean(&t.whiten_input(&x), &mut r).unwrap();
    assert!((gw - t.whiten_output(&g)).amax() < 1e-10);
}

#[test]
fn single_precision_agrees_with_double() {
    let spec = LinearProblemSpec::new(4, 3, 6);
    let p32 = make_linear_problem::<f32>(&spec).unwrap();
    let p64 = make_linear_problem::<f64>(&spec).unwrap();
    let a = linear_posterior(&p32.problem, &p32.a).unwrap();
    let b = linear_posterior(&p64.problem, &p64.a).unwrap();
    for i in 0..4 {
        let scale = b.cov[(i, i)].sqrt();
        assert!((f64::from(a.mean[i]) - b.mean[i]).abs() < 1e-3 * scale.max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distances_vanish_on_identical_arguments(d in 1usize..6, seed in 0u64..10_000) {
        let g = gaussian(d, seed);
        prop_assert!(w2_gaussian_sq(&g, &g).unwrap().abs() < 1e-9);
        prop_assert!(hellinger2_gaussian(&g, &g).unwrap().abs() < 1e-12);
    }

    #[test]
    fn distances_are_symmetric_and_bounded(d in 1usize..6, s1 in 0u64..10_000, s2 in 0u64..10_000) {
        let (a, b) = (gaussian(d, s1), gaussian(d, s2 + 10_000));
        let (w_ab, w_ba) = (w2_gaussian_sq(&a, &b).unwrap(), w2_gaussian_sq(&b, &a).unwrap());
        prop_assert!(w_ab >= -1e-9);
        prop_assert!((w_ab - w_ba).abs() <= 1e-8 * w_ab.max(1.0));
        let (h_ab, h_ba) = (hellinger2_gaussian(&a, &b).unwrap(), hellinger2_gaussian(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&h_ab));
        prop_assert!((h_ab - h_ba).abs() < 1e-12);
    }

    #[test]
    fn whitening_round_trips(d in 1usize..7, seed in 0u64..10_000) {
        let mean = rng::normal_vector::<f64>(d, &mut rng::stream(seed, 2));
        let t = WhitenTransform::new(&spd(d, seed), &spd(d, seed + 1), mean).unwrap();
        let x: Vector = rng::normal_vector(d, &mut rng::stream(seed, 3));
        prop_assert!((t.unwhiten_input(&t.whiten_input(&x)) - &x).amax() < 1e-9 * x.amax().max(1.0));
        prop_assert!((t.unwhiten_output(&t.whiten_output(&x)) - &x).amax() < 1e-9 * x.amax().max(1.0));
    }

    #[test]
    fn unwhitened_bases_are_orthonormal(d in 2usize..8, k in 1usize..4, seed in 0u64..10_000) {
        let k = k.min(d);
        let t = WhitenTransform::new(&spd(d, seed), &Matrix::identity(1, 1), Vector::zeros(d)).unwrap();
        let basis = linalg::orthonormalize(&rng::normal_matrix::<f64>(d, k, &mut rng::stream(seed, 4))).unwrap();
        let u = alis::bip::unwhiten_basis(&basis, &t.input_fwd).unwrap();
        prop_assert!((u.transpose() * &u - Matrix::identity(k, k)).amax() < 1e-10);
    }
}
