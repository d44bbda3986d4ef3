//! Monte Carlo components checked against independent closed forms.

use nalgebra::{DMatrix, DVector};
use posoc::experiments::{evaluate, PairedComparison};
use posoc::filter::{filter_path, kalman_predict, kalman_update_with_loglik, GaussianBelief, ParticleEnsemble};
use posoc::lqg::{fosoc_value, riccati_for, separation_policy, RICCATI_DT};
use posoc::model::{make_lqg_problem, uniform_obs_times, LqgSpec};
use posoc::pmp::{train, TrainConfig};
use posoc::regression::{design_matrix, fit_standardized, FeatureBasis};
use posoc::sim::{rollout, ConstantPolicy, RngStream, TimeGrid};
use posoc::Execution;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const A: f64 = -0.25;
const SIG: f64 = 0.5;
const Q: f64 = 2.0;
const R: f64 = 2.0;
const QT: f64 = 2.0;
const EPS: f64 = 0.1;

fn table1(var0: f64) -> LqgSpec {
    let mut s = LqgSpec::scalar(A, 1.0, 1.0, SIG, Q, R, QT, 0.0, var0);
    s.fixed_eps = Some(EPS);
    s
}

/// Scalar Riccati solution at time-to-go `tau`.
fn s_of(tau: f64) -> f64 {
    let g = 1.0 / R;
    let root = (A * A + g * Q).sqrt();
    let (sp, sm) = ((A + root) / g, (A - root) / g);
    let u = (QT - sp) / (QT - sm) * (-2.0 * root * tau).exp();
    (sp - sm * u) / (1.0 - u)
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn full_information(var0: f64) -> f64 {
    0.5 * s_of(1.0) * var0 + simpson(|t| 0.5 * SIG * SIG * s_of(1.0 - t), 0.0, 1.0, 2000)
}

/// Separation-principle cost with `m0 = 0`: full-information value plus
/// `½∫ S²B²/R · P dt` along the filter covariance `P`.
fn separation_value(var0: f64, obs: &[f64]) -> f64 {
    let fo = full_information(var0);
    let c = SIG * SIG / (2.0 * A);
    let mut p = var0;
    let mut t0 = 0.0;
    let mut gap = 0.0;
    for &tn in obs.iter().chain(std::iter::once(&1.0)) {
        let p_at = |t: f64| (p + c) * (2.0 * A * (t - t0)).exp() - c;
        gap += simpson(|t| 0.5 * s_of(1.0 - t).powi(2) / R * p_at(t), t0, tn, 2000);
        p = p_at(tn);
        if tn < 1.0 {
            p = p * EPS * EPS / (p + EPS * EPS);
        }
        t0 = tn;
    }
    fo + gap
}

#[test]
fn full_information_value_matches_closed_form() {
    for var0 in [0.0, 1.0, 2.5] {
        let spec = table1(var0);
        let v = fosoc_value(&spec, &riccati_for(&spec, RICCATI_DT).unwrap());
        let exact = full_information(var0);
        assert!((v - exact).abs() < 1e-7, "{v} vs {exact}");
    }
}

#[test]
fn separation_mc_matches_closed_form_and_decreases_with_observations() {
    let spec = table1(1.0);
    let ricc = riccati_for(&spec, RICCATI_DT).unwrap();
    let dt = 0.005;
    let m = 20_000;
    let mut prev: Option<(f64, Vec<f64>)> = None;
    for n in [1, 3, 9] {
        let obs = uniform_obs_times(n, 1.0);
        let p = make_lqg_problem(&spec, &obs).unwrap();
        let pol = separation_policy(&spec, &ricc, &obs, dt).unwrap();
        let ev = evaluate(&p, &pol, m, dt, 17, Execution::Parallel).unwrap();
        let exact = separation_value(1.0, &obs);
        // Monte Carlo error plus O(dt) time-discretisation bias
        assert!((ev.estimate.mean - exact).abs() <= 3.0 * ev.estimate.ci95 / 1.96 + 0.01, "N_o={n}: {} vs {exact}", ev.estimate.mean);
        if let Some((prev_exact, prev_totals)) = prev {
            assert!(exact < prev_exact);
            let cmp = PairedComparison::new("", "cost", "fewer", "more", &prev_totals, &ev.totals);
            assert!(cmp.significantly_lower(), "N_o={n}: {cmp:?}");
        }
        prev = Some((exact, ev.totals));
    }
}

#[test]
fn trained_policy_reaches_separation_benchmark() {
    let spec = table1(1.0);
    let obs = [0.5];
    let p = make_lqg_problem(&spec, &obs).unwrap();
    let dt = 0.02;
    let cfg = TrainConfig { m_train: 500, dt, seed: 4, ..TrainConfig::default() };
    let trained = train(&p, &cfg, Execution::Parallel).unwrap();
    assert!(trained.history.converged);
    let ricc = riccati_for(&spec, RICCATI_DT).unwrap();
    let sep = separation_policy(&spec, &ricc, &obs, dt).unwrap();
    let a = evaluate(&p, &sep, 20_000, dt, 9, Execution::Parallel).unwrap();
    let b = evaluate(&p, &trained.policy, 20_000, dt, 9, Execution::Parallel).unwrap();
    let cmp = PairedComparison::new("", "cost", "separation", "trained", &a.totals, &b.totals);
    assert!(cmp.mean_difference.abs() <= 0.02 + cmp.ci95, "{cmp:?}");
    let zero = evaluate(&p, &ConstantPolicy::zero(&p), 20_000, dt, 9, Execution::Parallel).unwrap();
    assert!(PairedComparison::new("", "cost", "zero", "trained", &zero.totals, &b.totals).significantly_lower());
}

#[test]
fn predictive_likelihood_matches_kalman_innovations() {
    let spec = table1(1.0);
    let obs = [0.25, 0.5, 0.75];
    let p = make_lqg_problem(&spec, &obs).unwrap();
    let dt = 0.005;
    let zero = ConstantPolicy::zero(&p);
    let truth = rollout(&p, &zero, &TimeGrid::for_problem(&p, dt).unwrap(), RngStream::new(3, 0)).unwrap();
    let e = ParticleEnsemble::sample_initial(&p, 100_000, 8);
    let (_, log_l) = filter_path(&p, e, &truth.observations, &truth.controls_beta, |_, _, _| DVector::zeros(1), dt, 9, Execution::Parallel).unwrap();

    let one = DMatrix::from_element(1, 1, 1.0);
    let mut kb = GaussianBelief::new(spec.m0.clone(), spec.sigma0.clone());
    let mut t = 0.0;
    let mut kalman = 0.0;
    for (n, &tn) in obs.iter().enumerate() {
        kb = kalman_predict(&kb, t, tn, &spec.a, &spec.b, &(&one * SIG * SIG), |_| DVector::zeros(1), 1e-4);
        let (post, l) = kalman_update_with_loglik(&kb, &truth.observations[n], &one, &(&one * EPS * EPS)).unwrap();
        kb = post;
        kalman += l;
        t = tn;
    }
    let particle: f64 = log_l.iter().sum();
    assert!(((particle - kalman).exp() - 1.0).abs() <= 1e-2, "particle {particle} kalman {kalman}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    #[test]
    fn particle_posterior_tracks_kalman(a in -1.0f64..0.5, sig in 0.2f64..1.0, eps in 0.2f64..1.0, var0 in 0.2f64..2.0, seed in 0u64..1000) {
        let mut spec = LqgSpec::scalar(a, 1.0, 1.0, sig, 1.0, 1.0, 1.0, 0.3, var0);
        spec.fixed_eps = Some(eps);
        let obs = [0.3, 0.6, 0.9];
        let p = make_lqg_problem(&spec, &obs).unwrap();
        let dt = 0.01;
        let zero = ConstantPolicy::zero(&p);
        let truth = rollout(&p, &zero, &TimeGrid::for_problem(&p, dt).unwrap(), RngStream::new(seed, 0)).unwrap();
        let m = 20_000;
        let e = ParticleEnsemble::sample_initial(&p, m, seed + 1);
        let (post, _) = filter_path(&p, e, &truth.observations, &truth.controls_beta, |_, _, _| DVector::zeros(1), dt, seed + 2, Execution::Parallel).unwrap();
        let one = DMatrix::from_element(1, 1, 1.0);
        let mut kb = GaussianBelief::new(spec.m0.clone(), spec.sigma0.clone());
        let mut t = 0.0;
        for (n, &tn) in obs.iter().enumerate() {
            // Euler–Maruyama moments at this step size differ from the ODE by O(dt)
            kb = kalman_predict(&kb, t, tn, &spec.a, &spec.b, &(&one * sig * sig), |_| DVector::zeros(1), 1e-4);
            kb = kalman_update_with_loglik(&kb, &truth.observations[n], &one, &(&one * eps * eps)).unwrap().0;
            t = tn;
        }
        let tol = 5.0 / (m as f64).sqrt() + 0.01 * dt.sqrt();
        prop_assert!((post.mean()[0] - kb.mean[0]).abs() <= tol);
        prop_assert!((post.covariance()[(0, 0)] - kb.cov[(0, 0)]).abs() <= tol);
    }
}

#[test]
fn regression_r2_matches_signal_to_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let basis = FeatureBasis::new(2, 1, 1, true);
    let m = 20_000;
    let noise = 0.5;
    let inputs = DMatrix::from_fn(m, 2, |_, _| rng.random_range(-2.0..2.0));
    let signal = |x: f64, z: f64| 1.0 + 0.5 * x - z + 0.8 * x * x + 0.3 * x * z;
    let clean: Vec<f64> = (0..m).map(|i| signal(inputs[(i, 0)], inputs[(i, 1)])).collect();
    let y = DMatrix::from_fn(m, 1, |i, _| clean[i] + noise * rng.sample::<f64, _>(StandardNormal));
    let phi = design_matrix(&basis, &inputs);
    let theta = fit_standardized(&phi, &y, 0.0).unwrap();
    let fitted = &phi * &theta;
    let mean = y.mean();
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = (&y - &fitted).iter().map(|v| v * v).sum();
    let r2 = 1.0 - ss_res / ss_tot;
    let cm = clean.iter().sum::<f64>() / m as f64;
    let var_signal = clean.iter().map(|v| (v - cm).powi(2)).sum::<f64>() / m as f64;
    let expected = var_signal / (var_signal + noise * noise);
    assert!((r2 - expected).abs() < 0.01, "R² {r2} vs {expected}");
}
