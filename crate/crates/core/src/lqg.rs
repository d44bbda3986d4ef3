//! Linear-quadratic machinery: the backward control Riccati equation, the
//! fully observed optimal cost and the separation (Kalman + certainty
//! equivalence) controller used as the Table-style baseline.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::filter::{kalman_predict, GaussianBelief};
use crate::model::{AlphaSet, LqgSpec, WindowState};
use crate::sim::{Controller, Policy};

pub use crate::sim::evaluate_policy_mc;

/// Default step of the backward Riccati integration.
pub const RICCATI_DT: f64 = 1e-3;

/// Solution of `−Ṡ = AᵀS + SA − SBR⁻¹BᵀS + Q`, `S(T) = Q_T` on a uniform grid.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub times: Vec<f64>,
    pub s: Vec<DMatrix<f64>>,
    /// LQR gains `K(t) = R⁻¹BᵀS(t)`.
    pub gains: Vec<DMatrix<f64>>,
}

impl RiccatiSolution {
    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let n = self.times.len() - 1;
        let h = self.horizon() / n as f64;
        let pos = (t / h).clamp(0.0, n as f64);
        let k = (pos.floor() as usize).min(n.saturating_sub(1));
        (k, pos - k as f64)
    }

    /// Linear interpolation of `K` at `t`.
    pub fn gain_at(&self, t: f64) -> DMatrix<f64> {
        let (k, w) = self.locate(t);
        if self.gains.len() == 1 {
            return self.gains[0].clone();
        }
        &self.gains[k] * (1.0 - w) + &self.gains[k + 1] * w
    }

    /// Linear interpolation of `S` at `t`.
    pub fn s_at(&self, t: f64) -> DMatrix<f64> {
        let (k, w) = self.locate(t);
        if self.s.len() == 1 {
            return self.s[0].clone();
        }
        &self.s[k] * (1.0 - w) + &self.s[k + 1] * w
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Backward RK4 integration of the control Riccati equation from `T` to `0`.
pub fn riccati_solve(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    q_t: &DMatrix<f64>,
    horizon: f64,
    dt: f64,
) -> Result<RiccatiSolution> {
    if !(dt > 0.0) || !(horizon > 0.0) {
        return Err(Error::Domain(format!("need positive horizon and step, got T = {horizon}, dt = {dt}")));
    }
    let r_inv = r
        .clone()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Config("control weight R is singular".into()))?;
    let brb = b * &r_inv * b.transpose();
    let rhs = |s: &DMatrix<f64>| a.transpose() * s + s * a - s * &brb * s + q;

    let n = ((horizon / dt) - 1e-9).ceil().max(1.0) as usize;
    let h = horizon / n as f64;
    let mut s_rev = Vec::with_capacity(n + 1);
    let mut s = q_t.clone();
    s_rev.push(s.clone());
    for _ in 0..n {
        let k1 = rhs(&s);
        let k2 = rhs(&(&s + &k1 * (0.5 * h)));
        let k3 = rhs(&(&s + &k2 * (0.5 * h)));
        let k4 = rhs(&(&s + &k3 * h));
        s = symmetrize(&s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0));
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::LinearAlgebra("Riccati solution diverged".into()));
        }
        s_rev.push(s.clone());
    }
    s_rev.reverse();
    // the terminal node is Q_T exactly, not a symmetrised copy
    s_rev[n] = q_t.clone();
    let times = (0..=n).map(|k| if k == n { horizon } else { k as f64 * h }).collect();
    let k_of = r_inv * b.transpose();
    let gains = s_rev.iter().map(|s| &k_of * s).collect();
    Ok(RiccatiSolution { times, s: s_rev, gains })
}

/// Riccati solution for the matrices of `spec`.
pub fn riccati_for(spec: &LqgSpec, dt: f64) -> Result<RiccatiSolution> {
    riccati_solve(&spec.a, &spec.b, &spec.q, &spec.r, &spec.q_t, spec.horizon, dt)
}

/// Fully observed optimal expected cost
/// `½ m0ᵀS(0)m0 + ½ tr(S(0)Σ0) + ½ ∫ tr(σσᵀS(t)) dt`.
pub fn fosoc_value(spec: &LqgSpec, ricc: &RiccatiSolution) -> f64 {
    let s0 = &ricc.s[0];
    let ss = &spec.sigma * spec.sigma.transpose();
    let mut integral = 0.0;
    for k in 0..ricc.times.len() - 1 {
        let h = ricc.times[k + 1] - ricc.times[k];
        let f0 = ss.component_mul(&ricc.s[k]).sum();
        let f1 = ss.component_mul(&ricc.s[k + 1]).sum();
        integral += 0.5 * h * (f0 + f1);
    }
    0.5 * spec.m0.dot(&(s0 * &spec.m0)) + 0.5 * s0.component_mul(&spec.sigma0).sum() + 0.5 * integral
}

/// Certainty-equivalent controller `α = −K(t)x̂` with a Kalman filter for `x̂`.
///
/// The filter covariance and gain at each observation do not depend on the
/// data, so they are computed once; controllers only carry the mean.
#[derive(Debug, Clone)]
pub struct SeparationPolicy {
    ricc: RiccatiSolution,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    m0: DVector<f64>,
    beta: DVector<f64>,
    obs_times: Vec<f64>,
    /// Prior covariance just before each observation.
    prior_cov: Vec<DMatrix<f64>>,
    /// Kalman gain at each observation.
    filter_gain: Vec<DMatrix<f64>>,
    alpha_set: AlphaSet,
}

impl SeparationPolicy {
    pub fn gain_at(&self, t: f64) -> DMatrix<f64> {
        self.ricc.gain_at(t)
    }

    pub fn prior_covariances(&self) -> &[DMatrix<f64>] {
        &self.prior_cov
    }

    pub fn filter_gains(&self) -> &[DMatrix<f64>] {
        &self.filter_gain
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn with_alpha_set(mut self, set: AlphaSet) -> Self {
        self.alpha_set = set;
        self
    }
}

/// Builds the separation controller. Refused when the noise level is a decision
/// variable (`fixed_eps` unset): with controlled observations the optimal law is
/// not certainty equivalent.
pub fn separation_policy(spec: &LqgSpec, ricc: &RiccatiSolution, obs_times: &[f64], dt: f64) -> Result<SeparationPolicy> {
    let eps = spec.fixed_eps.ok_or_else(|| {
        Error::Config("separation controller requires a fixed observation noise level (fixed_eps)".into())
    })?;
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("observation noise level must be positive, got {eps}")));
    }
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("time step must be positive, got {dt}")));
    }
    spec.validate()?;
    crate::model::validate_obs_times(obs_times, spec.horizon)?;
    let dy = spec.c.nrows();
    let beta = DVector::from_element(dy, eps);
    let r_y = DMatrix::from_diagonal(&beta.map(|v| v * v));
    let noise = &spec.sigma * spec.sigma.transpose();
    let zero = DVector::zeros(spec.b.ncols());

    let mut belief = GaussianBelief::new(DVector::zeros(spec.a.nrows()), spec.sigma0.clone());
    let mut t = 0.0;
    let mut prior_cov = Vec::with_capacity(obs_times.len());
    let mut filter_gain = Vec::with_capacity(obs_times.len());
    for &tn in obs_times {
        belief = kalman_predict(&belief, t, tn, &spec.a, &spec.b, &noise, |_| zero.clone(), dt);
        let p = belief.cov.clone();
        let s = &spec.c * &p * spec.c.transpose() + &r_y;
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| Error::LinearAlgebra("singular innovation covariance".into()))?;
        let g = &p * spec.c.transpose() * s_inv;
        let n = p.nrows();
        let post = (DMatrix::identity(n, n) - &g * &spec.c) * &p;
        belief.cov = symmetrize(post);
        prior_cov.push(p);
        filter_gain.push(g);
        t = tn;
    }
    Ok(SeparationPolicy {
        ricc: ricc.clone(),
        a: spec.a.clone(),
        b: spec.b.clone(),
        c: spec.c.clone(),
        m0: spec.m0.clone(),
        beta,
        obs_times: obs_times.to_vec(),
        prior_cov,
        filter_gain,
        alpha_set: AlphaSet::Unbounded,
    })
}

struct SeparationController<'a> {
    policy: &'a SeparationPolicy,
    mean: DVector<f64>,
}

impl Controller for SeparationController<'_> {
    fn beta(&mut self, n: usize, _t: f64, _z: &WindowState) -> Result<DVector<f64>> {
        if n >= self.policy.obs_times.len() {
            return Err(Error::Policy(format!("observation index {n} outside the schedule")));
        }
        Ok(self.policy.beta.clone())
    }

    fn observe(&mut self, n: usize, y: &DVector<f64>, _beta: &DVector<f64>) -> Result<()> {
        let g = &self.policy.filter_gain[n];
        let innov = y - &self.policy.c * &self.mean;
        self.mean += g * innov;
        Ok(())
    }

    fn alpha(&mut self, _k: usize, t: f64, _z: &WindowState) -> Result<DVector<f64>> {
        let a = -(self.policy.ricc.gain_at(t) * &self.mean);
        Ok(self.policy.alpha_set.project(a))
    }

    fn advance(&mut self, t0: f64, t1: f64, alpha: &DVector<f64>) {
        // one RK4 step of dm/dt = Am + Bα with α frozen over the step
        let h = t1 - t0;
        let p = &self.policy;
        let u = &p.b * alpha;
        let f = |m: &DVector<f64>| &p.a * m + &u;
        let k1 = f(&self.mean);
        let k2 = f(&(&self.mean + &k1 * (0.5 * h)));
        let k3 = f(&(&self.mean + &k2 * (0.5 * h)));
        let k4 = f(&(&self.mean + &k3 * h));
        self.mean += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
}

impl Policy for SeparationPolicy {
    fn controller(&self) -> Box<dyn Controller + '_> {
        Box::new(SeparationController { policy: self, mean: self.m0.clone() })
    }

    fn window_len(&self) -> usize {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_lqg_problem, uniform_obs_times};
    use crate::parallel::Execution;
    use crate::sim::{rollout, RngStream, TimeGrid};
    use approx::assert_abs_diff_eq;

    fn m1(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    /// Scalar Riccati `dS/dτ = −kS² + 2aS + q` in reverse time, solved through
    /// its two equilibria.
    fn scalar_riccati(a: f64, b: f64, q: f64, r: f64, q_t: f64, tau: f64) -> f64 {
        let k = b * b / r;
        let lam = (a * a + k * q).sqrt();
        let sp = (a + lam) / k;
        let sm = (a - lam) / k;
        let c = (q_t - sp) / (q_t - sm);
        let e = c * (-2.0 * lam * tau).exp();
        (sp - sm * e) / (1.0 - e)
    }

    fn table1() -> LqgSpec {
        let mut s = LqgSpec::scalar(-0.25, 1.0, 1.0, 0.5, 2.0, 2.0, 2.0, 0.0, 1.0);
        s.fixed_eps = Some(0.1);
        s
    }

    #[test]
    fn linear_riccati_without_quadratic_term() {
        let z = m1(0.0);
        let sol = riccati_solve(&z, &z, &m1(2.0), &m1(1.0), &m1(2.0), 1.0, 1e-3).unwrap();
        assert_abs_diff_eq!(sol.s[0][(0, 0)], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.s_at(0.5)[(0, 0)], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_weights_give_zero_solution() {
        let z = DMatrix::zeros(2, 2);
        let sol = riccati_solve(&DMatrix::identity(2, 2), &DMatrix::identity(2, 2), &z, &DMatrix::identity(2, 2), &z, 1.0, 1e-2)
            .unwrap();
        assert!(sol.s.iter().all(|s| s.iter().all(|v| *v == 0.0)));
        assert!(sol.gains.iter().all(|k| k.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn scalar_riccati_matches_closed_form() {
        let sol = riccati_solve(&m1(-0.25), &m1(1.0), &m1(2.0), &m1(2.0), &m1(2.0), 1.0, 1e-3).unwrap();
        for (t, s) in sol.times.iter().zip(&sol.s).step_by(97) {
            let exact = scalar_riccati(-0.25, 1.0, 2.0, 2.0, 2.0, 1.0 - t);
            assert_abs_diff_eq!(s[(0, 0)], exact, epsilon = 1e-8);
        }
        assert_abs_diff_eq!(sol.s[0][(0, 0)], 1.612_61, epsilon = 1e-5);
        assert_abs_diff_eq!(sol.gains[0][(0, 0)], sol.s[0][(0, 0)] / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn terminal_node_is_exact_and_singular_r_rejected() {
        let qt = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let i = DMatrix::identity(2, 2);
        let sol = riccati_solve(&i, &i, &i, &i, &qt, 0.7, 1e-2).unwrap();
        assert_eq!(sol.s.last().unwrap(), &qt);
        assert_eq!(*sol.times.last().unwrap(), 0.7);
        for s in &sol.s {
            assert!((s - s.transpose()).amax() <= 1e-10);
            assert!(s.clone().symmetric_eigen().eigenvalues.min() >= -1e-8);
        }
        let err = riccati_solve(&i, &i, &i, &DMatrix::zeros(2, 2), &qt, 1.0, 1e-2).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn riccati_monotone_in_terminal_weight() {
        let a = DMatrix::from_row_slice(2, 2, &[0.1, 1.0, -0.5, -0.2]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let r = m1(0.7);
        let qt = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let bump = DMatrix::from_row_slice(2, 2, &[0.5, 0.4, 0.4, 0.5]);
        let lo = riccati_solve(&a, &b, &q, &r, &qt, 1.5, 1e-3).unwrap();
        let hi = riccati_solve(&a, &b, &q, &r, &(&qt + bump), 1.5, 1e-3).unwrap();
        for (s_lo, s_hi) in lo.s.iter().zip(&hi.s) {
            assert!((s_hi - s_lo).symmetric_eigen().eigenvalues.min() >= -1e-8);
        }
    }

    #[test]
    fn fosoc_trivial_cases_and_table_value() {
        let mut spec = table1();
        spec.sigma = m1(0.0);
        spec.sigma0 = m1(0.0);
        let r = riccati_for(&spec, RICCATI_DT).unwrap();
        assert_eq!(fosoc_value(&spec, &r), 0.0);

        let mut spec = table1();
        spec.q = m1(0.0);
        spec.q_t = m1(0.0);
        let r = riccati_for(&spec, RICCATI_DT).unwrap();
        assert_eq!(fosoc_value(&spec, &r), 0.0);

        let spec = table1();
        let r = riccati_for(&spec, RICCATI_DT).unwrap();
        assert_abs_diff_eq!(fosoc_value(&spec, &r), 1.024, epsilon = 0.005);
    }

    #[test]
    fn fosoc_invariant_under_rotation() {
        let theta: f64 = 0.7;
        let u = DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()]);
        let spec = LqgSpec {
            a: DMatrix::from_row_slice(2, 2, &[-0.3, 0.5, 0.0, 0.2]),
            b: DMatrix::from_row_slice(2, 1, &[1.0, 0.5]),
            c: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            sigma: DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.1, 0.3]),
            q: DMatrix::from_row_slice(2, 2, &[2.0, 0.1, 0.1, 1.0]),
            r: m1(1.5),
            q_t: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]),
            m0: DVector::from_column_slice(&[0.4, -0.2]),
            sigma0: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]),
            kappa: vec![],
            fixed_eps: Some(0.1),
            horizon: 1.0,
        };
        let ut = u.transpose();
        let rot = LqgSpec {
            a: &u * &spec.a * &ut,
            b: &u * &spec.b,
            c: &spec.c * &ut,
            sigma: &u * &spec.sigma,
            q: &u * &spec.q * &ut,
            q_t: &u * &spec.q_t * &ut,
            m0: &u * &spec.m0,
            sigma0: &u * &spec.sigma0 * &ut,
            ..spec.clone()
        };
        let v0 = fosoc_value(&spec, &riccati_for(&spec, RICCATI_DT).unwrap());
        let v1 = fosoc_value(&rot, &riccati_for(&rot, RICCATI_DT).unwrap());
        assert_abs_diff_eq!(v0, v1, epsilon = 1e-8);
    }

    #[test]
    fn separation_refused_for_controlled_noise() {
        let mut spec = table1();
        spec.fixed_eps = None;
        spec.kappa = vec![DVector::from_element(1, 0.1)];
        let r = riccati_for(&spec, RICCATI_DT).unwrap();
        assert!(matches!(separation_policy(&spec, &r, &[0.5], 0.01), Err(Error::Config(_))));
    }

    #[test]
    fn zero_weights_give_zero_control() {
        let mut spec = table1();
        spec.q = m1(0.0);
        spec.q_t = m1(0.0);
        let obs = uniform_obs_times(3, 1.0);
        let p = make_lqg_problem(&spec, &obs).unwrap();
        let r = riccati_for(&spec, RICCATI_DT).unwrap();
        let pol = separation_policy(&spec, &r, &obs, 0.01).unwrap();
        let g = TimeGrid::for_problem(&p, 0.01).unwrap();
        let ro = rollout(&p, &pol, &g, RngStream::new(3, 5)).unwrap();
        assert!(ro.controls_alpha.iter().all(|a| a[0] == 0.0));
    }

    #[test]
    fn filter_schedule_matches_scalar_recursion() {
        // A = 0: P grows by s²·Δt between observations, update P(1 − P/(P + ε²))
        let mut spec = table1();
        spec.a = m1(0.0);
        let obs = [0.25, 0.5];
        let r = riccati_for(&spec, RICCATI_DT).unwrap();
        let pol = separation_policy(&spec, &r, &obs, 0.01).unwrap();
        let mut p = 1.0 + 0.25 * 0.25;
        assert_abs_diff_eq!(pol.prior_covariances()[0][(0, 0)], p, epsilon = 1e-12);
        assert_abs_diff_eq!(pol.filter_gains()[0][(0, 0)], p / (p + 0.01), epsilon = 1e-12);
        p = p * 0.01 / (p + 0.01) + 0.25 * 0.25;
        assert_abs_diff_eq!(pol.prior_covariances()[1][(0, 0)], p, epsilon = 1e-12);
    }

    #[test]
    fn dense_perfect_observations_approach_fosoc() {
        let mut spec = table1();
        spec.fixed_eps = Some(1e-3);
        let obs: Vec<f64> = (1..100).map(|i| i as f64 * 0.01).collect();
        let p = make_lqg_problem(&spec, &obs).unwrap();
        let r = riccati_for(&spec, RICCATI_DT).unwrap();
        let pol = separation_policy(&spec, &r, &obs, 0.01).unwrap();
        let est = evaluate_policy_mc(&p, &pol, 20_000, 0.01, 11, Execution::Parallel).unwrap();
        let fo = fosoc_value(&spec, &r);
        // the only information gap is the initial state before the first observation
        assert!(est.mean > fo - est.ci95 - 0.01, "{est:?} vs {fo}");
        assert!(est.mean < fo + est.ci95 + 0.03, "{est:?} vs {fo}");
    }
}
