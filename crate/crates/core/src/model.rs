//! Problem definitions: controlled diffusion, discrete observation channel,
//! costs, admissible sets and the sliding observation window.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Dimensions of state, controls, observations and driving noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub x: usize,
    pub alpha: usize,
    pub beta: usize,
    pub y: usize,
    pub w: usize,
}

/// Admissible continuous controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSet {
    Unbounded,
    Box { lower: DVector<f64>, upper: DVector<f64> },
}

impl AlphaSet {
    pub fn project(&self, alpha: DVector<f64>) -> DVector<f64> {
        match self {
            AlphaSet::Unbounded => alpha,
            AlphaSet::Box { lower, upper } => alpha.zip_zip_map(lower, upper, |a, lo, hi| a.clamp(lo, hi)),
        }
    }

    pub fn contains(&self, alpha: &DVector<f64>) -> bool {
        match self {
            AlphaSet::Unbounded => alpha.iter().all(|a| a.is_finite()),
            AlphaSet::Box { lower, upper } => {
                alpha.len() == lower.len()
                    && alpha.iter().zip(lower.iter().zip(upper.iter())).all(|(a, (lo, hi))| *lo <= *a && *a <= *hi)
            }
        }
    }
}

/// Finite grid of admissible observation-channel controls, in preference order
/// (ties in any argmin resolve to the earliest candidate).
#[derive(Debug, Clone, PartialEq)]
pub struct BetaSet {
    candidates: Vec<DVector<f64>>,
}

impl BetaSet {
    pub fn new(candidates: Vec<DVector<f64>>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Config("beta candidate grid is empty".into()));
        }
        let dim = candidates[0].len();
        for c in &candidates {
            if c.len() != dim {
                return Err(Error::Config("beta candidates have inconsistent dimensions".into()));
            }
            if c.iter().any(|b| !(*b > 0.0) || !b.is_finite()) {
                return Err(Error::Domain(format!("beta candidate {c:?} must be strictly positive")));
            }
        }
        Ok(Self { candidates })
    }

    /// Grid of scalar levels broadcast to `dim` channels.
    pub fn from_levels(levels: &[f64], dim: usize) -> Result<Self> {
        Self::new(levels.iter().map(|&b| DVector::from_element(dim, b)).collect())
    }

    pub fn fixed(beta: DVector<f64>) -> Result<Self> {
        Self::new(vec![beta])
    }

    pub fn candidates(&self) -> &[DVector<f64>] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn contains(&self, beta: &DVector<f64>) -> bool {
        self.candidates.iter().any(|c| c == beta)
    }
}

/// Drift of the form `f(t, x) + B α` with running cost `h(t, x) + ½ αᵀRα`.
/// When a problem has this structure the Hamiltonian minimiser over an
/// unbounded control set is `α = -R⁻¹Bᵀ E[∇ₓ p]`.
#[derive(Debug, Clone)]
pub struct ControlAffine {
    pub b: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

/// A partially observed control problem with observations at discrete times.
///
/// Implementations are immutable and shared across worker threads.
pub trait ControlProblem: Send + Sync {
    fn dims(&self) -> Dims;
    fn horizon(&self) -> f64;
    /// Strictly increasing observation times in `(0, T)`.
    fn obs_times(&self) -> &[f64];

    fn drift(&self, t: f64, x: &DVector<f64>, alpha: &DVector<f64>) -> DVector<f64>;
    /// `d_x × d_w` diffusion matrix.
    fn diffusion(&self, t: f64, x: &DVector<f64>, alpha: &DVector<f64>) -> DMatrix<f64>;

    fn likelihood_logdensity(&self, y: &DVector<f64>, x: &DVector<f64>, beta: &DVector<f64>, obs_index: usize)
        -> f64;
    /// Observation produced from standard-normal noise `xi` (length `d_y`).
    fn sample_observation(
        &self,
        x: &DVector<f64>,
        beta: &DVector<f64>,
        obs_index: usize,
        xi: &DVector<f64>,
    ) -> DVector<f64>;

    fn running_cost(&self, t: f64, x: &DVector<f64>, alpha: &DVector<f64>) -> f64;
    fn impulse_cost(&self, obs_index: usize, x: &DVector<f64>, beta: &DVector<f64>) -> f64;
    fn terminal_cost(&self, x: &DVector<f64>) -> f64;

    fn sample_initial(&self, rng: &mut dyn RngCore) -> DVector<f64>;
    /// Mean and covariance of the initial law when it is Gaussian.
    fn initial_gaussian(&self) -> Option<(DVector<f64>, DMatrix<f64>)>;

    fn alpha_set(&self) -> &AlphaSet;
    fn beta_set(&self) -> &BetaSet;

    fn control_affine(&self) -> Option<ControlAffine> {
        None
    }

    fn num_obs(&self) -> usize {
        self.obs_times().len()
    }
}

/// Uniform interior observation schedule `t_n = nT/(N_o+1)`.
pub fn uniform_obs_times(n_obs: usize, horizon: f64) -> Vec<f64> {
    (1..=n_obs).map(|n| n as f64 * horizon / (n_obs as f64 + 1.0)).collect()
}

pub fn validate_obs_times(obs_times: &[f64], horizon: f64) -> Result<()> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
    }
    for (i, &t) in obs_times.iter().enumerate() {
        if !(t > 0.0 && t < horizon) {
            return Err(Error::Config(format!("observation time {t} not in (0, {horizon})")));
        }
        if i > 0 && t <= obs_times[i - 1] {
            return Err(Error::Config("observation times must be strictly increasing".into()));
        }
    }
    Ok(())
}

/// Sensing cost `Σ κ_i / β_i`.
pub fn observation_cost(beta: &DVector<f64>, kappa: &DVector<f64>) -> Result<f64> {
    if beta.len() != kappa.len() {
        return Err(Error::Config(format!("beta has {} channels, kappa has {}", beta.len(), kappa.len())));
    }
    let mut total = 0.0;
    for (b, k) in beta.iter().zip(kappa.iter()) {
        if !(*b > 0.0) {
            return Err(Error::Domain(format!("inadmissible observation control beta = {b}")));
        }
        total += k / b;
    }
    Ok(total)
}

/// Linear-Gaussian model data.
#[derive(Debug, Clone, PartialEq)]
pub struct LqgSpec {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_t: DMatrix<f64>,
    pub m0: DVector<f64>,
    pub sigma0: DMatrix<f64>,
    /// Observation-cost weights, one vector per observation (a single entry
    /// is broadcast to every observation).
    pub kappa: Vec<DVector<f64>>,
    /// Exogenous constant observation noise level, when β is not a decision.
    pub fixed_eps: Option<f64>,
    pub horizon: f64,
}

impl LqgSpec {
    /// Scalar model `dX = (aX + bα)dt + s dW`, `Y = cX + βξ`.
    #[allow(clippy::too_many_arguments)]
    pub fn scalar(a: f64, b: f64, c: f64, s: f64, q: f64, r: f64, q_t: f64, m0: f64, var0: f64) -> Self {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        Self {
            a: m(a),
            b: m(b),
            c: m(c),
            sigma: m(s),
            q: m(q),
            r: m(r),
            q_t: m(q_t),
            m0: DVector::from_element(1, m0),
            sigma0: m(var0),
            kappa: Vec::new(),
            fixed_eps: None,
            horizon: 1.0,
        }
    }

    pub fn dims(&self) -> Dims {
        Dims { x: self.a.nrows(), alpha: self.b.ncols(), beta: self.c.nrows(), y: self.c.nrows(), w: self.sigma.ncols() }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        let check = |name: &str, m: &DMatrix<f64>, rows: usize, cols: usize| -> Result<()> {
            if m.nrows() != rows || m.ncols() != cols {
                return Err(Error::Config(format!(
                    "{name} is {}x{}, expected {rows}x{cols}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("{name} has non-finite entries")));
            }
            Ok(())
        };
        if n == 0 {
            return Err(Error::Config("state dimension must be positive".into()));
        }
        let d = self.dims();
        check("A", &self.a, n, n)?;
        check("B", &self.b, n, d.alpha)?;
        check("C", &self.c, d.y, n)?;
        check("sigma", &self.sigma, n, d.w)?;
        check("Q", &self.q, n, n)?;
        check("Q_T", &self.q_t, n, n)?;
        check("R", &self.r, d.alpha, d.alpha)?;
        check("Sigma0", &self.sigma0, n, n)?;
        if self.m0.len() != n {
            return Err(Error::Config(format!("m0 has length {}, expected {n}", self.m0.len())));
        }
        require_psd("Q", &self.q, false)?;
        require_psd("Q_T", &self.q_t, false)?;
        require_psd("Sigma0", &self.sigma0, false)?;
        if d.alpha > 0 {
            require_psd("R", &self.r, true)?;
        }
        for k in &self.kappa {
            if k.len() != d.y {
                return Err(Error::Config(format!("kappa entry has length {}, expected {}", k.len(), d.y)));
            }
            if k.iter().any(|v| *v < 0.0) {
                return Err(Error::Config("kappa must be nonnegative".into()));
            }
            if self.fixed_eps.is_none() && k.iter().any(|v| *v <= 0.0) {
                return Err(Error::Config("kappa must be strictly positive when beta is a decision variable".into()));
            }
        }
        if let Some(eps) = self.fixed_eps {
            if !(eps > 0.0) {
                return Err(Error::Domain(format!("fixed_eps must be positive, got {eps}")));
            }
        }
        Ok(())
    }

    fn kappa_for(&self, n_obs: usize) -> Result<Vec<DVector<f64>>> {
        let dy = self.c.nrows();
        match self.kappa.len() {
            0 => Ok(vec![DVector::zeros(dy); n_obs]),
            1 => Ok(vec![self.kappa[0].clone(); n_obs]),
            l if l == n_obs => Ok(self.kappa.clone()),
            l => Err(Error::Config(format!("kappa has {l} entries for {n_obs} observations"))),
        }
    }
}

fn require_psd(name: &str, m: &DMatrix<f64>, strict: bool) -> Result<()> {
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-10 {
        return Err(Error::Config(format!("{name} is not symmetric (max asymmetry {asym:e})")));
    }
    let min_eig = m.clone().symmetric_eigen().eigenvalues.min();
    if strict && min_eig <= 1e-10 {
        return Err(Error::Config(format!("{name} must be positive definite (min eigenvalue {min_eig:e})")));
    }
    if !strict && min_eig < -1e-10 {
        return Err(Error::Config(format!("{name} must be positive semidefinite (min eigenvalue {min_eig:e})")));
    }
    Ok(())
}

/// Time-gated spherical-shell penalty and terminal target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSpec {
    pub t_min: f64,
    pub t_max: f64,
    pub r_in: f64,
    pub r_out: f64,
    pub magnitude: f64,
    pub x_star: Vec<f64>,
}

impl ObstacleSpec {
    pub fn validate(&self, horizon: f64) -> Result<()> {
        if !(0.0 <= self.t_min && self.t_min < self.t_max && self.t_max <= horizon) {
            return Err(Error::Config(format!(
                "penalty window [{}, {}] must satisfy 0 <= t_min < t_max <= T",
                self.t_min, self.t_max
            )));
        }
        if !(0.0 <= self.r_in && self.r_in < self.r_out) {
            return Err(Error::Config(format!("radii must satisfy 0 <= r_in < r_out, got {} / {}", self.r_in, self.r_out)));
        }
        if !(self.magnitude >= 0.0) {
            return Err(Error::Config("penalty magnitude must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn is_active(&self, t: f64, x: &DVector<f64>) -> bool {
        let r = x.norm();
        t >= self.t_min && t <= self.t_max && r >= self.r_in && r <= self.r_out
    }
}

/// `magnitude · 1[t_min ≤ t ≤ t_max] · 1[r_in ≤ ‖x‖₂ ≤ r_out]`.
pub fn obstacle_penalty(t: f64, x: &DVector<f64>, spec: &ObstacleSpec) -> f64 {
    if spec.is_active(t, x) {
        spec.magnitude
    } else {
        0.0
    }
}

/// Linear dynamics, linear-Gaussian observations with channel noise `diag(β)`,
/// quadratic costs plus an optional obstacle penalty and terminal target.
#[derive(Debug, Clone)]
pub struct LinearGaussianProblem {
    spec: LqgSpec,
    obs_times: Vec<f64>,
    kappa: Vec<DVector<f64>>,
    penalty: Option<ObstacleSpec>,
    x_star: DVector<f64>,
    init_factor: DMatrix<f64>,
    alpha_set: AlphaSet,
    beta_set: BetaSet,
    sigma_is_zero: bool,
}

/// Builds the LQG problem: drift `Ax + Bα`, diffusion `σ`, observation
/// `Cx + diag(β)ξ`, running cost `½(xᵀQx + αᵀRα)`, terminal `½xᵀQ_Tx`,
/// sensing cost `Σ κ_{n,i}/β_i`.
///
/// With `fixed_eps` the β grid is the single level `eps`; otherwise pass a
/// grid with [`LinearGaussianProblem::with_beta_set`].
pub fn make_lqg_problem(spec: &LqgSpec, obs_times: &[f64]) -> Result<LinearGaussianProblem> {
    spec.validate()?;
    validate_obs_times(obs_times, spec.horizon)?;
    let d = spec.dims();
    let kappa = spec.kappa_for(obs_times.len())?;
    let init_factor = psd_factor(&spec.sigma0);
    let beta_set = BetaSet::fixed(DVector::from_element(d.y, spec.fixed_eps.unwrap_or(1.0)))?;
    let sigma_is_zero = spec.sigma.iter().all(|v| *v == 0.0);
    Ok(LinearGaussianProblem {
        spec: spec.clone(),
        obs_times: obs_times.to_vec(),
        kappa,
        penalty: None,
        x_star: DVector::zeros(d.x),
        init_factor,
        alpha_set: AlphaSet::Unbounded,
        beta_set,
        sigma_is_zero,
    })
}

/// Obstacle benchmark: the LQG structure of `spec` (typically `A = 0`,
/// `B = I`) with the shell penalty added to the running cost and terminal
/// cost `½(x - x*)ᵀQ_T(x - x*)`.
pub fn make_obstacle_problem(
    spec: &LqgSpec,
    obstacle: &ObstacleSpec,
    obs_times: &[f64],
) -> Result<LinearGaussianProblem> {
    obstacle.validate(spec.horizon)?;
    let mut p = make_lqg_problem(spec, obs_times)?;
    if obstacle.x_star.len() != p.spec.a.nrows() {
        return Err(Error::Config(format!(
            "x_star has length {}, expected {}",
            obstacle.x_star.len(),
            p.spec.a.nrows()
        )));
    }
    p.x_star = DVector::from_column_slice(&obstacle.x_star);
    p.penalty = Some(obstacle.clone());
    Ok(p)
}

impl LinearGaussianProblem {
    pub fn with_beta_set(mut self, set: BetaSet) -> Result<Self> {
        if set.candidates()[0].len() != self.spec.c.nrows() {
            return Err(Error::Config("beta candidates must have one entry per observation channel".into()));
        }
        self.beta_set = set;
        Ok(self)
    }

    pub fn with_alpha_set(mut self, set: AlphaSet) -> Self {
        self.alpha_set = set;
        self
    }

    pub fn spec(&self) -> &LqgSpec {
        &self.spec
    }

    pub fn penalty(&self) -> Option<&ObstacleSpec> {
        self.penalty.as_ref()
    }

    pub fn kappa(&self) -> &[DVector<f64>] {
        &self.kappa
    }

    /// Same model with a different observation schedule.
    pub fn with_obs_times(&self, obs_times: &[f64]) -> Result<Self> {
        validate_obs_times(obs_times, self.spec.horizon)?;
        let mut p = self.clone();
        p.kappa = self.spec.kappa_for(obs_times.len())?;
        p.obs_times = obs_times.to_vec();
        Ok(p)
    }
}

/// Lower-triangular `L` with `LLᵀ = M` for PSD `M` (eigen-based, tolerates singular `M`).
pub(crate) fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = m.clone().cholesky() {
        return ch.l();
    }
    let eig = m.clone().symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals)
}

impl ControlProblem for LinearGaussianProblem {
    fn dims(&self) -> Dims {
        self.spec.dims()
    }

    fn horizon(&self) -> f64 {
        self.spec.horizon
    }

    fn obs_times(&self) -> &[f64] {
        &self.obs_times
    }

    fn drift(&self, _t: f64, x: &DVector<f64>, alpha: &DVector<f64>) -> DVector<f64> {
        &self.spec.a * x + &self.spec.b * alpha
    }

    fn diffusion(&self, _t: f64, _x: &DVector<f64>, _alpha: &DVector<f64>) -> DMatrix<f64> {
        self.spec.sigma.clone()
    }

    fn likelihood_logdensity(&self, y: &DVector<f64>, x: &DVector<f64>, beta: &DVector<f64>, _n: usize) -> f64 {
        let mean = &self.spec.c * x;
        let mut acc = -0.5 * LN_2PI * y.len() as f64;
        for i in 0..y.len() {
            let s = beta[i];
            let u = (y[i] - mean[i]) / s;
            acc -= 0.5 * u * u + s.ln();
        }
        acc
    }

    fn sample_observation(&self, x: &DVector<f64>, beta: &DVector<f64>, _n: usize, xi: &DVector<f64>) -> DVector<f64> {
        &self.spec.c * x + beta.component_mul(xi)
    }

    fn running_cost(&self, t: f64, x: &DVector<f64>, alpha: &DVector<f64>) -> f64 {
        let quad = 0.5 * (x.dot(&(&self.spec.q * x)) + alpha.dot(&(&self.spec.r * alpha)));
        match &self.penalty {
            Some(p) => quad + obstacle_penalty(t, x, p),
            None => quad,
        }
    }

    fn impulse_cost(&self, obs_index: usize, _x: &DVector<f64>, beta: &DVector<f64>) -> f64 {
        // Candidates are validated positive on construction.
        observation_cost(beta, &self.kappa[obs_index]).unwrap_or(f64::INFINITY)
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        let e = x - &self.x_star;
        0.5 * e.dot(&(&self.spec.q_t * &e))
    }

    fn sample_initial(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        let n = self.spec.m0.len();
        let xi = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        &self.spec.m0 + &self.init_factor * xi
    }

    fn initial_gaussian(&self) -> Option<(DVector<f64>, DMatrix<f64>)> {
        Some((self.spec.m0.clone(), self.spec.sigma0.clone()))
    }

    fn alpha_set(&self) -> &AlphaSet {
        &self.alpha_set
    }

    fn beta_set(&self) -> &BetaSet {
        &self.beta_set
    }

    fn control_affine(&self) -> Option<ControlAffine> {
        Some(ControlAffine { b: self.spec.b.clone(), r: self.spec.r.clone() })
    }
}

impl LinearGaussianProblem {
    /// True when the state noise vanishes identically.
    pub fn is_noise_free(&self) -> bool {
        self.sigma_is_zero
    }
}

/// The most recent `K` observations, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowState {
    capacity: usize,
    dim_y: usize,
    entries: VecDeque<DVector<f64>>,
}

impl WindowState {
    pub fn new(capacity: usize, dim_y: usize) -> Self {
        Self { capacity, dim_y, entries: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim_y(&self) -> usize {
        self.dim_y
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.entries.iter()
    }

    /// Flattened dimension `K · d_y` after zero padding.
    pub fn flat_dim(&self) -> usize {
        self.capacity * self.dim_y
    }

    /// Returns the window with `y` appended and the oldest entry dropped if full.
    pub fn update(&self, y: &DVector<f64>) -> WindowState {
        let mut next = self.clone();
        next.push(y.clone());
        next
    }

    pub fn push(&mut self, y: DVector<f64>) {
        debug_assert_eq!(y.len(), self.dim_y);
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(y);
    }

    /// Writes the window into `out` (length `K · d_y`), zero-padding missing
    /// entries at the front.
    pub fn flatten_into(&self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.flat_dim());
        let missing = (self.capacity - self.entries.len()) * self.dim_y;
        out[..missing].fill(0.0);
        let mut pos = missing;
        for e in &self.entries {
            out[pos..pos + self.dim_y].copy_from_slice(e.as_slice());
            pos += self.dim_y;
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.flat_dim()];
        self.flatten_into(&mut out);
        out
    }
}

/// Functional form of the window update.
pub fn window_update(z: &WindowState, y: &DVector<f64>) -> WindowState {
    z.update(y)
}
