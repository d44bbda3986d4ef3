//! Euler–Maruyama propagation, per-trajectory random streams and closed-loop
//! rollouts with pathwise cost bookkeeping.

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{ControlProblem, WindowState};
use crate::parallel::{map_indexed, Execution};

/// Deterministic random stream addressed by `(seed, stream_id)`.
///
/// Streams are counter based (ChaCha with a per-trajectory stream number), so a
/// trajectory's draws never depend on which worker runs it.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self { seed, stream_id, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_vector(&mut self, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| self.standard_normal())
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Derives an independent seed for a sub-purpose (splitmix64 finaliser).
pub fn derive_seed(seed: u64, purpose: u64) -> u64 {
    let mut z = seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One Euler–Maruyama step `x + b·dt + σ·√dt·ξ` with `ξ` standard normal.
pub fn em_step(
    x: &DVector<f64>,
    t: f64,
    alpha: &DVector<f64>,
    dt: f64,
    noise: &DVector<f64>,
    problem: &dyn ControlProblem,
) -> Result<DVector<f64>> {
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("time step must be positive, got {dt}")));
    }
    let drift = problem.drift(t, x, alpha);
    let diff = problem.diffusion(t, x, alpha);
    let next = x + drift * dt + diff * noise * dt.sqrt();
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(Error::Propagation { trajectory: 0, reason: format!("non-finite state at t = {t}") })
    }
}

/// Simulation grid on `[0, T]` containing every observation time as a node.
///
/// Each inter-observation slab is split into `ceil(len / dt)` equal steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
    obs_nodes: Vec<usize>,
    node_obs: Vec<Option<usize>>,
}

impl TimeGrid {
    pub fn new(horizon: f64, obs_times: &[f64], dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Domain(format!("time step must be positive, got {dt}")));
        }
        crate::model::validate_obs_times(obs_times, horizon)?;
        let mut times = vec![0.0];
        let mut obs_nodes = Vec::with_capacity(obs_times.len());
        let mut start = 0.0;
        for &end in obs_times.iter().chain(std::iter::once(&horizon)) {
            let len = end - start;
            let steps = ((len / dt) - 1e-9).ceil().max(1.0) as usize;
            let h = len / steps as f64;
            for i in 1..steps {
                times.push(start + i as f64 * h);
            }
            times.push(end);
            if end < horizon {
                obs_nodes.push(times.len() - 1);
            }
            start = end;
        }
        let mut node_obs = vec![None; times.len()];
        for (n, &k) in obs_nodes.iter().enumerate() {
            node_obs[k] = Some(n);
        }
        Ok(Self { times, obs_nodes, node_obs })
    }

    pub fn for_problem(problem: &dyn ControlProblem, dt: f64) -> Result<Self> {
        Self::new(problem.horizon(), problem.obs_times(), dt)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_nodes(&self) -> usize {
        self.times.len()
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn step(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }

    /// Node index of each observation time.
    pub fn obs_nodes(&self) -> &[usize] {
        &self.obs_nodes
    }

    pub fn obs_at(&self, node: usize) -> Option<usize> {
        self.node_obs[node]
    }

    /// Index of the last node with time `<= t`.
    pub fn node_at_or_before(&self, t: f64) -> usize {
        match self.times.binary_search_by(|s| s.partial_cmp(&t).unwrap_or(std::cmp::Ordering::Less)) {
            Ok(k) => k,
            Err(0) => 0,
            Err(k) => k - 1,
        }
    }
}

/// Per-trajectory controller instance produced by a [`Policy`].
///
/// Called in rollout order: at an observation node `beta` then `observe`,
/// then at every step `alpha` followed by `advance`.
pub trait Controller {
    fn beta(&mut self, obs_index: usize, t: f64, window_pre: &WindowState) -> Result<DVector<f64>>;
    fn observe(&mut self, _obs_index: usize, _y: &DVector<f64>, _beta: &DVector<f64>) -> Result<()> {
        Ok(())
    }
    fn alpha(&mut self, step: usize, t: f64, window: &WindowState) -> Result<DVector<f64>>;
    fn advance(&mut self, _t0: f64, _t1: f64, _alpha: &DVector<f64>) {}
}

/// A (possibly stateful) feedback law for both controls.
pub trait Policy: Send + Sync {
    fn controller(&self) -> Box<dyn Controller + '_>;
    /// Number of past observations the policy conditions on.
    fn window_len(&self) -> usize;
}

/// Constant controls; `alpha ≡ 0, beta ≡ ε` is the zero-control baseline.
#[derive(Debug, Clone)]
pub struct ConstantPolicy {
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    pub window_len: usize,
}

impl ConstantPolicy {
    pub fn zero(problem: &dyn ControlProblem) -> Self {
        let d = problem.dims();
        Self {
            alpha: DVector::zeros(d.alpha),
            beta: problem.beta_set().candidates()[0].clone(),
            window_len: 1,
        }
    }
}

impl Controller for &ConstantPolicy {
    fn beta(&mut self, _n: usize, _t: f64, _z: &WindowState) -> Result<DVector<f64>> {
        Ok(self.beta.clone())
    }

    fn alpha(&mut self, _k: usize, _t: f64, _z: &WindowState) -> Result<DVector<f64>> {
        Ok(self.alpha.clone())
    }
}

impl Policy for ConstantPolicy {
    fn controller(&self) -> Box<dyn Controller + '_> {
        Box::new(self)
    }

    fn window_len(&self) -> usize {
        self.window_len
    }
}

/// Full record of one closed-loop trajectory.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub trajectory: u64,
    pub times: Vec<f64>,
    /// One state per grid node; at an observation node this is `X_{t_n}`
    /// (continuous paths, so pre- and post-observation states coincide).
    pub states: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
    /// Window after each observation.
    pub windows: Vec<WindowState>,
    pub initial_window: WindowState,
    /// `α` applied on each step `[t_k, t_{k+1})`.
    pub controls_alpha: Vec<DVector<f64>>,
    pub controls_beta: Vec<DVector<f64>>,
    /// `f(t_k, X_k, α_k)·Δt_k` per step.
    pub stage_costs: Vec<f64>,
    pub impulse_costs: Vec<f64>,
    pub obs_nodes: Vec<usize>,
    pub terminal_cost_value: f64,
}

impl Rollout {
    pub fn total_cost(&self) -> f64 {
        self.stage_costs.iter().sum::<f64>() + self.impulse_costs.iter().sum::<f64>() + self.terminal_cost_value
    }

    /// Window in force on `[t_k, t_{k+1})` (after any observation at `t_k`).
    pub fn window_at(&self, node: usize) -> &WindowState {
        match self.obs_nodes.iter().rposition(|&k| k <= node) {
            Some(n) => &self.windows[n],
            None => &self.initial_window,
        }
    }

    /// Window just before the observation at `node` (or the current one if none).
    pub fn window_before(&self, node: usize) -> &WindowState {
        match self.obs_nodes.iter().rposition(|&k| k < node) {
            Some(n) => &self.windows[n],
            None => &self.initial_window,
        }
    }

    /// Remaining cost from each node: stages from `k`, impulses at nodes `>= k`, terminal.
    pub fn cost_to_go(&self) -> Vec<f64> {
        let n = self.times.len();
        let mut out = vec![0.0; n];
        let mut acc = self.terminal_cost_value;
        out[n - 1] = acc;
        let mut obs = self.obs_nodes.len();
        for k in (0..n - 1).rev() {
            acc += self.stage_costs[k];
            while obs > 0 && self.obs_nodes[obs - 1] == k {
                obs -= 1;
                acc += self.impulse_costs[obs];
            }
            out[k] = acc;
        }
        out
    }
}

/// Simulates one closed-loop trajectory on `grid`.
///
/// Draw order per trajectory: initial state, then for each step the
/// observation noise (at observation nodes) followed by the Brownian increment.
pub fn rollout(problem: &dyn ControlProblem, policy: &dyn Policy, grid: &TimeGrid, mut rng: RngStream) -> Result<Rollout> {
    let trajectory = rng.stream_id();
    let tag = |e: Error| match e {
        Error::Propagation { reason, .. } => Error::Propagation { trajectory, reason },
        Error::Policy(reason) => Error::Policy(format!("trajectory {trajectory}: {reason}")),
        other => other,
    };
    let d = problem.dims();
    let n_steps = grid.n_steps();
    let mut ctrl = policy.controller();
    let mut x = problem.sample_initial(&mut rng);
    let initial_window = WindowState::new(policy.window_len(), d.y);
    let mut window = initial_window.clone();

    let mut rec = Rollout {
        trajectory,
        times: grid.times().to_vec(),
        states: Vec::with_capacity(n_steps + 1),
        observations: Vec::with_capacity(grid.obs_nodes().len()),
        windows: Vec::with_capacity(grid.obs_nodes().len()),
        initial_window,
        controls_alpha: Vec::with_capacity(n_steps),
        controls_beta: Vec::with_capacity(grid.obs_nodes().len()),
        stage_costs: Vec::with_capacity(n_steps),
        impulse_costs: Vec::with_capacity(grid.obs_nodes().len()),
        obs_nodes: grid.obs_nodes().to_vec(),
        terminal_cost_value: 0.0,
    };

    for k in 0..n_steps {
        let t = grid.times()[k];
        if let Some(n) = grid.obs_at(k) {
            let beta = ctrl.beta(n, t, &window).map_err(tag)?;
            rec.impulse_costs.push(problem.impulse_cost(n, &x, &beta));
            let xi = rng.normal_vector(d.y);
            let y = problem.sample_observation(&x, &beta, n, &xi);
            window.push(y.clone());
            ctrl.observe(n, &y, &beta).map_err(tag)?;
            rec.observations.push(y);
            rec.windows.push(window.clone());
            rec.controls_beta.push(beta);
        }
        let alpha = ctrl.alpha(k, t, &window).map_err(tag)?;
        let h = grid.step(k);
        rec.stage_costs.push(problem.running_cost(t, &x, &alpha) * h);
        let dw = rng.normal_vector(d.w);
        let next = em_step(&x, t, &alpha, h, &dw, problem).map_err(tag)?;
        ctrl.advance(t, t + h, &alpha);
        rec.states.push(std::mem::replace(&mut x, next));
        rec.controls_alpha.push(alpha);
    }
    rec.terminal_cost_value = problem.terminal_cost(&x);
    rec.states.push(x);
    Ok(rec)
}

/// Sample mean with a normal-approximation 95% confidence half-width.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub ci95: f64,
    pub std: f64,
    pub n: usize,
}

impl McEstimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let constant = samples.windows(2).all(|w| w[0] == w[1]);
        let var = if n > 1 && !constant {
            samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let std = var.sqrt();
        Self { mean, ci95: 1.96 * std / (n as f64).sqrt(), std, n }
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.ci95
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.ci95
    }
}

/// Runs `m` rollouts on streams `0..m` and maps each through `summary`.
///
/// Failed rollouts are collected and reported together.
pub fn simulate_batch<T, F>(
    problem: &dyn ControlProblem,
    policy: &dyn Policy,
    grid: &TimeGrid,
    m: usize,
    seed: u64,
    exec: Execution,
    summary: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Rollout) -> T + Sync + Send,
{
    let results = map_indexed(m, exec, |i| rollout(problem, policy, grid, RngStream::new(seed, i as u64)).map(&summary));
    let mut out = Vec::with_capacity(m);
    let mut failures: Vec<(u64, Error)> = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => out.push(v),
            Err(e) => failures.push((i as u64, e)),
        }
    }
    if let Some((first, err)) = failures.first() {
        return Err(Error::Rollouts { count: failures.len(), first_trajectory: *first, first_reason: err.to_string() });
    }
    Ok(out)
}

/// Monte Carlo estimate of the expected total cost of `policy`.
pub fn evaluate_policy_mc(
    problem: &dyn ControlProblem,
    policy: &dyn Policy,
    m_eval: usize,
    dt: f64,
    seed: u64,
    exec: Execution,
) -> Result<McEstimate> {
    if m_eval < 2 {
        return Err(Error::Config(format!("M_eval must be at least 2, got {m_eval}")));
    }
    let grid = TimeGrid::for_problem(problem, dt)?;
    let totals = simulate_batch(problem, policy, &grid, m_eval, seed, exec, |r| r.total_cost())?;
    Ok(McEstimate::from_samples(&totals))
}

/// Diffusion-weighted second-order term `½ tr(σσᵀ H)`.
pub fn half_trace_sigma_sq(diffusion: &DMatrix<f64>, hessian: &DMatrix<f64>) -> f64 {
    let ss = diffusion * diffusion.transpose();
    0.5 * ss.component_mul(hessian).sum()
}
