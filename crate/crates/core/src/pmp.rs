//! Particle fixed-point solver.
//!
//! Each outer iteration simulates `M_train` trajectories under the current
//! policy, turns them into pathwise cost-to-go targets, refits the per-node
//! value ansatz and extracts the next policy from it:
//!
//! - `α` minimises `E[f + 𝒢_α p̂ | z]`. The conditional expectation given the
//!   window is a regression of the pointwise objective on window features
//!   across the simulated population.
//! - `β` at observation `n` minimises `E[c_n + p̂_n(X, window_update(z⁻, y)) | z⁻]`
//!   with `y` drawn from the channel, one regression surface per candidate.
//!
//! Trajectories reuse the same random streams in every iteration.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::ParticleEnsemble;
use crate::model::{window_update, AlphaSet, ControlProblem, WindowState};
use crate::parallel::{map_indexed, try_map_indexed, Execution};
use crate::regression::{fit_node, fit_standardized, default_ridge, FeatureBasis, NodeSamples, ValueAnsatz};
use crate::sim::{derive_seed, half_trace_sigma_sq, simulate_batch, Controller, McEstimate, Policy, Rollout, RngStream, TimeGrid};

/// How the continuous control is extracted from the value ansatz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AlphaMode {
    /// `α = −R⁻¹Bᵀ E[∇ₓp̂ | z]`; needs control-affine drift and quadratic control cost.
    #[default]
    ClosedForm,
    /// Pointwise argmin over a finite candidate grid.
    GridSearch { candidates: Vec<Vec<f64>> },
}

impl AlphaMode {
    fn candidates(&self, dim: usize) -> Result<Vec<DVector<f64>>> {
        match self {
            AlphaMode::ClosedForm => Ok(Vec::new()),
            AlphaMode::GridSearch { candidates } => {
                if candidates.is_empty() {
                    return Err(Error::Config("alpha grid is empty".into()));
                }
                candidates
                    .iter()
                    .map(|c| {
                        if c.len() == dim {
                            Ok(DVector::from_column_slice(c))
                        } else {
                            Err(Error::Config(format!("alpha candidate {c:?} must have {dim} entries")))
                        }
                    })
                    .collect()
            }
        }
    }
}

/// Equally spaced scalar grid `lo, …, hi` with `n` points.
pub fn alpha_grid_1d(lo: f64, hi: f64, n: usize) -> AlphaMode {
    let candidates = match n {
        0 => Vec::new(),
        1 => vec![vec![lo]],
        _ => (0..n).map(|i| vec![lo + (hi - lo) * i as f64 / (n - 1) as f64]).collect(),
    };
    AlphaMode::GridSearch { candidates }
}

/// Feedback rule for `α` as a function of time and window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlphaRule {
    Constant { alpha: DVector<f64> },
    /// `α(t_k, z) = coefᵀ_k φ(z)`.
    Affine { basis: FeatureBasis, coef: Vec<DMatrix<f64>> },
    /// `α(t_k, z) = candidates[argmin_j φ(z)·surfaces_k[:, j]]`.
    Grid { basis: FeatureBasis, candidates: Vec<DVector<f64>>, surfaces: Vec<DMatrix<f64>> },
}

/// Feedback rule for `β` at each observation as a function of the pre-observation window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BetaRule {
    Fixed { beta: DVector<f64> },
    /// One constant choice per observation.
    Schedule { betas: Vec<DVector<f64>> },
    Grid { basis: FeatureBasis, candidates: Vec<DVector<f64>>, surfaces: Vec<DMatrix<f64>> },
}

/// Index of the smallest value; ties go to the first.
pub fn argmin_first(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::INFINITY;
    for (j, v) in values.into_iter().enumerate() {
        if v < best_v {
            best = j;
            best_v = v;
        }
    }
    best
}

fn surface_argmin(phi: &[f64], surface: &DMatrix<f64>) -> usize {
    argmin_first((0..surface.ncols()).map(|j| phi.iter().zip(surface.column(j).iter()).map(|(a, b)| a * b).sum()))
}

/// The pair of feedback laws produced by training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyPair {
    pub time_nodes: Vec<f64>,
    pub window_len: usize,
    pub dim_y: usize,
    pub alpha: AlphaRule,
    pub beta: BetaRule,
    pub alpha_set: AlphaSet,
}

impl PolicyPair {
    /// Node whose rule applies at time `t` (last node `≤ t`, never the terminal node).
    pub fn node_for(&self, t: f64) -> usize {
        let n = self.time_nodes.len();
        let tol = 1e-9 * self.time_nodes[n - 1].abs().max(1.0);
        let k = self.time_nodes.partition_point(|&s| s <= t + tol);
        k.saturating_sub(1).min(n.saturating_sub(2))
    }

    pub fn alpha_at(&self, t: f64, z: &WindowState) -> Result<DVector<f64>> {
        let k = self.node_for(t);
        let a = match &self.alpha {
            AlphaRule::Constant { alpha } => alpha.clone(),
            AlphaRule::Affine { basis, coef } => {
                let phi = DVector::from_vec(basis.eval(&z.flatten()));
                coef[k].tr_mul(&phi)
            }
            AlphaRule::Grid { basis, candidates, surfaces } => {
                candidates[surface_argmin(&basis.eval(&z.flatten()), &surfaces[k])].clone()
            }
        };
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Policy(format!("non-finite control at t = {t}")));
        }
        Ok(self.alpha_set.project(a))
    }

    pub fn beta_at(&self, n: usize, z_pre: &WindowState) -> Result<DVector<f64>> {
        match &self.beta {
            BetaRule::Fixed { beta } => Ok(beta.clone()),
            BetaRule::Schedule { betas } => {
                betas.get(n).cloned().ok_or_else(|| Error::Policy(format!("no beta for observation {n}")))
            }
            BetaRule::Grid { basis, candidates, surfaces } => {
                let s = surfaces.get(n).ok_or_else(|| Error::Policy(format!("no beta surface for observation {n}")))?;
                Ok(candidates[surface_argmin(&basis.eval(&z_pre.flatten()), s)].clone())
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse { location: "policy".into(), reason: e.to_string() })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse { location: "policy".into(), reason: e.to_string() })
    }
}

struct PairController<'a>(&'a PolicyPair);

impl Controller for PairController<'_> {
    fn beta(&mut self, n: usize, _t: f64, z: &WindowState) -> Result<DVector<f64>> {
        self.0.beta_at(n, z)
    }

    fn alpha(&mut self, _k: usize, t: f64, z: &WindowState) -> Result<DVector<f64>> {
        self.0.alpha_at(t, z)
    }
}

impl Policy for PolicyPair {
    fn controller(&self) -> Box<dyn Controller + '_> {
        Box::new(PairController(self))
    }

    fn window_len(&self) -> usize {
        self.window_len
    }
}

/// `f(t, x, α) + b(t, x, α)·∇ₓp̂ + ½ tr(σσᵀ ∇ₓ²p̂)` at stacked input `u = (x, z)`.
fn generator_objective(
    problem: &dyn ControlProblem,
    basis: &FeatureBasis,
    theta: &DVector<f64>,
    t: f64,
    x: &DVector<f64>,
    u: &[f64],
    alpha: &DVector<f64>,
) -> f64 {
    let grad = basis.grad_x(theta, u);
    let hess = basis.hessian_x(theta, u);
    let sigma = problem.diffusion(t, x, alpha);
    problem.running_cost(t, x, alpha) + problem.drift(t, x, alpha).dot(&grad) + half_trace_sigma_sq(&sigma, &hess)
}

fn closed_form_gain(problem: &dyn ControlProblem) -> Result<DMatrix<f64>> {
    let ca = problem
        .control_affine()
        .ok_or_else(|| Error::Config("closed-form alpha needs a control-affine problem with quadratic control cost".into()))?;
    let r_inv = ca.r.try_inverse().ok_or_else(|| Error::Config("control weight R is singular".into()))?;
    Ok(-(r_inv * ca.b.transpose()))
}

/// Belief-weighted control at a single window: `−R⁻¹Bᵀ Σ w_m ∇ₓp̂(x_m, z)` in
/// closed form, or the grid point minimising `Σ w_m [f + 𝒢_α p̂](x_m, z)`.
pub fn extract_alpha(
    ansatz: &ValueAnsatz,
    ensemble: &ParticleEnsemble,
    z: &WindowState,
    node: usize,
    problem: &dyn ControlProblem,
    mode: &AlphaMode,
) -> Result<DVector<f64>> {
    let theta = ansatz.theta.get(node).ok_or_else(|| Error::Config(format!("ansatz has no node {node}")))?;
    let t = ansatz.time_nodes[node];
    let basis = &ansatz.basis;
    let inputs: Vec<Vec<f64>> = ensemble.states.iter().map(|x| basis.input(x, z)).collect::<Result<_>>()?;
    let alpha = match mode {
        AlphaMode::ClosedForm => {
            let gain = closed_form_gain(problem)?;
            let mut g = DVector::zeros(basis.dim_x());
            for (u, w) in inputs.iter().zip(&ensemble.weights) {
                g.axpy(*w, &basis.grad_x(theta, u), 1.0);
            }
            gain * g
        }
        AlphaMode::GridSearch { .. } => {
            let cands = mode.candidates(problem.dims().alpha)?;
            let j = argmin_first(cands.iter().map(|a| {
                ensemble
                    .states
                    .iter()
                    .zip(&inputs)
                    .zip(&ensemble.weights)
                    .map(|((x, u), w)| w * generator_objective(problem, basis, theta, t, x, u, a))
                    .sum::<f64>()
            }));
            cands[j].clone()
        }
    };
    Ok(problem.alpha_set().project(alpha))
}

/// Observation-control objective at one pre-observation window. For each
/// candidate, averages `c_n(x, β) + p̂_n(x, window_update(z⁻, y))` over
/// `n_y` channel draws per particle and then over the ensemble weights.
/// Returns the per-candidate objective and the minimiser.
#[allow(clippy::too_many_arguments)]
pub fn extract_beta(
    ansatz: &ValueAnsatz,
    ensemble_pre: &ParticleEnsemble,
    z_pre: &WindowState,
    obs_index: usize,
    candidates: &[DVector<f64>],
    n_y_samples: usize,
    rng: &mut RngStream,
    problem: &dyn ControlProblem,
) -> Result<(Vec<f64>, DVector<f64>)> {
    if candidates.is_empty() {
        return Err(Error::Config("beta candidate grid is empty".into()));
    }
    if candidates.len() == 1 {
        return Ok((vec![0.0], candidates[0].clone()));
    }
    let node = *ansatz
        .obs_nodes
        .get(obs_index)
        .ok_or_else(|| Error::Config(format!("ansatz has no observation {obs_index}")))?;
    let dy = problem.dims().y;
    let n_y = n_y_samples.max(1);
    let mut table = vec![0.0; candidates.len()];
    for (x, w) in ensemble_pre.states.iter().zip(&ensemble_pre.weights) {
        let xis: Vec<DVector<f64>> = (0..n_y).map(|_| rng.normal_vector(dy)).collect();
        for (j, b) in candidates.iter().enumerate() {
            let mut acc = 0.0;
            for xi in &xis {
                let y = problem.sample_observation(x, b, obs_index, xi);
                acc += ansatz.value(node, x, &window_update(z_pre, &y))?;
            }
            table[j] += w * (problem.impulse_cost(obs_index, x, b) + acc / n_y as f64);
        }
    }
    let j = argmin_first(table.iter().copied());
    Ok((table, candidates[j].clone()))
}

/// Regression data built from a batch of rollouts.
#[derive(Debug, Clone)]
pub struct PathwiseSamples {
    pub time_nodes: Vec<f64>,
    pub obs_nodes: Vec<usize>,
    /// Per node: `(x_k, z_k)` with the window after any observation at `t_k`,
    /// target = remaining cost excluding that observation's cost.
    pub post: Vec<NodeSamples>,
    /// Per observation: `(x_k, z⁻_k)`, target including the observation cost.
    pub pre: Vec<NodeSamples>,
    /// Per step: the `M × d_α` controls the rollouts applied on `[t_k, t_{k+1})`.
    pub applied_alpha: Vec<DMatrix<f64>>,
}

/// Suffix sums of each rollout's costs, paired with state and window per node.
pub fn pathwise_costs(rollouts: &[Rollout]) -> Result<PathwiseSamples> {
    build_samples(rollouts, |_| Ok(None))
}

/// Like [`pathwise_costs`], with the Brownian martingale tail
/// `Σ_{j≥k} ∇ₓp̂_{j+1}(X_j, z_j)·(X_{j+1} − X_j − b_j Δt_j)` removed from every
/// target. `p̂` is a previous ansatz that does not depend on the current
/// increments, so the conditional mean of each target is unchanged while most
/// of the diffusion noise cancels.
pub fn pathwise_costs_with_control_variate(
    rollouts: &[Rollout],
    problem: &dyn ControlProblem,
    prev: &ValueAnsatz,
) -> Result<PathwiseSamples> {
    build_samples(rollouts, |r| martingale_tail(r, problem, prev).map(Some))
}

fn martingale_tail(r: &Rollout, problem: &dyn ControlProblem, prev: &ValueAnsatz) -> Result<Vec<f64>> {
    let n = r.times.len();
    if prev.time_nodes.len() != n || prev.obs_nodes != r.obs_nodes {
        return Err(Error::Config("control-variate ansatz does not match the rollout grid".into()));
    }
    let mut tail = vec![0.0; n];
    for k in (0..n - 1).rev() {
        let t = r.times[k];
        let h = r.times[k + 1] - t;
        let x = &r.states[k];
        let z = r.window_at(k);
        let u = prev.basis.input(x, z)?;
        let theta = match r.obs_nodes.iter().position(|&j| j == k + 1) {
            Some(obs) => &prev.theta_pre[obs],
            None => &prev.theta[k + 1],
        };
        let grad = prev.basis.grad_x(theta, &u);
        let noise = &r.states[k + 1] - x - problem.drift(t, x, &r.controls_alpha[k]) * h;
        tail[k] = tail[k + 1] + grad.dot(&noise);
    }
    Ok(tail)
}

fn build_samples<F>(rollouts: &[Rollout], adjust: F) -> Result<PathwiseSamples>
where
    F: Fn(&Rollout) -> Result<Option<Vec<f64>>>,
{
    let first = rollouts.first().ok_or_else(|| Error::Config("no rollouts".into()))?;
    let times = first.times.clone();
    let obs_nodes = first.obs_nodes.clone();
    if rollouts.iter().any(|r| r.times != times || r.obs_nodes != obs_nodes) {
        return Err(Error::Config("rollouts do not share one time grid".into()));
    }
    let m = rollouts.len();
    let dx = first.states[0].len();
    let dz = first.initial_window.flat_dim();
    let n_nodes = times.len();
    let mut post: Vec<NodeSamples> = (0..n_nodes)
        .map(|_| NodeSamples { inputs: DMatrix::zeros(m, dx + dz), targets: DVector::zeros(m) })
        .collect();
    let mut pre: Vec<NodeSamples> = (0..obs_nodes.len())
        .map(|_| NodeSamples { inputs: DMatrix::zeros(m, dx + dz), targets: DVector::zeros(m) })
        .collect();
    let da = first.controls_alpha.first().map_or(0, |a| a.len());
    let mut applied_alpha: Vec<DMatrix<f64>> = (0..n_nodes - 1).map(|_| DMatrix::zeros(m, da)).collect();
    let mut zbuf = vec![0.0; dz];
    for (i, r) in rollouts.iter().enumerate() {
        for (k, a) in r.controls_alpha.iter().enumerate() {
            applied_alpha[k].row_mut(i).copy_from(&a.transpose());
        }
        let mut ctg = r.cost_to_go();
        if let Some(tail) = adjust(r)? {
            ctg.iter_mut().zip(&tail).for_each(|(c, m)| *c -= m);
        }
        let mut obs = 0;
        for k in 0..n_nodes {
            let x = &r.states[k];
            let mut target = ctg[k];
            if obs < obs_nodes.len() && obs_nodes[obs] == k {
                let s = &mut pre[obs];
                for d in 0..dx {
                    s.inputs[(i, d)] = x[d];
                }
                r.window_before(k).flatten_into(&mut zbuf);
                for (d, z) in zbuf.iter().take(dz).enumerate() {
                    s.inputs[(i, dx + d)] = *z;
                }
                s.targets[i] = target;
                target -= r.impulse_costs[obs];
                obs += 1;
            }
            let s = &mut post[k];
            for d in 0..dx {
                s.inputs[(i, d)] = x[d];
            }
            r.window_at(k).flatten_into(&mut zbuf);
            for (d, z) in zbuf.iter().take(dz).enumerate() {
                s.inputs[(i, dx + d)] = *z;
            }
            s.targets[i] = target;
        }
    }
    Ok(PathwiseSamples { time_nodes: times, obs_nodes, post, pre, applied_alpha })
}

/// Training hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub m_train: usize,
    pub dt: f64,
    /// Window length `K`.
    pub window_len: usize,
    /// Degree of the value ansatz in `(x, z)`.
    pub degree: u32,
    /// Degree of the window features used for the policy regressions.
    pub policy_degree: u32,
    pub include_cross: bool,
    /// `None` uses `1e-6·M`.
    pub ridge: Option<f64>,
    pub n_outer: usize,
    pub tol: f64,
    pub seed: u64,
    pub n_y_samples: usize,
    pub alpha_mode: AlphaMode,
    /// Subtract the martingale control variate from the regression targets.
    pub control_variate: bool,
    /// Weight of the new fit in `θ ← (1-w)·θ_prev + w·θ_fit`.
    pub relaxation: f64,
    /// `ρ` in the extraction objective `H(a) + ½ρ|a − α_prev|²`, where `α_prev`
    /// is the control the rollouts applied. Zero gives the plain minimiser.
    pub proximal: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            m_train: 500,
            dt: 0.01,
            window_len: 1,
            degree: 2,
            policy_degree: 2,
            include_cross: true,
            ridge: None,
            n_outer: 30,
            tol: 1e-3,
            seed: 0,
            n_y_samples: 8,
            alpha_mode: AlphaMode::ClosedForm,
            control_variate: true,
            relaxation: 1.0,
            proximal: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_train < 2 {
            return Err(Error::Config(format!("m_train must be at least 2, got {}", self.m_train)));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.n_outer == 0 {
            return Err(Error::Config("n_outer must be at least 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config(format!("tol must be nonnegative, got {}", self.tol)));
        }
        if !(self.relaxation > 0.0 && self.relaxation <= 1.0) {
            return Err(Error::Config(format!("relaxation must lie in (0, 1], got {}", self.relaxation)));
        }
        if !(self.proximal >= 0.0 && self.proximal.is_finite()) {
            return Err(Error::Config(format!("proximal weight must be finite and nonnegative, got {}", self.proximal)));
        }
        if matches!(self.ridge, Some(r) if !(r >= 0.0)) {
            return Err(Error::Config("ridge must be nonnegative".into()));
        }
        if let AlphaMode::GridSearch { candidates } = &self.alpha_mode {
            if candidates.is_empty() {
                return Err(Error::Config("alpha grid is empty".into()));
            }
        }
        Ok(())
    }
}

/// One completed outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Mean pathwise cost of the forward pass.
    pub cost: f64,
    pub ci95: f64,
    /// `‖θ_ℓ − θ_{ℓ−1}‖` over all nodes.
    pub dtheta_norm: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Estimated cost under the initial ansatz.
    pub initial_cost: f64,
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    pub fn last_cost(&self) -> Option<f64> {
        self.iterations.last().map(|r| r.cost)
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub ansatz: ValueAnsatz,
    /// Policy extracted from the final ansatz.
    pub policy: PolicyPair,
    pub history: TrainHistory,
}

/// A training failure with the iterations completed before it.
#[derive(Debug)]
pub struct TrainError {
    pub error: Error,
    pub history: TrainHistory,
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} iterations)", self.error, self.history.len())
    }
}

impl std::error::Error for TrainError {}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        e.error
    }
}

/// Solver context shared by the extraction steps of one training run.
struct Extractor<'a> {
    problem: &'a dyn ControlProblem,
    cfg: &'a TrainConfig,
    zbasis: FeatureBasis,
    exec: Execution,
}

impl Extractor<'_> {
    fn ridge(&self, m: usize) -> f64 {
        self.cfg.ridge.unwrap_or_else(|| default_ridge(m))
    }

    fn z_design(&self, s: &NodeSamples, dx: usize) -> DMatrix<f64> {
        let m = s.len();
        let dz = self.zbasis.input_dim();
        let mut phi = DMatrix::zeros(m, self.zbasis.n_features());
        let mut z = vec![0.0; dz];
        let mut row = vec![0.0; self.zbasis.n_features()];
        for i in 0..m {
            for (d, zd) in z.iter_mut().enumerate() {
                *zd = s.inputs[(i, dx + d)];
            }
            self.zbasis.eval_into(&z, &mut row);
            for (j, v) in row.iter().enumerate() {
                phi[(i, j)] = *v;
            }
        }
        phi
    }

    fn alpha_rule(&self, ansatz: &ValueAnsatz, samples: &PathwiseSamples) -> Result<AlphaRule> {
        let basis = &ansatz.basis;
        let dx = basis.dim_x();
        let n_alpha_nodes = samples.time_nodes.len() - 1;
        match &self.cfg.alpha_mode {
            AlphaMode::ClosedForm => {
                let rho = self.cfg.proximal;
                let (gain, pull) = if rho > 0.0 {
                    let ca = self.problem.control_affine().ok_or_else(|| {
                        Error::Config("closed-form alpha needs a control-affine problem with quadratic control cost".into())
                    })?;
                    let n = ca.r.nrows();
                    let inv = (&ca.r + DMatrix::identity(n, n) * rho)
                        .try_inverse()
                        .ok_or_else(|| Error::Config("R + ρI is singular".into()))?;
                    (-(&inv * ca.b.transpose()), Some(inv * rho))
                } else {
                    (closed_form_gain(self.problem)?, None)
                };
                let coef = try_map_indexed(n_alpha_nodes, self.exec, |k| {
                    let s = &samples.post[k];
                    let m = s.len();
                    let mut targets = DMatrix::zeros(m, gain.nrows());
                    for i in 0..m {
                        let u: Vec<f64> = s.inputs.row(i).iter().copied().collect();
                        let mut a = &gain * basis.grad_x(&ansatz.theta[k], &u);
                        if let Some(pull) = &pull {
                            a += pull * samples.applied_alpha[k].row(i).transpose();
                        }
                        targets.row_mut(i).copy_from(&a.transpose());
                    }
                    fit_standardized(&self.z_design(s, dx), &targets, self.ridge(m))
                        .map_err(|e| Error::Fit { node: k, reason: e.to_string() })
                })?;
                Ok(AlphaRule::Affine { basis: self.zbasis.clone(), coef })
            }
            mode @ AlphaMode::GridSearch { .. } => {
                let cands = mode.candidates(self.problem.dims().alpha)?;
                let surfaces = try_map_indexed(n_alpha_nodes, self.exec, |k| {
                    let s = &samples.post[k];
                    let m = s.len();
                    let t = samples.time_nodes[k];
                    let mut targets = DMatrix::zeros(m, cands.len());
                    for i in 0..m {
                        let u: Vec<f64> = s.inputs.row(i).iter().copied().collect();
                        let x = DVector::from_column_slice(&u[..dx]);
                        let theta = &ansatz.theta[k];
                        // the state-only terms are shared by all candidates
                        let grad = basis.grad_x(theta, &u);
                        let hess = basis.hessian_x(theta, &u);
                        let prev = samples.applied_alpha[k].row(i).transpose();
                        for (j, a) in cands.iter().enumerate() {
                            let sigma = self.problem.diffusion(t, &x, a);
                            targets[(i, j)] = self.problem.running_cost(t, &x, a)
                                + self.problem.drift(t, &x, a).dot(&grad)
                                + half_trace_sigma_sq(&sigma, &hess)
                                + 0.5 * self.cfg.proximal * (a - &prev).norm_squared();
                        }
                    }
                    fit_standardized(&self.z_design(s, dx), &targets, self.ridge(m))
                        .map_err(|e| Error::Fit { node: k, reason: e.to_string() })
                })?;
                Ok(AlphaRule::Grid { basis: self.zbasis.clone(), candidates: cands, surfaces })
            }
        }
    }

    fn beta_rule(&self, ansatz: &ValueAnsatz, samples: &PathwiseSamples) -> Result<BetaRule> {
        let cands = self.problem.beta_set().candidates().to_vec();
        if cands.len() == 1 {
            return Ok(BetaRule::Fixed { beta: cands[0].clone() });
        }
        let basis = &ansatz.basis;
        let dx = basis.dim_x();
        let dy = self.problem.dims().y;
        let n_y = self.cfg.n_y_samples.max(1);
        let window_len = self.cfg.window_len;
        let mut surfaces = Vec::with_capacity(samples.obs_nodes.len());
        for (n, &node) in samples.obs_nodes.iter().enumerate() {
            let s = &samples.pre[n];
            let m = s.len();
            let seed = derive_seed(self.cfg.seed, 0x6265_7461_0000 + n as u64);
            let rows = try_map_indexed(m, self.exec, |i| -> Result<Vec<f64>> {
                let u: Vec<f64> = s.inputs.row(i).iter().copied().collect();
                let x = DVector::from_column_slice(&u[..dx]);
                let z_pre = window_from_flat(&u[dx..], window_len, dy);
                let mut rng = RngStream::new(seed, i as u64);
                let xis: Vec<DVector<f64>> = (0..n_y).map(|_| rng.normal_vector(dy)).collect();
                cands
                    .iter()
                    .map(|b| {
                        let mut acc = 0.0;
                        for xi in &xis {
                            let y = self.problem.sample_observation(&x, b, n, xi);
                            acc += ansatz.value(node, &x, &window_update(&z_pre, &y))?;
                        }
                        Ok(self.problem.impulse_cost(n, &x, b) + acc / n_y as f64)
                    })
                    .collect()
            })?;
            let targets = DMatrix::from_fn(m, cands.len(), |i, j| rows[i][j]);
            let surface = fit_standardized(&self.z_design(s, dx), &targets, self.ridge(m))
                .map_err(|e| Error::Fit { node, reason: e.to_string() })?;
            surfaces.push(surface);
        }
        Ok(BetaRule::Grid { basis: self.zbasis.clone(), candidates: cands, surfaces })
    }

    fn policy(&self, ansatz: &ValueAnsatz, samples: &PathwiseSamples) -> Result<PolicyPair> {
        Ok(PolicyPair {
            time_nodes: samples.time_nodes.clone(),
            window_len: self.cfg.window_len,
            dim_y: self.problem.dims().y,
            alpha: self.alpha_rule(ansatz, samples)?,
            beta: self.beta_rule(ansatz, samples)?,
            alpha_set: self.problem.alpha_set().clone(),
        })
    }
}

/// Rebuilds a window from its zero-padded flat form. Leading all-zero slots
/// are indistinguishable from padding, which is harmless because features are
/// computed from the flat form.
fn window_from_flat(flat: &[f64], capacity: usize, dim_y: usize) -> WindowState {
    let mut w = WindowState::new(capacity, dim_y);
    for k in 0..capacity {
        let slot = &flat[k * dim_y..(k + 1) * dim_y];
        if w.is_empty() && slot.iter().all(|v| *v == 0.0) {
            continue;
        }
        w.push(DVector::from_column_slice(slot));
    }
    w
}

fn fit_ansatz(
    samples: &PathwiseSamples,
    basis: &FeatureBasis,
    ridge: Option<f64>,
    exec: Execution,
) -> Result<ValueAnsatz> {
    let theta = try_map_indexed(samples.post.len(), exec, |k| fit_node(basis, &samples.post[k], ridge, k))?;
    let theta_pre =
        try_map_indexed(samples.pre.len(), exec, |n| fit_node(basis, &samples.pre[n], ridge, samples.obs_nodes[n]))?;
    Ok(ValueAnsatz {
        basis: basis.clone(),
        time_nodes: samples.time_nodes.clone(),
        theta,
        obs_nodes: samples.obs_nodes.clone(),
        theta_pre,
    })
}

fn theta_distance(a: &ValueAnsatz, b: &ValueAnsatz) -> f64 {
    a.theta
        .iter()
        .zip(&b.theta)
        .chain(a.theta_pre.iter().zip(&b.theta_pre))
        .map(|(p, q)| (p - q).norm_squared())
        .sum::<f64>()
        .sqrt()
}

/// Initial ansatz: zero everywhere except the terminal node, fitted to `g` on
/// the initial particle cloud.
fn initial_ansatz(
    problem: &dyn ControlProblem,
    basis: &FeatureBasis,
    grid: &TimeGrid,
    cloud: &ParticleEnsemble,
    cfg: &TrainConfig,
) -> Result<ValueAnsatz> {
    let mut ansatz = ValueAnsatz::zeros(basis.clone(), grid.times().to_vec(), grid.obs_nodes().to_vec());
    let m = cloud.len();
    let dx = basis.dim_x();
    let mut inputs = DMatrix::zeros(m, basis.input_dim());
    let mut targets = DVector::zeros(m);
    for (i, x) in cloud.states.iter().enumerate() {
        for d in 0..dx {
            inputs[(i, d)] = x[d];
        }
        targets[i] = problem.terminal_cost(x);
    }
    let last = grid.n_nodes() - 1;
    ansatz.theta[last] = fit_node(basis, &NodeSamples { inputs, targets }, cfg.ridge, last)?;
    Ok(ansatz)
}

/// First-pass policy: `α = 0` (projected) and, at each observation, the
/// candidate with the smallest mean sensing cost over the initial cloud (the
/// choice against a value that does not yet depend on the window).
fn initial_policy(problem: &dyn ControlProblem, grid: &TimeGrid, cloud: &ParticleEnsemble, cfg: &TrainConfig) -> PolicyPair {
    let d = problem.dims();
    let cands = problem.beta_set().candidates();
    let beta = if cands.len() == 1 {
        BetaRule::Fixed { beta: cands[0].clone() }
    } else {
        let betas = (0..grid.obs_nodes().len())
            .map(|n| {
                let j = argmin_first(
                    cands.iter().map(|b| cloud.states.iter().map(|x| problem.impulse_cost(n, x, b)).sum::<f64>()),
                );
                cands[j].clone()
            })
            .collect();
        BetaRule::Schedule { betas }
    };
    PolicyPair {
        time_nodes: grid.times().to_vec(),
        window_len: cfg.window_len,
        dim_y: d.y,
        alpha: AlphaRule::Constant { alpha: problem.alpha_set().project(DVector::zeros(d.alpha)) },
        beta,
        alpha_set: problem.alpha_set().clone(),
    }
}

/// Runs the fixed-point iteration. Stops when the relative change of the
/// estimated cost drops below `tol` or after `n_outer` iterations.
pub fn train(problem: &dyn ControlProblem, cfg: &TrainConfig, exec: Execution) -> std::result::Result<TrainResult, TrainError> {
    let mut history = TrainHistory::default();
    match train_inner(problem, cfg, exec, &mut history) {
        Ok((ansatz, policy)) => Ok(TrainResult { ansatz, policy, history }),
        Err(error) => Err(TrainError { error, history }),
    }
}

fn blend_theta(next: &mut ValueAnsatz, prev: &ValueAnsatz, w: f64) {
    let pairs = next.theta.iter_mut().zip(&prev.theta).chain(next.theta_pre.iter_mut().zip(&prev.theta_pre));
    for (a, b) in pairs {
        for (x, y) in a.iter_mut().zip(b.iter()) {
            *x = w * *x + (1.0 - w) * y;
        }
    }
}

fn train_inner(
    problem: &dyn ControlProblem,
    cfg: &TrainConfig,
    exec: Execution,
    history: &mut TrainHistory,
) -> Result<(ValueAnsatz, PolicyPair)> {
    cfg.validate()?;
    let d = problem.dims();
    if matches!(cfg.alpha_mode, AlphaMode::ClosedForm) {
        closed_form_gain(problem)?;
    }
    let grid = TimeGrid::for_problem(problem, cfg.dt)?;
    let basis = FeatureBasis::for_window(cfg.degree, d.x, cfg.window_len, d.y, cfg.include_cross);
    let ex = Extractor {
        problem,
        cfg,
        zbasis: FeatureBasis::new(cfg.policy_degree, 0, cfg.window_len * d.y, true),
        exec,
    };

    let cloud = ParticleEnsemble::sample_initial(problem, cfg.m_train, cfg.seed);
    let mut ansatz = initial_ansatz(problem, &basis, &grid, &cloud, cfg)?;
    let empty = WindowState::new(cfg.window_len, d.y);
    let p0 = map_indexed(cloud.len(), exec, |i| ansatz.value(0, &cloud.states[i], &empty))
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
    history.initial_cost = p0.iter().sum::<f64>() / p0.len() as f64;

    let mut policy = initial_policy(problem, &grid, &cloud, cfg);
    let mut prev_cost = history.initial_cost;
    for iteration in 1..=cfg.n_outer {
        let start = Instant::now();
        let rollouts = simulate_batch(problem, &policy, &grid, cfg.m_train, cfg.seed, exec, |r| r)?;
        let totals: Vec<f64> = rollouts.iter().map(Rollout::total_cost).collect();
        let est = McEstimate::from_samples(&totals);
        let samples = if cfg.control_variate {
            pathwise_costs_with_control_variate(&rollouts, problem, &ansatz)?
        } else {
            pathwise_costs(&rollouts)?
        };
        drop(rollouts);
        let mut next = fit_ansatz(&samples, &basis, cfg.ridge, exec)?;
        if cfg.relaxation < 1.0 {
            blend_theta(&mut next, &ansatz, cfg.relaxation);
        }
        let dtheta = theta_distance(&next, &ansatz);
        ansatz = next;
        let mut next_policy = ex.policy(&ansatz, &samples)?;
        drop(samples);
        if next_policy.beta != policy.beta && problem.beta_set().len() > 1 {
            // The windows behind the alpha regression were observed under the
            // old beta rule; redo that regression under the new one.
            let probe = simulate_batch(problem, &next_policy, &grid, cfg.m_train, cfg.seed, exec, |r| r)?;
            let probe_samples = pathwise_costs(&probe)?;
            drop(probe);
            next_policy.alpha = ex.alpha_rule(&ansatz, &probe_samples)?;
        }
        policy = next_policy;
        let rec = IterationRecord {
            iteration,
            cost: est.mean,
            ci95: est.ci95,
            dtheta_norm: dtheta,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "iteration {} J={:.6} ci={:.6} dtheta={:.4e} {:.2}s",
            rec.iteration,
            rec.cost,
            rec.ci95,
            rec.dtheta_norm,
            rec.seconds
        );
        history.iterations.push(rec);
        if (est.mean - prev_cost).abs() / prev_cost.abs().max(1.0) < cfg.tol {
            history.converged = true;
            break;
        }
        prev_cost = est.mean;
    }
    Ok((ansatz, policy))
}
