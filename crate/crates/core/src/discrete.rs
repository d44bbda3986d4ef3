//! Exact finite-state reference for the belief-space optimality systems.
//!
//! A continuous-time Markov chain on `S` states is steered by an action `a`
//! (generator `G_a`, running cost `f(·,a)`) and observed at fixed grid nodes
//! through an emission table `π(o|s,b)` chosen by an observation action `b` at
//! cost `c(·,b)`. Time is discretized by explicit Euler with step `dt` and
//! actions are held constant on each step, so the belief recursion, the
//! backward recursions for `Ū` and `λ`, dynamic programming and brute-force
//! enumeration all act on the same finite problem and can be compared exactly.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_TOL: f64 = 1e-12;

/// Default cap on the number of belief-tree nodes `exact_dp` may visit.
pub const DEFAULT_NODE_BUDGET: f64 = 5e7;

/// On-disk form of a finite chain instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub n_states: usize,
    pub horizon: f64,
    pub dt: f64,
    #[serde(default)]
    pub obs_times: Vec<f64>,
    pub initial_belief: Vec<f64>,
    /// Per action, `S×S` generator rows.
    pub generators: Vec<Vec<Vec<f64>>>,
    /// Per action, running cost per state.
    pub running_cost: Vec<Vec<f64>>,
    /// Per observation action, `S×O` emission rows `π(·|s,b)`.
    pub emissions: Vec<Vec<Vec<f64>>>,
    /// Per observation action, cost per state.
    pub observation_cost: Vec<Vec<f64>>,
    pub terminal_cost: Vec<f64>,
}

/// Validated finite chain.
#[derive(Debug, Clone)]
pub struct FiniteChain {
    spec: ChainSpec,
    generators: Vec<DMatrix<f64>>,
    running: Vec<DVector<f64>>,
    /// `S×O` per observation action.
    emissions: Vec<DMatrix<f64>>,
    obs_cost: Vec<DVector<f64>>,
    terminal: DVector<f64>,
    initial: DVector<f64>,
    n_steps: usize,
    obs_nodes: Vec<usize>,
}

fn check_len(what: &str, len: usize, expected: usize) -> Result<()> {
    if len != expected {
        return Err(Error::Config(format!("{what}: expected length {expected}, got {len}")));
    }
    Ok(())
}

fn check_finite(what: &str, xs: &[f64]) -> Result<()> {
    if let Some(i) = xs.iter().position(|x| !x.is_finite()) {
        return Err(Error::Config(format!("{what}[{i}] is not finite")));
    }
    Ok(())
}

/// `t/dt` as an integer node index, if `t` lies on the grid.
fn grid_index(t: f64, dt: f64) -> Option<usize> {
    let r = t / dt;
    let k = r.round();
    ((r - k).abs() <= 1e-9 * r.abs().max(1.0) && k >= 0.0).then_some(k as usize)
}

impl FiniteChain {
    pub fn new(spec: ChainSpec) -> Result<Self> {
        let s = spec.n_states;
        if s == 0 {
            return Err(Error::Config("n_states must be positive".into()));
        }
        if !(spec.dt > 0.0) || !(spec.horizon > 0.0) {
            return Err(Error::Config("dt and horizon must be positive".into()));
        }
        let n_steps = grid_index(spec.horizon, spec.dt)
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("horizon {} is not a multiple of dt {}", spec.horizon, spec.dt)))?;
        let mut obs_nodes = Vec::with_capacity(spec.obs_times.len());
        for (n, &t) in spec.obs_times.iter().enumerate() {
            let k = grid_index(t, spec.dt)
                .ok_or_else(|| Error::Config(format!("obs_times[{n}] = {t} is not on the dt grid")))?;
            if k == 0 || k >= n_steps || obs_nodes.last().is_some_and(|&p| p >= k) {
                return Err(Error::Config(format!(
                    "obs_times must be strictly increasing inside (0, T); obs_times[{n}] = {t}"
                )));
            }
            obs_nodes.push(k);
        }

        check_len("initial_belief", spec.initial_belief.len(), s)?;
        check_finite("initial_belief", &spec.initial_belief)?;
        if spec.initial_belief.iter().any(|p| *p < 0.0) || (spec.initial_belief.iter().sum::<f64>() - 1.0).abs() > ROW_TOL {
            return Err(Error::Config("initial_belief must be a probability vector".into()));
        }
        check_len("terminal_cost", spec.terminal_cost.len(), s)?;
        check_finite("terminal_cost", &spec.terminal_cost)?;

        if spec.generators.is_empty() {
            return Err(Error::Config("at least one action is required".into()));
        }
        check_len("running_cost", spec.running_cost.len(), spec.generators.len())?;
        let mut generators = Vec::with_capacity(spec.generators.len());
        for (a, rows) in spec.generators.iter().enumerate() {
            check_len(&format!("generators[{a}]"), rows.len(), s)?;
            let mut g = DMatrix::zeros(s, s);
            for (i, row) in rows.iter().enumerate() {
                let what = format!("generators[{a}][{i}]");
                check_len(&what, row.len(), s)?;
                check_finite(&what, row)?;
                if row.iter().enumerate().any(|(j, q)| j != i && *q < 0.0) {
                    return Err(Error::Config(format!("{what}: off-diagonal rates must be nonnegative")));
                }
                let sum: f64 = row.iter().sum();
                if sum.abs() > ROW_TOL {
                    return Err(Error::Config(format!("{what}: row sums to {sum}, expected 0")));
                }
                if 1.0 + spec.dt * row[i] < 0.0 {
                    return Err(Error::StepSize(format!("{what}: dt·rate exceeds 1, reduce dt")));
                }
                for (j, q) in row.iter().enumerate() {
                    g[(i, j)] = *q;
                }
            }
            let f = &spec.running_cost[a];
            check_len(&format!("running_cost[{a}]"), f.len(), s)?;
            check_finite(&format!("running_cost[{a}]"), f)?;
            generators.push(g);
        }

        if spec.emissions.is_empty() {
            return Err(Error::Config("at least one observation action is required".into()));
        }
        check_len("observation_cost", spec.observation_cost.len(), spec.emissions.len())?;
        let n_sym = spec.emissions[0].first().map_or(0, Vec::len);
        if n_sym == 0 {
            return Err(Error::Config("emission tables need at least one symbol".into()));
        }
        let mut emissions = Vec::with_capacity(spec.emissions.len());
        for (b, rows) in spec.emissions.iter().enumerate() {
            check_len(&format!("emissions[{b}]"), rows.len(), s)?;
            let mut e = DMatrix::zeros(s, n_sym);
            for (i, row) in rows.iter().enumerate() {
                let what = format!("emissions[{b}][{i}]");
                check_len(&what, row.len(), n_sym)?;
                check_finite(&what, row)?;
                if row.iter().any(|p| *p < 0.0) {
                    return Err(Error::Config(format!("{what}: probabilities must be nonnegative")));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_TOL {
                    return Err(Error::Config(format!("{what}: row sums to {sum}, expected 1")));
                }
                for (o, p) in row.iter().enumerate() {
                    e[(i, o)] = *p;
                }
            }
            let c = &spec.observation_cost[b];
            check_len(&format!("observation_cost[{b}]"), c.len(), s)?;
            check_finite(&format!("observation_cost[{b}]"), c)?;
            emissions.push(e);
        }

        Ok(Self {
            running: spec.running_cost.iter().map(|f| DVector::from_column_slice(f)).collect(),
            obs_cost: spec.observation_cost.iter().map(|c| DVector::from_column_slice(c)).collect(),
            terminal: DVector::from_column_slice(&spec.terminal_cost),
            initial: DVector::from_column_slice(&spec.initial_belief),
            generators,
            emissions,
            n_steps,
            obs_nodes,
            spec,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ChainSpec = serde_json::from_str(text).map_err(|e| Error::Parse {
            location: format!("line {} column {}", e.line(), e.column()),
            reason: e.to_string(),
        })?;
        Self::new(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: ChainSpec = serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: format!("{}:{}:{}", path.display(), e.line(), e.column()),
            reason: e.to_string(),
        })?;
        Self::new(spec)
    }

    pub fn spec(&self) -> &ChainSpec {
        &self.spec
    }

    pub fn n_states(&self) -> usize {
        self.spec.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.generators.len()
    }

    pub fn n_obs_actions(&self) -> usize {
        self.emissions.len()
    }

    pub fn n_symbols(&self) -> usize {
        self.emissions[0].ncols()
    }

    pub fn dt(&self) -> f64 {
        self.spec.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn obs_nodes(&self) -> &[usize] {
        &self.obs_nodes
    }

    pub fn generator(&self, a: usize) -> &DMatrix<f64> {
        &self.generators[a]
    }

    pub fn running_cost(&self, a: usize) -> &DVector<f64> {
        &self.running[a]
    }

    pub fn observation_cost(&self, b: usize) -> &DVector<f64> {
        &self.obs_cost[b]
    }

    pub fn terminal_cost(&self) -> &DVector<f64> {
        &self.terminal
    }

    pub fn initial_belief(&self) -> DiscreteBelief {
        DiscreteBelief { p: self.initial.clone() }
    }

    /// `π(o|·,b)` as a vector over states.
    pub fn likelihood(&self, o: usize, b: usize) -> DVector<f64> {
        self.emissions[b].column(o).into_owned()
    }
}

/// Probability vector over the chain's states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteBelief {
    pub p: DVector<f64>,
}

impl DiscreteBelief {
    pub fn new(p: DVector<f64>) -> Result<Self> {
        if p.iter().any(|v| !(*v >= 0.0)) || (p.sum() - 1.0).abs() > ROW_TOL {
            return Err(Error::Domain(format!("{:?} is not a probability vector", p.as_slice())));
        }
        Ok(Self { p })
    }

    pub fn pair(&self, u: &DVector<f64>) -> f64 {
        self.p.dot(u)
    }
}

/// `μ + dt·G_aᵀμ`, renormalized.
pub fn forward_belief_step(mu: &DiscreteBelief, a: usize, dt: f64, chain: &FiniteChain) -> Result<DiscreteBelief> {
    let flow = chain.generator(a).tr_mul(&mu.p);
    euler_on_simplex(&mu.p, &flow, dt)
}

fn euler_on_simplex(p: &DVector<f64>, flow: &DVector<f64>, dt: f64) -> Result<DiscreteBelief> {
    let mut next = p + flow * dt;
    if next.iter().any(|v| *v < -ROW_TOL) {
        return Err(Error::StepSize(format!("belief left the simplex: {:?}", next.as_slice())));
    }
    next.apply(|v| *v = v.max(0.0));
    let total = next.sum();
    Ok(DiscreteBelief { p: next / total })
}

/// Posterior after observing symbol `o` under observation action `b`, with the
/// predictive probability `L = Σ_s π(o|s,b)μ⁻(s)`.
pub fn bayes_jump(mu_pre: &DiscreteBelief, o: usize, b: usize, chain: &FiniteChain) -> Result<(DiscreteBelief, f64)> {
    let joint = chain.likelihood(o, b).component_mul(&mu_pre.p);
    let l = joint.sum();
    if !(l > 0.0) {
        return Err(Error::Degeneracy { obs_index: o, reason: format!("symbol {o} has zero predictive probability") });
    }
    Ok((DiscreteBelief { p: joint / l }, l))
}

/// One explicit step of the Kolmogorov backward equation: `U + dt·(G_a U + f_a)`.
pub fn backward_u_step(u: &DVector<f64>, a: usize, dt: f64, chain: &FiniteChain) -> DVector<f64> {
    u + (chain.generator(a) * u + chain.running_cost(a)) * dt
}

/// `c(·,b) + Σ_o U_post[o] ⊙ π(o|·,b)`.
pub fn u_jump(u_post: &[DVector<f64>], b: usize, chain: &FiniteChain) -> DVector<f64> {
    let mut u = chain.observation_cost(b).clone();
    for (o, up) in u_post.iter().enumerate() {
        u += up.component_mul(&chain.likelihood(o, b));
    }
    u
}

/// Adjoint jump with the correction from differentiating the Bayes normalizer:
/// `λ⁻(s) = c(s,b) + Σ_o λ_post[o](s)π(o|s,b) − Σ_o π(o|s,b)·⟨λ_post[o], π(o|·,b)⊙μ⁻⟩/L(o)`.
pub fn lambda_jump(lambda_post: &[DVector<f64>], b: usize, mu_pre: &DiscreteBelief, chain: &FiniteChain) -> Result<DVector<f64>> {
    let mut lam = u_jump(lambda_post, b, chain);
    for (o, lp) in lambda_post.iter().enumerate() {
        let pi = chain.likelihood(o, b);
        let joint = pi.component_mul(&mu_pre.p);
        let l = joint.sum();
        let num = lp.dot(&joint);
        if l > 0.0 {
            lam -= &pi * (num / l);
        } else if num != 0.0 {
            return Err(Error::Degeneracy { obs_index: o, reason: format!("symbol {o} has zero predictive probability") });
        }
    }
    Ok(lam)
}

/// `min_a ⟨f(·,a) + G_a U, μ⟩`, first action on ties.
pub fn hamiltonian_continuous(mu: &DiscreteBelief, u: &DVector<f64>, chain: &FiniteChain) -> (f64, usize) {
    argmin((0..chain.n_actions()).map(|a| mu.pair(&(chain.running_cost(a) + chain.generator(a) * u))))
}

/// `δℋᶜ/δU` at action `a`, i.e. the Fokker–Planck velocity `G_aᵀμ`.
pub fn hamiltonian_u_derivative(mu: &DiscreteBelief, a: usize, chain: &FiniteChain) -> DVector<f64> {
    chain.generator(a).tr_mul(&mu.p)
}

/// Pre-posterior objective of observation action `b` against fixed post-jump
/// values: `⟨c(·,b), μ⁻⟩ + Σ_o ⟨U_post[o], π(o|·,b) ⊙ μ⁻⟩`.
pub fn discrete_objective(mu_pre: &DiscreteBelief, u_post: &[DVector<f64>], b: usize, chain: &FiniteChain) -> f64 {
    mu_pre.pair(&u_jump(u_post, b, chain))
}

/// `min_b` of [`discrete_objective`], first action on ties.
pub fn hamiltonian_discrete(mu_pre: &DiscreteBelief, u_post: &[DVector<f64>], chain: &FiniteChain) -> (f64, usize) {
    argmin((0..chain.n_obs_actions()).map(|b| discrete_objective(mu_pre, u_post, b, chain)))
}

fn argmin(values: impl Iterator<Item = f64>) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for (i, v) in values.enumerate() {
        if v < best.0 {
            best = (v, i);
        }
    }
    best
}

/// Decisions and diagnostics between two observations (or the horizon).
///
/// Entry `j` of `beliefs`, `u`, `lambda` and `value` refers to grid node
/// `start + j`. The first entry is post-observation when the slab starts at an
/// observation node; the last entry is pre-observation when `observation` is
/// present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slab {
    pub start: usize,
    pub actions: Vec<usize>,
    pub beliefs: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub lambda: Vec<DVector<f64>>,
    pub value: Vec<f64>,
    pub observation: Option<ObservationNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationNode {
    pub obs_index: usize,
    /// Index into `candidates` of the optimal observation action.
    pub chosen: usize,
    pub candidates: Vec<ObservationChoice>,
}

/// Optimal continuation after committing to observation action `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationChoice {
    pub b: usize,
    /// `⟨c_b, μ⁻⟩ + Σ_o L(o)·V(child_o)`.
    pub value: f64,
    /// [`discrete_objective`] evaluated with the children's `Ū`.
    pub objective_u: f64,
    /// The same objective evaluated with the children's `λ`.
    pub objective_lambda: f64,
    pub u_pre: DVector<f64>,
    pub lambda_pre: DVector<f64>,
    pub branches: Vec<SymbolBranch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolBranch {
    pub symbol: usize,
    pub likelihood: f64,
    pub child: Slab,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpSolution {
    pub value: f64,
    pub tree: Slab,
}

/// Upper bound on the number of belief nodes visited by [`exact_dp`].
pub fn dp_node_count(chain: &FiniteChain) -> f64 {
    let na = chain.n_actions() as f64;
    let branch = (chain.n_obs_actions() * chain.n_symbols()) as f64;
    let mut bounds = chain.obs_nodes().to_vec();
    bounds.push(chain.n_steps());
    let (mut starts, mut total, mut prev) = (1.0_f64, 0.0_f64, 0usize);
    for &end in &bounds {
        let len = (end - prev) as i32;
        total += starts * (0..=len).map(|j| na.powi(j)).sum::<f64>();
        starts *= na.powi(len) * branch;
        prev = end;
    }
    total
}

/// Backward induction over the tree of reachable beliefs.
///
/// Between observations every step branches over all actions; at an
/// observation every action `b` and symbol `o` is expanded. The returned tree
/// follows the optimal actions and keeps every observation candidate, each with
/// its own optimal continuation, together with `μ`, `Ū`, `λ` and `V` per node.
pub fn exact_dp(chain: &FiniteChain, node_budget: f64) -> Result<DpSolution> {
    let nodes = dp_node_count(chain);
    if nodes > node_budget {
        return Err(Error::Size(format!("belief tree has about {nodes:.3e} nodes, budget is {node_budget:.3e}")));
    }
    let tree = build_slab(chain, 0, 0, chain.initial_belief())?;
    Ok(DpSolution { value: tree.value[0], tree })
}

fn slab_end(chain: &FiniteChain, next_obs: usize) -> usize {
    chain.obs_nodes().get(next_obs).copied().unwrap_or(chain.n_steps())
}

/// Optimal value from grid node `k` with belief `mu`; `next_obs` is the first
/// observation not yet taken.
fn dp_value(chain: &FiniteChain, k: usize, next_obs: usize, mu: &DiscreteBelief) -> Result<f64> {
    if k == slab_end(chain, next_obs) {
        if next_obs == chain.obs_nodes().len() {
            return Ok(mu.pair(chain.terminal_cost()));
        }
        let mut best = f64::INFINITY;
        for b in 0..chain.n_obs_actions() {
            let mut v = mu.pair(chain.observation_cost(b));
            for o in 0..chain.n_symbols() {
                if let Some((post, l)) = posterior(mu, o, b, chain) {
                    v += l * dp_value(chain, k, next_obs + 1, &post)?;
                }
            }
            best = best.min(v);
        }
        return Ok(best);
    }
    let mut best = f64::INFINITY;
    for a in 0..chain.n_actions() {
        let next = forward_belief_step(mu, a, chain.dt(), chain)?;
        let v = chain.dt() * mu.pair(chain.running_cost(a)) + dp_value(chain, k + 1, next_obs, &next)?;
        best = best.min(v);
    }
    Ok(best)
}

/// Posterior for a symbol with positive predictive probability, `None` otherwise.
fn posterior(mu: &DiscreteBelief, o: usize, b: usize, chain: &FiniteChain) -> Option<(DiscreteBelief, f64)> {
    bayes_jump(mu, o, b, chain).ok()
}

/// Belief used to plan after a symbol that cannot occur: the states compatible
/// with the symbol, weighted by its emission probability. Only `Ū` and `λ` at
/// states outside the support of `μ⁻` depend on this choice.
fn surrogate_posterior(mu: &DiscreteBelief, o: usize, b: usize, chain: &FiniteChain) -> DiscreteBelief {
    let pi = chain.likelihood(o, b);
    let total = pi.sum();
    if total > 0.0 {
        DiscreteBelief { p: pi / total }
    } else {
        mu.clone()
    }
}

fn build_slab(chain: &FiniteChain, start: usize, next_obs: usize, mu: DiscreteBelief) -> Result<Slab> {
    let end = slab_end(chain, next_obs);
    let dt = chain.dt();
    let mut actions = Vec::new();
    let mut beliefs = vec![mu];
    let mut stage = Vec::new();
    for k in start..end {
        let cur = beliefs.last().expect("nonempty");
        let mut best: Option<(f64, usize, DiscreteBelief)> = None;
        for a in 0..chain.n_actions() {
            let next = forward_belief_step(cur, a, dt, chain)?;
            let v = dt * cur.pair(chain.running_cost(a)) + dp_value(chain, k + 1, next_obs, &next)?;
            if best.as_ref().map_or(true, |b| v < b.0) {
                best = Some((v, a, next));
            }
        }
        let (_, a, next) = best.expect("at least one action");
        stage.push(dt * cur.pair(chain.running_cost(a)));
        actions.push(a);
        beliefs.push(next);
    }

    let last = beliefs.last().expect("nonempty").clone();
    let (tail_u, tail_lambda, tail_value, observation) = if next_obs == chain.obs_nodes().len() {
        let g = chain.terminal_cost().clone();
        let v = last.pair(&g);
        (g.clone(), g, v, None)
    } else {
        let mut candidates = Vec::with_capacity(chain.n_obs_actions());
        for b in 0..chain.n_obs_actions() {
            let mut value = last.pair(chain.observation_cost(b));
            let mut branches = Vec::with_capacity(chain.n_symbols());
            for o in 0..chain.n_symbols() {
                let (post, l) = posterior(&last, o, b, chain).unwrap_or_else(|| (surrogate_posterior(&last, o, b, chain), 0.0));
                let child = build_slab(chain, end, next_obs + 1, post)?;
                value += l * child.value[0];
                branches.push(SymbolBranch { symbol: o, likelihood: l, child });
            }
            let u_post: Vec<DVector<f64>> = branches.iter().map(|br| br.child.u[0].clone()).collect();
            let lambda_post: Vec<DVector<f64>> = branches.iter().map(|br| br.child.lambda[0].clone()).collect();
            candidates.push(ObservationChoice {
                b,
                value,
                objective_u: discrete_objective(&last, &u_post, b, chain),
                objective_lambda: discrete_objective(&last, &lambda_post, b, chain),
                u_pre: u_jump(&u_post, b, chain),
                lambda_pre: lambda_jump(&lambda_post, b, &last, chain)?,
                branches,
            });
        }
        let (_, chosen) = argmin(candidates.iter().map(|c| c.value));
        let c = &candidates[chosen];
        let out = (c.u_pre.clone(), c.lambda_pre.clone(), c.value);
        (out.0, out.1, out.2, Some(ObservationNode { obs_index: next_obs, chosen, candidates }))
    };

    let n = beliefs.len();
    let mut u = vec![tail_u; n];
    let mut lambda = vec![tail_lambda; n];
    let mut value = vec![tail_value; n];
    for j in (0..n - 1).rev() {
        u[j] = backward_u_step(&u[j + 1], actions[j], dt, chain);
        lambda[j] = backward_u_step(&lambda[j + 1], actions[j], dt, chain);
        value[j] = stage[j] + value[j + 1];
    }
    Ok(Slab { start, actions, beliefs: beliefs.into_iter().map(|b| b.p).collect(), u, lambda, value, observation })
}

/// Optimal value by exhaustive search over every action path on every slab,
/// every observation action, and every symbol-indexed continuation.
///
/// Works with unnormalized branch measures and forward cost accumulation only;
/// it shares no recursion with [`exact_dp`]. Because the total cost is a sum
/// of per-symbol terms, minimizing each continuation separately is the same as
/// searching their full cross product.
pub fn enumerate_value(chain: &FiniteChain, node_budget: f64) -> Result<f64> {
    let na = chain.n_actions() as f64;
    let mut bounds = chain.obs_nodes().to_vec();
    bounds.push(chain.n_steps());
    let (mut work, mut starts, mut prev) = (0.0, 1.0, 0usize);
    for &end in &bounds {
        let paths = na.powi((end - prev) as i32);
        work += starts * paths * (end - prev) as f64;
        starts *= paths * (chain.n_obs_actions() * chain.n_symbols()) as f64;
        prev = end;
    }
    if work > node_budget {
        return Err(Error::Size(format!("enumeration needs about {work:.3e} steps, budget is {node_budget:.3e}")));
    }
    Ok(enumerate_from(chain, 0, 0, &chain.initial.clone()))
}

fn enumerate_from(chain: &FiniteChain, start: usize, next_obs: usize, nu: &DVector<f64>) -> f64 {
    if nu.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    let end = slab_end(chain, next_obs);
    let len = end - start;
    let na = chain.n_actions();
    let n_paths = na.pow(len as u32);
    let dt = chain.dt();
    let mut best = f64::INFINITY;
    let mut path = vec![0usize; len];
    for code in 0..n_paths {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = c % na;
            c /= na;
        }
        let mut m = nu.clone();
        let mut cost = 0.0;
        for &a in &path {
            cost += dt * chain.running[a].dot(&m);
            m = &m + chain.generators[a].transpose() * &m * dt;
        }
        cost += if next_obs == chain.obs_nodes.len() {
            chain.terminal.dot(&m)
        } else {
            (0..chain.n_obs_actions())
                .map(|b| {
                    chain.obs_cost[b].dot(&m)
                        + (0..chain.n_symbols())
                            .map(|o| {
                                let branch = m.component_mul(&chain.emissions[b].column(o));
                                enumerate_from(chain, end, next_obs + 1, &branch)
                            })
                            .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
        };
        best = best.min(cost);
    }
    best
}

/// Fully observed values with state feedback on the same grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullyObserved {
    /// Per grid node, after any observation cost at that node.
    pub post: Vec<DVector<f64>>,
    /// Per observation, including `min_b c(s,b)`.
    pub pre: Vec<DVector<f64>>,
}

/// Per-state DP `U(s) = min_a [dt·f(s,a) + ((I + dt·G_a)U)(s)]`; an observation
/// adds `min_b c(s,b)` since the state is already known.
pub fn fully_observed_value(chain: &FiniteChain) -> FullyObserved {
    let n = chain.n_steps();
    let s = chain.n_states();
    let dt = chain.dt();
    let mut post = vec![DVector::zeros(s); n + 1];
    let mut pre = vec![DVector::zeros(s); chain.obs_nodes().len()];
    let mut u = chain.terminal_cost().clone();
    post[n] = u.clone();
    for k in (0..n).rev() {
        let next = match chain.obs_nodes().iter().position(|&node| node == k + 1) {
            Some(obs) => {
                let min_c = DVector::from_fn(s, |i, _| {
                    (0..chain.n_obs_actions()).map(|b| chain.observation_cost(b)[i]).fold(f64::INFINITY, f64::min)
                });
                pre[obs] = &u + min_c;
                pre[obs].clone()
            }
            None => u.clone(),
        };
        u = DVector::from_fn(s, |i, _| {
            (0..chain.n_actions())
                .map(|a| backward_u_step(&next, a, dt, chain)[i])
                .fold(f64::INFINITY, f64::min)
        });
        post[k] = u.clone();
    }
    FullyObserved { post, pre }
}

/// Worst-case residuals of the structural identities over a solved tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleDiagnostics {
    pub value: f64,
    pub enumerated_value: Option<f64>,
    pub tree_nodes: usize,
    /// `max |V − ⟨Ū, μ⟩|`.
    pub envelope: f64,
    /// `max |⟨λ⁻, μ⁻⟩ − ⟨c_b̄, μ⁻⟩|` over observation nodes.
    pub adjoint_pairing: f64,
    /// `max (Ū^FO(s) − Ū(s))⁺` over nodes and states.
    pub fo_bound_violation: f64,
    /// `max |forward_belief_step − (μ + dt·δℋᶜ/δU)|` at the Hamiltonian argmin.
    pub generator_consistency: f64,
    pub observation_nodes: usize,
    /// Observation nodes where the `Ū`- and `λ`-based objectives pick different `b`.
    pub argmin_disagreements: usize,
    /// Steps where the tree's action differs from the continuous-Hamiltonian argmin.
    pub hamiltonian_disagreements: usize,
}

impl OracleDiagnostics {
    /// Names of the hard identities whose residual exceeds `tol`.
    pub fn hard_failures(&self, tol: f64) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |name: &str, v: f64| {
            if !(v <= tol) {
                out.push(format!("{name}: {v:.3e} > {tol:.1e}"));
            }
        };
        check("envelope identity", self.envelope);
        check("adjoint pairing", self.adjoint_pairing);
        check("fully observed lower bound", self.fo_bound_violation);
        check("generator consistency", self.generator_consistency);
        if let Some(e) = self.enumerated_value {
            check("dp vs enumeration", (e - self.value).abs());
        }
        out
    }
}

/// Solves `chain`, optionally cross-checks against enumeration, and measures
/// every identity on the resulting tree.
pub fn run_diagnostics(chain: &FiniteChain, enumerate: bool, node_budget: f64) -> Result<(DpSolution, OracleDiagnostics)> {
    let sol = exact_dp(chain, node_budget)?;
    let enumerated_value = if enumerate { Some(enumerate_value(chain, node_budget)?) } else { None };
    let fo = fully_observed_value(chain);
    let mut d = OracleDiagnostics {
        value: sol.value,
        enumerated_value,
        tree_nodes: 0,
        envelope: 0.0,
        adjoint_pairing: 0.0,
        fo_bound_violation: 0.0,
        generator_consistency: 0.0,
        observation_nodes: 0,
        argmin_disagreements: 0,
        hamiltonian_disagreements: 0,
    };
    visit(chain, &fo, &sol.tree, &mut d)?;
    Ok((sol, d))
}

fn fo_gap(fo: &DVector<f64>, u: &DVector<f64>) -> f64 {
    fo.iter().zip(u.iter()).map(|(f, u)| f - u).fold(0.0, f64::max)
}

fn visit(chain: &FiniteChain, fo: &FullyObserved, slab: &Slab, d: &mut OracleDiagnostics) -> Result<()> {
    let dt = chain.dt();
    let n = slab.beliefs.len();
    for j in 0..n {
        let mu = DiscreteBelief { p: slab.beliefs[j].clone() };
        d.tree_nodes += 1;
        d.envelope = d.envelope.max((slab.value[j] - mu.pair(&slab.u[j])).abs());
        let k = slab.start + j;
        let fo_u = match &slab.observation {
            Some(o) if j == n - 1 => &fo.pre[o.obs_index],
            _ => &fo.post[k],
        };
        d.fo_bound_violation = d.fo_bound_violation.max(fo_gap(fo_u, &slab.u[j]));
        if j + 1 < n {
            let (_, a_star) = hamiltonian_continuous(&mu, &slab.u[j + 1], chain);
            let stepped = forward_belief_step(&mu, a_star, dt, chain)?;
            let via_h = euler_on_simplex(&mu.p, &hamiltonian_u_derivative(&mu, a_star, chain), dt)?;
            d.generator_consistency = d.generator_consistency.max((stepped.p - via_h.p).amax());
            if a_star != slab.actions[j] {
                d.hamiltonian_disagreements += 1;
            }
        }
    }
    if let Some(obs) = &slab.observation {
        let mu = DiscreteBelief { p: slab.beliefs[n - 1].clone() };
        d.observation_nodes += 1;
        for cand in &obs.candidates {
            let c = mu.pair(chain.observation_cost(cand.b));
            d.adjoint_pairing = d.adjoint_pairing.max((mu.pair(&cand.lambda_pre) - c).abs());
            d.envelope = d.envelope.max((cand.value - mu.pair(&cand.u_pre)).abs());
            d.envelope = d.envelope.max((cand.value - cand.objective_u).abs());
        }
        let by_u = argmin(obs.candidates.iter().map(|c| c.objective_u)).1;
        let by_lambda = argmin(obs.candidates.iter().map(|c| c.objective_lambda)).1;
        if by_u != by_lambda {
            d.argmin_disagreements += 1;
        }
        for cand in &obs.candidates {
            for br in &cand.branches {
                visit(chain, fo, &br.child, d)?;
            }
        }
    }
    Ok(())
}
