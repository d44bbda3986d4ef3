//! Belief representations: a weighted particle ensemble (propagate, Bayes
//! reweight, systematic resampling) and the Gaussian filter for linear models.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{ControlProblem, WindowState};
use crate::parallel::{map_indexed, try_map_indexed, Execution};
use crate::sim::{derive_seed, em_step, RngStream};

/// Weighted samples approximating a belief. Each particle owns its random stream.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    pub states: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
    streams: Vec<RngStream>,
    seed: u64,
    generation: u64,
}

impl ParticleEnsemble {
    /// Equally weighted particles with explicit states; particle `m` uses stream `(seed, m)`.
    pub fn from_states(states: Vec<DVector<f64>>, seed: u64) -> Self {
        let m = states.len();
        Self {
            weights: vec![1.0 / m as f64; m],
            streams: (0..m as u64).map(|i| RngStream::new(seed, i)).collect(),
            states,
            seed,
            generation: 0,
        }
    }

    /// `m` draws from the initial law. Particle `i` is drawn from stream `(seed, i)`
    /// exactly as a rollout on the same stream draws its initial state.
    pub fn sample_initial(problem: &dyn ControlProblem, m: usize, seed: u64) -> Self {
        let mut streams: Vec<RngStream> = (0..m as u64).map(|i| RngStream::new(seed, i)).collect();
        let states = streams.iter_mut().map(|s| problem.sample_initial(s)).collect();
        Self { states, weights: vec![1.0 / m as f64; m], streams, seed, generation: 0 }
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.states.len() {
            return Err(Error::Config("weights and states differ in length".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Domain("particle weights must be nonnegative".into()));
        }
        self.weights = weights;
        self.normalize()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn stream_ids(&self) -> Vec<u64> {
        self.streams.iter().map(|s| s.stream_id()).collect()
    }

    pub fn normalize(&mut self) -> Result<()> {
        let total: f64 = self.weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Degeneracy { obs_index: 0, reason: "weights sum to zero".into() });
        }
        self.weights.iter_mut().for_each(|w| *w /= total);
        Ok(())
    }

    /// Weighted pairing `⟨φ, μ⟩`.
    pub fn expect<F: Fn(&DVector<f64>) -> f64>(&self, phi: F) -> f64 {
        self.states.iter().zip(&self.weights).map(|(x, w)| w * phi(x)).sum()
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.states[0].len());
        for (x, w) in self.states.iter().zip(&self.weights) {
            acc.axpy(*w, x, 1.0);
        }
        acc
    }

    /// Weighted covariance (normalised by the weight sum, no small-sample correction).
    pub fn covariance(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let d = mean.len();
        let mut acc = DMatrix::zeros(d, d);
        for (x, w) in self.states.iter().zip(&self.weights) {
            let e = x - &mean;
            acc.ger(*w, &e, &e, 1.0);
        }
        acc
    }

    pub fn ess(&self) -> f64 {
        effective_sample_size(&self.weights)
    }

    /// CSV snapshot: `particle_id, x_1..x_d, weight`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let d = self.states.first().map_or(0, |x| x.len());
        let header: Vec<String> = std::iter::once("particle_id".to_string())
            .chain((1..=d).map(|i| format!("x_{i}")))
            .chain(std::iter::once("weight".to_string()))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for (i, (x, w)) in self.states.iter().zip(&self.weights).enumerate() {
            write!(out, "{i}")?;
            for v in x.iter() {
                write!(out, ",{v}")?;
            }
            writeln!(out, ",{w}")?;
        }
        Ok(())
    }
}

/// Advances every particle from `t0` to `t1` by Euler–Maruyama steps of at most `dt`.
/// The window is frozen over the slab; weights are untouched.
#[allow(clippy::too_many_arguments)]
pub fn propagate_ensemble<F>(
    e: &ParticleEnsemble,
    alpha_of: F,
    window: &WindowState,
    t0: f64,
    t1: f64,
    dt: f64,
    problem: &dyn ControlProblem,
    exec: Execution,
) -> Result<ParticleEnsemble>
where
    F: Fn(f64, &DVector<f64>, &WindowState) -> DVector<f64> + Sync + Send,
{
    if !(t1 > t0) {
        return Err(Error::Domain(format!("propagation needs t0 < t1, got [{t0}, {t1}]")));
    }
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("time step must be positive, got {dt}")));
    }
    let steps = (((t1 - t0) / dt) - 1e-9).ceil().max(1.0) as usize;
    let h = (t1 - t0) / steps as f64;
    let d_w = problem.dims().w;
    let moved = try_map_indexed(e.len(), exec, |m| {
        let mut rng = e.streams[m].clone();
        let mut x = e.states[m].clone();
        for k in 0..steps {
            let t = t0 + k as f64 * h;
            let alpha = alpha_of(t, &x, window);
            let dw = rng.normal_vector(d_w);
            x = em_step(&x, t, &alpha, h, &dw, problem).map_err(|err| match err {
                Error::Propagation { reason, .. } => Error::Propagation { trajectory: rng.stream_id(), reason },
                other => other,
            })?;
        }
        Ok::<_, Error>((x, rng))
    })?;
    let (states, streams) = moved.into_iter().unzip();
    Ok(ParticleEnsemble { states, weights: e.weights.clone(), streams, seed: e.seed, generation: e.generation })
}

/// Bayes update of the weights with the observation likelihood, evaluated in
/// log space with a max shift. Returns the posterior ensemble and
/// `log L_n = log Σ_m w_m π_n(y | x_m, β)`.
pub fn bayes_reweight(
    e: &ParticleEnsemble,
    y: &DVector<f64>,
    beta: &DVector<f64>,
    obs_index: usize,
    problem: &dyn ControlProblem,
) -> Result<(ParticleEnsemble, f64)> {
    let logs: Vec<f64> = e
        .states
        .iter()
        .zip(&e.weights)
        .map(|(x, w)| if *w > 0.0 { w.ln() + problem.likelihood_logdensity(y, x, beta, obs_index) } else { f64::NEG_INFINITY })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Degeneracy { obs_index, reason: "all likelihoods are numerically zero".into() });
    }
    let unnorm: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    let mut out = e.clone();
    out.weights = unnorm.into_iter().map(|u| u / total).collect();
    Ok((out, max + total.ln()))
}

/// `1 / Σ w²`.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Systematic resampling with a fresh uniform offset drawn from `rng`.
pub fn systematic_resample(e: &ParticleEnsemble, rng: &mut RngStream) -> ParticleEnsemble {
    let u = rng.uniform() / e.len() as f64;
    systematic_resample_with_offset(e, u)
}

/// Systematic resampling with offset `u ∈ [0, 1/M)`: particle `m` is copied
/// once for every point `u + j/M` falling in its cumulative-weight interval.
/// Copies receive fresh, distinct random streams.
pub fn systematic_resample_with_offset(e: &ParticleEnsemble, u: f64) -> ParticleEnsemble {
    let m = e.len();
    let step = 1.0 / m as f64;
    let mut states = Vec::with_capacity(m);
    let mut cumulative = e.weights[0];
    let mut i = 0;
    for j in 0..m {
        let point = u + j as f64 * step;
        while point >= cumulative && i < m - 1 {
            i += 1;
            cumulative += e.weights[i];
        }
        states.push(e.states[i].clone());
    }
    let generation = e.generation + 1;
    let seed = derive_seed(e.seed, generation);
    ParticleEnsemble {
        states,
        weights: vec![step; m],
        streams: (0..m as u64).map(|k| RngStream::new(seed, k)).collect(),
        seed: e.seed,
        generation,
    }
}

/// Resamples when `ESS < M/2`.
pub fn resample_if_needed(e: ParticleEnsemble, rng: &mut RngStream) -> ParticleEnsemble {
    if e.ess() < 0.5 * e.len() as f64 {
        systematic_resample(&e, rng)
    } else {
        e
    }
}

/// Gaussian belief `N(mean, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { mean, cov }
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Continuous-time prediction: `dx̂ = (Ax̂ + Bα(t))dt`, `Ṗ = AP + PAᵀ + Σ`,
/// integrated with RK4 at step `≤ dt`, covariance symmetrised after each step.
/// `noise_cov` is `σσᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn kalman_predict<F>(
    b: &GaussianBelief,
    t0: f64,
    t1: f64,
    a: &DMatrix<f64>,
    bmat: &DMatrix<f64>,
    noise_cov: &DMatrix<f64>,
    alpha_path: F,
    dt: f64,
) -> GaussianBelief
where
    F: Fn(f64) -> DVector<f64>,
{
    let steps = (((t1 - t0) / dt) - 1e-9).ceil().max(1.0) as usize;
    let h = (t1 - t0) / steps as f64;
    let mut mean = b.mean.clone();
    let mut cov = b.cov.clone();
    let fm = |t: f64, m: &DVector<f64>| a * m + bmat * alpha_path(t);
    let fp = |p: &DMatrix<f64>| a * p + p * a.transpose() + noise_cov;
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        let k1 = fm(t, &mean);
        let k2 = fm(t + 0.5 * h, &(&mean + &k1 * (0.5 * h)));
        let k3 = fm(t + 0.5 * h, &(&mean + &k2 * (0.5 * h)));
        let k4 = fm(t + h, &(&mean + &k3 * h));
        mean += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);

        let l1 = fp(&cov);
        let l2 = fp(&(&cov + &l1 * (0.5 * h)));
        let l3 = fp(&(&cov + &l2 * (0.5 * h)));
        let l4 = fp(&(&cov + &l3 * h));
        cov += (l1 + l2 * 2.0 + l3 * 2.0 + l4) * (h / 6.0);
        symmetrize(&mut cov);
    }
    GaussianBelief { mean, cov }
}

/// Measurement update with gain `K = P⁻Cᵀ(CP⁻Cᵀ + R_y)⁻¹`.
pub fn kalman_update(b: &GaussianBelief, y: &DVector<f64>, c: &DMatrix<f64>, r_y: &DMatrix<f64>) -> Result<GaussianBelief> {
    kalman_update_with_loglik(b, y, c, r_y).map(|(post, _)| post)
}

/// Measurement update also returning the innovation log-likelihood
/// `log N(y; Cx̂⁻, CP⁻Cᵀ + R_y)`.
pub fn kalman_update_with_loglik(
    b: &GaussianBelief,
    y: &DVector<f64>,
    c: &DMatrix<f64>,
    r_y: &DMatrix<f64>,
) -> Result<(GaussianBelief, f64)> {
    let s = c * &b.cov * c.transpose() + r_y;
    let s_inv = s
        .clone()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::LinearAlgebra("singular innovation covariance".into()))?;
    let gain = &b.cov * c.transpose() * &s_inv;
    let innov = y - c * &b.mean;
    let mean = &b.mean + &gain * &innov;
    let n = b.mean.len();
    let mut cov = (DMatrix::identity(n, n) - &gain * c) * &b.cov;
    symmetrize(&mut cov);
    let det = s.determinant();
    let quad = innov.dot(&(&s_inv * &innov));
    let loglik = -0.5 * (quad + det.ln() + y.len() as f64 * (2.0 * std::f64::consts::PI).ln());
    Ok((GaussianBelief { mean, cov }, loglik))
}

/// Propagates, reweights and resamples an ensemble along one observation path
/// under a fixed window-independent control law. Returns the final ensemble and
/// the per-observation `log L_n`.
#[allow(clippy::too_many_arguments)]
pub fn filter_path<F>(
    problem: &dyn ControlProblem,
    mut e: ParticleEnsemble,
    observations: &[DVector<f64>],
    betas: &[DVector<f64>],
    alpha_of: F,
    dt: f64,
    resample_seed: u64,
    exec: Execution,
) -> Result<(ParticleEnsemble, Vec<f64>)>
where
    F: Fn(f64, &DVector<f64>, &WindowState) -> DVector<f64> + Sync + Send,
{
    let window = WindowState::new(0, problem.dims().y);
    let mut rng = RngStream::new(resample_seed, 0);
    let mut t = 0.0;
    let mut log_l = Vec::with_capacity(observations.len());
    for (n, (&tn, (y, beta))) in problem.obs_times().iter().zip(observations.iter().zip(betas)).enumerate() {
        e = propagate_ensemble(&e, &alpha_of, &window, t, tn, dt, problem, exec)?;
        let (post, l) = bayes_reweight(&e, y, beta, n, problem)?;
        log_l.push(l);
        e = resample_if_needed(post, &mut rng);
        t = tn;
    }
    Ok((e, log_l))
}

/// Parallel helper: per-particle log-likelihoods (used by diagnostics).
pub fn log_likelihoods(
    e: &ParticleEnsemble,
    y: &DVector<f64>,
    beta: &DVector<f64>,
    obs_index: usize,
    problem: &dyn ControlProblem,
    exec: Execution,
) -> Vec<f64> {
    map_indexed(e.len(), exec, |m| problem.likelihood_logdensity(y, &e.states[m], beta, obs_index))
}
