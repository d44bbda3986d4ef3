//! Polynomial feature bases over `(x, z)`, ridge least squares and the
//! per-node value ansatz `p̂_t^θ(x, z) = θ(t)·φ(x, z)`.

use std::path::Path;

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::WindowState;
use crate::parallel::{try_map_indexed, Execution};

/// Monomials up to `degree` over the stacked input `u = (x, z)`, in
/// graded-lexicographic order: constant, then all degree-1 terms, then all
/// degree-2 terms as index multisets `(i ≤ j)`, and so on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "BasisSpec", into = "BasisSpec")]
pub struct FeatureBasis {
    degree: u32,
    dim_x: usize,
    dim_z: usize,
    include_cross: bool,
    monomials: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct BasisSpec {
    degree: u32,
    dim_x: usize,
    dim_z: usize,
    include_cross: bool,
}

impl From<BasisSpec> for FeatureBasis {
    fn from(s: BasisSpec) -> Self {
        FeatureBasis::new(s.degree, s.dim_x, s.dim_z, s.include_cross)
    }
}

impl From<FeatureBasis> for BasisSpec {
    fn from(b: FeatureBasis) -> Self {
        BasisSpec { degree: b.degree, dim_x: b.dim_x, dim_z: b.dim_z, include_cross: b.include_cross }
    }
}

impl FeatureBasis {
    pub fn new(degree: u32, dim_x: usize, dim_z: usize, include_cross: bool) -> Self {
        let n = dim_x + dim_z;
        let mut monomials = Vec::new();
        for d in 0..=degree as usize {
            for m in (0..n).combinations_with_replacement(d) {
                let has_x = m.iter().any(|&i| i < dim_x);
                let has_z = m.iter().any(|&i| i >= dim_x);
                if include_cross || !(has_x && has_z) {
                    monomials.push(m);
                }
            }
        }
        Self { degree, dim_x, dim_z, include_cross, monomials }
    }

    /// Basis over `x` and a window of `window_len` observations of size `dim_y`.
    pub fn for_window(degree: u32, dim_x: usize, window_len: usize, dim_y: usize, include_cross: bool) -> Self {
        Self::new(degree, dim_x, window_len * dim_y, include_cross)
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }

    pub fn dim_z(&self) -> usize {
        self.dim_z
    }

    pub fn include_cross(&self) -> bool {
        self.include_cross
    }

    pub fn input_dim(&self) -> usize {
        self.dim_x + self.dim_z
    }

    pub fn n_features(&self) -> usize {
        self.monomials.len()
    }

    pub fn monomials(&self) -> &[Vec<usize>] {
        &self.monomials
    }

    /// Writes `φ(u)` into `out` (length `n_features`).
    pub fn eval_into(&self, u: &[f64], out: &mut [f64]) {
        for (o, m) in out.iter_mut().zip(&self.monomials) {
            *o = m.iter().map(|&i| u[i]).product();
        }
    }

    pub fn eval(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_features()];
        self.eval_into(u, &mut out);
        out
    }

    /// Stacks `x` and the zero-padded flattened window.
    pub fn input(&self, x: &DVector<f64>, z: &WindowState) -> Result<Vec<f64>> {
        if x.len() != self.dim_x || z.flat_dim() != self.dim_z {
            return Err(Error::Config(format!(
                "feature input has dimensions ({}, {}), basis expects ({}, {})",
                x.len(),
                z.flat_dim(),
                self.dim_x,
                self.dim_z
            )));
        }
        let mut u = Vec::with_capacity(self.input_dim());
        u.extend(x.iter());
        u.resize(self.input_dim(), 0.0);
        z.flatten_into(&mut u[self.dim_x..]);
        Ok(u)
    }

    /// `θ·φ(u)`.
    pub fn dot(&self, theta: &DVector<f64>, u: &[f64]) -> f64 {
        self.monomials
            .iter()
            .zip(theta.iter())
            .map(|(m, c)| c * m.iter().map(|&i| u[i]).product::<f64>())
            .sum()
    }

    /// `∇ₓ(θ·φ)(u)`.
    pub fn grad_x(&self, theta: &DVector<f64>, u: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim_x);
        for (m, &c) in self.monomials.iter().zip(theta.iter()) {
            if c == 0.0 {
                continue;
            }
            for (p, &i) in m.iter().enumerate() {
                if i < self.dim_x {
                    let rest: f64 = m.iter().enumerate().filter(|&(q, _)| q != p).map(|(_, &j)| u[j]).product();
                    g[i] += c * rest;
                }
            }
        }
        g
    }

    /// `∇ₓ²(θ·φ)(u)`.
    pub fn hessian_x(&self, theta: &DVector<f64>, u: &[f64]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.dim_x, self.dim_x);
        for (m, &c) in self.monomials.iter().zip(theta.iter()) {
            if c == 0.0 || m.len() < 2 {
                continue;
            }
            for (p, &i) in m.iter().enumerate() {
                for (q, &j) in m.iter().enumerate() {
                    if p == q || i >= self.dim_x || j >= self.dim_x {
                        continue;
                    }
                    let rest: f64 =
                        m.iter().enumerate().filter(|&(r, _)| r != p && r != q).map(|(_, &k)| u[k]).product();
                    h[(i, j)] += c * rest;
                }
            }
        }
        h
    }
}

/// `φ(x, z)` for a single input.
pub fn feature_map(x: &DVector<f64>, z: &WindowState, basis: &FeatureBasis) -> Result<DVector<f64>> {
    let u = basis.input(x, z)?;
    Ok(DVector::from_vec(basis.eval(&u)))
}

/// Result of a least-squares solve.
#[derive(Debug, Clone)]
pub struct LsqFit {
    pub coef: DVector<f64>,
    /// Set when `λ = 0` and the design is rank deficient (minimum-norm solution returned).
    pub rank_deficient: bool,
}

/// `argmin ‖Φθ − P‖² + λ‖θ‖²`. Cholesky on the regularised normal equations for
/// `λ > 0`, minimum-norm SVD solution for `λ = 0`.
pub fn least_squares_fit(features: &DMatrix<f64>, targets: &DVector<f64>, ridge: f64) -> Result<LsqFit> {
    let y = DMatrix::from_column_slice(targets.len(), 1, targets.as_slice());
    let (c, rank_deficient) = solve_multi(features, &y, ridge)?;
    Ok(LsqFit { coef: c.column(0).into_owned(), rank_deficient })
}

fn solve_multi(phi: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64) -> Result<(DMatrix<f64>, bool)> {
    if phi.nrows() == 0 {
        return Err(Error::Config("least squares needs at least one sample".into()));
    }
    if phi.nrows() != y.nrows() {
        return Err(Error::Config(format!("{} feature rows but {} targets", phi.nrows(), y.nrows())));
    }
    if !(ridge >= 0.0) {
        return Err(Error::Domain(format!("ridge must be nonnegative, got {ridge}")));
    }
    let f = phi.ncols();
    if ridge > 0.0 {
        let mut g = phi.tr_mul(phi);
        for i in 0..f {
            g[(i, i)] += ridge;
        }
        let rhs = phi.tr_mul(y);
        let chol = g
            .cholesky()
            .ok_or_else(|| Error::LinearAlgebra("regularised normal matrix is not positive definite".into()))?;
        Ok((chol.solve(&rhs), false))
    } else {
        let svd = phi.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let tol = smax * f64::EPSILON * phi.nrows().max(f) as f64;
        let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
        let c = svd.solve(y, tol).map_err(|e| Error::LinearAlgebra(e.to_string()))?;
        Ok((c, rank < f))
    }
}

/// Ridge regression on standardised features.
///
/// Column 0 of `phi` must be the constant feature. The other columns are
/// centred and scaled, constant columns are dropped, targets are centred, and
/// the coefficients are mapped back to the raw features. The intercept is not
/// penalised. `targets` may hold several columns.
pub fn fit_standardized(phi: &DMatrix<f64>, targets: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let (m, f) = phi.shape();
    if m == 0 {
        return Err(Error::Config("least squares needs at least one sample".into()));
    }
    let q = targets.ncols();
    let mut keep = Vec::new();
    let mut mu = Vec::new();
    let mut sd = Vec::new();
    for j in 1..f {
        let col = phi.column(j);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
        let s = var.sqrt();
        if s > 1e-12 * mean.abs().max(1.0) {
            keep.push(j);
            mu.push(mean);
            sd.push(s);
        }
    }
    let y_mean: Vec<f64> = (0..q).map(|c| targets.column(c).mean()).collect();
    let mut out = DMatrix::zeros(f, q);
    if !keep.is_empty() {
        let z = DMatrix::from_fn(m, keep.len(), |i, k| (phi[(i, keep[k])] - mu[k]) / sd[k]);
        let yc = DMatrix::from_fn(m, q, |i, c| targets[(i, c)] - y_mean[c]);
        let (c, _) = solve_multi(&z, &yc, ridge)?;
        for (k, &j) in keep.iter().enumerate() {
            for col in 0..q {
                out[(j, col)] = c[(k, col)] / sd[k];
            }
        }
    }
    for col in 0..q {
        let shift: f64 = keep.iter().enumerate().map(|(k, &j)| out[(j, col)] * mu[k]).sum();
        out[(0, col)] = y_mean[col] - shift;
    }
    Ok(out)
}

/// Default ridge level `1e-6·M`.
pub fn default_ridge(m: usize) -> f64 {
    1e-6 * m as f64
}

/// Regression data for one time node: one row of `u = (x, z)` per sample.
#[derive(Debug, Clone)]
pub struct NodeSamples {
    pub inputs: DMatrix<f64>,
    pub targets: DVector<f64>,
}

impl NodeSamples {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Design matrix `Φ` with one row `φ(u_m)` per row of `inputs`.
pub fn design_matrix(basis: &FeatureBasis, inputs: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, d) = inputs.shape();
    let f = basis.n_features();
    let mut phi = DMatrix::zeros(m, f);
    let mut u = vec![0.0; d];
    let mut row = vec![0.0; f];
    for i in 0..m {
        for (k, uk) in u.iter_mut().enumerate() {
            *uk = inputs[(i, k)];
        }
        basis.eval_into(&u, &mut row);
        for (j, v) in row.iter().enumerate() {
            phi[(i, j)] = *v;
        }
    }
    phi
}

/// Fits one node. `ridge = None` uses [`default_ridge`].
pub fn fit_node(basis: &FeatureBasis, samples: &NodeSamples, ridge: Option<f64>, node: usize) -> Result<DVector<f64>> {
    if samples.is_empty() {
        return Err(Error::Fit { node, reason: "no samples".into() });
    }
    if samples.inputs.ncols() != basis.input_dim() {
        return Err(Error::Fit {
            node,
            reason: format!("inputs have {} columns, basis expects {}", samples.inputs.ncols(), basis.input_dim()),
        });
    }
    let phi = design_matrix(basis, &samples.inputs);
    let y = DMatrix::from_column_slice(samples.len(), 1, samples.targets.as_slice());
    let lambda = ridge.unwrap_or_else(|| default_ridge(samples.len()));
    let c = fit_standardized(&phi, &y, lambda).map_err(|e| Error::Fit { node, reason: e.to_string() })?;
    let theta = c.column(0).into_owned();
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fit { node, reason: "non-finite coefficients".into() });
    }
    Ok(theta)
}

/// Fits an independent θ at every node.
pub fn fit_value_ansatz(
    time_nodes: &[f64],
    samples: &[NodeSamples],
    basis: &FeatureBasis,
    ridge: Option<f64>,
    exec: Execution,
) -> Result<ValueAnsatz> {
    if time_nodes.len() != samples.len() {
        return Err(Error::Config(format!("{} time nodes but {} sample sets", time_nodes.len(), samples.len())));
    }
    let theta = try_map_indexed(samples.len(), exec, |n| fit_node(basis, &samples[n], ridge, n))?;
    Ok(ValueAnsatz {
        basis: basis.clone(),
        time_nodes: time_nodes.to_vec(),
        theta,
        obs_nodes: Vec::new(),
        theta_pre: Vec::new(),
    })
}

pub const ANSATZ_FORMAT_VERSION: u32 = 1;

/// Per-node value approximation. `theta[k]` is the value after any observation
/// at node `k`; `theta_pre[n]` is the value just before observation `n`
/// (at node `obs_nodes[n]`), including that observation's cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueAnsatz {
    pub basis: FeatureBasis,
    pub time_nodes: Vec<f64>,
    pub theta: Vec<DVector<f64>>,
    pub obs_nodes: Vec<usize>,
    pub theta_pre: Vec<DVector<f64>>,
}

#[derive(Serialize, Deserialize)]
struct AnsatzFile {
    version: u32,
    basis: FeatureBasis,
    time_nodes: Vec<f64>,
    theta: Vec<Vec<f64>>,
    obs_nodes: Vec<usize>,
    theta_pre: Vec<Vec<f64>>,
}

impl ValueAnsatz {
    /// All-zero coefficients on the given nodes.
    pub fn zeros(basis: FeatureBasis, time_nodes: Vec<f64>, obs_nodes: Vec<usize>) -> Self {
        let f = basis.n_features();
        Self {
            theta: vec![DVector::zeros(f); time_nodes.len()],
            theta_pre: vec![DVector::zeros(f); obs_nodes.len()],
            basis,
            time_nodes,
            obs_nodes,
        }
    }

    pub fn value(&self, node: usize, x: &DVector<f64>, z: &WindowState) -> Result<f64> {
        let u = self.basis.input(x, z)?;
        Ok(self.basis.dot(&self.theta[node], &u))
    }

    pub fn value_pre(&self, obs_index: usize, x: &DVector<f64>, z: &WindowState) -> Result<f64> {
        let u = self.basis.input(x, z)?;
        Ok(self.basis.dot(&self.theta_pre[obs_index], &u))
    }

    pub fn grad_x(&self, node: usize, x: &DVector<f64>, z: &WindowState) -> Result<DVector<f64>> {
        let u = self.basis.input(x, z)?;
        Ok(self.basis.grad_x(&self.theta[node], &u))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = AnsatzFile {
            version: ANSATZ_FORMAT_VERSION,
            basis: self.basis.clone(),
            time_nodes: self.time_nodes.clone(),
            theta: self.theta.iter().map(|t| t.as_slice().to_vec()).collect(),
            obs_nodes: self.obs_nodes.clone(),
            theta_pre: self.theta_pre.iter().map(|t| t.as_slice().to_vec()).collect(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Parse { location: "value ansatz".into(), reason: e.to_string() })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let parse = |reason: String| Error::Parse { location: "value ansatz".into(), reason };
        let file: AnsatzFile = serde_json::from_str(s).map_err(|e| parse(e.to_string()))?;
        if file.version != ANSATZ_FORMAT_VERSION {
            return Err(parse(format!("unsupported format version {}", file.version)));
        }
        let f = file.basis.n_features();
        if file.theta.len() != file.time_nodes.len() || file.theta_pre.len() != file.obs_nodes.len() {
            return Err(parse("coefficient arrays do not match the node lists".into()));
        }
        if file.theta.iter().chain(&file.theta_pre).any(|t| t.len() != f) {
            return Err(parse(format!("coefficient vectors must have {f} entries")));
        }
        Ok(Self {
            basis: file.basis,
            time_nodes: file.time_nodes,
            theta: file.theta.into_iter().map(DVector::from_vec).collect(),
            obs_nodes: file.obs_nodes,
            theta_pre: file.theta_pre.into_iter().map(DVector::from_vec).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
