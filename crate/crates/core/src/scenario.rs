//! Scenario files: one JSON document describing a model, its observation
//! schedule, the training configuration and the evaluation budget.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{
    make_lqg_problem, make_obstacle_problem, uniform_obs_times, AlphaSet, BetaSet, Dims, LinearGaussianProblem,
    LqgSpec, ObstacleSpec,
};
use crate::pmp::TrainConfig;
use crate::sim::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Lqg,
    Obstacle,
}

/// A matrix written as row-major nested arrays, a diagonal, or a scaled identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixInput {
    Rows(Vec<Vec<f64>>),
    Diag { diag: Vec<f64> },
    ScaledIdentity { n: usize, scale: f64 },
}

impl MatrixInput {
    pub fn to_matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        match self {
            MatrixInput::Rows(rows) => {
                let r = rows.len();
                let c = rows.first().map_or(0, Vec::len);
                if let Some(i) = rows.iter().position(|row| row.len() != c) {
                    return Err(Error::Config(format!("{name}: row {i} has {} entries, expected {c}", rows[i].len())));
                }
                Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
            }
            MatrixInput::Diag { diag } => Ok(DMatrix::from_diagonal(&DVector::from_column_slice(diag))),
            MatrixInput::ScaledIdentity { n, scale } => Ok(DMatrix::identity(*n, *n) * *scale),
        }
    }
}

/// Optional declared dimensions, checked against the matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeclaredDims {
    pub x: usize,
    pub y: usize,
    pub alpha: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub m_eval: usize,
    /// Time step for evaluation rollouts; `None` reuses the training step.
    pub dt: Option<f64>,
    pub seed: u64,
    /// Number of evaluation paths written to trajectory CSVs.
    pub n_trajectories: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { m_eval: 100_000, dt: None, seed: 1, n_trajectories: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    pub kind: ScenarioKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<DeclaredDims>,
    #[serde(default = "one")]
    pub horizon: f64,
    pub a: MatrixInput,
    pub b: MatrixInput,
    pub c: MatrixInput,
    pub sigma: MatrixInput,
    pub q: MatrixInput,
    pub r: MatrixInput,
    pub q_t: MatrixInput,
    pub m0: Vec<f64>,
    pub sigma0: MatrixInput,
    /// Explicit observation times; otherwise `n_obs` uniform interior points.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obs_times: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_obs: Option<usize>,
    /// Sensing-cost weights: one row per observation, or a single broadcast row.
    #[serde(default)]
    pub kappa: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_eps: Option<f64>,
    /// Scalar noise levels, broadcast to every channel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_grid: Option<Vec<f64>>,
    #[serde(default = "one_usize")]
    pub window_k: usize,
    /// Symmetric box `|α_i| ≤ alpha_bound`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obstacle: Option<ObstacleSpec>,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub evaluation: EvalConfig,
    /// Observation counts swept by the Table-1 style study.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep_n_obs: Vec<usize>,
    /// Fixed noise levels compared against the adaptive policy.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fixed_beta_baselines: Vec<f64>,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

/// Command-line overrides applied before resolution.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    /// Replaces the training seed; the evaluation seed is derived from it.
    pub seed: Option<u64>,
}

const EVAL_SEED_PURPOSE: u64 = 0x6576_616c;

impl Scenario {
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            location: format!("{origin}:{}:{}", e.line(), e.column()),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read scenario {}: {e}", path.display())))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn with_overrides(mut self, o: Overrides) -> Self {
        if let Some(seed) = o.seed {
            self.training.seed = seed;
            self.evaluation.seed = derive_seed(seed, EVAL_SEED_PURPOSE);
        }
        self
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let text = serde_json::to_string(self).expect("scenario serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let spec = LqgSpec {
            a: self.a.to_matrix("a")?,
            b: self.b.to_matrix("b")?,
            c: self.c.to_matrix("c")?,
            sigma: self.sigma.to_matrix("sigma")?,
            q: self.q.to_matrix("q")?,
            r: self.r.to_matrix("r")?,
            q_t: self.q_t.to_matrix("q_t")?,
            m0: DVector::from_column_slice(&self.m0),
            sigma0: self.sigma0.to_matrix("sigma0")?,
            kappa: self.kappa.iter().map(|k| DVector::from_column_slice(k)).collect(),
            fixed_eps: self.fixed_eps,
            horizon: self.horizon,
        };
        spec.validate()?;
        let d = spec.dims();
        if let Some(decl) = self.dims {
            if decl.x != d.x || decl.y != d.y || decl.alpha != d.alpha {
                return Err(Error::Config(format!(
                    "declared dims (x={}, y={}, alpha={}) do not match the matrices (x={}, y={}, alpha={})",
                    decl.x, decl.y, decl.alpha, d.x, d.y, d.alpha
                )));
            }
        }
        match (self.fixed_eps, &self.beta_grid) {
            (Some(_), Some(_)) => return Err(Error::Config("give either fixed_eps or beta_grid, not both".into())),
            (None, None) => return Err(Error::Config("one of fixed_eps or beta_grid is required".into())),
            _ => {}
        }
        let obs_times = match (&self.obs_times, self.n_obs) {
            (Some(_), Some(_)) => return Err(Error::Config("give either obs_times or n_obs, not both".into())),
            (Some(t), None) => t.clone(),
            (None, Some(n)) => uniform_obs_times(n, self.horizon),
            (None, None) if !self.sweep_n_obs.is_empty() => uniform_obs_times(self.sweep_n_obs[0], self.horizon),
            (None, None) => return Err(Error::Config("one of obs_times or n_obs is required".into())),
        };
        if self.window_k == 0 {
            return Err(Error::Config("window_k must be at least 1".into()));
        }
        if self.training.window_len != 1 && self.training.window_len != self.window_k {
            return Err(Error::Config(format!(
                "training.window_len = {} conflicts with window_k = {}",
                self.training.window_len, self.window_k
            )));
        }
        let mut train = self.training.clone();
        train.window_len = self.window_k;
        train.validate()?;
        if self.evaluation.m_eval < 2 {
            return Err(Error::Config("evaluation.m_eval must be at least 2".into()));
        }
        let eval_dt = self.evaluation.dt.unwrap_or(train.dt);
        if !(eval_dt > 0.0) {
            return Err(Error::Config("evaluation.dt must be positive".into()));
        }
        let beta_set = match &self.beta_grid {
            Some(levels) => BetaSet::from_levels(levels, d.y)?,
            None => BetaSet::fixed(DVector::from_element(d.y, self.fixed_eps.expect("checked")))?,
        };
        let alpha_set = match self.alpha_bound {
            Some(bound) if bound > 0.0 => AlphaSet::Box {
                lower: DVector::from_element(d.alpha, -bound),
                upper: DVector::from_element(d.alpha, bound),
            },
            Some(bound) => return Err(Error::Config(format!("alpha_bound must be positive, got {bound}"))),
            None => AlphaSet::Unbounded,
        };
        let obstacle = match (self.kind, &self.obstacle) {
            (ScenarioKind::Obstacle, Some(o)) => Some(o.clone()),
            (ScenarioKind::Obstacle, None) => return Err(Error::Config("obstacle scenarios need an obstacle block".into())),
            (ScenarioKind::Lqg, Some(_)) => return Err(Error::Config("lqg scenarios cannot have an obstacle block".into())),
            (ScenarioKind::Lqg, None) => None,
        };
        for &b in &self.fixed_beta_baselines {
            if !(b > 0.0) {
                return Err(Error::Domain(format!("fixed beta baseline {b} must be positive")));
            }
        }
        let r = Resolved {
            id: self.id.clone(),
            spec,
            obstacle,
            obs_times,
            beta_set,
            alpha_set,
            train,
            eval: self.evaluation.clone(),
            eval_dt,
            sweep_n_obs: self.sweep_n_obs.clone(),
            fixed_beta_baselines: self.fixed_beta_baselines.clone(),
            config_hash: self.config_hash(),
        };
        r.problem(&r.obs_times)?;
        Ok(r)
    }
}

/// A scenario turned into model objects.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub id: String,
    /// For noise-as-control scenarios `fixed_eps` is `None` and `beta_set`
    /// holds the grid.
    pub spec: LqgSpec,
    pub obstacle: Option<ObstacleSpec>,
    pub obs_times: Vec<f64>,
    pub beta_set: BetaSet,
    pub alpha_set: AlphaSet,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub eval_dt: f64,
    pub sweep_n_obs: Vec<usize>,
    pub fixed_beta_baselines: Vec<f64>,
    pub config_hash: String,
}

impl Resolved {
    pub fn dims(&self) -> Dims {
        self.spec.dims()
    }

    /// The control problem with the given observation schedule.
    pub fn problem(&self, obs_times: &[f64]) -> Result<LinearGaussianProblem> {
        let p = match &self.obstacle {
            Some(o) => make_obstacle_problem(&self.spec, o, obs_times)?,
            None => make_lqg_problem(&self.spec, obs_times)?,
        };
        Ok(p.with_beta_set(self.beta_set.clone())?.with_alpha_set(self.alpha_set.clone()))
    }

    /// The same problem with the noise level pinned to `beta` on every channel.
    pub fn fixed_beta_problem(&self, beta: f64) -> Result<LinearGaussianProblem> {
        self.problem(&self.obs_times)?.with_beta_set(BetaSet::from_levels(&[beta], self.dims().y)?)
    }

    /// LQG data with `fixed_eps` set, as the Riccati/Kalman oracles expect.
    pub fn spec_with_eps(&self, eps: f64) -> LqgSpec {
        let mut s = self.spec.clone();
        s.fixed_eps = Some(eps);
        s
    }
}
