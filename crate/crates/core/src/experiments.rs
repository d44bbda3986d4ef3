//! Experiment drivers behind the command-line tool.
//!
//! Every driver returns an [`ExperimentOutput`]: reports, paired comparisons,
//! checks and CSV tables. Nothing in a CSV depends on wall-clock time or on the
//! thread count, so reruns with the same scenario and seed are byte-identical.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::discrete::{run_diagnostics, FiniteChain, OracleDiagnostics, DEFAULT_NODE_BUDGET};
use crate::error::{Error, Result};
use crate::lqg::{fosoc_value, riccati_for, separation_policy, RICCATI_DT};
use crate::model::{uniform_obs_times, ControlProblem};
use crate::parallel::{map_indexed, Execution};
use crate::pmp::{train, PolicyPair, TrainHistory};
use crate::regression::ValueAnsatz;
use crate::scenario::Resolved;
use crate::sim::{rollout, ConstantPolicy, McEstimate, Policy, RngStream, Rollout, TimeGrid};

/// Tolerance for the exact identities checked by the oracle suite.
pub const ORACLE_TOL: f64 = 1e-10;

const EVAL_CHUNK: usize = 4096;

/// A CSV file held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.to_string(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Config(format!("csv encoding failed: {e}"));
        w.write_record(&self.header).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv encoding failed: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn num(x: f64) -> String {
    format!("{x}")
}

/// Evaluated cost of one method.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub scenario: String,
    pub method: String,
    pub n_obs: usize,
    pub mean_cost: f64,
    pub ci95: f64,
    pub m_eval: usize,
    /// `(t, mean remaining cost)` per grid node.
    pub cost_to_go: Vec<(f64, f64)>,
    pub runtime_seconds: f64,
    pub train_seed: Option<u64>,
    pub eval_seed: u64,
    pub config_hash: String,
}

/// Paired Monte Carlo difference `candidate − baseline` on common paths.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedComparison {
    pub label: String,
    pub metric: String,
    pub baseline: String,
    pub candidate: String,
    pub mean_difference: f64,
    pub ci95: f64,
    pub n: usize,
}

impl PairedComparison {
    pub fn new(label: &str, metric: &str, baseline: &str, candidate: &str, base: &[f64], cand: &[f64]) -> Self {
        let diffs: Vec<f64> = cand.iter().zip(base).map(|(c, b)| c - b).collect();
        let est = McEstimate::from_samples(&diffs);
        Self {
            label: label.to_string(),
            metric: metric.to_string(),
            baseline: baseline.to_string(),
            candidate: candidate.to_string(),
            mean_difference: est.mean,
            ci95: est.ci95,
            n: diffs.len(),
        }
    }

    /// Candidate is lower than baseline at 95% confidence.
    pub fn significantly_lower(&self) -> bool {
        self.mean_difference + self.ci95 < 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Hard checks turn a run into an invariant failure.
    pub hard: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingRecord {
    pub label: String,
    pub n_obs: usize,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRecord {
    pub instance: String,
    pub diagnostics: OracleDiagnostics,
}

/// A file written verbatim next to the report.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub file_name: String,
    pub contents: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ExperimentOutput {
    pub command: String,
    pub scenario: String,
    pub config_hash: String,
    pub reports: Vec<ExperimentReport>,
    pub comparisons: Vec<PairedComparison>,
    pub checks: Vec<Check>,
    pub training: Vec<TrainingRecord>,
    pub oracle: Vec<OracleRecord>,
    #[serde(skip)]
    pub tables: Vec<CsvTable>,
    #[serde(skip)]
    pub artifacts: Vec<Artifact>,
}

impl ExperimentOutput {
    fn new(command: &str, scenario: &str, config_hash: &str) -> Self {
        Self {
            command: command.to_string(),
            scenario: scenario.to_string(),
            config_hash: config_hash.to_string(),
            ..Self::default()
        }
    }

    pub fn hard_failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| c.hard && !c.passed).collect()
    }

    pub fn table(&self, name: &str) -> Option<&CsvTable> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn report_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(format!("report encoding failed: {e}")))
    }

    /// Writes `report.json`, every table and every artifact into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.report_json()?)?;
        for t in &self.tables {
            std::fs::write(dir.join(&t.name), t.render()?)?;
        }
        for a in &self.artifacts {
            std::fs::write(dir.join(&a.file_name), &a.contents)?;
        }
        Ok(())
    }

    fn check(&mut self, name: impl Into<String>, passed: bool, hard: bool, detail: impl Into<String>) {
        let c = Check { name: name.into(), passed, hard, detail: detail.into() };
        if c.passed {
            log::info!("check passed: {} ({})", c.name, c.detail);
        } else {
            log::warn!("check failed: {} ({})", c.name, c.detail);
        }
        self.checks.push(c);
    }
}

/// Monte Carlo evaluation with the per-node mean remaining cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub estimate: McEstimate,
    pub totals: Vec<f64>,
    pub times: Vec<f64>,
    pub curve: Vec<f64>,
    pub seed: u64,
}

impl Evaluation {
    pub fn report(&self, r: &Resolved, method: &str, n_obs: usize, train_seed: Option<u64>, started: Instant) -> ExperimentReport {
        ExperimentReport {
            scenario: r.id.clone(),
            method: method.to_string(),
            n_obs,
            mean_cost: self.estimate.mean,
            ci95: self.estimate.ci95,
            m_eval: self.estimate.n,
            cost_to_go: self.times.iter().copied().zip(self.curve.iter().copied()).collect(),
            runtime_seconds: started.elapsed().as_secs_f64(),
            train_seed,
            eval_seed: self.seed,
            config_hash: r.config_hash.clone(),
        }
    }

    /// `|curve(0) − mean|`, zero up to summation order.
    pub fn bookkeeping_gap(&self) -> f64 {
        (self.curve[0] - self.estimate.mean).abs()
    }
}

/// Runs `m` rollouts on streams `0..m` in fixed-size chunks, keeping totals,
/// the mean cost-to-go curve and one `per_path` summary per rollout.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_with_paths<T, F>(
    problem: &dyn ControlProblem,
    policy: &dyn Policy,
    m: usize,
    dt: f64,
    seed: u64,
    exec: Execution,
    per_path: F,
) -> Result<(Evaluation, Vec<T>)>
where
    T: Send,
    F: Fn(&Rollout) -> T + Sync + Send,
{
    if m < 2 {
        return Err(Error::Config(format!("M_eval must be at least 2, got {m}")));
    }
    let grid = TimeGrid::for_problem(problem, dt)?;
    let mut sums = vec![0.0; grid.n_nodes()];
    let mut totals = Vec::with_capacity(m);
    let mut extra = Vec::with_capacity(m);
    let mut start = 0;
    while start < m {
        let len = EVAL_CHUNK.min(m - start);
        let chunk = map_indexed(len, exec, |j| {
            let i = (start + j) as u64;
            rollout(problem, policy, &grid, RngStream::new(seed, i)).map(|r| (r.total_cost(), r.cost_to_go(), per_path(&r)))
        });
        for (j, res) in chunk.into_iter().enumerate() {
            let (total, ctg, e) = res.map_err(|err| Error::Rollouts {
                count: 1,
                first_trajectory: (start + j) as u64,
                first_reason: err.to_string(),
            })?;
            for (s, c) in sums.iter_mut().zip(&ctg) {
                *s += c;
            }
            totals.push(total);
            extra.push(e);
        }
        start += len;
    }
    let curve = sums.iter().map(|s| s / m as f64).collect();
    let estimate = McEstimate::from_samples(&totals);
    Ok((Evaluation { estimate, totals, times: grid.times().to_vec(), curve, seed }, extra))
}

pub fn evaluate(problem: &dyn ControlProblem, policy: &dyn Policy, m: usize, dt: f64, seed: u64, exec: Execution) -> Result<Evaluation> {
    Ok(evaluate_with_paths(problem, policy, m, dt, seed, exec, |_| ())?.0)
}

fn cost_table() -> CsvTable {
    CsvTable::new("costs.csv", &["scenario", "N_o", "method", "mean_cost", "ci95", "M_eval", "seed"])
}

fn cost_row(t: &mut CsvTable, rep: &ExperimentReport) {
    t.push(vec![
        rep.scenario.clone(),
        rep.n_obs.to_string(),
        rep.method.clone(),
        num(rep.mean_cost),
        num(rep.ci95),
        rep.m_eval.to_string(),
        rep.eval_seed.to_string(),
    ]);
}

fn curve_table() -> CsvTable {
    CsvTable::new("cost_to_go.csv", &["scenario", "N_o", "method", "t", "mean_remaining_cost"])
}

fn curve_rows(t: &mut CsvTable, rep: &ExperimentReport) {
    for (time, c) in &rep.cost_to_go {
        t.push(vec![rep.scenario.clone(), rep.n_obs.to_string(), rep.method.clone(), num(*time), num(*c)]);
    }
}

fn training_table() -> CsvTable {
    CsvTable::new("training.csv", &["scenario", "N_o", "label", "iteration", "cost", "ci95", "dtheta_norm"])
}

fn training_rows(t: &mut CsvTable, scenario: &str, rec: &TrainingRecord) {
    for it in &rec.history.iterations {
        t.push(vec![
            scenario.to_string(),
            rec.n_obs.to_string(),
            rec.label.clone(),
            it.iteration.to_string(),
            num(it.cost),
            num(it.ci95),
            num(it.dtheta_norm),
        ]);
    }
}

fn comparison_table(rows: &[PairedComparison]) -> CsvTable {
    let mut t = CsvTable::new(
        "comparisons.csv",
        &["label", "metric", "baseline", "candidate", "mean_difference", "ci95", "n", "significantly_lower"],
    );
    for c in rows {
        t.push(vec![
            c.label.clone(),
            c.metric.clone(),
            c.baseline.clone(),
            c.candidate.clone(),
            num(c.mean_difference),
            num(c.ci95),
            c.n.to_string(),
            c.significantly_lower().to_string(),
        ]);
    }
    t
}

struct Collector {
    out: ExperimentOutput,
    costs: CsvTable,
    curves: CsvTable,
    training: CsvTable,
}

impl Collector {
    fn new(command: &str, r: &Resolved) -> Self {
        Self {
            out: ExperimentOutput::new(command, &r.id, &r.config_hash),
            costs: cost_table(),
            curves: curve_table(),
            training: training_table(),
        }
    }

    fn add_eval(&mut self, r: &Resolved, ev: &Evaluation, method: &str, n_obs: usize, train_seed: Option<u64>, started: Instant) {
        let rep = ev.report(r, method, n_obs, train_seed, started);
        let gap = ev.bookkeeping_gap();
        self.out.check(
            format!("cost-to-go at t=0 equals mean cost ({method}, N_o={n_obs})"),
            gap <= 1e-9 * ev.estimate.mean.abs().max(1.0),
            true,
            format!("gap {gap:.3e}"),
        );
        log::info!("{method} N_o={n_obs}: J={:.6} ± {:.6} (M={})", rep.mean_cost, rep.ci95, rep.m_eval);
        cost_row(&mut self.costs, &rep);
        curve_rows(&mut self.curves, &rep);
        self.out.reports.push(rep);
    }

    fn add_training(&mut self, label: &str, n_obs: usize, history: TrainHistory) {
        let rec = TrainingRecord { label: label.to_string(), n_obs, history };
        let increases = rec.history.iterations.windows(2).skip(1).filter(|w| w[1].cost > w[0].cost + w[0].ci95 + w[1].ci95).count();
        self.out.check(
            format!("training cost non-increasing after iteration 2 ({label})"),
            increases == 0,
            false,
            format!("{increases} increases beyond the CI half-widths"),
        );
        training_rows(&mut self.training, &self.out.scenario, &rec);
        self.out.training.push(rec);
    }

    fn artifact(&mut self, file_name: String, contents: String) {
        self.out.artifacts.push(Artifact { file_name, contents });
    }

    fn finish(mut self) -> ExperimentOutput {
        let comparisons = comparison_table(&self.out.comparisons);
        self.out.tables.push(self.costs);
        self.out.tables.push(self.curves);
        if !self.training.rows.is_empty() {
            self.out.tables.push(self.training);
        }
        if !self.out.comparisons.is_empty() {
            self.out.tables.push(comparisons);
        }
        self.out
    }
}

fn train_policy(
    problem: &dyn ControlProblem,
    r: &Resolved,
    label: &str,
    n_obs: usize,
    exec: Execution,
    col: &mut Collector,
) -> Result<(PolicyPair, ValueAnsatz)> {
    log::info!("training {label} (N_o={n_obs}, M_train={})", r.train.m_train);
    match train(problem, &r.train, exec) {
        Ok(res) => {
            col.add_training(label, n_obs, res.history);
            col.artifact(format!("ansatz_{label}.json"), res.ansatz.to_json()?);
            col.artifact(format!("policy_{label}.json"), res.policy.to_json()?);
            Ok((res.policy, res.ansatz))
        }
        Err(e) => {
            col.add_training(label, n_obs, e.history.clone());
            Err(e.into())
        }
    }
}

/// Separation benchmark, full-information value and the trained particle
/// policy for every observation count in the sweep.
pub fn run_table1(r: &Resolved, exec: Execution) -> Result<ExperimentOutput> {
    if r.spec.fixed_eps.is_none() {
        return Err(Error::Config("table1 needs a fixed observation noise level (fixed_eps)".into()));
    }
    if r.obstacle.is_some() {
        return Err(Error::Config("table1 needs an lqg scenario".into()));
    }
    let sweep = if r.sweep_n_obs.is_empty() { vec![r.obs_times.len()] } else { r.sweep_n_obs.clone() };
    let mut col = Collector::new("table1", r);
    let ricc = riccati_for(&r.spec, RICCATI_DT)?;
    let fosoc = fosoc_value(&r.spec, &ricc);
    let mut fo_table = CsvTable::new("fosoc.csv", &["scenario", "value"]);
    fo_table.push(vec![r.id.clone(), num(fosoc)]);
    log::info!("full-information value {fosoc:.6}");

    for &n in &sweep {
        let obs = if r.sweep_n_obs.is_empty() { r.obs_times.clone() } else { uniform_obs_times(n, r.spec.horizon) };
        let problem = r.problem(&obs)?;

        let started = Instant::now();
        let sep = separation_policy(&r.spec, &ricc, &obs, r.eval_dt)?.with_alpha_set(r.alpha_set.clone());
        let ev_sep = evaluate(&problem, &sep, r.eval.m_eval, r.eval_dt, r.eval.seed, exec)?;
        col.add_eval(r, &ev_sep, "separation", n, None, started);

        let started = Instant::now();
        let label = format!("particle_N{n}");
        let (policy, _) = train_policy(&problem, r, &label, n, exec, &mut col)?;
        let ev = evaluate(&problem, &policy, r.eval.m_eval, r.eval_dt, r.eval.seed, exec)?;
        col.add_eval(r, &ev, "particle", n, Some(r.train.seed), started);

        col.out.comparisons.push(PairedComparison::new(
            &format!("N_o={n}"),
            "total_cost",
            "separation",
            "particle",
            &ev_sep.totals,
            &ev.totals,
        ));
        let slack = fosoc - ev_sep.estimate.upper();
        col.out.check(
            format!("separation cost is not below the full-information value (N_o={n})"),
            slack <= 0.0,
            false,
            format!("separation {:.6} ± {:.6}, full information {fosoc:.6}", ev_sep.estimate.mean, ev_sep.estimate.ci95),
        );
    }
    let mut out = col.finish();
    out.tables.push(fo_table);
    Ok(out)
}

fn beta_label(b: &DVector<f64>) -> String {
    if b.iter().all(|v| *v == b[0]) {
        num(b[0])
    } else {
        b.iter().map(|v| num(*v)).collect::<Vec<_>>().join(";")
    }
}

/// Adaptive noise-level policy against policies trained with each fixed level.
pub fn run_noise_study(r: &Resolved, exec: Execution) -> Result<ExperimentOutput> {
    if r.beta_set.candidates().len() < 2 {
        return Err(Error::Config("noise-study needs a beta_grid with at least two levels".into()));
    }
    let n = r.obs_times.len();
    let mut col = Collector::new("noise-study", r);
    let problem = r.problem(&r.obs_times)?;

    let started = Instant::now();
    let (adaptive, _) = train_policy(&problem, r, "adaptive", n, exec, &mut col)?;
    let (ev, betas) = evaluate_with_paths(&problem, &adaptive, r.eval.m_eval, r.eval_dt, r.eval.seed, exec, |ro| {
        ro.controls_beta.clone()
    })?;
    col.add_eval(r, &ev, "adaptive", n, Some(r.train.seed), started);

    let mut counts: BTreeMap<(usize, String), usize> = BTreeMap::new();
    for path in &betas {
        for (k, b) in path.iter().enumerate() {
            *counts.entry((k, beta_label(b))).or_default() += 1;
        }
    }
    let mut choice = CsvTable::new("beta_choices.csv", &["scenario", "obs_index", "beta", "count"]);
    for ((k, b), c) in &counts {
        choice.push(vec![r.id.clone(), k.to_string(), b.clone(), c.to_string()]);
    }

    let mut best_fixed: Option<(f64, McEstimate)> = None;
    for &beta in &r.fixed_beta_baselines {
        let started = Instant::now();
        let fixed_problem = r.fixed_beta_problem(beta)?;
        let method = format!("fixed_beta={}", num(beta));
        let (policy, _) = train_policy(&fixed_problem, r, &format!("fixed_beta_{}", num(beta)), n, exec, &mut col)?;
        let ev_b = evaluate(&fixed_problem, &policy, r.eval.m_eval, r.eval_dt, r.eval.seed, exec)?;
        col.add_eval(r, &ev_b, &method, n, Some(r.train.seed), started);
        col.out.comparisons.push(PairedComparison::new(&method, "total_cost", &method, "adaptive", &ev_b.totals, &ev.totals));
        if best_fixed.as_ref().map_or(true, |(_, e)| ev_b.estimate.mean < e.mean) {
            best_fixed = Some((beta, ev_b.estimate));
        }
    }
    if let Some((beta, est)) = best_fixed {
        let bound = est.mean + est.ci95 + ev.estimate.ci95;
        col.out.check(
            "adaptive noise level is no worse than the best fixed level",
            ev.estimate.mean <= bound,
            false,
            format!("adaptive {:.6} ± {:.6}, best fixed beta={beta} {:.6} ± {:.6}", ev.estimate.mean, ev.estimate.ci95, est.mean, est.ci95),
        );
    }
    let mut out = col.finish();
    out.tables.push(choice);
    Ok(out)
}

struct PathStats {
    occupancy: f64,
    trajectory: Option<Vec<f64>>,
}

fn path_stats(ro: &Rollout, r: &Resolved) -> PathStats {
    let ob = r.obstacle.as_ref().expect("obstacle scenario");
    let occupancy = (0..ro.times.len() - 1)
        .filter(|&k| ob.is_active(ro.times[k], &ro.states[k]))
        .map(|k| ro.times[k + 1] - ro.times[k])
        .sum();
    let trajectory = ((ro.trajectory as usize) < r.eval.n_trajectories).then(|| {
        ro.states.iter().map(|x| if x.len() == 1 { x[0] } else { x.norm() }).collect()
    });
    PathStats { occupancy, trajectory }
}

/// Trained policy against zero control on the obstacle benchmark.
pub fn run_obstacle(r: &Resolved, exec: Execution) -> Result<ExperimentOutput> {
    let ob = r.obstacle.clone().ok_or_else(|| Error::Config("obstacle needs an obstacle scenario".into()))?;
    let n = r.obs_times.len();
    let mut col = Collector::new("obstacle", r);
    let problem = r.problem(&r.obs_times)?;
    let dim_x = r.dims().x;

    let mut occ = CsvTable::new("occupancy.csv", &["scenario", "method", "mean_occupancy", "ci95", "hit_fraction", "M_eval"]);
    let mut traj = CsvTable::new("trajectories.csv", &["scenario", "method", "path", "t", if dim_x == 1 { "x" } else { "norm_x" }]);
    let mut record = |method: &str, ev: &Evaluation, stats: &[PathStats], col: &mut Collector, started: Instant| -> Vec<f64> {
        col.add_eval(r, ev, method, n, (method != "zero_control").then_some(r.train.seed), started);
        let o: Vec<f64> = stats.iter().map(|s| s.occupancy).collect();
        let est = McEstimate::from_samples(&o);
        let hit = o.iter().filter(|v| **v > 0.0).count() as f64 / o.len() as f64;
        occ.push(vec![r.id.clone(), method.to_string(), num(est.mean), num(est.ci95), num(hit), o.len().to_string()]);
        for (p, s) in stats.iter().enumerate() {
            if let Some(values) = &s.trajectory {
                for (t, v) in ev.times.iter().zip(values) {
                    traj.push(vec![r.id.clone(), method.to_string(), p.to_string(), num(*t), num(*v)]);
                }
            }
        }
        o
    };

    let started = Instant::now();
    let zero = ConstantPolicy::zero(&problem);
    let (ev0, st0) = evaluate_with_paths(&problem, &zero, r.eval.m_eval, r.eval_dt, r.eval.seed, exec, |ro| path_stats(ro, r))?;
    let occ0 = record("zero_control", &ev0, &st0, &mut col, started);

    let started = Instant::now();
    let (policy, _) = train_policy(&problem, r, "trained", n, exec, &mut col)?;
    let (ev, st) = evaluate_with_paths(&problem, &policy, r.eval.m_eval, r.eval_dt, r.eval.seed, exec, |ro| path_stats(ro, r))?;
    let occ1 = record("trained", &ev, &st, &mut col, started);

    let cost_cmp = PairedComparison::new("obstacle", "total_cost", "zero_control", "trained", &ev0.totals, &ev.totals);
    let occ_cmp = PairedComparison::new("obstacle", "occupancy", "zero_control", "trained", &occ0, &occ1);
    col.out.check(
        "trained cost below zero control",
        cost_cmp.significantly_lower(),
        false,
        format!("difference {:.6} ± {:.6}", cost_cmp.mean_difference, cost_cmp.ci95),
    );
    col.out.check(
        "trained occupancy below zero control",
        occ_cmp.significantly_lower(),
        false,
        format!("difference {:.6} ± {:.6}", occ_cmp.mean_difference, occ_cmp.ci95),
    );
    col.out.comparisons.push(cost_cmp);
    col.out.comparisons.push(occ_cmp);

    // Without a penalty the problem is LQG and the separation controller is the benchmark.
    if ob.magnitude == 0.0 && ob.x_star.iter().all(|v| *v == 0.0) && r.spec.fixed_eps.is_some() {
        let started = Instant::now();
        let ricc = riccati_for(&r.spec, RICCATI_DT)?;
        let sep = separation_policy(&r.spec, &ricc, &r.obs_times, r.eval_dt)?.with_alpha_set(r.alpha_set.clone());
        let ev_sep = evaluate(&problem, &sep, r.eval.m_eval, r.eval_dt, r.eval.seed, exec)?;
        col.add_eval(r, &ev_sep, "separation", n, None, started);
        col.out.comparisons.push(PairedComparison::new("obstacle", "total_cost", "separation", "trained", &ev_sep.totals, &ev.totals));
    }

    let mut out = col.finish();
    out.tables.push(occ);
    out.tables.push(traj);
    Ok(out)
}

/// Trains on the scenario's schedule and returns the ansatz and policy as artifacts.
pub fn run_train(r: &Resolved, exec: Execution) -> Result<(ExperimentOutput, PolicyPair, ValueAnsatz)> {
    let n = r.obs_times.len();
    let mut col = Collector::new("train", r);
    let problem = r.problem(&r.obs_times)?;
    let (policy, ansatz) = train_policy(&problem, r, "trained", n, exec, &mut col)?;
    col.artifact("ansatz.json".into(), ansatz.to_json()?);
    col.artifact("policy.json".into(), policy.to_json()?);
    col.out.artifacts.retain(|a| a.file_name == "ansatz.json" || a.file_name == "policy.json");
    let mut out = col.finish();
    out.tables.retain(|t| t.name == "training.csv");
    Ok((out, policy, ansatz))
}

/// Evaluates a stored policy on the scenario's schedule.
pub fn run_evaluate(r: &Resolved, policy: &PolicyPair, exec: Execution) -> Result<ExperimentOutput> {
    let n = r.obs_times.len();
    let problem = r.problem(&r.obs_times)?;
    if policy.time_nodes.last().map_or(true, |t| (t - problem.horizon()).abs() > 1e-9) {
        return Err(Error::Config("policy horizon does not match the scenario".into()));
    }
    let mut col = Collector::new("evaluate", r);
    let started = Instant::now();
    let ev = evaluate(&problem, policy, r.eval.m_eval, r.eval_dt, r.eval.seed, exec)?;
    col.add_eval(r, &ev, "policy", n, None, started);
    Ok(col.finish())
}

fn feature_name(mono: &[usize], dim_x: usize) -> String {
    if mono.is_empty() {
        return "1".into();
    }
    mono.iter()
        .map(|&i| if i < dim_x { format!("x{}", i + 1) } else { format!("z{}", i - dim_x + 1) })
        .collect::<Vec<_>>()
        .join("*")
}

/// Coefficients of a value ansatz in long format.
pub fn ansatz_table(ansatz: &ValueAnsatz) -> CsvTable {
    let mut t = CsvTable::new("ansatz_coefficients.csv", &["node", "t", "kind", "feature", "coefficient"]);
    let names: Vec<String> = ansatz.basis.monomials().iter().map(|m| feature_name(m, ansatz.basis.dim_x())).collect();
    for (k, theta) in ansatz.theta.iter().enumerate() {
        for (name, c) in names.iter().zip(theta.iter()) {
            t.push(vec![k.to_string(), num(ansatz.time_nodes[k]), "post".into(), name.clone(), num(*c)]);
        }
    }
    for (n, theta) in ansatz.theta_pre.iter().enumerate() {
        let k = ansatz.obs_nodes[n];
        for (name, c) in names.iter().zip(theta.iter()) {
            t.push(vec![k.to_string(), num(ansatz.time_nodes[k]), "pre".into(), name.clone(), num(*c)]);
        }
    }
    t
}

pub fn run_export_ansatz(ansatz: &ValueAnsatz) -> ExperimentOutput {
    let text = ansatz.to_json().unwrap_or_default();
    let mut out = ExperimentOutput::new("export-ansatz", "", &hex::encode(Sha256::digest(text.as_bytes())));
    out.tables.push(ansatz_table(ansatz));
    out
}

/// Every finite-chain instance in `path` (a file or a directory of `.json`
/// files): exact DP, enumeration when affordable, and the structural identities.
pub fn run_oracle_suite(path: &Path) -> Result<ExperimentOutput> {
    let files: Vec<std::path::PathBuf> = if path.is_dir() {
        let mut v: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::Config(format!("no instance files in {}", path.display())));
    }
    let mut hasher = Sha256::new();
    let mut chains = Vec::with_capacity(files.len());
    for f in &files {
        let text = std::fs::read_to_string(f)?;
        hasher.update(text.as_bytes());
        chains.push((f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(), FiniteChain::load(f)?));
    }
    let mut out = ExperimentOutput::new("oracle", &path.display().to_string(), &hex::encode(hasher.finalize()));
    let mut table = CsvTable::new(
        "oracle.csv",
        &[
            "instance",
            "value",
            "enumerated_value",
            "envelope",
            "adjoint_pairing",
            "fo_bound_violation",
            "generator_consistency",
            "tree_nodes",
            "observation_nodes",
            "argmin_disagreements",
            "hamiltonian_disagreements",
        ],
    );
    for (name, chain) in &chains {
        let (sol, d) = match run_diagnostics(chain, true, DEFAULT_NODE_BUDGET) {
            Err(Error::Size(_)) => run_diagnostics(chain, false, DEFAULT_NODE_BUDGET)?,
            other => other?,
        };
        log::info!("oracle {name}: V0={:.12} nodes={}", d.value, d.tree_nodes);
        let failures = d.hard_failures(ORACLE_TOL);
        out.check(
            format!("{name}: hard identities"),
            failures.is_empty(),
            true,
            if failures.is_empty() { "all within 1e-10".to_string() } else { failures.join("; ") },
        );
        out.check(
            format!("{name}: observation argmin agreement"),
            d.argmin_disagreements == 0,
            false,
            format!("{} of {} observation nodes disagree", d.argmin_disagreements, d.observation_nodes),
        );
        table.push(vec![
            name.clone(),
            num(d.value),
            d.enumerated_value.map(num).unwrap_or_default(),
            num(d.envelope),
            num(d.adjoint_pairing),
            num(d.fo_bound_violation),
            num(d.generator_consistency),
            d.tree_nodes.to_string(),
            d.observation_nodes.to_string(),
            d.argmin_disagreements.to_string(),
            d.hamiltonian_disagreements.to_string(),
        ]);
        out.artifacts.push(Artifact {
            file_name: format!("policy_tree_{name}.json"),
            contents: serde_json::to_string_pretty(&sol).map_err(|e| Error::Config(e.to_string()))?,
        });
        out.oracle.push(OracleRecord { instance: name.clone(), diagnostics: d });
    }
    out.tables.push(table);
    Ok(out)
}
