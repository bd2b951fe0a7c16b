//! Trace rows, budgets and the recorder shared by every algorithm.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cost::CostModel;
use crate::linalg;
use crate::problem::Problem;
use crate::{Error, Result};

/// Rows per trace before the recorder starts overwriting its last row.
pub const MAX_ROWS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: u64,
    pub sim_time: f64,
    pub n_grads: u64,
    pub n_comms: u64,
    pub subopt_node0: f64,
    pub mean_sq_dist: f64,
    pub consensus_gap: f64,
    pub outer_iter: u64,
    pub beta: f64,
    pub q: f64,
}

/// Per-row Catalyst context; plain runs use `outer_iter = 0, beta = 0, q = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowExtra {
    pub outer_iter: u64,
    pub beta: f64,
    pub q: f64,
}

impl Default for RowExtra {
    fn default() -> Self {
        RowExtra { outer_iter: 0, beta: 0.0, q: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Target,
    MaxIterations,
    MaxSimTime,
    /// Outer loop count exhausted (Catalyst).
    OuterLoops,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub algorithm: String,
    pub seed: u64,
    /// FNV-1a of the JSON-serialized algorithm parameters.
    pub params_digest: String,
    pub tau: f64,
    pub degree: usize,
    pub stop: Option<StopReason>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub meta: TraceMeta,
    pub rows: Vec<TraceRow>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    iter: u64,
    sim_time: f64,
    n_grads: u64,
    n_comms: u64,
    subopt_node0: f64,
    mean_sq_dist: f64,
    consensus_gap: f64,
    algorithm: &'a str,
    outer_iter: u64,
    beta: f64,
    q: f64,
}

pub const CSV_COLUMNS: [&str; 11] = [
    "iter",
    "sim_time",
    "n_grads",
    "n_comms",
    "subopt_node0",
    "mean_sq_dist",
    "consensus_gap",
    "algorithm",
    "outer_iter",
    "beta",
    "q",
];

impl Trace {
    pub fn last(&self) -> &TraceRow {
        self.rows.last().expect("trace always has an initial row")
    }

    /// First recorded row at or below `target` suboptimality.
    pub fn first_below(&self, target: f64) -> Option<&TraceRow> {
        self.rows.iter().find(|r| r.subopt_node0 <= target)
    }

    /// Smallest suboptimality over the run; the classical stand-in for
    /// `F(θ*)` when no reference solution is available.
    pub fn best_subopt(&self) -> f64 {
        self.rows.iter().map(|r| r.subopt_node0).fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(CsvRow {
                iter: r.iter,
                sim_time: r.sim_time,
                n_grads: r.n_grads,
                n_comms: r.n_comms,
                subopt_node0: r.subopt_node0,
                mean_sq_dist: r.mean_sq_dist,
                consensus_gap: r.consensus_gap,
                algorithm: &self.meta.algorithm,
                outer_iter: r.outer_iter,
                beta: r.beta,
                q: r.q,
            })?;
        }
        w.flush().map_err(|e| Error::Serde(e.to_string()))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory csv");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

pub fn params_digest<T: Serialize>(params: &T) -> String {
    let bytes = serde_json::to_vec(params).unwrap_or_default();
    format!("{:016x}", linalg::fnv1a(&bytes))
}

/// Stopping rules. At least one must be set.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Budget {
    pub max_iterations: Option<u64>,
    pub max_sim_time: Option<f64>,
    /// Checked on recorded rows only.
    pub target_subopt: Option<f64>,
}

impl Budget {
    pub fn iterations(n: u64) -> Budget {
        Budget { max_iterations: Some(n), ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations.is_none() && self.max_sim_time.is_none() && self.target_subopt.is_none() {
            return Err(Error::Validation("budget needs at least one stopping rule".into()));
        }
        if self.target_subopt.is_some() && self.max_iterations.is_none() && self.max_sim_time.is_none() {
            log::warn!("budget has only a target; a non-converging run will not stop");
        }
        Ok(())
    }
}

/// Measures iterates against the original objective.
#[derive(Debug, Clone, Copy)]
pub struct Evaluator<'a> {
    pub problem: &'a Problem,
    pub theta_star: Option<&'a [f64]>,
    pub f_star: Option<f64>,
}

impl<'a> Evaluator<'a> {
    pub fn new(problem: &'a Problem, theta_star: Option<&'a [f64]>, f_star: Option<f64>) -> Self {
        Evaluator { problem, theta_star, f_star }
    }

    /// `(subopt_node0, mean_sq_dist, consensus_gap)` for a row-major
    /// `n x d` block of node parameters. Without a reference the first entry
    /// is the raw objective and the second is NaN.
    pub fn metrics(&self, theta: &[f64]) -> (f64, f64, f64) {
        let d = self.problem.d;
        let n = theta.len() / d;
        let f0 = self.problem.objective(&theta[..d]);
        let subopt = f0 - self.f_star.unwrap_or(0.0);
        let msd = match self.theta_star {
            Some(ts) => (0..n).map(|i| linalg::dist_sq(&theta[i * d..(i + 1) * d], ts)).sum::<f64>() / n as f64,
            None => f64::NAN,
        };
        (subopt, msd, consensus_gap(theta, d))
    }
}

/// `max_i ‖θ_i − θ̄‖`.
pub fn consensus_gap(theta: &[f64], d: usize) -> f64 {
    let n = theta.len() / d;
    let mut mean = vec![0.0; d];
    for i in 0..n {
        linalg::axpy(1.0 / n as f64, &theta[i * d..(i + 1) * d], &mut mean);
    }
    (0..n)
        .map(|i| linalg::dist_sq(&theta[i * d..(i + 1) * d], &mean).sqrt())
        .fold(0.0, f64::max)
}

/// Records rows at a fixed cadence (plus on demand) and enforces the budget.
#[derive(Debug)]
pub struct Recorder<'a> {
    eval: Evaluator<'a>,
    cost: CostModel,
    budget: Budget,
    cadence: u64,
    max_rows: usize,
    rows: Vec<TraceRow>,
    pub extra: RowExtra,
    stop: Option<StopReason>,
}

impl<'a> Recorder<'a> {
    pub fn new(eval: Evaluator<'a>, cost: CostModel, budget: Budget, cadence: u64) -> Result<Self> {
        budget.validate()?;
        Ok(Recorder {
            eval,
            cost,
            budget,
            cadence: cadence.max(1),
            max_rows: MAX_ROWS,
            rows: Vec::new(),
            extra: RowExtra::default(),
            stop: None,
        })
    }

    /// Default cadence `⌈(m + κ_s)/20⌉`.
    pub fn default_cadence(problem: &Problem) -> u64 {
        ((problem.m as f64 + problem.kappa_s) / 20.0).ceil().max(1.0) as u64
    }

    pub fn with_max_rows(mut self, max_rows: usize) -> Self {
        self.max_rows = max_rows.max(2);
        self
    }

    pub fn cost(&self) -> CostModel {
        self.cost
    }

    pub fn budget(&self) -> Budget {
        self.budget
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        self.stop
    }

    pub fn force_stop(&mut self, reason: StopReason) {
        self.stop.get_or_insert(reason);
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    fn push(&mut self, iter: u64, n_grads: u64, n_comms: u64, theta: &[f64]) -> f64 {
        let (subopt, msd, gap) = self.eval.metrics(theta);
        let row = TraceRow {
            iter,
            sim_time: self.cost.sim_time(n_grads, n_comms),
            n_grads,
            n_comms,
            subopt_node0: subopt,
            mean_sq_dist: msd,
            consensus_gap: gap,
            outer_iter: self.extra.outer_iter,
            beta: self.extra.beta,
            q: self.extra.q,
        };
        if self.rows.len() >= self.max_rows {
            *self.rows.last_mut().unwrap() = row;
        } else {
            self.rows.push(row);
        }
        subopt
    }

    /// Call after every iteration (and once with `iter = 0` before the
    /// first). Returns true when the run must stop.
    pub fn observe(&mut self, iter: u64, n_grads: u64, n_comms: u64, theta: &[f64], force: bool) -> bool {
        if self.stop.is_some() {
            return true;
        }
        let sim_time = self.cost.sim_time(n_grads, n_comms);
        let limit = if self.budget.max_iterations.is_some_and(|k| iter >= k) {
            Some(StopReason::MaxIterations)
        } else if self.budget.max_sim_time.is_some_and(|t| sim_time >= t) {
            Some(StopReason::MaxSimTime)
        } else {
            None
        };
        let already = self.rows.last().is_some_and(|r| r.iter == iter && r.n_grads == n_grads && r.n_comms == n_comms);
        if (iter == 0 || force || iter % self.cadence == 0 || limit.is_some()) && !already {
            let subopt = self.push(iter, n_grads, n_comms, theta);
            if self.budget.target_subopt.is_some_and(|t| subopt <= t) {
                self.stop = Some(StopReason::Target);
                return true;
            }
        }
        if let Some(reason) = limit {
            self.stop = Some(reason);
            return true;
        }
        false
    }

    pub fn finish(self, meta: TraceMeta) -> Trace {
        let mut meta = meta;
        meta.stop = self.stop;
        meta.tau = self.cost.tau;
        meta.degree = self.cost.degree;
        Trace { meta, rows: self.rows }
    }
}

impl TraceMeta {
    pub fn new(algorithm: &str, seed: u64, params_digest: String) -> TraceMeta {
        TraceMeta {
            algorithm: algorithm.to_string(),
            seed,
            params_digest,
            tau: 0.0,
            degree: 1,
            stop: None,
        }
    }
}
