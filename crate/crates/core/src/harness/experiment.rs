//! Experiment orchestration: one instance, many (algorithm, seed) runs.
//!
//! Runs share the immutable problem, gossip operator and reference
//! solution and execute in parallel. Each run writes its own CSV; the
//! summary is written once, after every run has finished. A failing run is
//! recorded in the summary and does not stop the others.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::config::{AlgorithmName, DatasetSpec, ExperimentConfig};
use super::reference::{reference_solution, Reference};
use super::trace::{StopReason, Trace, TraceRow};
use crate::baselines::{self, ExtraCatalystOptions};
use crate::catalyst::{self, CatalystOptions};
use crate::dvr::{self, DvrOptions, RunSpec};
use crate::par;
use crate::problem::{build_problem, load_libsvm, synth_dataset, Problem, ProblemOptions, ProblemSummary};
use crate::topology::{build_graph, chebyshev, laplacian, GossipMatrix, SpectrumReport};
use crate::{Error, Result};

pub const SUMMARY_FILE: &str = "summary.json";

/// Problem, gossip operator and spectrum built from a config.
pub struct Instance {
    pub problem: Problem,
    pub gossip: GossipMatrix,
    pub spectrum: SpectrumReport,
}

pub fn build_instance(cfg: &ExperimentConfig) -> Result<Instance> {
    cfg.validate()?;
    let n = cfg.graph.n();
    let opts = ProblemOptions { kappa_b: cfg.kappa_b.mode(), ..Default::default() };
    let (dataset, opts) = match &cfg.dataset {
        DatasetSpec::Synthetic { m, d, loss, seed, scale } => (synth_dataset(n * m, *d, *loss, *seed, *scale)?, opts),
        DatasetSpec::Libsvm { path, loss, shuffle_seed } => {
            (load_libsvm(path, *loss)?, ProblemOptions { shuffle_seed: *shuffle_seed, ..opts })
        }
    };
    let problem = build_problem(&dataset, n, &cfg.sigma.values(), cfg.dataset.loss(), &opts)?;
    let graph = build_graph(&cfg.graph, cfg.graph_seed)?;
    let base = laplacian(&graph);
    let gossip = if cfg.chebyshev { chebyshev(&base, cfg.chebyshev_degree)? } else { base };
    let spectrum = gossip.spectrum_report(&graph);
    Ok(Instance { problem, gossip, spectrum })
}

/// One (algorithm, seed) pair.
pub fn run_one(
    algorithm: AlgorithmName,
    cfg: &ExperimentConfig,
    inst: &Instance,
    reference: &Reference,
    seed: u64,
) -> Result<Trace> {
    let spec = RunSpec {
        seed,
        tau: cfg.tau,
        budget: cfg.budget,
        theta_star: Some(&reference.theta_star),
        f_star: Some(reference.f_star),
        cadence: cfg.cadence,
    };
    let (p, g) = (&inst.problem, &inst.gossip);
    match algorithm {
        AlgorithmName::Dvr => {
            let opts = DvrOptions { store: dvr::VirtualStore::Margins, ..Default::default() };
            let params = dvr::compute_params(p, g, &opts)?;
            dvr::run(p, g, &params, &opts, &spec)
        }
        AlgorithmName::DvrCatalyst => {
            let opts = CatalystOptions {
                rule: cfg.beta_rule.rule(),
                dvr: DvrOptions { store: dvr::VirtualStore::Margins, ..Default::default() },
                ..Default::default()
            };
            Ok(catalyst::run_accelerated(p, g, &opts, &spec)?.trace)
        }
        AlgorithmName::Extra => baselines::run_extra(p, g, None, &spec),
        AlgorithmName::ExtraCatalyst => baselines::run_extra_catalyst(p, g, &ExtraCatalystOptions::default(), &spec),
        AlgorithmName::GtSaga => baselines::run_gt_saga(p, g, None, &spec),
    }
}

pub fn csv_name(algorithm: AlgorithmName, seed: u64) -> String {
    format!("{algorithm}_seed{seed}.csv")
}

#[derive(Debug, Clone, Serialize)]
pub struct Milestone {
    pub iter: u64,
    pub sim_time: f64,
    pub n_grads: u64,
    pub n_comms: u64,
}

impl From<&TraceRow> for Milestone {
    fn from(r: &TraceRow) -> Self {
        Milestone { iter: r.iter, sim_time: r.sim_time, n_grads: r.n_grads, n_comms: r.n_comms }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub algorithm: AlgorithmName,
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
    pub csv: Option<PathBuf>,
    pub wall_clock_s: f64,
    pub rows: usize,
    pub stop: Option<StopReason>,
    /// Against the reference `F(θ*)`.
    pub final_subopt: Option<f64>,
    pub best_subopt: Option<f64>,
    /// Against the smallest objective seen by any run (the classical
    /// stand-in for `F(θ*)`).
    pub final_subopt_vs_best_observed: Option<f64>,
    pub final_consensus_gap: Option<f64>,
    /// First recorded row at or below the budget target.
    pub reached_target: Option<Milestone>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub problem: ProblemSummary,
    pub spectrum: SpectrumReport,
    pub f_star_reference: f64,
    pub reference_grad_norm: f64,
    /// `F(θ*)` plus the smallest suboptimality observed over all runs.
    pub f_star_best_observed: f64,
    pub parallel: bool,
    pub wall_clock_s: f64,
    pub runs: Vec<RunSummary>,
    pub failures: usize,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub summary: Summary,
    /// Index-aligned with `summary.runs`; `None` for failed runs.
    pub traces: Vec<Option<Trace>>,
}

/// Runs every (algorithm, seed) pair. With an output directory, writes one
/// CSV per successful run plus `summary.json`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutcome> {
    run_experiment_with(cfg, out_dir, |alg, seed, inst, reference| run_one(alg, cfg, inst, reference, seed))
}

/// [`run_experiment`] with a custom per-run function.
pub fn run_experiment_with<F>(cfg: &ExperimentConfig, out_dir: Option<&Path>, runner: F) -> Result<ExperimentOutcome>
where
    F: Fn(AlgorithmName, u64, &Instance, &Reference) -> Result<Trace> + Sync + Send,
{
    let start = Instant::now();
    let inst = build_instance(cfg)?;
    let reference = reference_solution(&inst.problem)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let pairs: Vec<(AlgorithmName, u64)> =
        cfg.algorithms.iter().flat_map(|a| cfg.seeds.iter().map(move |s| (*a, *s))).collect();
    let results: Vec<(Result<Trace>, f64, Option<PathBuf>)> = par::map_indexed(pairs.len(), |k| {
        let (alg, seed) = pairs[k];
        let t0 = Instant::now();
        let res = runner(alg, seed, &inst, &reference);
        let wall = t0.elapsed().as_secs_f64();
        let mut csv = None;
        let res = match (res, out_dir) {
            (Ok(trace), Some(dir)) => {
                let path = dir.join(csv_name(alg, seed));
                match trace.save_csv(&path) {
                    Ok(()) => {
                        csv = Some(path);
                        Ok(trace)
                    }
                    Err(e) => Err(e),
                }
            }
            (res, _) => res,
        };
        if let Err(e) = &res {
            log::warn!("{alg} seed {seed} failed: {e}");
        }
        (res, wall, csv)
    });
    let best_overall = results
        .iter()
        .filter_map(|(r, _, _)| r.as_ref().ok().map(Trace::best_subopt))
        .fold(f64::INFINITY, f64::min);
    let best_shift = if best_overall.is_finite() { best_overall } else { 0.0 };
    let target = cfg.budget.target_subopt;
    let mut runs = Vec::with_capacity(pairs.len());
    let mut traces = Vec::with_capacity(pairs.len());
    for ((alg, seed), (res, wall, csv)) in pairs.into_iter().zip(results) {
        let summary = match &res {
            Ok(t) => {
                let last = t.last();
                RunSummary {
                    algorithm: alg,
                    seed,
                    ok: true,
                    error: None,
                    csv,
                    wall_clock_s: wall,
                    rows: t.rows.len(),
                    stop: t.meta.stop,
                    final_subopt: Some(last.subopt_node0),
                    best_subopt: Some(t.best_subopt()),
                    final_subopt_vs_best_observed: Some(last.subopt_node0 - best_shift),
                    final_consensus_gap: Some(last.consensus_gap),
                    reached_target: target.and_then(|x| t.first_below(x)).map(Milestone::from),
                }
            }
            Err(e) => RunSummary {
                algorithm: alg,
                seed,
                ok: false,
                error: Some(e.to_string()),
                csv: None,
                wall_clock_s: wall,
                rows: 0,
                stop: None,
                final_subopt: None,
                best_subopt: None,
                final_subopt_vs_best_observed: None,
                final_consensus_gap: None,
                reached_target: None,
            },
        };
        runs.push(summary);
        traces.push(res.ok());
    }
    let failures = runs.iter().filter(|r| !r.ok).count();
    let summary = Summary {
        config: cfg.clone(),
        problem: inst.problem.summary(),
        spectrum: inst.spectrum.clone(),
        f_star_reference: reference.f_star,
        reference_grad_norm: reference.grad_norm,
        f_star_best_observed: reference.f_star + best_shift,
        parallel: par::is_parallel_available(),
        wall_clock_s: start.elapsed().as_secs_f64(),
        runs,
        failures,
    };
    if let Some(dir) = out_dir {
        let path = dir.join(SUMMARY_FILE);
        let text = serde_json::to_string_pretty(&summary)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(ExperimentOutcome { summary, traces })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ExperimentConfig;

    const CFG: &str = r#"
algorithms = ["dvr", "extra"]
seeds = [1, 2, 3]
sigma = 1e-2
tau = 10.0

[graph]
kind = "ring"
n = 4

[dataset]
kind = "synthetic"
m = 10
d = 3
loss = "logistic"
seed = 5

[budget]
max_iterations = 300
"#;

    #[test]
    fn two_algorithms_three_seeds_give_six_csvs() {
        let cfg = ExperimentConfig::from_toml_str(CFG).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&cfg, Some(dir.path())).unwrap();
        assert_eq!(out.summary.runs.len(), 6);
        assert_eq!(out.summary.failures, 0);
        let csvs = std::fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "csv"))
            .count();
        assert_eq!(csvs, 6);
        assert!(dir.path().join(SUMMARY_FILE).exists());
        assert!(out.summary.wall_clock_s > 0.0);
    }

    #[test]
    fn csv_output_is_deterministic() {
        let cfg = ExperimentConfig::from_toml_str(CFG).unwrap();
        let a = run_experiment(&cfg, None).unwrap();
        let b = run_experiment(&cfg, None).unwrap();
        for (x, y) in a.traces.iter().zip(&b.traces) {
            assert_eq!(x.as_ref().unwrap().to_csv_string(), y.as_ref().unwrap().to_csv_string());
        }
    }

    #[test]
    fn failed_run_is_recorded_and_others_proceed() {
        let cfg = ExperimentConfig::from_toml_str(CFG).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment_with(&cfg, Some(dir.path()), |alg, seed, inst, r| {
            if alg == AlgorithmName::Extra {
                Err(Error::Divergence { iteration: seed, node: 0, update: "primal" })
            } else {
                run_one(alg, &cfg, inst, r, seed)
            }
        })
        .unwrap();
        let failed: Vec<_> = out.summary.runs.iter().filter(|r| !r.ok).collect();
        let ok = out.summary.runs.iter().filter(|r| r.ok).count();
        assert_eq!(ok, 3, "{:?}", out.summary.runs);
        assert_eq!(failed.len(), 3);
        assert!(failed.iter().all(|r| r.error.is_some() && r.algorithm == AlgorithmName::Extra));
        assert_eq!(out.summary.failures, 3);
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap()).unwrap();
        assert_eq!(summary["failures"], 3);
    }

    #[test]
    fn empty_algorithm_list_fails_before_work() {
        let cfg = ExperimentConfig::from_toml_str(CFG).unwrap();
        let mut bad = cfg.clone();
        bad.algorithms.clear();
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("never");
        assert!(run_experiment(&bad, Some(&target)).unwrap_err().is_validation());
        assert!(!target.exists());
    }
}
