//! Accelerated DVR: an inexact proximal-point outer loop around DVR.
//!
//! Outer iteration `t` approximately minimizes
//! `Σ_i f_i(θ) + β/2 ‖θ − ω_t^{(i)}‖²` with `K` DVR steps on the problem whose
//! regularization is `σ_i + β`; the prox center enters the DVR identity as
//! the offset `β ω_t^{(i)}`. Afterwards
//!
//! ```text
//! ω_{t+1} = θ_{t,K} + (1 − √q)/(1 + √q) (θ_{t,K} − θ_{t−1,K}),   q = σ_min/(σ_min + β)
//! θ_{t+1,0} = θ_{t,K} + β/(β + σ_i) (ω_{t+1} − ω_t)
//! ```
//!
//! while `z` and the gradient cache carry over unchanged.

use serde::{Deserialize, Serialize};

use crate::dvr::{self, DvrOptions, DvrParams, DvrState};
use crate::harness::cost::CostModel;
use crate::harness::trace::{params_digest, Budget, Evaluator, Recorder, RowExtra, StopReason, Trace, TraceMeta};
use crate::linalg;
use crate::problem::Problem;
use crate::topology::GossipMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum BetaRule {
    /// Balance communication and computation conditioning (see
    /// [`select_beta`]).
    Batch,
    /// `β = max(L_s/m − σ_min, 0)`.
    FiniteSum,
    Manual(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatalystOptions {
    pub rule: BetaRule,
    /// Inner iterations per outer loop; default one local pass `⌈m/p_comp⌉`.
    pub k_inner: Option<u64>,
    /// Use `⌈2/(αη)⌉` inner iterations instead of one pass.
    #[serde(default)]
    pub theory_k: bool,
    pub t_outer: Option<u64>,
    /// Outer rate used by the ε_t diagnostics; default `√q/2`.
    pub rho_out: Option<f64>,
    #[serde(default)]
    pub dvr: DvrOptions,
}

impl Default for CatalystOptions {
    fn default() -> Self {
        CatalystOptions {
            rule: BetaRule::FiniteSum,
            k_inner: None,
            theory_k: false,
            t_outer: None,
            rho_out: None,
            dvr: DvrOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CatalystParams {
    pub beta: f64,
    pub q: f64,
    pub extrapolation: f64,
    pub k_inner: u64,
    pub t_outer: Option<u64>,
    pub rho_out: f64,
    pub rule: BetaRule,
    /// DVR parameters of the `σ + β` problem.
    pub inner: DvrParams,
}

/// `q = σ_min/(σ_min + β)`.
pub fn q_of(sigma_min: f64, beta: f64) -> f64 {
    sigma_min / (sigma_min + beta)
}

/// `(1 − √q)/(1 + √q)`.
pub fn extrapolation_coef(q: f64) -> f64 {
    let s = q.sqrt();
    (1.0 - s) / (1.0 + s)
}

/// `ε_t = (2/9)(F(θ_0) − F*)(1 − ρ)^t`.
pub fn epsilon_schedule(initial_gap: f64, rho_out: f64, t: u64) -> f64 {
    2.0 / 9.0 * initial_gap * (1.0 - rho_out).powf(t as f64)
}

/// Upper end of the bracket searched by the batch rule, in units of
/// `Σ_j L_ij`.
const BATCH_BRACKET: f64 = 1e6;

/// β for the given rule.
///
/// The batch rule looks for the β at which the inner problem's
/// communication conditioning balances its computation conditioning,
/// `κ_comm(β) = γ (m + κ_s(β))`, by bisection. When the two sides never
/// cross (communication is never the bottleneck, or always is) it falls back
/// to `β = σ_min (κ_comm − 1)`, i.e. `σ + β` equal to the smoothness seen by
/// the communication step.
pub fn select_beta(problem: &Problem, gossip: &GossipMatrix, rule: BetaRule, dvr_opts: &DvrOptions) -> Result<f64> {
    match rule {
        BetaRule::Manual(b) => {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::Validation(format!("manual beta must be >= 0, got {b}")));
            }
            Ok(b)
        }
        BetaRule::FiniteSum => Ok((problem.l_sum_max() / problem.m as f64 - problem.sigma_min()).max(0.0)),
        BetaRule::Batch => {
            if problem.n == 1 {
                return Ok(0.0);
            }
            let opts = DvrOptions { p_comm: None, eta: None, ..dvr_opts.clone() };
            let gap = |beta: f64| -> Result<(f64, f64)> {
                let p = problem.shifted(beta)?;
                let params = dvr::compute_params(&p, gossip, &opts)?;
                Ok((params.kappa_comm - gossip.gamma * (p.m as f64 + p.kappa_s), params.kappa_comm))
            };
            let (g0, kc0) = gap(0.0)?;
            let hi = BATCH_BRACKET * problem.l_sum_max().max(problem.sigma_min());
            let (ghi, _) = gap(hi)?;
            if g0 > 0.0 && ghi < 0.0 {
                let (mut lo, mut hi) = (0.0, hi);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if gap(mid)?.0 > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo <= 1e-12 * hi {
                        break;
                    }
                }
                Ok(0.5 * (lo + hi))
            } else {
                Ok((problem.sigma_min() * (kc0 - 1.0)).max(0.0))
            }
        }
    }
}

pub fn catalyst_params(problem: &Problem, gossip: &GossipMatrix, opts: &CatalystOptions) -> Result<CatalystParams> {
    let beta = select_beta(problem, gossip, opts.rule, &opts.dvr)?;
    let inner_problem = problem.shifted(beta)?;
    let inner = dvr::compute_params(&inner_problem, gossip, &opts.dvr)?;
    let q = q_of(problem.sigma_min(), beta);
    let k_inner = match opts.k_inner {
        Some(0) => return Err(Error::Validation("k_inner must be >= 1".into())),
        Some(k) => k,
        None if opts.theory_k => (2.0 / (inner.alpha * inner.eta)).ceil() as u64,
        None => (problem.m as f64 / inner.p_comp()).ceil() as u64,
    };
    if opts.t_outer == Some(0) {
        return Err(Error::Validation("t_outer must be >= 1".into()));
    }
    let rho_out = opts.rho_out.unwrap_or(q.sqrt() / 2.0);
    if !(rho_out > 0.0 && rho_out < q.sqrt() || q == 1.0 && rho_out > 0.0 && rho_out <= 1.0) {
        return Err(Error::Validation(format!("rho_out must be in (0, sqrt(q)), got {rho_out}")));
    }
    Ok(CatalystParams {
        beta,
        q,
        extrapolation: extrapolation_coef(q),
        k_inner,
        t_outer: opts.t_outer,
        rho_out,
        rule: opts.rule,
        inner,
    })
}

/// Outer-loop state: prox centers and the previous outer iterate.
#[derive(Debug, Clone)]
pub struct CatalystState {
    pub omega: Vec<f64>,
    pub theta_prev: Vec<f64>,
    pub inner: DvrState,
    pub outer_iter: u64,
}

/// `ω_0 = −Σ_j ∇f_ij(z_0)/(σ_i + β)`, `θ_0 = (1 + β/(σ_i + β)) ω_0`.
/// `inner_problem` is the `σ + β` problem.
pub fn outer_init(
    inner_problem: &Problem,
    params: &CatalystParams,
    dvr_opts: &DvrOptions,
    z0: Option<&[f64]>,
    seed: u64,
) -> Result<CatalystState> {
    let (n, d) = (inner_problem.n, inner_problem.d);
    // θ from the plain identity is exactly ω_0
    let probe = dvr::init_state(inner_problem, &params.inner, dvr_opts, z0, seed)?;
    let omega = probe.theta.clone();
    let offset: Vec<f64> = omega.iter().map(|w| params.beta * w).collect();
    let inner = dvr::init_state_with(inner_problem, &params.inner, dvr_opts, z0, None, Some(&offset), seed)?;
    debug_assert_eq!(inner.theta.len(), n * d);
    Ok(CatalystState {
        theta_prev: omega.clone(),
        omega,
        inner,
        outer_iter: 0,
    })
}

/// Extrapolation and warm start after an inner loop.
pub fn outer_update(inner_problem: &Problem, params: &CatalystParams, state: &mut CatalystState) {
    let theta_k = state.inner.theta.clone();
    let omega_next: Vec<f64> = theta_k
        .iter()
        .zip(&state.theta_prev)
        .map(|(t, p)| t + params.extrapolation * (t - p))
        .collect();
    let offset: Vec<f64> = omega_next.iter().map(|w| params.beta * w).collect();
    state.inner.set_offset(inner_problem, &offset);
    state.omega = omega_next;
    state.theta_prev = theta_k;
    state.outer_iter += 1;
}

/// One outer iteration: `K` inner steps then [`outer_update`]. Returns true
/// when the budget stopped the inner loop.
pub fn outer_step(
    inner_problem: &Problem,
    gossip: &GossipMatrix,
    params: &CatalystParams,
    state: &mut CatalystState,
    rec: &mut Recorder,
) -> Result<bool> {
    rec.extra = RowExtra { outer_iter: state.outer_iter, beta: params.beta, q: params.q };
    let stop = dvr::run_with(inner_problem, gossip, &params.inner, &mut state.inner, rec, Some(params.k_inner))?;
    if !stop {
        outer_update(inner_problem, params, state);
    }
    Ok(stop)
}

/// Objective gap of the node-average after each outer loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OuterRecord {
    pub outer_iter: u64,
    pub sim_time: f64,
    pub subopt_mean: f64,
}

#[derive(Debug, Clone)]
pub struct CatalystOutcome {
    pub trace: Trace,
    pub outer: Vec<OuterRecord>,
    pub params: CatalystParams,
}

fn node_mean(theta: &[f64], d: usize) -> Vec<f64> {
    let n = theta.len() / d;
    let mut mean = vec![0.0; d];
    for i in 0..n {
        linalg::axpy(1.0 / n as f64, &theta[i * d..(i + 1) * d], &mut mean);
    }
    mean
}

/// Accelerated DVR. Rows measure the original objective; they carry the
/// outer index, β and q.
pub fn run_accelerated(
    problem: &Problem,
    gossip: &GossipMatrix,
    opts: &CatalystOptions,
    spec: &dvr::RunSpec,
) -> Result<CatalystOutcome> {
    let params = catalyst_params(problem, gossip, opts)?;
    let inner_problem = problem.shifted(params.beta)?;
    let mut state = outer_init(&inner_problem, &params, &opts.dvr, None, spec.seed)?;
    let eval = Evaluator::new(problem, spec.theta_star, spec.f_star);
    let cadence = spec.cadence.unwrap_or_else(|| Recorder::default_cadence(problem));
    let mut budget: Budget = spec.budget;
    if params.t_outer.is_none() {
        budget.validate()?;
    } else if budget.validate().is_err() {
        budget.max_iterations = Some(u64::MAX);
    }
    let mut rec = Recorder::new(eval, CostModel::new(spec.tau, gossip.effective_degree), budget, cadence)?;
    let d = problem.d;
    let f_star = spec.f_star.unwrap_or(0.0);
    let mut outer = Vec::new();
    loop {
        if params.t_outer.is_some_and(|t| state.outer_iter >= t) {
            rec.extra.outer_iter = state.outer_iter.saturating_sub(1);
            rec.observe(state.inner.iteration, state.inner.n_grads, state.inner.n_comms, &state.inner.theta, true);
            rec.force_stop(StopReason::OuterLoops);
            break;
        }
        let t = state.outer_iter;
        if outer_step(&inner_problem, gossip, &params, &mut state, &mut rec)? {
            break;
        }
        outer.push(OuterRecord {
            outer_iter: t,
            sim_time: rec.cost().sim_time(state.inner.n_grads, state.inner.n_comms),
            subopt_mean: problem.objective(&node_mean(&state.theta_prev, d)) - f_star,
        });
    }
    let digest = params_digest(&params);
    Ok(CatalystOutcome {
        trace: rec.finish(TraceMeta::new("dvr_catalyst", spec.seed, digest)),
        outer,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{build_problem, synth_dataset, LossKind};
    use crate::topology::{build_graph, laplacian, GraphSpec};
    use approx::assert_relative_eq;

    fn setup(sigma: f64) -> (Problem, GossipMatrix) {
        let ds = synth_dataset(4 * 10, 4, LossKind::Logistic, 9, 1.0).unwrap();
        let p = build_problem(&ds, 4, &[sigma], LossKind::Logistic, &Default::default()).unwrap();
        (p, laplacian(&build_graph(&GraphSpec::Ring { n: 4 }, 0).unwrap()))
    }

    #[test]
    fn q_and_coefficient_arithmetic() {
        assert_relative_eq!(q_of(1.0, 3.0), 0.25);
        assert_relative_eq!(extrapolation_coef(0.25), 1.0 / 3.0, max_relative = 1e-15);
        assert_eq!(extrapolation_coef(1.0), 0.0);
        let e: Vec<f64> = (0..5).map(|t| epsilon_schedule(1.0, 0.25, t)).collect();
        assert!(e.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn finite_sum_beta_zero_when_well_conditioned() {
        let (p, g) = setup(10.0);
        assert!(p.kappa_s < p.m as f64);
        assert_eq!(select_beta(&p, &g, BetaRule::FiniteSum, &Default::default()).unwrap(), 0.0);
        let (p, g) = setup(1e-4);
        let b = select_beta(&p, &g, BetaRule::FiniteSum, &Default::default()).unwrap();
        assert_relative_eq!(b, p.l_sum_max() / p.m as f64 - 1e-4, max_relative = 1e-14);
        assert!(select_beta(&p, &g, BetaRule::Manual(-1.0), &Default::default()).is_err());
        let bb = select_beta(&p, &g, BetaRule::Batch, &Default::default()).unwrap();
        assert!(bb >= 0.0 && bb.is_finite());
    }

    #[test]
    fn init_relations() {
        let (p, g) = setup(1e-2);
        let opts = CatalystOptions { rule: BetaRule::Manual(0.3), ..Default::default() };
        let params = catalyst_params(&p, &g, &opts).unwrap();
        let ip = p.shifted(0.3).unwrap();
        let z0: Vec<f64> = (0..p.n * p.m * p.d).map(|k| (k as f64 * 0.37).sin()).collect();
        let st = outer_init(&ip, &params, &opts.dvr, Some(&z0), 1).unwrap();
        for i in 0..p.n {
            // independent recomputation of ω_0
            let mut g_sum = vec![0.0; p.d];
            for j in 0..p.m {
                let gij = p.stoch_gradient(i, j, &z0[(i * p.m + j) * p.d..(i * p.m + j + 1) * p.d]).unwrap();
                linalg::axpy(1.0, &gij, &mut g_sum);
            }
            let s = p.sigma[i] + 0.3;
            for k in 0..p.d {
                let w = -g_sum[k] / s;
                assert_relative_eq!(st.omega[i * p.d + k], w, max_relative = 1e-12, epsilon = 1e-15);
                assert_relative_eq!(st.inner.theta[i * p.d + k], (1.0 + 0.3 / s) * w, max_relative = 1e-12, epsilon = 1e-15);
            }
        }
        assert!(st.inner.identity_holds(&ip));
    }

    #[test]
    fn warm_start_shift_is_exact() {
        let (p, g) = setup(1e-2);
        let opts = CatalystOptions { rule: BetaRule::Manual(0.5), k_inner: Some(30), ..Default::default() };
        let params = catalyst_params(&p, &g, &opts).unwrap();
        let ip = p.shifted(0.5).unwrap();
        let mut st = outer_init(&ip, &params, &opts.dvr, None, 2).unwrap();
        for _ in 0..30 {
            st.inner.step(&ip, &g, &params.inner).unwrap();
        }
        let theta_k = st.inner.theta.clone();
        let omega_t = st.omega.clone();
        outer_update(&ip, &params, &mut st);
        for i in 0..p.n {
            let c = 0.5 / (0.5 + p.sigma[i]);
            for k in 0..p.d {
                let idx = i * p.d + k;
                let shift = st.inner.theta[idx] - theta_k[idx];
                assert_relative_eq!(shift, c * (st.omega[idx] - omega_t[idx]), max_relative = 1e-9, epsilon = 1e-14);
            }
        }
        assert!(st.inner.identity_holds(&ip));
    }

    #[test]
    fn beta_zero_collapses_to_dvr() {
        let (p, g) = setup(1e-2);
        let opts = CatalystOptions { rule: BetaRule::Manual(0.0), k_inner: Some(500), t_outer: Some(1), ..Default::default() };
        let spec = dvr::RunSpec { seed: 4, tau: 3.0, budget: Budget::default(), theta_star: None, f_star: None, cadence: Some(7) };
        let acc = run_accelerated(&p, &g, &opts, &spec).unwrap();
        let params = dvr::compute_params(&p, &g, &Default::default()).unwrap();
        let plain = dvr::run(&p, &g, &params, &Default::default(), &dvr::RunSpec { budget: Budget::iterations(500), ..spec }).unwrap();
        assert_eq!(acc.params.q, 1.0);
        assert_eq!(acc.trace.rows.len(), plain.rows.len());
        assert_eq!(acc.trace.to_csv_string().replace("dvr_catalyst", "dvr"), plain.to_csv_string());
    }
}
