//! Primal decentralized baselines: EXTRA, Catalyst-EXTRA and GT-SAGA.
//!
//! All of them mix with `W̃ = I − W/λ_max(W)`, which is symmetric, has unit
//! row sums and spectrum in `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalyst::{extrapolation_coef, q_of};
use crate::harness::cost::CostModel;
use crate::harness::trace::{params_digest, Budget, Evaluator, Recorder, RowExtra, StopReason, Trace, TraceMeta};
use crate::linalg;
use crate::par::{self, Exec};
use crate::problem::Problem;
use crate::topology::GossipMatrix;
use crate::dvr::RunSpec;
use crate::{Error, Result};

/// `L_batch = σ_max + κ_b σ_max`.
pub fn l_batch(problem: &Problem) -> f64 {
    problem.sigma_max() * (1.0 + problem.kappa_b)
}

/// Default EXTRA step `1/(2 L_batch)`, safely below the `λ_min((I+W̃)/2)/L
/// ≥ 1/(2L)` bound.
pub fn default_extra_step(problem: &Problem) -> f64 {
    0.5 / l_batch(problem)
}

/// Default GT-SAGA scale `c` in `η = γ/(c L_sample)`.
pub const GT_SAGA_SCALE: f64 = 8.0;

/// Smoothness of one SAGA term `m f_ij + σ_i/2 ‖·‖²`.
pub fn l_sample(problem: &Problem) -> f64 {
    problem.sigma_max() + problem.m as f64 * problem.l_max()
}

pub fn default_gt_saga_step(problem: &Problem, gossip: &GossipMatrix) -> f64 {
    gossip.gamma / (GT_SAGA_SCALE * l_sample(problem))
}

/// `out = W̃ x` given `wx = W x`.
fn mix(x: &[f64], wx: &[f64], lambda_max: f64, out: &mut [f64]) {
    if lambda_max <= 0.0 {
        out.copy_from_slice(x);
        return;
    }
    for ((o, a), b) in out.iter_mut().zip(x).zip(wx) {
        *o = a - b / lambda_max;
    }
}

fn check_finite(x: &[f64], d: usize, iteration: u64, update: &'static str) -> Result<()> {
    for (i, row) in x.chunks(d).enumerate() {
        if !linalg::all_finite(row) {
            return Err(Error::Divergence { iteration, node: i, update });
        }
    }
    Ok(())
}

fn validate_gossip(problem: &Problem, gossip: &GossipMatrix) -> Result<()> {
    if gossip.n() != problem.n {
        return Err(Error::Validation(format!(
            "gossip matrix has {} nodes, problem has {}",
            gossip.n(),
            problem.n
        )));
    }
    Ok(())
}

/// EXTRA in its accumulated form
/// `x_{k+1} = W̃ x_k − η ∇f(x_k) − Σ_{t<k} (I − W̃)/2 x_t`,
/// which expands to the usual two-step recursion
/// `x_{k+2} = (I + W̃) x_{k+1} − (I + W̃)/2 x_k − η(∇f(x_{k+1}) − ∇f(x_k))`
/// with `x_1 = W̃ x_0 − η ∇f(x_0)`. Local objectives may carry a proximal
/// term `β/2 ‖θ − ω_i‖²` (Catalyst).
#[derive(Debug, Clone)]
pub struct ExtraState {
    pub x: Vec<f64>,
    /// `Σ_{t<k} (I − W̃)/2 x_t`.
    pub acc: Vec<f64>,
    pub iteration: u64,
    pub n_grads: u64,
    pub n_comms: u64,
    pub beta: f64,
    pub omega: Vec<f64>,
    pub exec: Exec,
}

impl ExtraState {
    pub fn new(problem: &Problem, x0: Option<&[f64]>) -> ExtraState {
        let nd = problem.n * problem.d;
        ExtraState {
            x: x0.map_or(vec![0.0; nd], |x| x.to_vec()),
            acc: vec![0.0; nd],
            iteration: 0,
            n_grads: 0,
            n_comms: 0,
            beta: 0.0,
            omega: vec![0.0; nd],
            exec: Exec::Auto,
        }
    }

    /// Stacked local gradients, including the proximal term.
    fn gradients(&self, problem: &Problem) -> Vec<f64> {
        let d = problem.d;
        let mut g = vec![0.0; self.x.len()];
        let work = problem.n * problem.m * d;
        let (x, beta, omega) = (&self.x, self.beta, &self.omega);
        let mut nodes: Vec<()> = vec![(); problem.n];
        par::for_each_chunk_mut(self.exec, work, &mut g, d, &mut nodes, |i, gi, _| {
            let xi = &x[i * d..(i + 1) * d];
            let wi = &omega[i * d..(i + 1) * d];
            for k in 0..d {
                gi[k] = problem.sigma[i] * xi[k] + beta * (xi[k] - wi[k]);
            }
            problem.add_loss_gradient(i, xi, gi);
        });
        g
    }

    pub fn step(&mut self, problem: &Problem, gossip: &GossipMatrix, eta: f64) -> Result<()> {
        let d = problem.d;
        let grad = self.gradients(problem);
        let mut wx = vec![0.0; self.x.len()];
        gossip.apply(&self.x, d, &mut wx);
        let mut next = vec![0.0; self.x.len()];
        mix(&self.x, &wx, gossip.lambda_max, &mut next);
        for k in 0..next.len() {
            next[k] = next[k] - eta * grad[k] - self.acc[k];
        }
        if gossip.lambda_max > 0.0 {
            for k in 0..wx.len() {
                self.acc[k] += 0.5 * wx[k] / gossip.lambda_max;
            }
        }
        check_finite(&next, d, self.iteration, "extra")?;
        self.x = next;
        self.iteration += 1;
        self.n_grads += problem.m as u64;
        if problem.n > 1 {
            self.n_comms += 1;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
struct ExtraDigest {
    eta: f64,
    beta: f64,
    k_inner: Option<u64>,
}

pub fn run_extra(problem: &Problem, gossip: &GossipMatrix, eta: Option<f64>, spec: &RunSpec) -> Result<Trace> {
    validate_gossip(problem, gossip)?;
    let eta = eta.unwrap_or_else(|| default_extra_step(problem));
    if !(eta > 0.0) {
        return Err(Error::Validation(format!("EXTRA step must be > 0, got {eta}")));
    }
    let eval = Evaluator::new(problem, spec.theta_star, spec.f_star);
    let mut rec = Recorder::new(eval, CostModel::new(spec.tau, gossip.effective_degree), spec.budget, spec.cadence.unwrap_or(1))?;
    let mut st = ExtraState::new(problem, None);
    if !rec.observe(0, 0, 0, &st.x, true) {
        loop {
            st.step(problem, gossip, eta)?;
            if rec.observe(st.iteration, st.n_grads, st.n_comms, &st.x, false) {
                break;
            }
        }
    }
    let digest = params_digest(&ExtraDigest { eta, beta: 0.0, k_inner: None });
    Ok(rec.finish(TraceMeta::new("extra", spec.seed, digest)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ExtraCatalystOptions {
    pub beta: Option<f64>,
    pub k_inner: Option<u64>,
    pub t_outer: Option<u64>,
    pub eta: Option<f64>,
}

/// Default prox weight `β = max(L_batch γ − σ_min, 0)`.
pub fn default_extra_beta(problem: &Problem, gossip: &GossipMatrix) -> f64 {
    (l_batch(problem) * gossip.gamma - problem.sigma_min()).max(0.0)
}

/// Catalyst outer loop around EXTRA. Default inner length halves the
/// inner-problem error at the EXTRA step: `⌈2 ln 2 (L_batch + β)/(σ_min + β)⌉`.
pub fn run_extra_catalyst(
    problem: &Problem,
    gossip: &GossipMatrix,
    opts: &ExtraCatalystOptions,
    spec: &RunSpec,
) -> Result<Trace> {
    validate_gossip(problem, gossip)?;
    let beta = opts.beta.unwrap_or_else(|| default_extra_beta(problem, gossip));
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::Validation(format!("beta must be >= 0, got {beta}")));
    }
    let lb = l_batch(problem) + beta;
    let eta = opts.eta.unwrap_or(0.5 / lb);
    let k_inner = opts
        .k_inner
        .unwrap_or_else(|| (2.0 * std::f64::consts::LN_2 * lb / (problem.sigma_min() + beta)).ceil() as u64)
        .max(1);
    let q = q_of(problem.sigma_min(), beta);
    let coef = extrapolation_coef(q);
    let eval = Evaluator::new(problem, spec.theta_star, spec.f_star);
    let mut budget: Budget = spec.budget;
    if opts.t_outer.is_some() && budget.validate().is_err() {
        budget.max_iterations = Some(u64::MAX);
    }
    let mut rec = Recorder::new(eval, CostModel::new(spec.tau, gossip.effective_degree), budget, spec.cadence.unwrap_or(1))?;
    let mut st = ExtraState::new(problem, None);
    st.beta = beta;
    let mut theta_prev = st.x.clone();
    let mut outer = 0u64;
    rec.extra = RowExtra { outer_iter: 0, beta, q };
    let mut stop = rec.observe(0, 0, 0, &st.x, true);
    while !stop {
        if opts.t_outer.is_some_and(|t| outer >= t) {
            rec.force_stop(StopReason::OuterLoops);
            break;
        }
        rec.extra.outer_iter = outer;
        for _ in 0..k_inner {
            st.step(problem, gossip, eta)?;
            if rec.observe(st.iteration, st.n_grads, st.n_comms, &st.x, false) {
                stop = true;
                break;
            }
        }
        if stop {
            break;
        }
        let theta_k = st.x.clone();
        for k in 0..theta_k.len() {
            st.omega[k] = theta_k[k] + coef * (theta_k[k] - theta_prev[k]);
        }
        theta_prev = theta_k;
        outer += 1;
    }
    let digest = params_digest(&ExtraDigest { eta, beta, k_inner: Some(k_inner) });
    Ok(rec.finish(TraceMeta::new("extra_catalyst", spec.seed, digest)))
}

/// GT-SAGA: gradient tracking with per-node SAGA estimators.
///
/// ```text
/// x ← W̃ x − η y
/// g_i = σ_i x_i + m (∇f_is(x_i) − table_is) + Σ_j table_ij,  s uniform
/// y ← W̃ y + g − g_prev
/// ```
/// Two gossip products and one fresh gradient per node per iteration.
#[derive(Debug, Clone)]
pub struct GtSagaState {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub g: Vec<f64>,
    /// Per node: scalar coefficients of the stored gradients.
    pub table: Vec<Vec<f64>>,
    pub table_sum: Vec<f64>,
    rngs: Vec<ChaCha8Rng>,
    pub iteration: u64,
    pub n_grads: u64,
    pub n_comms: u64,
    pub exec: Exec,
}

impl GtSagaState {
    /// Table filled at `x0`, `y_0 = g_0` the full local gradients. The
    /// initial pass is charged `m` gradients.
    pub fn new(problem: &Problem, x0: Option<&[f64]>, seed: u64) -> GtSagaState {
        let (n, m, d) = (problem.n, problem.m, problem.d);
        let x = x0.map_or(vec![0.0; n * d], |x| x.to_vec());
        let mut table = Vec::with_capacity(n);
        let mut table_sum = vec![0.0; n * d];
        let mut g = vec![0.0; n * d];
        for i in 0..n {
            let xi = &x[i * d..(i + 1) * d];
            let coefs: Vec<f64> = (0..m).map(|j| problem.grad_coef(i, j, problem.margin(i, j, xi))).collect();
            let ts = &mut table_sum[i * d..(i + 1) * d];
            for (j, &c) in coefs.iter().enumerate() {
                problem.add_sample(i, j, c, ts);
            }
            for k in 0..d {
                g[i * d + k] = problem.sigma[i] * xi[k] + ts[k];
            }
            table.push(coefs);
        }
        let rngs = (0..n)
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(i as u64 + 1);
                r
            })
            .collect();
        GtSagaState {
            x,
            y: g.clone(),
            g,
            table,
            table_sum,
            rngs,
            iteration: 0,
            n_grads: m as u64,
            n_comms: 0,
            exec: Exec::Auto,
        }
    }

    pub fn step(&mut self, problem: &Problem, gossip: &GossipMatrix, eta: f64) -> Result<()> {
        let (m, d) = (problem.m, problem.d);
        let len = self.x.len();
        let mut w = vec![0.0; len];
        gossip.apply(&self.x, d, &mut w);
        let mut x_new = vec![0.0; len];
        mix(&self.x, &w, gossip.lambda_max, &mut x_new);
        for k in 0..len {
            x_new[k] -= eta * self.y[k];
        }
        let mut g_new = vec![0.0; len];
        for i in 0..problem.n {
            let s = self.rngs[i].random_range(0..m);
            let xi = &x_new[i * d..(i + 1) * d];
            let c = problem.grad_coef(i, s, problem.margin(i, s, xi));
            let old = self.table[i][s];
            let gi = &mut g_new[i * d..(i + 1) * d];
            for k in 0..d {
                gi[k] = problem.sigma[i] * xi[k] + self.table_sum[i * d + k];
            }
            problem.add_sample(i, s, m as f64 * (c - old), gi);
            problem.add_sample(i, s, c - old, &mut self.table_sum[i * d..(i + 1) * d]);
            self.table[i][s] = c;
        }
        gossip.apply(&self.y, d, &mut w);
        let mut y_new = vec![0.0; len];
        mix(&self.y, &w, gossip.lambda_max, &mut y_new);
        for k in 0..len {
            y_new[k] += g_new[k] - self.g[k];
        }
        check_finite(&x_new, d, self.iteration, "gt_saga")?;
        check_finite(&y_new, d, self.iteration, "gt_saga")?;
        self.x = x_new;
        self.y = y_new;
        self.g = g_new;
        self.iteration += 1;
        self.n_grads += 1;
        if problem.n > 1 {
            self.n_comms += 2;
        }
        Ok(())
    }
}

pub fn run_gt_saga(problem: &Problem, gossip: &GossipMatrix, eta: Option<f64>, spec: &RunSpec) -> Result<Trace> {
    validate_gossip(problem, gossip)?;
    let eta = eta.unwrap_or_else(|| default_gt_saga_step(problem, gossip));
    if !(eta > 0.0) {
        return Err(Error::Validation(format!("GT-SAGA step must be > 0, got {eta}")));
    }
    let eval = Evaluator::new(problem, spec.theta_star, spec.f_star);
    let cadence = spec.cadence.unwrap_or_else(|| Recorder::default_cadence(problem));
    let mut rec = Recorder::new(eval, CostModel::new(spec.tau, gossip.effective_degree), spec.budget, cadence)?;
    let mut st = GtSagaState::new(problem, None, spec.seed);
    if !rec.observe(0, st.n_grads, 0, &st.x, true) {
        loop {
            st.step(problem, gossip, eta)?;
            if rec.observe(st.iteration, st.n_grads, st.n_comms, &st.x, false) {
                break;
            }
        }
    }
    let digest = params_digest(&ExtraDigest { eta, beta: 0.0, k_inner: None });
    Ok(rec.finish(TraceMeta::new("gt_saga", spec.seed, digest)))
}
