//! DVR: dual-free decentralized variance reduction.
//!
//! Each node `i` keeps its parameter `θ_i`, one virtual parameter `z_ij`
//! per local sample and the cached gradient `∇f_ij(z_ij) = c_ij x_ij` (stored
//! as the scalar `c_ij`). At every iteration a shared coin decides between
//!
//! * a communication round, `θ ← θ − (η/p_comm) Σ W θ`, and
//! * a computation round, where every node draws one sample `j`, moves
//!   `z_ij ← (1 − αη/p_ij) z_ij + (αη/p_ij) θ_i`, and corrects
//!   `θ_i ← θ_i − (∇f_ij(z_ij) − c_ij x_ij)/σ_i` with a single fresh gradient.
//!
//! The shadow variable `x̃` accumulates the gossip increments so that
//! `θ_i = (x̃_i − Σ_j c_ij x_ij + offset_i)/σ_i` holds exactly in exact
//! arithmetic; `offset` is zero for plain DVR and `β ω_i` inside Catalyst.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::harness::cost::CostModel;
use crate::harness::trace::{params_digest, Budget, Evaluator, Recorder, Trace, TraceMeta};
use crate::linalg;
use crate::par::{self, Exec};
use crate::problem::Problem;
use crate::topology::{GossipMatrix, SPECTRAL_ZERO_TOL};
use crate::{Error, Result};

/// Slack on the parameter inequalities, which hold with equality for the
/// default choice.
const PARAM_TOL: f64 = 1e-12;

/// Relative tolerance of the θ-identity check.
pub const IDENTITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VirtualStore {
    /// Every `z_ij` as a dense vector (`n·m·d` floats).
    #[default]
    Full,
    /// Only the margins `x_ijᵀ z_ij`. The virtual update is affine, so the
    /// margin follows the same convex combination and the gradient, which
    /// depends on `z_ij` only through it, is unchanged. `m` floats per node.
    Margins,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DvrOptions {
    pub p_comm: Option<f64>,
    pub eta: Option<f64>,
    #[serde(default)]
    pub store: VirtualStore,
    /// Check the θ identity after every step (costs `O(n m d)` per step).
    #[serde(default)]
    pub check_invariant: bool,
    #[serde(default)]
    pub exec: Exec,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DvrParams {
    pub alpha: f64,
    pub eta: f64,
    pub p_comm: f64,
    /// Row-major `n x m`, each row summing to `1 − p_comm`.
    pub p: Vec<f64>,
    pub kappa_comm: f64,
    /// `λ_max(Σ^{1/2} W Σ^{1/2})`, `Σ = diag(1/σ_i)`.
    pub lambda_max_sigma: f64,
    /// `λ_min^+(D_M^{-1/2} W D_M^{-1/2})`.
    pub lambda_min_dm: f64,
    pub gamma: f64,
    pub degree: usize,
    pub uses_chebyshev: bool,
    pub n: usize,
    pub m: usize,
}

impl DvrParams {
    #[inline]
    pub fn p_ij(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.m + j]
    }

    pub fn p_comp(&self) -> f64 {
        1.0 - self.p_comm
    }

    /// Smallest block probability (communication included when used).
    pub fn p_min(&self) -> f64 {
        let pm = self.p.iter().copied().fold(f64::INFINITY, f64::min);
        if self.p_comm > 0.0 {
            pm.min(self.p_comm)
        } else {
            pm
        }
    }

    /// Contraction factor `1 − αη/2` of the guaranteed rate.
    pub fn rate(&self) -> f64 {
        1.0 - self.alpha * self.eta / 2.0
    }

    /// The step-size conditions that make every virtual coefficient a
    /// convex weight and every block step relatively smooth.
    pub fn check(&self, problem: &Problem) -> Result<()> {
        let ae = self.alpha * self.eta;
        let tol = 1.0 + PARAM_TOL;
        let fail = |msg: String| Err(Error::Validation(format!("DVR parameters: {msg}")));
        if !(self.alpha > 0.0 && self.eta > 0.0) {
            return fail(format!("alpha={} eta={} must be positive", self.alpha, self.eta));
        }
        if !(0.0..1.0).contains(&self.p_comm) {
            return fail(format!("p_comm={} outside [0,1)", self.p_comm));
        }
        if self.p_comm > 0.0 {
            if ae > 2.0 * self.p_comm * tol {
                return fail(format!("alpha*eta={ae} > 2 p_comm"));
            }
            if self.eta > self.p_comm / self.lambda_max_sigma * tol {
                return fail(format!("eta={} above p_comm/lambda_max", self.eta));
            }
        }
        for i in 0..self.n {
            let row: f64 = (0..self.m).map(|j| self.p_ij(i, j)).sum();
            if (row - (1.0 - self.p_comm)).abs() > 1e-12 {
                return fail(format!("node {i} probabilities sum to {row}"));
            }
            for j in 0..self.m {
                let pij = self.p_ij(i, j);
                if ae > 2.0 * pij * tol {
                    return fail(format!("alpha*eta > 2 p_{i}{j}"));
                }
                let bound = pij / (self.alpha * (1.0 + problem.l_ij(i, j) / problem.sigma[i]));
                if self.eta > bound * tol {
                    return fail(format!("eta above p_{i}{j}/(alpha(1+L/sigma))"));
                }
            }
        }
        Ok(())
    }
}

/// `M^{1/2} W M^{1/2}` for diagonal `M`.
fn weighted(w: &DMatrix<f64>, diag: &[f64]) -> DMatrix<f64> {
    let s: Vec<f64> = diag.iter().map(|v| v.sqrt()).collect();
    DMatrix::from_fn(w.nrows(), w.ncols(), |a, b| s[a] * w[(a, b)] * s[b])
}

/// Step parameters: α, η, p_comm, p_ij and κ_comm.
pub fn compute_params(problem: &Problem, gossip: &GossipMatrix, opts: &DvrOptions) -> Result<DvrParams> {
    let n = problem.n;
    let m = problem.m;
    if gossip.n() != n {
        return Err(Error::Validation(format!(
            "gossip matrix has {} nodes, problem has {n}",
            gossip.n()
        )));
    }
    let ratio = |i: usize, j: usize| 1.0 + problem.l_ij(i, j) / problem.sigma[i];
    let (alpha, lambda_max_sigma, lambda_min_dm, kappa_comm, p_comm) = if n == 1 {
        // single machine: no communication block, and α only rescales the
        // dual variables (the virtual coefficients αη/p_ij do not depend on it)
        (2.0 / problem.d_m[0], 0.0, 1.0 / problem.d_m[0], 0.0, 0.0)
    } else {
        let w = gossip.dense();
        let inv_sigma: Vec<f64> = problem.sigma.iter().map(|s| 1.0 / s).collect();
        let inv_dm: Vec<f64> = problem.d_m.iter().map(|s| 1.0 / s).collect();
        let ls = linalg::sym_eigenvalues(&weighted(&w, &inv_sigma));
        let ld = linalg::sym_eigenvalues(&weighted(&w, &inv_dm));
        let lmax = *ls.last().unwrap();
        let lmin = linalg::min_positive(&ld, SPECTRAL_ZERO_TOL)
            .ok_or_else(|| Error::Construction("weighted gossip matrix has no positive eigenvalue".into()))?;
        let kappa_comm = gossip.gamma * lmax / lmin;
        let p_comm = match opts.p_comm {
            Some(p) => p,
            None => 1.0 / (1.0 + gossip.gamma * (m as f64 + problem.kappa_s) / kappa_comm),
        };
        if !(p_comm > 0.0 && p_comm < 1.0) {
            return Err(Error::Validation(format!("p_comm must be in (0,1), got {p_comm}")));
        }
        (2.0 * lmin, lmax, lmin, kappa_comm, p_comm)
    };
    let mut p = vec![0.0; n * m];
    for i in 0..n {
        let total: f64 = (0..m).map(|j| ratio(i, j)).sum();
        for j in 0..m {
            p[i * m + j] = (1.0 - p_comm) * ratio(i, j) / total;
        }
    }
    let eta = match opts.eta {
        Some(e) => e,
        None => {
            let comp = (0..n)
                .flat_map(|i| (0..m).map(move |j| (i, j)))
                .map(|(i, j)| p[i * m + j] / (alpha * ratio(i, j)))
                .fold(f64::INFINITY, f64::min);
            if n == 1 {
                comp
            } else {
                comp.min(p_comm / lambda_max_sigma)
            }
        }
    };
    let params = DvrParams {
        alpha,
        eta,
        p_comm,
        p,
        kappa_comm,
        lambda_max_sigma,
        lambda_min_dm,
        gamma: gossip.gamma,
        degree: gossip.effective_degree,
        uses_chebyshev: gossip.is_chebyshev(),
        n,
        m,
    };
    params.check(problem)?;
    Ok(params)
}

/// Which block a DVR iteration updates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Block {
    Comm,
    /// One sample index per node.
    Comp(Vec<usize>),
}

#[derive(Debug, Clone)]
struct NodeState {
    /// `m·d` dense virtual parameters (empty in margin mode).
    z: Vec<f64>,
    /// `x_ijᵀ z_ij` (kept in margin mode only).
    margins: Vec<f64>,
    /// `∇f_ij(z_ij) = coef[j] · x_ij`.
    coef: Vec<f64>,
    x_tilde: Vec<f64>,
    offset: Vec<f64>,
    /// Cumulative sampling table over `j`, normalized to 1.
    cum: Vec<f64>,
    rng: ChaCha8Rng,
}

/// Full algorithm state; `theta` is row-major `n x d`.
#[derive(Debug, Clone)]
pub struct DvrState {
    pub theta: Vec<f64>,
    nodes: Vec<NodeState>,
    rng: ChaCha8Rng,
    pub iteration: u64,
    /// Gradient evaluations per node.
    pub n_grads: u64,
    pub n_comms: u64,
    pub check_invariant: bool,
    pub exec: Exec,
    store: VirtualStore,
    d: usize,
    m: usize,
}

impl DvrState {
    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn theta_i(&self, i: usize) -> &[f64] {
        &self.theta[i * self.d..(i + 1) * self.d]
    }

    pub fn x_tilde(&self, i: usize) -> &[f64] {
        &self.nodes[i].x_tilde
    }

    pub fn offset(&self, i: usize) -> &[f64] {
        &self.nodes[i].offset
    }

    /// `z_ij`, available with [`VirtualStore::Full`].
    pub fn z(&self, i: usize, j: usize) -> Option<&[f64]> {
        match self.store {
            VirtualStore::Full => Some(&self.nodes[i].z[j * self.d..(j + 1) * self.d]),
            VirtualStore::Margins => None,
        }
    }

    /// Cached `c_ij` with `∇f_ij(z_ij) = c_ij x_ij`.
    pub fn grad_coef(&self, i: usize, j: usize) -> f64 {
        self.nodes[i].coef[j]
    }

    /// Replaces the offsets `βω_i` and shifts θ so the identity keeps
    /// holding: `θ_i += (new_i − old_i)/σ_i`.
    pub fn set_offset(&mut self, problem: &Problem, offset: &[f64]) {
        let d = self.d;
        for (i, node) in self.nodes.iter_mut().enumerate() {
            let th = &mut self.theta[i * d..(i + 1) * d];
            for k in 0..d {
                let new = offset[i * d + k];
                th[k] += (new - node.offset[k]) / problem.sigma[i];
                node.offset[k] = new;
            }
        }
    }

    /// `max_i ‖θ_i − (x̃_i − Σ_j ∇f_ij(z_ij) + offset_i)/σ_i‖`.
    pub fn theta_identity_residual(&self, problem: &Problem) -> f64 {
        let d = self.d;
        (0..self.n())
            .map(|i| {
                let node = &self.nodes[i];
                let mut rhs = node.x_tilde.clone();
                linalg::axpy(1.0, &node.offset, &mut rhs);
                for j in 0..self.m {
                    problem.add_sample(i, j, -node.coef[j], &mut rhs);
                }
                let th = &self.theta[i * d..(i + 1) * d];
                th.iter()
                    .zip(&rhs)
                    .map(|(t, r)| (t - r / problem.sigma[i]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }

    pub fn identity_holds(&self, problem: &Problem) -> bool {
        self.theta_identity_residual(problem) <= IDENTITY_TOL * (1.0 + linalg::norm(&self.theta))
    }

    /// Draws the next block: communication with probability `p_comm`
    /// (`u < p_comm`), otherwise one sample per node from its own stream.
    pub fn sample_block(&mut self, params: &DvrParams) -> Block {
        let u: f64 = self.rng.random();
        if u < params.p_comm {
            return Block::Comm;
        }
        let js = self
            .nodes
            .iter_mut()
            .map(|node| {
                let v: f64 = node.rng.random();
                node.cum.partition_point(|&c| c <= v).min(node.cum.len() - 1)
            })
            .collect();
        Block::Comp(js)
    }

    /// Applies one block update and advances the counters.
    pub fn apply_block(
        &mut self,
        problem: &Problem,
        gossip: &GossipMatrix,
        params: &DvrParams,
        block: &Block,
    ) -> Result<()> {
        let d = self.d;
        let iteration = self.iteration;
        match block {
            Block::Comm => {
                if params.p_comm <= 0.0 {
                    return Err(Error::Validation("communication block with p_comm = 0".into()));
                }
                let mut wt = vec![0.0; self.theta.len()];
                gossip.apply(&self.theta, d, &mut wt);
                let step = params.eta / params.p_comm;
                for (i, node) in self.nodes.iter_mut().enumerate() {
                    let th = &mut self.theta[i * d..(i + 1) * d];
                    let wi = &wt[i * d..(i + 1) * d];
                    let inv = 1.0 / problem.sigma[i];
                    for k in 0..d {
                        th[k] -= step * wi[k] * inv;
                        node.x_tilde[k] -= step * wi[k];
                    }
                    if !linalg::all_finite(th) {
                        return Err(Error::Divergence { iteration, node: i, update: "communication" });
                    }
                }
                self.n_comms += 1;
            }
            Block::Comp(js) => {
                if js.len() != self.n() {
                    return Err(Error::Validation(format!(
                        "computation block has {} indices for {} nodes",
                        js.len(),
                        self.n()
                    )));
                }
                if let Some(&j) = js.iter().find(|&&j| j >= self.m) {
                    return Err(Error::Index(format!("sample {j} >= m={}", self.m)));
                }
                let store = self.store;
                let work = self.n() * (d + 8);
                let bad = std::sync::atomic::AtomicUsize::new(usize::MAX);
                par::for_each_chunk_mut(self.exec, work, &mut self.theta, d, &mut self.nodes, |i, th, node| {
                    let j = js[i];
                    let a = params.alpha * params.eta / params.p_ij(i, j);
                    let u = match store {
                        VirtualStore::Full => {
                            let z = &mut node.z[j * d..(j + 1) * d];
                            for k in 0..d {
                                z[k] = (1.0 - a) * z[k] + a * th[k];
                            }
                            problem.margin(i, j, z)
                        }
                        VirtualStore::Margins => {
                            let u = (1.0 - a) * node.margins[j] + a * problem.margin(i, j, th);
                            node.margins[j] = u;
                            u
                        }
                    };
                    let c = problem.grad_coef(i, j, u);
                    problem.add_sample(i, j, -(c - node.coef[j]) / problem.sigma[i], th);
                    node.coef[j] = c;
                    if !c.is_finite() || !linalg::all_finite(th) {
                        bad.fetch_min(i, std::sync::atomic::Ordering::Relaxed);
                    }
                });
                let bad = bad.into_inner();
                if bad != usize::MAX {
                    return Err(Error::Divergence { iteration, node: bad, update: "computation" });
                }
                self.n_grads += 1;
            }
        }
        self.iteration += 1;
        if self.check_invariant && !self.identity_holds(problem) {
            return Err(Error::Invariant {
                iteration: self.iteration,
                msg: format!(
                    "theta identity residual {:e}",
                    self.theta_identity_residual(problem)
                ),
            });
        }
        Ok(())
    }

    /// Samples and applies one block.
    pub fn step(&mut self, problem: &Problem, gossip: &GossipMatrix, params: &DvrParams) -> Result<Block> {
        let block = self.sample_block(params);
        self.apply_block(problem, gossip, params, &block)?;
        Ok(block)
    }
}

/// Initial state from virtual parameters `z0` (row-major `n x m x d`, or
/// zero when `None`), shadow `x̃_0` (zero when `None`) and offsets (zero when
/// `None`). `θ_0` follows from the identity. Filling the cache costs one
/// pass (`m` gradients per node), which is charged to the counters.
pub fn init_state_with(
    problem: &Problem,
    params: &DvrParams,
    opts: &DvrOptions,
    z0: Option<&[f64]>,
    x_tilde0: Option<&[f64]>,
    offset: Option<&[f64]>,
    seed: u64,
) -> Result<DvrState> {
    let (n, m, d) = (problem.n, problem.m, problem.d);
    for (name, v, len) in [("z0", z0, n * m * d), ("x_tilde0", x_tilde0, n * d), ("offset", offset, n * d)] {
        if let Some(v) = v {
            if v.len() != len {
                return Err(Error::Validation(format!("{name} has length {}, expected {len}", v.len())));
            }
            if !linalg::all_finite(v) {
                return Err(Error::Validation(format!("{name} is not finite")));
            }
        }
    }
    let mut theta = vec![0.0; n * d];
    let mut nodes = Vec::with_capacity(n);
    for i in 0..n {
        let zi: Vec<f64> = match z0 {
            Some(z) => z[i * m * d..(i + 1) * m * d].to_vec(),
            None => vec![0.0; m * d],
        };
        let margins: Vec<f64> = (0..m).map(|j| problem.margin(i, j, &zi[j * d..(j + 1) * d])).collect();
        let coef: Vec<f64> = (0..m).map(|j| problem.grad_coef(i, j, margins[j])).collect();
        let x_tilde = x_tilde0.map_or(vec![0.0; d], |x| x[i * d..(i + 1) * d].to_vec());
        let off = offset.map_or(vec![0.0; d], |x| x[i * d..(i + 1) * d].to_vec());
        let th = &mut theta[i * d..(i + 1) * d];
        for k in 0..d {
            th[k] = x_tilde[k] + off[k];
        }
        for j in 0..m {
            problem.add_sample(i, j, -coef[j], th);
        }
        th.iter_mut().for_each(|t| *t /= problem.sigma[i]);
        let total = 1.0 - params.p_comm;
        let mut acc = 0.0;
        let mut cum: Vec<f64> = (0..m)
            .map(|j| {
                acc += params.p_ij(i, j) / total;
                acc
            })
            .collect();
        *cum.last_mut().unwrap() = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let (z, margins) = match opts.store {
            VirtualStore::Full => (zi, Vec::new()),
            VirtualStore::Margins => (Vec::new(), margins),
        };
        nodes.push(NodeState { z, margins, coef, x_tilde, offset: off, cum, rng });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    Ok(DvrState {
        theta,
        nodes,
        rng,
        iteration: 0,
        n_grads: m as u64,
        n_comms: 0,
        check_invariant: opts.check_invariant,
        exec: opts.exec,
        store: opts.store,
        d,
        m,
    })
}

/// `θ_0^{(i)} = −Σ_j ∇f_ij(z_0^{(ij)})/σ_i`, `x̃_0 = 0`.
pub fn init_state(
    problem: &Problem,
    params: &DvrParams,
    opts: &DvrOptions,
    z0: Option<&[f64]>,
    seed: u64,
) -> Result<DvrState> {
    init_state_with(problem, params, opts, z0, None, None, seed)
}

/// Runs `state` until the recorder's budget stops it. Rows are recorded at
/// the recorder's cadence and after every communication.
pub fn run_with(
    problem: &Problem,
    gossip: &GossipMatrix,
    params: &DvrParams,
    state: &mut DvrState,
    rec: &mut Recorder,
    max_steps: Option<u64>,
) -> Result<bool> {
    if rec.observe(state.iteration, state.n_grads, state.n_comms, &state.theta, state.iteration == 0) {
        return Ok(true);
    }
    let mut done = 0u64;
    while max_steps.is_none_or(|k| done < k) {
        let block = state.step(problem, gossip, params)?;
        done += 1;
        let force = block == Block::Comm;
        if rec.observe(state.iteration, state.n_grads, state.n_comms, &state.theta, force) {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Everything needed for a DVR run besides problem and gossip.
#[derive(Debug, Clone)]
pub struct RunSpec<'a> {
    pub seed: u64,
    pub tau: f64,
    pub budget: Budget,
    pub theta_star: Option<&'a [f64]>,
    pub f_star: Option<f64>,
    pub cadence: Option<u64>,
}

pub fn run(
    problem: &Problem,
    gossip: &GossipMatrix,
    params: &DvrParams,
    opts: &DvrOptions,
    spec: &RunSpec,
) -> Result<Trace> {
    let mut state = init_state(problem, params, opts, None, spec.seed)?;
    let eval = Evaluator::new(problem, spec.theta_star, spec.f_star);
    let cadence = spec.cadence.unwrap_or_else(|| Recorder::default_cadence(problem));
    let mut rec = Recorder::new(eval, CostModel::new(spec.tau, gossip.effective_degree), spec.budget, cadence)?;
    run_with(problem, gossip, params, &mut state, &mut rec, None)?;
    Ok(rec.finish(TraceMeta::new("dvr", spec.seed, params_digest(params))))
}
