//! Regularized finite sums of generalized linear losses.
//!
//! Node `i` holds `f_i(θ) = σ_i/2 ‖θ‖² + Σ_j f_ij(θ)` with
//! `f_ij(θ) = w · ℓ(x_ijᵀθ, y_ij)`. Because every sample loss depends on θ
//! only through the margin `u = xᵀθ`, gradients are `w ℓ'(u, y) x` and the
//! Hessian of `f_ij` is dominated by `L_ij P_ij` with `P_ij` the rank-one
//! projector on `x_ij`.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Logistic,
    Squared,
}

impl LossKind {
    /// `ℓ(u, y)`.
    #[inline]
    pub fn value(self, u: f64, y: f64) -> f64 {
        match self {
            LossKind::Logistic => softplus(-y * u),
            LossKind::Squared => 0.5 * (u - y) * (u - y),
        }
    }

    /// `∂ℓ/∂u`.
    #[inline]
    pub fn deriv(self, u: f64, y: f64) -> f64 {
        match self {
            LossKind::Logistic => -y * sigmoid(-y * u),
            LossKind::Squared => u - y,
        }
    }

    /// `∂²ℓ/∂u²`.
    #[inline]
    pub fn second_deriv(self, u: f64, y: f64) -> f64 {
        match self {
            LossKind::Logistic => {
                let s = sigmoid(y * u);
                s * (1.0 - s)
            }
            LossKind::Squared => 1.0,
        }
    }

    /// Global bound on `∂²ℓ/∂u²`.
    pub fn curvature_bound(self) -> f64 {
        match self {
            LossKind::Logistic => 0.25,
            LossKind::Squared => 1.0,
        }
    }

    pub fn label_ok(self, y: f64) -> bool {
        match self {
            LossKind::Logistic => y == 1.0 || y == -1.0,
            LossKind::Squared => y.is_finite(),
        }
    }
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Sparse samples in CSR layout with their labels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dataset {
    pub d: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
    pub labels: Vec<f64>,
    /// Generating parameter for synthetic data.
    pub planted: Option<Vec<f64>>,
}

impl Dataset {
    /// Builds from dense rows. Exact zeros are dropped from the sparse
    /// structure; all-zero rows are rejected.
    pub fn from_dense(rows: &[Vec<f64>], labels: &[f64]) -> Result<Dataset> {
        if rows.len() != labels.len() {
            return Err(Error::Validation(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let d = rows.first().map_or(0, |r| r.len());
        let mut ds = Dataset {
            d,
            indptr: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
            labels: labels.to_vec(),
            planted: None,
        };
        for (k, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::Validation(format!("row {k} has wrong length")));
            }
            for (c, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    ds.indices.push(c);
                    ds.values.push(v);
                }
            }
            if ds.indices.len() == *ds.indptr.last().unwrap() {
                return Err(Error::Validation(format!("row {k} is all zeros")));
            }
            ds.indptr.push(ds.indices.len());
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(indices, values)` of row `k`.
    #[inline]
    pub fn row(&self, k: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.indptr[k], self.indptr[k + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn dense_row(&self, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        let (idx, val) = self.row(k);
        for (&c, &v) in idx.iter().zip(val) {
            out[c] = v;
        }
        out
    }

    pub fn row_norm_sq(&self, k: usize) -> f64 {
        linalg::norm_sq(self.row(k).1)
    }

    fn validate_labels(&self, loss: LossKind) -> Result<()> {
        for (k, &y) in self.labels.iter().enumerate() {
            if !loss.label_ok(y) {
                return Err(Error::Parse {
                    line: k + 1,
                    msg: format!("label {y} not admissible for {loss:?} loss"),
                });
            }
        }
        Ok(())
    }

    fn select(&self, order: &[usize]) -> Dataset {
        let mut ds = Dataset {
            d: self.d,
            indptr: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
            labels: Vec::with_capacity(order.len()),
            planted: self.planted.clone(),
        };
        for &k in order {
            let (idx, val) = self.row(k);
            ds.indices.extend_from_slice(idx);
            ds.values.extend_from_slice(val);
            ds.indptr.push(ds.indices.len());
            ds.labels.push(self.labels[k]);
        }
        ds
    }
}

/// Parses libsvm text (`label idx:val ...`, 1-indexed features). `d` is the
/// largest index seen. Labels are checked against `loss`.
pub fn parse_libsvm(text: &str, loss: LossKind) -> Result<Dataset> {
    let mut ds = Dataset {
        d: 0,
        indptr: vec![0],
        indices: Vec::new(),
        values: Vec::new(),
        labels: Vec::new(),
        planted: None,
    };
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let line_no = lineno + 1;
        let err = |msg: String| Error::Parse { line: line_no, msg };
        let mut toks = line.split_whitespace();
        let label: f64 = toks
            .next()
            .unwrap()
            .parse()
            .map_err(|_| err("bad label".into()))?;
        if !loss.label_ok(label) {
            return Err(err(format!("label {label} not admissible for {loss:?} loss")));
        }
        let mut last = 0usize;
        let start = ds.indices.len();
        for tok in toks {
            let (i, v) = tok
                .split_once(':')
                .ok_or_else(|| err(format!("expected idx:val, got '{tok}'")))?;
            let i: usize = i.parse().map_err(|_| err(format!("bad index '{i}'")))?;
            let v: f64 = v.parse().map_err(|_| err(format!("bad value '{v}'")))?;
            if i == 0 || i <= last {
                return Err(err(format!("indices must be 1-based and increasing at '{tok}'")));
            }
            if !v.is_finite() {
                return Err(err(format!("non-finite value at '{tok}'")));
            }
            last = i;
            if v != 0.0 {
                ds.indices.push(i - 1);
                ds.values.push(v);
            }
            ds.d = ds.d.max(i);
        }
        if ds.indices.len() == start {
            return Err(err("all-zero feature row".into()));
        }
        ds.indptr.push(ds.indices.len());
        ds.labels.push(label);
    }
    if ds.is_empty() {
        return Err(Error::Validation("empty libsvm file".into()));
    }
    Ok(ds)
}

pub fn load_libsvm(path: &Path, loss: LossKind) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_libsvm(&text, loss)
}

/// Fraction of logistic labels flipped in synthetic data, so that the
/// classes are not linearly separable.
pub const SYNTH_LABEL_NOISE: f64 = 0.1;

/// Gaussian features rescaled so the largest row norm equals `scale`, with
/// labels from a planted Gaussian parameter: `xᵀθ` for squared loss and its
/// sign, flipped with probability [`SYNTH_LABEL_NOISE`], for logistic loss.
pub fn synth_dataset(n_samples: usize, d: usize, loss: LossKind, seed: u64, scale: f64) -> Result<Dataset> {
    if n_samples == 0 || d == 0 {
        return Err(Error::Validation("synthetic dataset needs N, d >= 1".into()));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Validation(format!("scale must be positive, got {scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planted: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mut rows: Vec<Vec<f64>> = (0..n_samples)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let max_norm = rows.iter().map(|r| linalg::norm(r)).fold(0.0, f64::max);
    for r in &mut rows {
        for v in r.iter_mut() {
            *v *= scale / max_norm;
        }
    }
    let labels: Vec<f64> = rows
        .iter()
        .map(|r| {
            let u = linalg::dot(r, &planted);
            match loss {
                LossKind::Squared => u,
                LossKind::Logistic => {
                    let y = if u >= 0.0 { 1.0 } else { -1.0 };
                    if rng.random::<f64>() < SYNTH_LABEL_NOISE {
                        -y
                    } else {
                        y
                    }
                }
            }
        })
        .collect();
    let mut ds = Dataset::from_dense(&rows, &labels)?;
    ds.planted = Some(planted);
    Ok(ds)
}

/// How the batch condition number is obtained. It only feeds baseline
/// step sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum KappaB {
    /// `max_i (1 + Σ_j L_ij) / σ_i`, same as κ_s.
    #[default]
    Bound,
    /// `max_i (1 + λ_max(∇²Σ_j f_ij(0))) / σ_i` by power iteration.
    Estimate,
    Override(f64),
}

#[derive(Debug, Clone, Default)]
pub struct ProblemOptions {
    /// Per-sample weight; `None` means `1/m`.
    pub weight: Option<f64>,
    /// Seeded shuffle before the contiguous split.
    pub shuffle_seed: Option<u64>,
    pub kappa_b: KappaB,
}

/// Power iteration limits for `λ_max(Σ_j L_ij P_ij)`.
pub const POWER_ITERS: usize = 200;
pub const POWER_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct Problem {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub loss: LossKind,
    pub weight: f64,
    pub sigma: Vec<f64>,
    /// Row-major `n x m` per-sample smoothness.
    pub l: Vec<f64>,
    pub kappa_s: f64,
    pub kappa_b: f64,
    pub d_m: Vec<f64>,
    /// Largest eigenvalue of each node's data curvature `Σ_j L_ij P_ij`.
    pub m_max: Vec<f64>,
    /// Set when `N` was not a multiple of `n` and the tail was dropped.
    pub truncated: bool,
    /// Shift already added to every σ_i (Catalyst inner problems).
    pub beta: f64,
    data: Arc<Dataset>,
}

/// JSON-friendly problem summary.
#[derive(Debug, Clone, Serialize)]
pub struct ProblemSummary {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub loss: LossKind,
    pub weight: f64,
    pub sigma: Vec<f64>,
    pub kappa_s: f64,
    pub kappa_b: f64,
    pub d_m: Vec<f64>,
    pub truncated: bool,
}

pub fn build_problem(
    dataset: &Dataset,
    n: usize,
    sigma: &[f64],
    loss: LossKind,
    opts: &ProblemOptions,
) -> Result<Problem> {
    if dataset.is_empty() {
        return Err(Error::Validation("empty dataset".into()));
    }
    if n == 0 {
        return Err(Error::Validation("node count must be >= 1".into()));
    }
    let sigma: Vec<f64> = match sigma.len() {
        1 => vec![sigma[0]; n],
        k if k == n => sigma.to_vec(),
        k => {
            return Err(Error::Validation(format!(
                "sigma has {k} entries, expected 1 or {n}"
            )))
        }
    };
    if let Some(s) = sigma.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::Validation(format!("sigma must be > 0, got {s}")));
    }
    dataset.validate_labels(loss)?;
    let m = dataset.len() / n;
    if m == 0 {
        return Err(Error::Validation(format!(
            "{} samples cannot feed {n} nodes",
            dataset.len()
        )));
    }
    let truncated = m * n != dataset.len();
    if truncated {
        log::warn!(
            "dataset of {} samples truncated to {} for {n} nodes",
            dataset.len(),
            m * n
        );
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if let Some(seed) = opts.shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.truncate(m * n);
    let data = dataset.select(&order);
    let weight = opts.weight.unwrap_or(1.0 / m as f64);
    if !(weight > 0.0 && weight.is_finite()) {
        return Err(Error::Validation(format!("weight must be > 0, got {weight}")));
    }
    let curv = loss.curvature_bound();
    let l: Vec<f64> = (0..n * m).map(|k| curv * weight * data.row_norm_sq(k)).collect();
    let mut p = Problem {
        n,
        m,
        d: data.d,
        loss,
        weight,
        sigma,
        l,
        kappa_s: 0.0,
        kappa_b: 0.0,
        d_m: vec![],
        m_max: vec![],
        truncated,
        beta: 0.0,
        data: Arc::new(data),
    };
    p.m_max = (0..n).map(|i| p.curvature_lambda_max(i)).collect();
    p.refresh_constants();
    p.kappa_b = match opts.kappa_b {
        KappaB::Bound => p.kappa_s,
        KappaB::Estimate => (0..n)
            .map(|i| (1.0 + p.m_max[i]) / p.sigma[i])
            .fold(0.0, f64::max),
        KappaB::Override(v) => {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("kappa_b override must be > 0, got {v}")));
            }
            v
        }
    };
    Ok(p)
}

impl Problem {
    fn refresh_constants(&mut self) {
        self.kappa_s = (0..self.n)
            .map(|i| (1.0 + self.l_row(i).iter().sum::<f64>()) / self.sigma[i])
            .fold(0.0, f64::max);
        self.d_m = (0..self.n).map(|i| self.sigma[i] + self.m_max[i]).collect();
    }

    /// The same data with every σ_i replaced by σ_i + β (κ_s and D_M follow).
    pub fn shifted(&self, beta: f64) -> Result<Problem> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Validation(format!("beta must be >= 0, got {beta}")));
        }
        let mut p = self.clone();
        for s in &mut p.sigma {
            *s += beta;
        }
        p.beta = self.beta + beta;
        p.refresh_constants();
        Ok(p)
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    #[inline]
    pub fn l_row(&self, i: usize) -> &[f64] {
        &self.l[i * self.m..(i + 1) * self.m]
    }

    #[inline]
    pub fn l_ij(&self, i: usize, j: usize) -> f64 {
        self.l[i * self.m + j]
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma.iter().copied().fold(0.0, f64::max)
    }

    pub fn l_max(&self) -> f64 {
        self.l.iter().copied().fold(0.0, f64::max)
    }

    /// `max_i Σ_j L_ij`.
    pub fn l_sum_max(&self) -> f64 {
        (0..self.n).map(|i| self.l_row(i).iter().sum::<f64>()).fold(0.0, f64::max)
    }

    #[inline]
    pub fn sample(&self, i: usize, j: usize) -> (&[usize], &[f64]) {
        self.data.row(i * self.m + j)
    }

    #[inline]
    pub fn label(&self, i: usize, j: usize) -> f64 {
        self.data.labels[i * self.m + j]
    }

    pub fn dense_sample(&self, i: usize, j: usize) -> Vec<f64> {
        self.data.dense_row(i * self.m + j)
    }

    pub fn sample_norm_sq(&self, i: usize, j: usize) -> f64 {
        self.data.row_norm_sq(i * self.m + j)
    }

    /// `x_ijᵀ θ`.
    #[inline]
    pub fn margin(&self, i: usize, j: usize, theta: &[f64]) -> f64 {
        let (idx, val) = self.sample(i, j);
        idx.iter().zip(val).map(|(&c, &v)| v * theta[c]).sum()
    }

    /// Scalar `c` with `∇f_ij = c x_ij`, given the margin.
    #[inline]
    pub fn grad_coef(&self, i: usize, j: usize, margin: f64) -> f64 {
        self.weight * self.loss.deriv(margin, self.label(i, j))
    }

    /// `out += a x_ij`.
    #[inline]
    pub fn add_sample(&self, i: usize, j: usize, a: f64, out: &mut [f64]) {
        let (idx, val) = self.sample(i, j);
        for (&c, &v) in idx.iter().zip(val) {
            out[c] += a * v;
        }
    }

    pub fn check_index(&self, i: usize, j: usize) -> Result<()> {
        if i >= self.n || j >= self.m {
            return Err(Error::Index(format!(
                "sample ({i},{j}) outside {}x{}",
                self.n, self.m
            )));
        }
        Ok(())
    }

    pub fn sample_loss(&self, i: usize, j: usize, theta: &[f64]) -> f64 {
        self.weight * self.loss.value(self.margin(i, j, theta), self.label(i, j))
    }

    /// `∇f_ij(θ)`, loss term only.
    pub fn stoch_gradient(&self, i: usize, j: usize, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_index(i, j)?;
        let mut g = vec![0.0; self.d];
        let c = self.grad_coef(i, j, self.margin(i, j, theta));
        self.add_sample(i, j, c, &mut g);
        Ok(g)
    }

    /// `σ_i θ + Σ_j ∇f_ij(θ)`.
    pub fn full_gradient(&self, i: usize, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_index(i, 0)?;
        let mut g: Vec<f64> = theta.iter().map(|t| self.sigma[i] * t).collect();
        self.add_loss_gradient(i, theta, &mut g);
        Ok(g)
    }

    /// `out += Σ_j ∇f_ij(θ)`.
    pub fn add_loss_gradient(&self, i: usize, theta: &[f64], out: &mut [f64]) {
        for j in 0..self.m {
            let c = self.grad_coef(i, j, self.margin(i, j, theta));
            self.add_sample(i, j, c, out);
        }
    }

    /// `f_i(θ)` including the regularizer.
    pub fn local_value(&self, i: usize, theta: &[f64]) -> f64 {
        let loss: f64 = (0..self.m).map(|j| self.sample_loss(i, j, theta)).sum();
        0.5 * self.sigma[i] * linalg::norm_sq(theta) + loss
    }

    /// `F(θ) = Σ_i f_i(θ)`.
    pub fn objective(&self, theta: &[f64]) -> f64 {
        (0..self.n).map(|i| self.local_value(i, theta)).sum()
    }

    /// `∇F(θ)`.
    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let s: f64 = self.sigma.iter().sum();
        let mut g: Vec<f64> = theta.iter().map(|t| s * t).collect();
        for i in 0..self.n {
            self.add_loss_gradient(i, theta, &mut g);
        }
        g
    }

    /// Dense `∇²F(θ)`; only for small `d`.
    pub fn hessian(&self, theta: &[f64]) -> nalgebra::DMatrix<f64> {
        let d = self.d;
        let s: f64 = self.sigma.iter().sum();
        let mut h = nalgebra::DMatrix::<f64>::identity(d, d) * s;
        for i in 0..self.n {
            for j in 0..self.m {
                let u = self.margin(i, j, theta);
                let c = self.weight * self.loss.second_deriv(u, self.label(i, j));
                let (idx, val) = self.sample(i, j);
                for (&a, &va) in idx.iter().zip(val) {
                    for (&b, &vb) in idx.iter().zip(val) {
                        h[(a, b)] += c * va * vb;
                    }
                }
            }
        }
        h
    }

    /// `λ_max(Σ_j L_ij P_ij)` by power iteration from a fixed start; falls
    /// back to `Σ_j L_ij` when the iteration does not settle.
    pub fn curvature_lambda_max(&self, i: usize) -> f64 {
        let bound: f64 = self.l_row(i).iter().sum();
        if self.m == 1 {
            return self.l_ij(i, 0);
        }
        let d = self.d;
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ i as u64);
        let mut v: Vec<f64> = (0..d).map(|_| 1.0 + rng.random::<f64>()).collect();
        let nv = linalg::norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        let curv_w = self.loss.curvature_bound() * self.weight;
        let mut lambda = 0.0;
        for _ in 0..POWER_ITERS {
            let mut out = vec![0.0; d];
            for j in 0..self.m {
                let u = self.margin(i, j, &v);
                self.add_sample(i, j, curv_w * u, &mut out);
            }
            let new_lambda = linalg::dot(&v, &out);
            let no = linalg::norm(&out);
            if no == 0.0 {
                return bound;
            }
            out.iter_mut().for_each(|x| *x /= no);
            v = out;
            if (new_lambda - lambda).abs() <= POWER_TOL * new_lambda.abs() {
                return new_lambda.min(bound);
            }
            lambda = new_lambda;
        }
        log::debug!("power iteration on node {i} did not settle; using sum bound");
        bound
    }

    pub fn summary(&self) -> ProblemSummary {
        ProblemSummary {
            n: self.n,
            m: self.m,
            d: self.d,
            loss: self.loss,
            weight: self.weight,
            sigma: self.sigma.clone(),
            kappa_s: self.kappa_s,
            kappa_b: self.kappa_b,
            d_m: self.d_m.clone(),
            truncated: self.truncated,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one_sample(x: Vec<f64>, y: f64, loss: LossKind, weight: f64) -> Problem {
        let ds = Dataset::from_dense(&[x], &[y]).unwrap();
        build_problem(
            &ds,
            1,
            &[1.0],
            loss,
            &ProblemOptions { weight: Some(weight), ..Default::default() },
        )
        .unwrap()
    }

    #[test]
    fn libsvm_basic() {
        let ds = parse_libsvm("1 1:2.0\n-1 2:1.0\n", LossKind::Logistic).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.d, 2);
        assert_eq!(ds.dense_row(0), vec![2.0, 0.0]);
        assert_eq!(ds.dense_row(1), vec![0.0, 1.0]);
    }

    #[test]
    fn libsvm_rejects_bad_label_and_lines() {
        match parse_libsvm("0.5 1:1\n", LossKind::Logistic) {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_libsvm("1 1:1\n1 3:x\n", LossKind::Logistic),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_libsvm("1 0:1\n", LossKind::Squared),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(parse_libsvm("\n", LossKind::Squared).is_err());
        assert!(parse_libsvm("1 2:0\n", LossKind::Squared).is_err());
    }

    #[test]
    fn synth_scaling_and_determinism() {
        let ds = synth_dataset(4, 2, LossKind::Squared, 1, 1.0).unwrap();
        for k in 0..4 {
            assert!(ds.row_norm_sq(k).sqrt() <= 1.0 + 1e-15);
        }
        let a = synth_dataset(100, 10, LossKind::Logistic, 3, 1.0).unwrap();
        let b = synth_dataset(100, 10, LossKind::Logistic, 3, 1.0).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(450, 20, LossKind::Logistic, 5, 1.0).unwrap();
        let p = build_problem(&c, 9, &[1e-3], LossKind::Logistic, &Default::default()).unwrap();
        assert_eq!(p.m, 50);
        assert!(!p.truncated);
    }

    #[test]
    fn truncation_and_lossless_partition() {
        let ds = synth_dataset(23, 3, LossKind::Squared, 2, 1.0).unwrap();
        let p = build_problem(&ds, 4, &[0.1], LossKind::Squared, &Default::default()).unwrap();
        assert_eq!(p.m, 5);
        assert!(p.truncated);
        for i in 0..4 {
            for j in 0..5 {
                assert_eq!(p.dense_sample(i, j), ds.dense_row(i * 5 + j));
                assert_eq!(p.label(i, j), ds.labels[i * 5 + j]);
            }
        }
        let sh = build_problem(
            &ds,
            4,
            &[0.1],
            LossKind::Squared,
            &ProblemOptions { shuffle_seed: Some(9), ..Default::default() },
        )
        .unwrap();
        let mut a: Vec<f64> = (0..20).map(|k| sh.label(k / 5, k % 5)).collect();
        let mut all = ds.labels.clone();
        a.sort_by(f64::total_cmp);
        all.sort_by(f64::total_cmp);
        assert!(a.iter().all(|v| all.contains(v)));
    }

    #[test]
    fn smoothness_of_single_logistic_sample() {
        let p = one_sample(vec![2.0, 0.0], 1.0, LossKind::Logistic, 1.0);
        assert_relative_eq!(p.l_ij(0, 0), 1.0);
        // oracle: max over u of ℓ''(u) ‖x‖², scanned
        let peak = (-2000..=2000)
            .map(|k| LossKind::Logistic.second_deriv(k as f64 * 1e-3, 1.0) * 4.0)
            .fold(0.0, f64::max);
        assert_relative_eq!(peak, 1.0, max_relative = 1e-12);
        assert_relative_eq!(p.d_m[0], 1.0 + 1.0, max_relative = 1e-12);
    }

    #[test]
    fn uniform_kappa_s() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        let ds = Dataset::from_dense(&rows, &[1.0, 2.0, 3.0]).unwrap();
        let p = build_problem(
            &ds,
            1,
            &[0.5],
            LossKind::Squared,
            &ProblemOptions { weight: Some(0.2), ..Default::default() },
        )
        .unwrap();
        assert_relative_eq!(p.kappa_s, (1.0 + 3.0 * 0.2) / 0.5, max_relative = 1e-14);
        // λ_max(0.2 (2 e1e1ᵀ + e2e2ᵀ)) = 0.4
        assert_relative_eq!(p.d_m[0], 0.5 + 0.4, max_relative = 1e-9);
    }

    #[test]
    fn logistic_gradient_at_zero() {
        let p = one_sample(vec![1.0, 0.0, 0.0], 1.0, LossKind::Logistic, 0.3);
        let g = p.stoch_gradient(0, 0, &[0.0; 3]).unwrap();
        assert_eq!(g, vec![-0.3 * 0.5, 0.0, 0.0]);
        assert!(p.stoch_gradient(1, 0, &[0.0; 3]).is_err());
    }

    #[test]
    fn planted_optimum_zero_gradient() {
        let ds = synth_dataset(30, 4, LossKind::Squared, 11, 1.0).unwrap();
        let p = build_problem(&ds, 3, &[1.0], LossKind::Squared, &Default::default()).unwrap();
        let theta = ds.planted.clone().unwrap();
        for i in 0..3 {
            let mut g = vec![0.0; 4];
            p.add_loss_gradient(i, &theta, &mut g);
            assert!(linalg::norm(&g) < 1e-14);
        }
    }

    #[test]
    fn d_m_single_sample_exact() {
        let ds = synth_dataset(3, 5, LossKind::Logistic, 4, 2.0).unwrap();
        let p = build_problem(&ds, 3, &[0.1, 0.2, 0.3], LossKind::Logistic, &Default::default()).unwrap();
        for i in 0..3 {
            assert_eq!(p.d_m[i], p.sigma[i] + p.l_ij(i, 0));
        }
    }

    #[test]
    fn d_m_matches_dense_eigen() {
        let ds = synth_dataset(40, 6, LossKind::Logistic, 8, 1.0).unwrap();
        let p = build_problem(&ds, 4, &[1e-2], LossKind::Logistic, &Default::default()).unwrap();
        for i in 0..4 {
            let mut m = nalgebra::DMatrix::<f64>::zeros(6, 6);
            for j in 0..p.m {
                let x = nalgebra::DVector::from_vec(p.dense_sample(i, j));
                m += p.l_ij(i, j) / x.norm_squared() * &x * x.transpose();
            }
            let lmax = *linalg::sym_eigenvalues(&m).last().unwrap();
            assert_relative_eq!(p.d_m[i] - p.sigma[i], lmax, max_relative = 1e-8);
        }
    }

    #[test]
    fn kappa_modes_and_band() {
        let ds = synth_dataset(60, 5, LossKind::Logistic, 2, 1.0).unwrap();
        let bound = build_problem(&ds, 3, &[1e-2], LossKind::Logistic, &Default::default()).unwrap();
        assert_eq!(bound.kappa_b, bound.kappa_s);
        let est = build_problem(
            &ds,
            3,
            &[1e-2],
            LossKind::Logistic,
            &ProblemOptions { kappa_b: KappaB::Estimate, ..Default::default() },
        )
        .unwrap();
        assert!(est.kappa_b <= est.kappa_s);
        assert!(est.kappa_s <= est.m as f64 * est.kappa_b + est.m as f64);
        let ov = build_problem(
            &ds,
            3,
            &[1e-2],
            LossKind::Logistic,
            &ProblemOptions { kappa_b: KappaB::Override(7.0), ..Default::default() },
        )
        .unwrap();
        assert_eq!(ov.kappa_b, 7.0);
    }

    #[test]
    fn shifted_problem() {
        let ds = synth_dataset(20, 3, LossKind::Squared, 5, 1.0).unwrap();
        let p = build_problem(&ds, 2, &[0.1, 0.3], LossKind::Squared, &Default::default()).unwrap();
        let q = p.shifted(0.5).unwrap();
        assert_eq!(q.sigma, vec![0.6, 0.8]);
        for i in 0..2 {
            assert_relative_eq!(q.d_m[i], p.d_m[i] + 0.5, max_relative = 1e-14);
        }
        assert!(q.kappa_s < p.kappa_s);
        assert!(p.shifted(-1.0).is_err());
    }

    #[test]
    fn rejects_bad_sigma() {
        let ds = synth_dataset(4, 2, LossKind::Squared, 1, 1.0).unwrap();
        assert!(build_problem(&ds, 2, &[0.0], LossKind::Squared, &Default::default()).is_err());
        assert!(build_problem(&ds, 2, &[1.0, 1.0, 1.0], LossKind::Squared, &Default::default()).is_err());
        assert!(build_problem(&ds, 5, &[1.0], LossKind::Squared, &Default::default()).is_err());
    }

    #[test]
    fn objective_gradient_consistency() {
        let ds = synth_dataset(12, 3, LossKind::Logistic, 6, 1.0).unwrap();
        let p = build_problem(&ds, 2, &[0.05], LossKind::Logistic, &Default::default()).unwrap();
        let theta = [0.3, -0.2, 0.7];
        let g = p.gradient(&theta);
        let h = 1e-6;
        for k in 0..3 {
            let mut a = theta;
            let mut b = theta;
            a[k] += h;
            b[k] -= h;
            let fd = (p.objective(&a) - p.objective(&b)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-7);
        }
        let sum: Vec<f64> = (0..2)
            .map(|i| p.full_gradient(i, &theta).unwrap())
            .fold(vec![0.0; 3], |mut acc, gi| {
                linalg::axpy(1.0, &gi, &mut acc);
                acc
            });
        for k in 0..3 {
            assert!((sum[k] - g[k]).abs() < 1e-14);
        }
    }
}
