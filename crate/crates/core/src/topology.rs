//! Communication graphs, Laplacian gossip matrices and Chebyshev gossip.
//!
//! Every communication edge carries the same weight, so the plain gossip
//! matrix is exactly the graph Laplacian `W = D - Adj`. Spectral quantities
//! come from a dense symmetric eigendecomposition; the smallest positive
//! eigenvalue is the smallest one above `1e-9 * lambda_max`.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::{Error, Result};

/// Relative threshold separating the kernel eigenvalue from the rest.
pub const SPECTRAL_ZERO_TOL: f64 = 1e-9;

/// Resampling budget for Erdős–Rényi graphs that come out disconnected.
pub const ER_MAX_ATTEMPTS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GraphKind {
    ErdosRenyi { p: f64 },
    Grid,
    Ring,
    Path,
    Complete,
    Custom,
}

/// What to build: kind plus node count and kind-specific parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GraphSpec {
    ErdosRenyi { n: usize, p: f64 },
    Grid { n: usize },
    Ring { n: usize },
    Path { n: usize },
    Complete { n: usize },
    Custom { n: usize, edges: Vec<(usize, usize)> },
}

impl GraphSpec {
    pub fn n(&self) -> usize {
        match self {
            GraphSpec::ErdosRenyi { n, .. }
            | GraphSpec::Grid { n }
            | GraphSpec::Ring { n }
            | GraphSpec::Path { n }
            | GraphSpec::Complete { n }
            | GraphSpec::Custom { n, .. } => *n,
        }
    }
}

/// Parses `ring:20`, `path:3`, `grid:9`, `complete:5` and `er:20:0.3`.
impl FromStr for GraphSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = || Error::Validation(format!("invalid graph spec '{s}'"));
        let n: usize = parts.get(1).ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let spec = match (parts[0], parts.len()) {
            ("ring", 2) => GraphSpec::Ring { n },
            ("path", 2) => GraphSpec::Path { n },
            ("grid", 2) => GraphSpec::Grid { n },
            ("complete", 2) => GraphSpec::Complete { n },
            ("er" | "erdos_renyi", 3) => GraphSpec::ErdosRenyi {
                n,
                p: parts[2].parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        Ok(spec)
    }
}

/// Undirected simple connected graph. Edges are stored as `(k, l)` with
/// `k < l`, sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    kind: GraphKind,
}

impl Graph {
    /// Validates and normalizes an edge set. Rejects self-loops, duplicate
    /// edges (in either orientation), out-of-range endpoints and
    /// disconnected graphs.
    pub fn from_edges(n: usize, edges: &[(usize, usize)], kind: GraphKind) -> Result<Graph> {
        if n == 0 {
            return Err(Error::Validation("graph needs at least one node".into()));
        }
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Validation(format!(
                    "edge ({a},{b}) out of range for n={n}"
                )));
            }
            if a == b {
                return Err(Error::Validation(format!("self-loop at node {a}")));
            }
            let e = (a.min(b), a.max(b));
            if !set.insert(e) {
                return Err(Error::Validation(format!("duplicate edge ({a},{b})")));
            }
        }
        let g = Graph {
            n,
            edges: set.into_iter().collect(),
            kind,
        };
        if !g.is_connected() {
            return Err(Error::Construction(format!(
                "graph with {n} nodes and {} edges is disconnected",
                g.edges.len()
            )));
        }
        Ok(g)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    pub fn is_connected(&self) -> bool {
        connected(self.n, &self.edges)
    }

    /// Edge-list text: header `n <count>`, then one `k l` pair per line.
    pub fn to_edge_list(&self) -> String {
        let mut s = format!("n {}\n", self.n);
        for (a, b) in &self.edges {
            s.push_str(&format!("{a} {b}\n"));
        }
        s
    }

    pub fn from_edge_list(text: &str) -> Result<Graph> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Parse { line: 1, msg: "empty edge list".into() })?;
        let mut h = header.split_whitespace();
        let n = match (h.next(), h.next(), h.next()) {
            (Some("n"), Some(v), None) => v.parse::<usize>().map_err(|_| Error::Parse {
                line: 1,
                msg: format!("bad node count '{v}'"),
            })?,
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: "expected header 'n <count>'".into(),
                })
            }
        };
        let mut edges = Vec::new();
        for (idx, line) in lines {
            let nums: Vec<&str> = line.split_whitespace().collect();
            let parse = |t: &str| {
                t.parse::<usize>().map_err(|_| Error::Parse {
                    line: idx + 1,
                    msg: format!("bad node index '{t}'"),
                })
            };
            if nums.len() != 2 {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: "expected 'k l'".into(),
                });
            }
            edges.push((parse(nums[0])?, parse(nums[1])?));
        }
        Graph::from_edges(n, &edges, GraphKind::Custom)
    }

    pub fn read_edge_list(path: &Path) -> Result<Graph> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Graph::from_edge_list(&text)
    }
}

fn connected(n: usize, edges: &[(usize, usize)]) -> bool {
    if n <= 1 {
        return true;
    }
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                count += 1;
                queue.push_back(w);
            }
        }
    }
    count == n
}

/// Erdős–Rényi edge draw used by [`build_graph`]: a `ChaCha8Rng` seeded with
/// `seed`, then for every pair `k < l` in lexicographic order the edge is
/// kept when `rng.random::<f64>() < p`.
pub fn erdos_renyi_edges(n: usize, p: f64, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for k in 0..n {
        for l in (k + 1)..n {
            if rng.random::<f64>() < p {
                edges.push((k, l));
            }
        }
    }
    edges
}

/// Builds a connected graph. Erdős–Rényi graphs are redrawn with seeds
/// `seed, seed+1, ...` until connected, at most [`ER_MAX_ATTEMPTS`] times.
pub fn build_graph(spec: &GraphSpec, seed: u64) -> Result<Graph> {
    let n = spec.n();
    if n == 0 {
        return Err(Error::Validation("graph needs at least one node".into()));
    }
    match spec {
        GraphSpec::ErdosRenyi { p, .. } => {
            if !(*p > 0.0 && *p <= 1.0) {
                return Err(Error::Validation(format!(
                    "edge probability must be in (0,1], got {p}"
                )));
            }
            for attempt in 0..ER_MAX_ATTEMPTS {
                let edges = erdos_renyi_edges(n, *p, seed.wrapping_add(attempt));
                if connected(n, &edges) {
                    return Graph::from_edges(n, &edges, GraphKind::ErdosRenyi { p: *p });
                }
            }
            Err(Error::Construction(format!(
                "Erdős–Rényi graph (n={n}, p={p}) still disconnected after {ER_MAX_ATTEMPTS} draws"
            )))
        }
        GraphSpec::Grid { .. } => {
            let s = (n as f64).sqrt().round() as usize;
            if s * s != n {
                return Err(Error::Validation(format!(
                    "grid needs a perfect square node count, got {n}"
                )));
            }
            let mut edges = Vec::with_capacity(2 * s * s.saturating_sub(1));
            for r in 0..s {
                for c in 0..s {
                    let v = r * s + c;
                    if c + 1 < s {
                        edges.push((v, v + 1));
                    }
                    if r + 1 < s {
                        edges.push((v, v + s));
                    }
                }
            }
            Graph::from_edges(n, &edges, GraphKind::Grid)
        }
        GraphSpec::Ring { .. } => {
            let edges: Vec<_> = match n {
                1 => vec![],
                2 => vec![(0, 1)],
                _ => (0..n).map(|k| (k, (k + 1) % n)).collect(),
            };
            Graph::from_edges(n, &edges, GraphKind::Ring)
        }
        GraphSpec::Path { .. } => {
            let edges: Vec<_> = (0..n.saturating_sub(1)).map(|k| (k, k + 1)).collect();
            Graph::from_edges(n, &edges, GraphKind::Path)
        }
        GraphSpec::Complete { .. } => {
            let edges: Vec<_> = (0..n)
                .flat_map(|k| ((k + 1)..n).map(move |l| (k, l)))
                .collect();
            Graph::from_edges(n, &edges, GraphKind::Complete)
        }
        GraphSpec::Custom { edges, .. } => Graph::from_edges(n, edges, GraphKind::Custom),
    }
}

#[derive(Debug, Clone)]
struct Laplacian {
    dense: DMatrix<f64>,
    adj: Vec<Vec<usize>>,
}

impl Laplacian {
    /// `(W x)_i = sum_{j in N(i)} (x_i - x_j)`, row-major `n x d` blocks.
    /// Consensus input gives exactly zero.
    fn apply(&self, x: &[f64], d: usize, out: &mut [f64]) {
        for (i, nbrs) in self.adj.iter().enumerate() {
            let out_i = &mut out[i * d..(i + 1) * d];
            out_i.iter_mut().for_each(|v| *v = 0.0);
            let xi = &x[i * d..(i + 1) * d];
            for &j in nbrs {
                let xj = &x[j * d..(j + 1) * d];
                for k in 0..d {
                    out_i[k] += xi[k] - xj[k];
                }
            }
        }
    }
}

/// Affine-mapped Chebyshev polynomial of the base Laplacian:
/// `P(x) = (1 - T_K(c2 (1 - c3 x)) / T_K(c2)) / (1 + 1 / T_K(c2))`
/// with `c2 = (1+g)/(1-g)`, `c3 = 2 / ((1+g) lambda_max)`. The interval
/// `[lambda_min+, lambda_max]` maps onto `[-1, 1]` inside `T_K`, so the
/// nonzero spectrum of `P(W)` lies in `[(T-1)/(T+1), 1]`. When the base gap
/// is already 1 the operator is `W / lambda_max`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ChebyshevCoeffs {
    pub degree: usize,
    pub c2: f64,
    pub c3: f64,
    pub t_c2: f64,
    pub degenerate: bool,
    pub base_lambda_max: f64,
}

impl ChebyshevCoeffs {
    pub fn eval(&self, x: f64) -> f64 {
        if self.degenerate {
            return x / self.base_lambda_max;
        }
        let y = self.c2 * (1.0 - self.c3 * x);
        (1.0 - chebyshev_t(self.degree, y) / self.t_c2) / (1.0 + 1.0 / self.t_c2)
    }
}

/// Chebyshev polynomial of the first kind by the three-term recurrence.
pub fn chebyshev_t(k: usize, y: f64) -> f64 {
    match k {
        0 => 1.0,
        1 => y,
        _ => {
            let (mut prev, mut cur) = (1.0, y);
            for _ in 1..k {
                let next = 2.0 * y * cur - prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

#[derive(Debug, Clone)]
enum Operator {
    Plain(Laplacian),
    Chebyshev { base: Laplacian, coeffs: ChebyshevCoeffs },
}

/// Symmetric PSD gossip operator with kernel `Span(1)` and its spectrum.
#[derive(Debug, Clone)]
pub struct GossipMatrix {
    n: usize,
    op: Operator,
    eigenvalues: Vec<f64>,
    pub gamma: f64,
    pub lambda_max: f64,
    pub lambda_min_plus: f64,
    pub effective_degree: usize,
}

/// Summary printed by the `spectrum` command and stored in run metadata.
#[derive(Debug, Clone, Serialize)]
pub struct SpectrumReport {
    pub n: usize,
    pub edges: usize,
    pub gamma: f64,
    pub lambda_max: f64,
    pub lambda_min_plus: f64,
    pub chebyshev_degree: usize,
    pub chebyshev_gamma: f64,
}

fn spectral_fields(eigs: &[f64]) -> (f64, f64, f64) {
    let lambda_max = eigs.last().copied().unwrap_or(0.0);
    match linalg::min_positive(eigs, SPECTRAL_ZERO_TOL) {
        Some(lmin) => (lmin / lambda_max, lambda_max, lmin),
        // single node: no communication, gap conventionally 1
        None => (1.0, 0.0, 0.0),
    }
}

/// Graph Laplacian with its full spectrum.
pub fn laplacian(graph: &Graph) -> GossipMatrix {
    let n = graph.n();
    let adj = graph.adjacency_lists();
    let mut dense = DMatrix::zeros(n, n);
    for &(a, b) in graph.edges() {
        dense[(a, b)] = -1.0;
        dense[(b, a)] = -1.0;
    }
    for (i, nbrs) in adj.iter().enumerate() {
        dense[(i, i)] = nbrs.len() as f64;
    }
    let eigenvalues = linalg::sym_eigenvalues(&dense);
    let (gamma, lambda_max, lambda_min_plus) = spectral_fields(&eigenvalues);
    GossipMatrix {
        n,
        op: Operator::Plain(Laplacian { dense, adj }),
        eigenvalues,
        gamma,
        lambda_max,
        lambda_min_plus,
        effective_degree: 1,
    }
}

/// Default Chebyshev degree `ceil(gamma^{-1/2})`.
pub fn default_chebyshev_degree(gamma: f64) -> usize {
    (1.0 / gamma.sqrt() - 1e-12).ceil().max(1.0) as usize
}

/// Chebyshev-accelerated gossip operator `P(W)` of the given (or default)
/// degree. Applying it costs `degree` products with `W`.
pub fn chebyshev(gossip: &GossipMatrix, degree: Option<usize>) -> Result<GossipMatrix> {
    let base = match &gossip.op {
        Operator::Plain(l) => l.clone(),
        Operator::Chebyshev { .. } => {
            return Err(Error::Validation(
                "chebyshev expects a plain (degree-1) gossip matrix".into(),
            ))
        }
    };
    let degree = degree.unwrap_or_else(|| default_chebyshev_degree(gossip.gamma));
    if degree < 1 {
        return Err(Error::Validation("Chebyshev degree must be >= 1".into()));
    }
    let g = gossip.gamma;
    let degenerate = gossip.n <= 1 || 1.0 - g < 1e-12;
    let coeffs = if degenerate {
        ChebyshevCoeffs {
            degree,
            c2: f64::INFINITY,
            c3: 0.0,
            t_c2: f64::INFINITY,
            degenerate: true,
            base_lambda_max: gossip.lambda_max.max(f64::MIN_POSITIVE),
        }
    } else {
        let c2 = (1.0 + g) / (1.0 - g);
        ChebyshevCoeffs {
            degree,
            c2,
            c3: 2.0 / ((1.0 + g) * gossip.lambda_max),
            t_c2: chebyshev_t(degree, c2),
            degenerate: false,
            base_lambda_max: gossip.lambda_max,
        }
    };
    let mut eigenvalues: Vec<f64> = gossip.eigenvalues.iter().map(|&l| coeffs.eval(l)).collect();
    eigenvalues.sort_by(|a, b| a.total_cmp(b));
    let (gamma, lambda_max, lambda_min_plus) = spectral_fields(&eigenvalues);
    Ok(GossipMatrix {
        n: gossip.n,
        op: Operator::Chebyshev { base, coeffs },
        eigenvalues,
        gamma,
        lambda_max,
        lambda_min_plus,
        effective_degree: degree,
    })
}

impl GossipMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Ascending eigenvalues.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn is_chebyshev(&self) -> bool {
        matches!(self.op, Operator::Chebyshev { .. })
    }

    pub fn chebyshev_coeffs(&self) -> Option<ChebyshevCoeffs> {
        match &self.op {
            Operator::Chebyshev { coeffs, .. } => Some(*coeffs),
            Operator::Plain(_) => None,
        }
    }

    /// `out = W x` for a row-major `n x d` block `x`.
    pub fn apply(&self, x: &[f64], d: usize, out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n * d);
        debug_assert_eq!(out.len(), self.n * d);
        match &self.op {
            Operator::Plain(l) => l.apply(x, d, out),
            Operator::Chebyshev { base, coeffs } => {
                let mut wv = vec![0.0; x.len()];
                if coeffs.degenerate {
                    base.apply(x, d, &mut wv);
                    for (o, w) in out.iter_mut().zip(&wv) {
                        *o = w / coeffs.base_lambda_max;
                    }
                    return;
                }
                // T_k(Y) x with Y = c2 (I - c3 W)
                let apply_y = |v: &[f64], wv: &mut Vec<f64>, dst: &mut Vec<f64>| {
                    base.apply(v, d, wv);
                    for ((o, vi), wi) in dst.iter_mut().zip(v).zip(wv.iter()) {
                        *o = coeffs.c2 * (vi - coeffs.c3 * wi);
                    }
                };
                let mut prev = x.to_vec();
                let mut cur = vec![0.0; x.len()];
                apply_y(x, &mut wv, &mut cur);
                let mut next = vec![0.0; x.len()];
                for _ in 1..coeffs.degree {
                    apply_y(&cur, &mut wv, &mut next);
                    for (nx, pv) in next.iter_mut().zip(&prev) {
                        *nx = 2.0 * *nx - pv;
                    }
                    std::mem::swap(&mut prev, &mut cur);
                    std::mem::swap(&mut cur, &mut next);
                }
                let scale = 1.0 + 1.0 / coeffs.t_c2;
                for ((o, xi), ti) in out.iter_mut().zip(x).zip(&cur) {
                    *o = (xi - ti / coeffs.t_c2) / scale;
                }
            }
        }
    }

    /// Dense matrix of the operator (the Laplacian itself for plain gossip,
    /// `P(W)` assembled column by column otherwise). Symmetrized from one
    /// triangle so the result is bitwise symmetric.
    pub fn dense(&self) -> DMatrix<f64> {
        match &self.op {
            Operator::Plain(l) => l.dense.clone(),
            Operator::Chebyshev { .. } => {
                let n = self.n;
                let mut m = DMatrix::zeros(n, n);
                let mut e = vec![0.0; n];
                let mut col = vec![0.0; n];
                for j in 0..n {
                    e.iter_mut().for_each(|v| *v = 0.0);
                    e[j] = 1.0;
                    self.apply(&e, 1, &mut col);
                    for i in 0..=j {
                        m[(i, j)] = col[i];
                        m[(j, i)] = col[i];
                    }
                }
                m
            }
        }
    }

    pub fn spectrum_report(&self, graph: &Graph) -> SpectrumReport {
        let degree = default_chebyshev_degree(self.gamma);
        let cheb_gamma = chebyshev(self, Some(degree)).map(|c| c.gamma).unwrap_or(self.gamma);
        SpectrumReport {
            n: self.n,
            edges: graph.edges().len(),
            gamma: self.gamma,
            lambda_max: self.lambda_max,
            lambda_min_plus: self.lambda_min_plus,
            chebyshev_degree: degree,
            chebyshev_gamma: cheb_gamma,
        }
    }
}

impl fmt::Display for SpectrumReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n                 {}", self.n)?;
        writeln!(f, "edges             {}", self.edges)?;
        writeln!(f, "gamma             {:.12}", self.gamma)?;
        writeln!(f, "lambda_max        {:.12}", self.lambda_max)?;
        writeln!(f, "lambda_min_plus   {:.12}", self.lambda_min_plus)?;
        writeln!(f, "chebyshev_degree  {}", self.chebyshev_degree)?;
        write!(f, "chebyshev_gamma   {:.12}", self.chebyshev_gamma)
    }
}
