//! Experiment configuration (TOML).
//!
//! ```toml
//! algorithms = ["dvr", "dvr_catalyst", "extra", "gt_saga"]
//! seeds = [1, 2, 3]
//! sigma = 1e-3                # or one value per node
//! tau = 50.0
//! chebyshev = false
//! beta_rule = "finite_sum"    # "batch", "finite_sum" or a number
//! kappa_b = "estimate"        # "bound", "estimate" or a number
//! cadence = 100               # optional row cadence
//!
//! [graph]
//! kind = "grid"               # ring | path | grid | complete | erdos_renyi
//! n = 9
//!
//! [dataset]
//! kind = "synthetic"          # or "libsvm" with `path`
//! m = 50
//! d = 20
//! loss = "logistic"
//! seed = 42
//!
//! [budget]
//! target_subopt = 1e-6
//! max_sim_time = 1e7
//!
//! [output]
//! dir = "out"
//! ```
//!
//! Validation collects every problem (unknown keys, wrong value types,
//! out-of-range values) before reporting.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::catalyst::BetaRule;
use crate::harness::trace::Budget;
use crate::problem::{KappaB, LossKind};
use crate::topology::GraphSpec;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmName {
    Dvr,
    DvrCatalyst,
    Extra,
    ExtraCatalyst,
    GtSaga,
}

impl AlgorithmName {
    pub const ALL: [AlgorithmName; 5] = [
        AlgorithmName::Dvr,
        AlgorithmName::DvrCatalyst,
        AlgorithmName::Extra,
        AlgorithmName::ExtraCatalyst,
        AlgorithmName::GtSaga,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AlgorithmName::Dvr => "dvr",
            AlgorithmName::DvrCatalyst => "dvr_catalyst",
            AlgorithmName::Extra => "extra",
            AlgorithmName::ExtraCatalyst => "extra_catalyst",
            AlgorithmName::GtSaga => "gt_saga",
        }
    }
}

impl fmt::Display for AlgorithmName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetSpec {
    Synthetic {
        /// Samples per node.
        m: usize,
        d: usize,
        loss: LossKind,
        #[serde(default)]
        seed: u64,
        #[serde(default = "one")]
        scale: f64,
    },
    Libsvm {
        path: PathBuf,
        loss: LossKind,
        #[serde(default)]
        shuffle_seed: Option<u64>,
    },
}

impl DatasetSpec {
    pub fn loss(&self) -> LossKind {
        match self {
            DatasetSpec::Synthetic { loss, .. } | DatasetSpec::Libsvm { loss, .. } => *loss,
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sigma {
    Uniform(f64),
    PerNode(Vec<f64>),
}

impl Sigma {
    pub fn values(&self) -> Vec<f64> {
        match self {
            Sigma::Uniform(s) => vec![*s],
            Sigma::PerNode(v) => v.clone(),
        }
    }
}

/// `"batch"`, `"finite_sum"` or a fixed β.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaSetting {
    Manual(f64),
    Named(NamedBeta),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedBeta {
    Batch,
    FiniteSum,
}

impl BetaSetting {
    pub fn rule(self) -> BetaRule {
        match self {
            BetaSetting::Manual(b) => BetaRule::Manual(b),
            BetaSetting::Named(NamedBeta::Batch) => BetaRule::Batch,
            BetaSetting::Named(NamedBeta::FiniteSum) => BetaRule::FiniteSum,
        }
    }
}

/// `"bound"`, `"estimate"` or a fixed κ_b.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KappaBSetting {
    Value(f64),
    Named(NamedKappaB),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedKappaB {
    Bound,
    Estimate,
}

impl KappaBSetting {
    pub fn mode(self) -> KappaB {
        match self {
            KappaBSetting::Value(v) => KappaB::Override(v),
            KappaBSetting::Named(NamedKappaB::Bound) => KappaB::Bound,
            KappaBSetting::Named(NamedKappaB::Estimate) => KappaB::Estimate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OutputSpec {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub graph: GraphSpec,
    /// Seed for random graphs.
    #[serde(default)]
    pub graph_seed: u64,
    pub dataset: DatasetSpec,
    pub sigma: Sigma,
    #[serde(default)]
    pub tau: f64,
    pub algorithms: Vec<AlgorithmName>,
    pub seeds: Vec<u64>,
    pub budget: Budget,
    #[serde(default = "default_beta")]
    pub beta_rule: BetaSetting,
    #[serde(default = "default_kappa_b")]
    pub kappa_b: KappaBSetting,
    #[serde(default)]
    pub chebyshev: bool,
    #[serde(default)]
    pub chebyshev_degree: Option<usize>,
    #[serde(default)]
    pub cadence: Option<u64>,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_beta() -> BetaSetting {
    BetaSetting::Named(NamedBeta::FiniteSum)
}

fn default_kappa_b() -> KappaBSetting {
    KappaBSetting::Named(NamedKappaB::Bound)
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Int,
    Num,
    Str,
    Bool,
    Table,
    IntArray,
    StrArray,
    /// Number or array of numbers.
    NumOrArray,
    /// Number or string.
    NumOrStr,
    EdgeArray,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Int => "an integer",
            Kind::Num => "a number",
            Kind::Str => "a string",
            Kind::Bool => "a boolean",
            Kind::Table => "a table",
            Kind::IntArray => "an array of integers",
            Kind::StrArray => "an array of strings",
            Kind::NumOrArray => "a number or an array of numbers",
            Kind::NumOrStr => "a number or a string",
            Kind::EdgeArray => "an array of [u, v] pairs",
        }
    }

    fn accepts(self, v: &Value) -> bool {
        let num = |v: &Value| v.is_integer() || v.is_float();
        match self {
            Kind::Int => v.as_integer().is_some_and(|i| i >= 0),
            Kind::Num => num(v),
            Kind::Str => v.is_str(),
            Kind::Bool => v.is_bool(),
            Kind::Table => v.is_table(),
            Kind::IntArray => v.as_array().is_some_and(|a| a.iter().all(|x| x.as_integer().is_some_and(|i| i >= 0))),
            Kind::StrArray => v.as_array().is_some_and(|a| a.iter().all(Value::is_str)),
            Kind::NumOrArray => num(v) || v.as_array().is_some_and(|a| a.iter().all(num)),
            Kind::NumOrStr => num(v) || v.is_str(),
            Kind::EdgeArray => v.as_array().is_some_and(|a| {
                a.iter().all(|e| {
                    e.as_array()
                        .is_some_and(|p| p.len() == 2 && p.iter().all(|x| x.as_integer().is_some_and(|i| i >= 0)))
                })
            }),
        }
    }
}

const TOP: &[(&str, Kind, bool)] = &[
    ("graph", Kind::Table, true),
    ("graph_seed", Kind::Int, false),
    ("dataset", Kind::Table, true),
    ("sigma", Kind::NumOrArray, true),
    ("tau", Kind::Num, false),
    ("algorithms", Kind::StrArray, true),
    ("seeds", Kind::IntArray, true),
    ("budget", Kind::Table, true),
    ("beta_rule", Kind::NumOrStr, false),
    ("kappa_b", Kind::NumOrStr, false),
    ("chebyshev", Kind::Bool, false),
    ("chebyshev_degree", Kind::Int, false),
    ("cadence", Kind::Int, false),
    ("output", Kind::Table, false),
];

const GRAPH: &[(&str, Kind, bool)] =
    &[("kind", Kind::Str, true), ("n", Kind::Int, true), ("p", Kind::Num, false), ("edges", Kind::EdgeArray, false)];

const DATASET: &[(&str, Kind, bool)] = &[
    ("kind", Kind::Str, true),
    ("m", Kind::Int, false),
    ("d", Kind::Int, false),
    ("loss", Kind::Str, true),
    ("seed", Kind::Int, false),
    ("scale", Kind::Num, false),
    ("path", Kind::Str, false),
    ("shuffle_seed", Kind::Int, false),
];

const BUDGET: &[(&str, Kind, bool)] =
    &[("max_iterations", Kind::Int, false), ("max_sim_time", Kind::Num, false), ("target_subopt", Kind::Num, false)];

const OUTPUT: &[(&str, Kind, bool)] = &[("dir", Kind::Str, false)];

fn check_table(prefix: &str, table: &toml::Table, schema: &[(&str, Kind, bool)], problems: &mut Vec<String>) {
    for (key, value) in table {
        let path = format!("{prefix}{key}");
        match schema.iter().find(|(k, _, _)| k == key) {
            None => problems.push(format!("{path}: unknown key")),
            Some((_, kind, _)) if !kind.accepts(value) => {
                problems.push(format!("{path}: expected {}, found {}", kind.name(), value.type_str()))
            }
            _ => {}
        }
    }
    for (key, _, required) in schema {
        if *required && !table.contains_key(*key) {
            problems.push(format!("{prefix}{key}: missing required key"));
        }
    }
}

fn check_schema(root: &toml::Table) -> Vec<String> {
    let mut problems = Vec::new();
    check_table("", root, TOP, &mut problems);
    for (key, schema) in [("graph", GRAPH), ("dataset", DATASET), ("budget", BUDGET), ("output", OUTPUT)] {
        if let Some(t) = root.get(key).and_then(Value::as_table) {
            check_table(&format!("{key}."), t, schema, &mut problems);
        }
    }
    problems
}

fn one_of(problems: &mut Vec<String>, path: &str, value: Option<&Value>, allowed: &[&str]) {
    if let Some(s) = value.and_then(Value::as_str) {
        if !allowed.contains(&s) {
            problems.push(format!("{path}: '{s}' is not one of {}", allowed.join(", ")));
        }
    }
}

/// Enumerated string values, checked before deserialization so that all
/// of them are reported together.
fn check_enums(root: &toml::Table) -> Vec<String> {
    let mut problems = Vec::new();
    let names: Vec<&str> = AlgorithmName::ALL.iter().map(|a| a.as_str()).collect();
    if let Some(list) = root.get("algorithms").and_then(Value::as_array) {
        for (k, a) in list.iter().enumerate() {
            one_of(&mut problems, &format!("algorithms[{k}]"), Some(a), &names);
        }
    }
    let graph = root.get("graph").and_then(Value::as_table);
    one_of(
        &mut problems,
        "graph.kind",
        graph.and_then(|g| g.get("kind")),
        &["ring", "path", "grid", "complete", "erdos_renyi", "custom"],
    );
    let ds = root.get("dataset").and_then(Value::as_table);
    one_of(&mut problems, "dataset.kind", ds.and_then(|g| g.get("kind")), &["synthetic", "libsvm"]);
    one_of(&mut problems, "dataset.loss", ds.and_then(|g| g.get("loss")), &["logistic", "squared"]);
    one_of(&mut problems, "beta_rule", root.get("beta_rule"), &["batch", "finite_sum"]);
    one_of(&mut problems, "kappa_b", root.get("kappa_b"), &["bound", "estimate"]);
    if let Some(ds) = ds {
        match ds.get("kind").and_then(Value::as_str) {
            Some("synthetic") => {
                for key in ["m", "d"] {
                    if !ds.contains_key(key) {
                        problems.push(format!("dataset.{key}: missing required key for a synthetic dataset"));
                    }
                }
            }
            Some("libsvm") if !ds.contains_key("path") => {
                problems.push("dataset.path: missing required key for a libsvm dataset".into())
            }
            _ => {}
        }
    }
    if let Some(g) = graph {
        match g.get("kind").and_then(Value::as_str) {
            Some("erdos_renyi") if !g.contains_key("p") => {
                problems.push("graph.p: missing required key for an erdos_renyi graph".into())
            }
            Some("custom") if !g.contains_key("edges") => {
                problems.push("graph.edges: missing required key for a custom graph".into())
            }
            _ => {}
        }
    }
    problems
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let root: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Validation(format!("config is not valid TOML: {e}")))?;
        let mut problems = check_schema(&root);
        problems.extend(check_enums(&root));
        if !problems.is_empty() {
            return Err(invalid(problems));
        }
        let cfg: ExperimentConfig = Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Semantic checks; every violation is listed.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.algorithms.is_empty() {
            problems.push("algorithms: list is empty".into());
        }
        if self.seeds.is_empty() {
            problems.push("seeds: list is empty".into());
        }
        let mut seen = std::collections::HashSet::new();
        for a in &self.algorithms {
            if !seen.insert(*a) {
                problems.push(format!("algorithms: '{a}' listed twice"));
            }
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            problems.push("seeds: duplicate seed".into());
        }
        let n = self.graph.n();
        if n == 0 {
            problems.push("graph.n: must be >= 1".into());
        }
        if let GraphSpec::ErdosRenyi { p, .. } = self.graph {
            if !(p > 0.0 && p <= 1.0) {
                problems.push(format!("graph.p: must be in (0, 1], got {p}"));
            }
        }
        let sig = self.sigma.values();
        if sig.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            problems.push("sigma: every value must be > 0".into());
        }
        if sig.len() != 1 && sig.len() != n {
            problems.push(format!("sigma: expected 1 or {n} values, got {}", sig.len()));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            problems.push(format!("tau: must be >= 0, got {}", self.tau));
        }
        match &self.dataset {
            DatasetSpec::Synthetic { m, d, scale, .. } => {
                if *m == 0 {
                    problems.push("dataset.m: must be >= 1".into());
                }
                if *d == 0 {
                    problems.push("dataset.d: must be >= 1".into());
                }
                if !(*scale > 0.0 && scale.is_finite()) {
                    problems.push(format!("dataset.scale: must be > 0, got {scale}"));
                }
            }
            DatasetSpec::Libsvm { path, .. } => {
                if path.as_os_str().is_empty() {
                    problems.push("dataset.path: empty".into());
                }
            }
        }
        if let Err(Error::Validation(msg)) = self.budget.validate() {
            problems.push(format!("budget: {msg}"));
        }
        if let Some(t) = self.budget.target_subopt {
            if !(t > 0.0) {
                problems.push(format!("budget.target_subopt: must be > 0, got {t}"));
            }
        }
        if let BetaSetting::Manual(b) = self.beta_rule {
            if !(b >= 0.0 && b.is_finite()) {
                problems.push(format!("beta_rule: must be >= 0, got {b}"));
            }
        }
        if let KappaBSetting::Value(k) = self.kappa_b {
            if !(k >= 1.0 && k.is_finite()) {
                problems.push(format!("kappa_b: must be >= 1, got {k}"));
            }
        }
        if self.cadence == Some(0) {
            problems.push("cadence: must be >= 1".into());
        }
        if self.chebyshev_degree == Some(0) {
            problems.push("chebyshev_degree: must be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(invalid(problems))
        }
    }
}

fn invalid(problems: Vec<String>) -> Error {
    Error::Validation(format!("invalid config ({} problems): {}", problems.len(), problems.join("; ")))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const EXAMPLE: &str = r#"
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
max_iterations = 200
"#;

    #[test]
    fn parses_example() {
        let c = ExperimentConfig::from_toml_str(EXAMPLE).unwrap();
        assert_eq!(c.graph, GraphSpec::Ring { n: 4 });
        assert_eq!(c.algorithms, vec![AlgorithmName::Dvr, AlgorithmName::Extra]);
        assert_eq!(c.beta_rule.rule(), BetaRule::FiniteSum);
        assert_eq!(c.kappa_b.mode(), KappaB::Bound);
        assert!(!c.chebyshev);
    }

    #[test]
    fn round_trips_through_toml() {
        let c = ExperimentConfig::from_toml_str(EXAMPLE).unwrap();
        let again = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn numeric_and_named_settings() {
        let text = EXAMPLE.replace("tau = 10.0", "tau = 10.0\nbeta_rule = 0.5\nkappa_b = \"estimate\"");
        let c = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(c.beta_rule.rule(), BetaRule::Manual(0.5));
        assert_eq!(c.kappa_b.mode(), KappaB::Estimate);
        let text = EXAMPLE.replace("sigma = 1e-2", "sigma = [1e-2, 1e-2, 1e-3, 1e-3]");
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap().sigma.values().len(), 4);
    }

    #[test]
    fn every_offending_key_is_listed() {
        let text = EXAMPLE
            .replace("tau = 10.0", "tau = \"fast\"\nbogus = 1")
            .replace("d = 3", "d = 3\ncolour = \"red\"")
            .replace("\"extra\"]", "\"sgd\"]");
        let msg = ExperimentConfig::from_toml_str(&text).unwrap_err().to_string();
        for needle in ["tau", "bogus", "dataset.colour", "algorithms[1]"] {
            assert!(msg.contains(needle), "{needle} missing from: {msg}");
        }
    }

    #[test]
    fn semantic_problems_are_all_listed() {
        let text = EXAMPLE
            .replace("[\"dvr\", \"extra\"]", "[]")
            .replace("sigma = 1e-2", "sigma = -1.0")
            .replace("max_iterations = 200", "");
        let e = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(e.is_validation());
        let msg = e.to_string();
        for needle in ["algorithms", "sigma", "budget"] {
            assert!(msg.contains(needle), "{needle} missing from: {msg}");
        }
    }

    #[test]
    fn missing_sections_reported() {
        let msg = ExperimentConfig::from_toml_str("seeds = [1]").unwrap_err().to_string();
        for needle in ["graph", "dataset", "sigma", "algorithms", "budget"] {
            assert!(msg.contains(needle), "{needle} missing from: {msg}");
        }
    }

    #[test]
    fn variant_specific_keys() {
        let text = EXAMPLE.replace("kind = \"ring\"", "kind = \"erdos_renyi\"");
        assert!(ExperimentConfig::from_toml_str(&text).unwrap_err().to_string().contains("graph.p"));
        let text = EXAMPLE.replace("kind = \"synthetic\"", "kind = \"libsvm\"");
        assert!(ExperimentConfig::from_toml_str(&text).unwrap_err().to_string().contains("dataset.path"));
    }
}
