//! Benchmark data-generating processes and the Monte Carlo harness.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::estimator::{complete_case_estimate, estimate, EstimateOptions, EstimationResult, MomentSpec, PropensityFit, Term};
use crate::graph::{MDag, NodeRef};
use crate::ident::identify;
use crate::numerics::{expit, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BenchGraph {
    G1,
    G2,
    G3,
    G4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    Mean,
    Regression,
    Causal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DgpId {
    pub graph: BenchGraph,
    pub task: Task,
}

impl DgpId {
    pub fn new(graph: BenchGraph, task: Task) -> Self {
        DgpId { graph, task }
    }
}

impl fmt::Display for BenchGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Mean => "mean",
            Task::Regression => "regression",
            Task::Causal => "causal",
        })
    }
}

impl FromStr for BenchGraph {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "G1" => Ok(BenchGraph::G1),
            "G2" => Ok(BenchGraph::G2),
            "G3" => Ok(BenchGraph::G3),
            "G4" => Ok(BenchGraph::G4),
            _ => Err(format!("unknown graph '{s}', expected G1..G4")),
        }
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "mean" | "1" => Ok(Task::Mean),
            "regression" | "reg" | "2" => Ok(Task::Regression),
            "causal" | "3" => Ok(Task::Causal),
            _ => Err(format!("unknown task '{s}', expected mean, regression or causal")),
        }
    }
}

/// Logistic missingness model `expit(intercept + Σ x·X + Σ r·R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logit {
    pub intercept: f64,
    pub x: Vec<(usize, f64)>,
    pub r: Vec<(usize, f64)>,
}

impl Logit {
    fn new(intercept: f64, x: &[(usize, f64)], r: &[(usize, f64)]) -> Self {
        Logit { intercept, x: x.to_vec(), r: r.to_vec() }
    }

    fn prob(&self, xs: &[f64], rs: &[bool]) -> f64 {
        let mut lin = self.intercept;
        for &(j, c) in &self.x {
            lin += c * xs[j - 1];
        }
        for &(j, c) in &self.r {
            if rs[j - 1] {
                lin += c;
            }
        }
        expit(lin)
    }
}

pub fn var_count(g: BenchGraph) -> usize {
    match g {
        BenchGraph::G1 | BenchGraph::G2 => 3,
        BenchGraph::G3 => 5,
        BenchGraph::G4 => 10,
    }
}

/// Missingness model of `R_k`; `None` means `R_k ≡ 1`.
pub fn propensity_model(g: BenchGraph, k: usize) -> Option<Logit> {
    match (g, k) {
        (BenchGraph::G1, 2) => Some(Logit::new(2.0, &[(1, 1.0)], &[])),
        (BenchGraph::G1, 3) => Some(Logit::new(1.0, &[(1, 0.5)], &[])),
        (BenchGraph::G1, _) => None,
        (BenchGraph::G2, 1) => Some(Logit::new(1.0, &[], &[(2, 1.0), (3, 1.0)])),
        (BenchGraph::G2, 2) => Some(Logit::new(0.0, &[(1, -0.5), (3, 0.15)], &[])),
        (BenchGraph::G2, 3) => Some(Logit::new(3.0, &[(1, 0.5), (2, -1.0)], &[])),
        (BenchGraph::G3, 1) => Some(Logit::new(1.2, &[(4, 0.01)], &[(2, 1.5)])),
        (BenchGraph::G3, 2) => Some(Logit::new(-4.0, &[(5, 1.0)], &[(3, 1.0)])),
        (BenchGraph::G3, 3) => Some(Logit::new(-0.8, &[], &[(4, 2.0), (5, 1.8)])),
        (BenchGraph::G3, 4) => Some(Logit::new(0.3, &[(1, 1.5)], &[(5, 2.0)])),
        (BenchGraph::G3, 5) => Some(Logit::new(0.8, &[(2, 1.5)], &[])),
        (BenchGraph::G4, k) if (1..=10).contains(&k) => Some(g4_model(k)),
        _ => None,
    }
}

fn g4_model(k: usize) -> Logit {
    let (intercept, x): (f64, Vec<(usize, f64)>) = match k {
        1 => (-0.1, vec![]),
        2 => (0.1, vec![(1, 0.3)]),
        3 => (0.1, vec![(2, -0.3), (1, 0.3)]),
        4 => (10.0, vec![(3, -1.0), (2, 0.2)]),
        5 => (10.0, vec![(4, -1.0), (3, 0.2)]),
        6 => (2.0, vec![(5, -1.0), (4, 1.0)]),
        7 => (2.0, vec![(6, -1.0), (5, 1.0)]),
        8 => (2.0, vec![(7, -2.0), (6, 2.0)]),
        9 => (2.0, vec![(8, -2.0), (7, 2.0)]),
        _ => (2.0, vec![(9, -1.0), (8, 1.0)]),
    };
    // Signs alternate along j; R_1 starts positive, the others negative.
    let first = if k == 1 { 0.1 } else { -0.1 };
    let r = (k + 1..=10).map(|j| (j, if (j - k) % 2 == 1 { first } else { -first })).collect();
    Logit { intercept, x, r }
}

/// The mDAG whose edges are exactly the nonzero terms of the missingness models.
pub fn graph(g: BenchGraph) -> MDag {
    let k = var_count(g);
    let mut edges = Vec::new();
    for i in 1..=k {
        if let Some(m) = propensity_model(g, i) {
            edges.extend(m.x.iter().map(|&(j, _)| (NodeRef::Var(j), NodeRef::Ind(i))));
            edges.extend(m.r.iter().map(|&(j, _)| (NodeRef::Ind(j), NodeRef::Ind(i))));
        }
    }
    MDag::new(k, edges).expect("benchmark graphs are valid")
}

/// Target moment of each task.
pub fn moment(id: DgpId) -> MomentSpec {
    match (id.task, id.graph) {
        (Task::Mean, _) => MomentSpec::Mean(3),
        (Task::Regression, BenchGraph::G1) => MomentSpec::LinReg { outcome: 3, terms: vec![Term::var(1), Term::var(2)] },
        (Task::Regression, _) => MomentSpec::LinReg {
            outcome: 3,
            terms: vec![Term::product(&[1, 2]), Term::var(2), Term::product(&[2, 2])],
        },
        (Task::Causal, _) => MomentSpec::CounterfactualMean { treatment: 2, level: 1, outcome: 3, adjust: vec![1] },
    }
}

/// Parameter index summarized by the harness: the mean, the coefficient that
/// is zero under the regression null, or the counterfactual mean.
pub fn focus_index(id: DgpId) -> usize {
    match id.task {
        Task::Mean => 0,
        Task::Regression => 1,
        Task::Causal => moment(id).dim() - 1,
    }
}

fn normal<R: Rng>(rng: &mut R, mean: f64, sd: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    mean + sd * z
}

/// Draws one complete row of `X` into `x`. With `set_x2`, `X_2` is replaced
/// by that value before its descendants are drawn.
pub fn draw_x<R: Rng>(id: DgpId, rng: &mut R, x: &mut [f64], set_x2: Option<f64>) {
    match id.graph {
        BenchGraph::G1 => {
            x[0] = normal(rng, 0.0, 1.0);
            x[1] = match id.task {
                Task::Causal => bernoulli(rng, expit(1.0 - x[0])),
                _ => normal(rng, 1.0 - x[0], 1.0),
            };
            if let Some(v) = set_x2 {
                x[1] = v;
            }
            let mean = match id.task {
                Task::Regression => 1.0 - 2.0 * x[1],
                _ => 1.0 - 2.0 * x[1] + 3.0 * x[0],
            };
            x[2] = normal(rng, mean, 1.0);
        }
        _ => {
            x[0] = normal(rng, 1.0, 1.0);
            x[1] = match id.task {
                Task::Causal => bernoulli(rng, expit(3.0 - 0.6 * x[0].abs())),
                _ => normal(rng, 3.0 - 0.6 * x[0].abs(), 1.0),
            };
            if let Some(v) = set_x2 {
                x[1] = v;
            }
            let (x1, x2) = (x[0], x[1]);
            let mean = match id.task {
                Task::Regression => 2.0 - x2 * x2 + 4.0 * x2,
                _ => 2.0 - x2 * x2 + 4.0 * x2 + 2.0 * x1 * x2,
            };
            x[2] = normal(rng, mean, 1.5);
            match id.graph {
                BenchGraph::G3 => {
                    x[4] = normal(rng, 2.0, 1.0);
                    x[3] = normal(rng, 5.0 * x[4].powi(3) - 5.0 * x[2].abs() * x[4], 1.0);
                }
                BenchGraph::G4 => {
                    x[3] = normal(rng, 1.0 + x[2] - 0.5 * x[1], 1.0);
                    x[4] = normal(rng, 1.0 + 0.9 * x[3] - 0.4 * x[2], 1.0);
                    x[5] = normal(rng, 1.0 + 0.8 * x[4] - 0.3 * x[3], 1.0);
                    for j in 6..10 {
                        x[j] = normal(rng, 1.0 + 0.7 * x[j - 1] - 0.2 * x[j - 2], 1.0);
                    }
                }
                _ => {}
            }
        }
    }
}

fn bernoulli<R: Rng>(rng: &mut R, p: f64) -> f64 {
    if rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

/// Complete data with the masked dataset built from it.
#[derive(Debug, Clone)]
pub struct Sample {
    pub data: Dataset,
    /// Row-major `n × K` complete values.
    pub complete: Vec<f64>,
    pub observed: Vec<bool>,
}

pub fn sample_with<R: Rng>(id: DgpId, n: usize, rng: &mut R) -> Sample {
    let k = var_count(id.graph);
    let models: Vec<Option<Logit>> = (1..=k).map(|i| propensity_model(id.graph, i)).collect();
    let mut complete = vec![0.0; n * k];
    let mut observed = vec![true; n * k];
    for row in 0..n {
        let x = &mut complete[row * k..(row + 1) * k];
        draw_x(id, rng, x, None);
        let r = &mut observed[row * k..(row + 1) * k];
        // Indicator parents always carry larger indices.
        for i in (1..=k).rev() {
            if let Some(m) = &models[i - 1] {
                r[i - 1] = rng.random::<f64>() < m.prob(x, r);
            }
        }
    }
    let data = Dataset::from_masked(k, &complete, &observed);
    Sample { data, complete, observed }
}

/// Deterministic sample for a seed.
pub fn dgp_sample(id: DgpId, n: usize, seed: u64) -> Sample {
    sample_with(id, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Seed of replicate `r` under a base seed.
pub fn replicate_seed(seed: u64, r: u64) -> u64 {
    let mut z = seed ^ r.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// `E|X|` and `E[X|X|]` for `X ~ N(1, 1)`.
fn abs_moments() -> (f64, f64) {
    let n = std_normal();
    let phi1 = (-0.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let big = 2.0 * n.cdf(1.0) - 1.0;
    (2.0 * phi1 + big, 2.0 * big + 2.0 * phi1)
}

/// `E(X_3)` under the mean-task equations.
pub fn analytic_mean_x3(g: BenchGraph) -> f64 {
    match g {
        BenchGraph::G1 => -1.0,
        _ => {
            let (m1, m_x_abs) = abs_moments();
            let ex2 = 3.0 - 0.6 * m1;
            let ex2sq = 10.72 - 3.6 * m1;
            let ex1x2 = 3.0 - 0.6 * m_x_abs;
            2.0 - ex2sq + 4.0 * ex2 + 2.0 * ex1x2
        }
    }
}

/// `E(X_3^{X_2=x})` for binary `x` under the causal-task equations.
pub fn analytic_counterfactual_mean(g: BenchGraph, x: f64) -> f64 {
    match g {
        BenchGraph::G1 => 1.0 - 2.0 * x,
        _ => 2.0 - x * x + 4.0 * x + 2.0 * x,
    }
}

/// True parameter vector of the task moment. Causal-task values are brute
/// force means of `10⁷` potential outcomes and are cached per graph.
pub fn truth(id: DgpId) -> Vector {
    match id.task {
        Task::Mean => Vector::from_element(1, analytic_mean_x3(id.graph)),
        Task::Regression => match id.graph {
            BenchGraph::G1 => Vector::from_vec(vec![1.0, 0.0, -2.0]),
            _ => Vector::from_vec(vec![2.0, 0.0, 4.0, -1.0]),
        },
        Task::Causal => {
            let mut t = Vector::from_element(moment(id).dim(), f64::NAN);
            let last = t.len() - 1;
            t[last] = cached_counterfactual_truth(id.graph);
            t
        }
    }
}

/// Value of the harness's focus parameter.
pub fn focus_truth(id: DgpId) -> f64 {
    truth(id)[focus_index(id)]
}

pub const BRUTE_FORCE_DRAWS: usize = 10_000_000;
const BRUTE_FORCE_SEED: u64 = 0x5EED_CAFE;

fn cached_counterfactual_truth(g: BenchGraph) -> f64 {
    static CACHE: OnceLock<Mutex<BTreeMap<BenchGraph, f64>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(BTreeMap::new()));
    if let Some(v) = cache.lock().expect("truth cache").get(&g) {
        return *v;
    }
    let v = brute_force_counterfactual_mean(DgpId::new(g, Task::Causal), 1.0, BRUTE_FORCE_DRAWS, BRUTE_FORCE_SEED).0;
    cache.lock().expect("truth cache").insert(g, v);
    v
}

/// Mean and standard error of `X_3` over `draws` complete rows, optionally
/// with `X_2` set to `x2`.
pub fn brute_force_x3(id: DgpId, x2: Option<f64>, draws: usize, seed: u64) -> (f64, f64) {
    const CHUNK: usize = 100_000;
    let k = var_count(id.graph);
    let chunks = draws.div_ceil(CHUNK);
    let parts: Vec<(f64, f64, usize)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(replicate_seed(seed, c as u64));
            let m = CHUNK.min(draws - c * CHUNK);
            let mut x = vec![0.0; k];
            let (mut s, mut ss) = (0.0, 0.0);
            for _ in 0..m {
                draw_x(id, &mut rng, &mut x, x2);
                s += x[2];
                ss += x[2] * x[2];
            }
            (s, ss, m)
        })
        .collect();
    let (s, ss, m) = parts.iter().fold((0.0, 0.0, 0usize), |a, p| (a.0 + p.0, a.1 + p.1, a.2 + p.2));
    let mean = s / m as f64;
    let var = ss / m as f64 - mean * mean;
    (mean, (var / m as f64).sqrt())
}

pub fn brute_force_counterfactual_mean(id: DgpId, x2: f64, draws: usize, seed: u64) -> (f64, f64) {
    brute_force_x3(id, Some(x2), draws, seed)
}

/// True parameters of a planned propensity fit: the intercept absorbs the
/// coefficients of parents fixed to 1, followed by the `X` and `R` covariate
/// coefficients in design order.
pub fn true_block_theta(g: BenchGraph, fit: &PropensityFit) -> Vector {
    if fit.degenerate {
        return Vector::zeros(0);
    }
    let m = propensity_model(g, fit.indicator).unwrap_or(Logit { intercept: f64::INFINITY, x: vec![], r: vec![] });
    let coef = |list: &[(usize, f64)], j: usize| list.iter().find(|(i, _)| *i == j).map_or(0.0, |(_, c)| *c);
    let mut out = vec![m.intercept + fit.design_spec.fixed_one.iter().map(|&j| coef(&m.r, j)).sum::<f64>()];
    out.extend(fit.design_spec.x_parents.iter().map(|&j| coef(&m.x, j)));
    out.extend(fit.design_spec.r_covariates.iter().map(|&j| coef(&m.r, j)));
    Vector::from_vec(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorKind {
    Tree,
    CompleteCase,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Tree => "missing-tree",
            EstimatorKind::CompleteCase => "complete-case",
        })
    }
}

impl FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "tree" | "missing-tree" => Ok(EstimatorKind::Tree),
            "cc" | "complete-case" => Ok(EstimatorKind::CompleteCase),
            _ => Err(format!("unknown estimator '{s}', expected tree or cc")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub estimator: EstimatorKind,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub estimator: String,
    pub graph: BenchGraph,
    pub task: Task,
    pub parameter: String,
    pub n: usize,
    pub replicates: usize,
    pub failures: usize,
    pub truth: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    pub rmse: f64,
    pub empirical_sd: f64,
    pub mean_se: f64,
    pub mc_se_of_bias: f64,
    pub coverage_pct: f64,
    /// Rejection rate of the 5% Wald test of the null coefficient.
    pub type_i_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McOutcome {
    pub summaries: Vec<McSummary>,
    pub records: Vec<ReplicateRecord>,
}

/// Runs one estimator on a dataset.
pub fn run_estimator(kind: EstimatorKind, id: DgpId, g: &MDag, report: &crate::ident::IdReport, data: &Dataset) -> Result<EstimationResult, crate::estimator::EstimationError> {
    let m = moment(id);
    match kind {
        EstimatorKind::Tree => estimate(g, report, data, &m, &EstimateOptions::default()),
        EstimatorKind::CompleteCase => complete_case_estimate(&m, data),
    }
}

/// Replicates are independent seed streams; results do not depend on thread
/// scheduling.
pub fn monte_carlo(id: DgpId, estimators: &[EstimatorKind], n: usize, reps: usize, seed: u64) -> McOutcome {
    let g = graph(id.graph);
    let report = identify(&g);
    let focus = focus_index(id);
    let results: Vec<Vec<ReplicateRecord>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let sample = dgp_sample(id, n, replicate_seed(seed, r as u64));
            estimators
                .iter()
                .map(|&kind| match run_estimator(kind, id, &g, &report, &sample.data) {
                    Ok(res) => ReplicateRecord { replicate: r, estimator: kind, estimate: Some(res.theta_hat[focus]), se: Some(res.se(focus)), error: None },
                    Err(e) => ReplicateRecord { replicate: r, estimator: kind, estimate: None, se: None, error: Some(e.to_string()) },
                })
                .collect()
        })
        .collect();
    let records: Vec<ReplicateRecord> = results.into_iter().flatten().collect();
    let truth = focus_truth(id);
    let parameter = moment(id).param_names()[focus].clone();
    let summaries = estimators
        .iter()
        .map(|&kind| {
            let mine: Vec<&ReplicateRecord> = records.iter().filter(|r| r.estimator == kind).collect();
            summarize(kind, id, &parameter, n, truth, &mine)
        })
        .collect();
    McOutcome { summaries, records }
}

fn summarize(kind: EstimatorKind, id: DgpId, parameter: &str, n: usize, truth: f64, records: &[&ReplicateRecord]) -> McSummary {
    let ok: Vec<(f64, f64)> = records.iter().filter_map(|r| Some((r.estimate?, r.se?))).collect();
    let m = ok.len() as f64;
    let mean_estimate = ok.iter().map(|p| p.0).sum::<f64>() / m;
    let bias = mean_estimate - truth;
    let rmse = (ok.iter().map(|p| (p.0 - truth).powi(2)).sum::<f64>() / m).sqrt();
    let empirical_sd = (ok.iter().map(|p| (p.0 - mean_estimate).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
    let mean_se = ok.iter().map(|p| p.1).sum::<f64>() / m;
    let q = std_normal().inverse_cdf(0.975);
    let covered = ok.iter().filter(|p| (p.0 - truth).abs() <= q * p.1).count() as f64;
    let rejected = ok.iter().filter(|p| (p.0 / p.1).abs() > q).count() as f64;
    McSummary {
        estimator: kind.to_string(),
        graph: id.graph,
        task: id.task,
        parameter: parameter.to_string(),
        n,
        replicates: records.len(),
        failures: records.len() - ok.len(),
        truth,
        mean_estimate,
        bias,
        rmse,
        empirical_sd,
        mean_se,
        mc_se_of_bias: empirical_sd / m.sqrt(),
        coverage_pct: 100.0 * covered / m,
        type_i_error: (id.task == Task::Regression).then_some(rejected / m),
    }
}
