//! Closure sets, IPW target estimation and the stacked sandwich.

use std::collections::BTreeMap;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use super::fit::FitRegistry;
use super::moment::MomentSpec;
use super::EstimationError;
use crate::data::Dataset;
use crate::graph::MDag;
use crate::ident::{IdReport, IndSet, SelectionProfile};
use crate::numerics::{fd_jacobian, newton_solve, sandwich, Matrix, SolveReport, Vector, DEFAULT_MAX_ITER, DEFAULT_TOL};

/// Smallest superset of `r_tilde` closed under `A ↦ A ∪ ⋃_{i∈A} S_i`.
/// Fails with the smallest non-identified indicator the fixpoint reaches.
pub fn closure(r_tilde: &IndSet, profiles: &BTreeMap<usize, SelectionProfile>, d: &IndSet) -> Result<IndSet, EstimationError> {
    let mut set = r_tilde.clone();
    loop {
        let mut next = set.clone();
        for i in &set {
            if let Some(p) = profiles.get(i) {
                next.extend(p.s_full.iter().copied());
            }
        }
        if next == set {
            break;
        }
        set = next;
    }
    match set.intersection(d).next() {
        Some(&offender) => Err(EstimationError::NotIdentifiedFunctional(offender)),
        None => Ok(set),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EstimateOptions {
    /// Floor applied to every fitted propensity.
    pub clamp: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockReport {
    pub indicator: usize,
    pub signature: String,
    pub canonical: bool,
    pub degenerate: bool,
    pub fit_rows: usize,
    pub iterations: usize,
    pub final_residual_norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub blocks: Vec<BlockReport>,
    pub target_solve_iterations: usize,
    pub target_residual_norm: f64,
    /// Smallest fitted propensity over fit rows and fully weighted rows.
    pub min_propensity: f64,
    /// `(Σw)² / Σw²` over the rows with `ℛ = 1`.
    pub effective_sample_size: f64,
    pub weighted_rows: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaldTest {
    pub z: f64,
    pub p_value: f64,
}

/// Target estimate with covariance `V/n`, so standard errors are the square
/// roots of its diagonal.
#[derive(Debug, Clone, Serialize)]
pub struct EstimationResult {
    pub moment: String,
    pub param_names: Vec<String>,
    #[serde(serialize_with = "ser_vec")]
    pub theta_hat: Vector,
    #[serde(serialize_with = "ser_mat")]
    pub covariance: Matrix,
    pub closure_set: IndSet,
    pub stacked_dimension: usize,
    pub n: usize,
    pub diagnostics: Diagnostics,
}

fn ser_vec<S: serde::Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(v.iter())
}

fn ser_mat<S: serde::Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(m.row_iter().map(|r| r.iter().copied().collect::<Vec<f64>>()))
}

impl EstimationResult {
    pub fn se(&self, j: usize) -> f64 {
        self.covariance[(j, j)].max(0.0).sqrt()
    }

    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.theta_hat.len()).map(|j| self.se(j)).collect()
    }

    /// Two-sided test of `θ_j = 0`.
    pub fn wald(&self, j: usize) -> WaldTest {
        let z = self.theta_hat[j] / self.se(j);
        let p_value = 2.0 * (1.0 - std_normal().cdf(z.abs()));
        WaldTest { z, p_value }
    }

    /// Normal-theory confidence interval at `level` (e.g. 0.95).
    pub fn ci(&self, j: usize, level: f64) -> (f64, f64) {
        let q = std_normal().inverse_cdf(0.5 + level / 2.0);
        let h = q * self.se(j);
        (self.theta_hat[j] - h, self.theta_hat[j] + h)
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Rows and values used by the target moment.
struct TargetRows {
    /// Row index and 1-based value vector for each row with `ℛ = 1`.
    rows: Vec<(usize, Vec<f64>)>,
    blocks: Vec<usize>,
}

impl TargetRows {
    fn new(data: &Dataset, registry: &FitRegistry, closure_set: &IndSet) -> Result<Self, EstimationError> {
        let blocks = closure_set
            .iter()
            .map(|&i| registry.canonical.get(&i).copied().ok_or(EstimationError::FitMissing(i)))
            .collect::<Result<Vec<_>, _>>()?;
        let mut rows = Vec::new();
        for row in 0..data.n() {
            if !closure_set.iter().all(|&j| data.r(row, j)) {
                continue;
            }
            for &b in &blocks {
                let fit = &registry.fits[b];
                if let Some(&j) = fit.design_spec.fixed_one.iter().find(|&&j| !data.r(row, j)) {
                    return Err(EstimationError::Internal(format!("R{j} is 0 on a fully weighted row but fixed to 1 for R{}", fit.indicator)));
                }
            }
            let mut vals = Vec::with_capacity(data.k() + 1);
            vals.push(f64::NAN);
            vals.extend_from_slice(data.row(row));
            rows.push((row, vals));
        }
        Ok(TargetRows { rows, blocks })
    }

    fn weight(&self, registry: &FitRegistry, row: usize, thetas: &[Vector]) -> f64 {
        self.blocks.iter().map(|&b| 1.0 / registry.pi_with(b, row, thetas)).product()
    }
}

/// The joint estimating equations of the propensity blocks reachable from
/// `ℛ` and the target moment, with `Θ = (θ_blocks…, θ_target)`.
pub struct StackedSystem<'a> {
    registry: &'a FitRegistry,
    moment: &'a MomentSpec,
    target: TargetRows,
    blocks: Vec<usize>,
    offsets: Vec<usize>,
    /// Target row slot of each data row.
    slot: Vec<Option<usize>>,
}

impl<'a> StackedSystem<'a> {
    pub fn new(moment: &'a MomentSpec, data: &Dataset, registry: &'a FitRegistry, closure_set: &IndSet) -> Result<Self, EstimationError> {
        let target = TargetRows::new(data, registry, closure_set)?;
        let blocks: Vec<usize> = registry.reachable(target.blocks.iter().copied()).into_iter().filter(|&b| registry.fits[b].dim() > 0).collect();
        let mut offsets = Vec::with_capacity(blocks.len());
        let mut off = 0;
        for &b in &blocks {
            offsets.push(off);
            off += registry.fits[b].dim();
        }
        let mut slot = vec![None; registry.n()];
        for (s, (row, _)) in target.rows.iter().enumerate() {
            slot[*row] = Some(s);
        }
        Ok(StackedSystem { registry, moment, target, blocks, offsets, slot })
    }

    pub fn dimension(&self) -> usize {
        self.target_offset() + self.moment.dim()
    }

    fn target_offset(&self) -> usize {
        self.offsets.last().map_or(0, |o| o + self.registry.fits[*self.blocks.last().unwrap()].dim())
    }

    /// Registry indices of the propensity blocks, in stacking order.
    pub fn blocks(&self) -> &[usize] {
        &self.blocks
    }

    /// Offset of each block inside `Θ`.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Packs block parameters from the registry with a target parameter.
    pub fn pack(&self, thetas: &[Vector], target: &Vector) -> Vector {
        let mut out = Vec::with_capacity(self.dimension());
        for &b in &self.blocks {
            out.extend(thetas[b].iter());
        }
        out.extend(target.iter());
        Vector::from_vec(out)
    }

    fn unpack(&self, big: &Vector) -> (Vec<Vector>, Vector) {
        let mut thetas = self.registry.thetas();
        for (&b, &off) in self.blocks.iter().zip(&self.offsets) {
            let p = self.registry.fits[b].dim();
            thetas[b] = big.rows(off, p).into_owned();
        }
        let t = self.target_offset();
        (thetas, big.rows(t, self.moment.dim()).into_owned())
    }

    fn row_psi(&self, row: usize, thetas: &[Vector], target: &Vector, out: &mut [f64]) {
        for (&b, &off) in self.blocks.iter().zip(&self.offsets) {
            let p = self.registry.fits[b].dim();
            self.registry.psi_into(b, row, thetas, &mut out[off..off + p]);
        }
        if let Some(s) = self.slot[row] {
            let t = self.target_offset();
            let w = self.target.weight(self.registry, row, thetas);
            let mut m = vec![0.0; self.moment.dim()];
            self.moment.eval_into(&self.target.rows[s].1, target.as_slice(), &mut m);
            for (o, v) in out[t..].iter_mut().zip(m) {
                *o += w * v;
            }
        }
    }

    /// Per-row stacked estimating function `Ψ(O_row; Θ)`.
    pub fn psi(&self, row: usize, big: &Vector) -> Vector {
        let (thetas, target) = self.unpack(big);
        let mut out = Vector::zeros(self.dimension());
        self.row_psi(row, &thetas, &target, out.as_mut_slice());
        out
    }

    /// `P_n Ψ(Θ)`.
    pub fn mean_psi(&self, big: &Vector) -> Vector {
        let (thetas, target) = self.unpack(big);
        let mut acc = Vector::zeros(self.dimension());
        let mut buf = vec![0.0; self.dimension()];
        for row in 0..self.registry.n() {
            buf.iter_mut().for_each(|x| *x = 0.0);
            self.row_psi(row, &thetas, &target, &mut buf);
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += b;
            }
        }
        acc / self.registry.n().max(1) as f64
    }

    /// Sandwich covariance `A⁻¹BA⁻ᵀ/n` of the whole stack at `Θ`.
    pub fn covariance(&self, big: &Vector) -> Result<Matrix, EstimationError> {
        let f = |t: &Vector| self.mean_psi(t);
        let a = fd_jacobian(&f, big).map_err(|e| EstimationError::Numerics { indicator: None, source: e })?;
        let (thetas, target) = self.unpack(big);
        let d = self.dimension();
        let mut b = Matrix::zeros(d, d);
        let mut buf = vec![0.0; d];
        for row in 0..self.registry.n() {
            buf.iter_mut().for_each(|x| *x = 0.0);
            self.row_psi(row, &thetas, &target, &mut buf);
            if buf.iter().all(|x| *x == 0.0) {
                continue;
            }
            let v = Vector::from_column_slice(&buf);
            b += &v * v.transpose();
        }
        let n = self.registry.n();
        b /= n as f64;
        sandwich(&a, &b, n).map_err(|e| EstimationError::Numerics { indicator: None, source: e })
    }
}

fn initial_guess(moment: &MomentSpec, rows: &[(usize, Vec<f64>)], weights: &[f64]) -> Vector {
    let sw: f64 = weights.iter().sum();
    let wmean = |j: usize| rows.iter().zip(weights).map(|((_, v), w)| w * v[j]).sum::<f64>() / sw;
    match moment {
        MomentSpec::Mean(j) => Vector::from_element(1, wmean(*j)),
        MomentSpec::LinReg { outcome, terms } => {
            let p = 1 + terms.len();
            let mut xtx = Matrix::zeros(p, p);
            let mut xty = Vector::zeros(p);
            for ((_, v), w) in rows.iter().zip(weights) {
                let f = Vector::from_iterator(p, std::iter::once(1.0).chain(terms.iter().map(|t| t.eval(v))));
                xtx += &f * f.transpose() * *w;
                xty += &f * (*w * v[*outcome]);
            }
            xtx.lu().solve(&xty).unwrap_or_else(|| Vector::zeros(p))
        }
        MomentSpec::CounterfactualMean { outcome, .. } => {
            let mut t = Vector::zeros(moment.dim());
            t[moment.dim() - 1] = wmean(*outcome);
            t
        }
    }
}

/// Solves the weighted moment equation on a fitted registry, then builds
/// the stacked sandwich over every block reachable from `ℛ`.
pub fn target_estimate(moment: &MomentSpec, data: &Dataset, registry: &FitRegistry, report: &IdReport) -> Result<EstimationResult, EstimationError> {
    moment.validate(data.k()).map_err(EstimationError::InvalidMoment)?;
    let closure_set = closure(&moment.required_vars(), &report.profiles, &report.not_identified)?;
    let system = StackedSystem::new(moment, data, registry, &closure_set)?;
    let thetas = registry.thetas();
    let rows = &system.target.rows;
    let mut weights = Vec::with_capacity(rows.len());
    let mut min_pi = f64::INFINITY;
    for (row, _) in rows {
        for &b in &system.target.blocks {
            let pi = registry.pi_with(b, *row, &thetas);
            if pi <= 0.0 || !pi.is_finite() {
                return Err(EstimationError::NonPositivePropensity { indicator: registry.fits[b].indicator, row: *row });
            }
            min_pi = min_pi.min(pi);
        }
        weights.push(system.target.weight(registry, *row, &thetas));
    }
    let sw: f64 = weights.iter().sum();
    if rows.is_empty() || sw <= 0.0 || !sw.is_finite() {
        return Err(EstimationError::DegenerateWeights);
    }
    for &b in &system.blocks {
        for row in (0..data.n()).filter(|&r| registry.fit_mask(b)[r]) {
            min_pi = min_pi.min(registry.pi_with(b, row, &thetas));
        }
    }
    let ess = sw * sw / weights.iter().map(|w| w * w).sum::<f64>();
    if min_pi < 0.01 {
        log::warn!("minimum fitted propensity {min_pi:.4} below 0.01");
    }

    let n = data.n() as f64;
    let p = moment.dim();
    let residual = |t: &Vector| {
        let mut acc = Vector::zeros(p);
        let mut m = vec![0.0; p];
        for ((_, v), w) in rows.iter().zip(&weights) {
            moment.eval_into(v, t.as_slice(), &mut m);
            for (a, x) in acc.iter_mut().zip(&m) {
                *a += w * x;
            }
        }
        acc / n
    };
    let solve = newton_solve(&residual, None, initial_guess(moment, rows, &weights), DEFAULT_TOL, DEFAULT_MAX_ITER)
        .map_err(|e| EstimationError::Numerics { indicator: None, source: e })?;
    if !solve.converged {
        return Err(EstimationError::NonConvergence { indicator: None, iterations: solve.iterations });
    }
    let big = system.pack(&thetas, &solve.solution);
    let full = system.covariance(&big)?;
    let t = system.target_offset();
    let covariance = full.view((t, t), (p, p)).into_owned();
    let blocks = system.blocks.iter().map(|&b| block_report(registry, b)).collect();
    Ok(EstimationResult {
        moment: moment.to_string(),
        param_names: moment.param_names(),
        theta_hat: solve.solution.clone(),
        covariance,
        closure_set,
        stacked_dimension: system.dimension(),
        n: data.n(),
        diagnostics: Diagnostics {
            blocks,
            target_solve_iterations: solve.iterations,
            target_residual_norm: solve.final_residual_norm,
            min_propensity: min_pi,
            effective_sample_size: ess,
            weighted_rows: rows.len(),
        },
    })
}

fn block_report(registry: &FitRegistry, b: usize) -> BlockReport {
    let f = &registry.fits[b];
    let s: Option<&SolveReport> = f.solve.as_ref();
    BlockReport {
        indicator: f.indicator,
        signature: f.signature.clone(),
        canonical: f.canonical,
        degenerate: f.degenerate,
        fit_rows: f.fit_rows,
        iterations: s.map_or(0, |s| s.iterations),
        final_residual_norm: s.map_or(0.0, |s| s.final_residual_norm),
        converged: s.is_none_or(|s| s.converged),
    }
}

/// Closure, propensity fits for the closure only, then the target.
pub fn estimate(g: &MDag, report: &IdReport, data: &Dataset, moment: &MomentSpec, opts: &EstimateOptions) -> Result<EstimationResult, EstimationError> {
    moment.validate(g.k()).map_err(EstimationError::InvalidMoment)?;
    let closure_set = closure(&moment.required_vars(), &report.profiles, &report.not_identified)?;
    let mut registry = FitRegistry::plan(g, report, data, &closure_set, opts.clamp)?;
    registry.fit_all()?;
    target_estimate(moment, data, &registry, report)
}

/// Unweighted moment equation on rows with every required variable observed.
pub fn complete_case_estimate(moment: &MomentSpec, data: &Dataset) -> Result<EstimationResult, EstimationError> {
    moment.validate(data.k()).map_err(EstimationError::InvalidMoment)?;
    let req = moment.required_vars();
    let rows: Vec<(usize, Vec<f64>)> = (0..data.n())
        .filter(|&r| req.iter().all(|&j| data.r(r, j)))
        .map(|r| {
            let mut v = vec![f64::NAN];
            v.extend_from_slice(data.row(r));
            (r, v)
        })
        .collect();
    if rows.is_empty() {
        return Err(EstimationError::DegenerateWeights);
    }
    let p = moment.dim();
    let n = data.n();
    let weights = vec![1.0; rows.len()];
    let mean_m = |t: &Vector| {
        let mut acc = Vector::zeros(p);
        let mut m = vec![0.0; p];
        for (_, v) in &rows {
            moment.eval_into(v, t.as_slice(), &mut m);
            for (a, x) in acc.iter_mut().zip(&m) {
                *a += x;
            }
        }
        acc / n as f64
    };
    let solve = newton_solve(&mean_m, None, initial_guess(moment, &rows, &weights), DEFAULT_TOL, DEFAULT_MAX_ITER)
        .map_err(|e| EstimationError::Numerics { indicator: None, source: e })?;
    if !solve.converged {
        return Err(EstimationError::NonConvergence { indicator: None, iterations: solve.iterations });
    }
    let a = fd_jacobian(&mean_m, &solve.solution).map_err(|e| EstimationError::Numerics { indicator: None, source: e })?;
    let mut b = Matrix::zeros(p, p);
    for (_, v) in &rows {
        let m = moment.eval(v, &solve.solution);
        b += &m * m.transpose();
    }
    b /= n as f64;
    let covariance = sandwich(&a, &b, n).map_err(|e| EstimationError::Numerics { indicator: None, source: e })?;
    Ok(EstimationResult {
        moment: moment.to_string(),
        param_names: moment.param_names(),
        theta_hat: solve.solution.clone(),
        covariance,
        closure_set: req,
        stacked_dimension: p,
        n,
        diagnostics: Diagnostics {
            blocks: Vec::new(),
            target_solve_iterations: solve.iterations,
            target_residual_norm: solve.final_residual_norm,
            min_propensity: 1.0,
            effective_sample_size: rows.len() as f64,
            weighted_rows: rows.len(),
        },
    })
}
