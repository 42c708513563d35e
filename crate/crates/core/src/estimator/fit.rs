//! Recursive IPW fits of identified propensity scores.

use std::collections::BTreeMap;

use log::{debug, warn};
use serde::Serialize;

use super::EstimationError;
use crate::data::Dataset;
use crate::graph::MDag;
use crate::ident::{profile_of, IdReport, IdTree, IndSet, SelectionProfile};
use crate::numerics::{expit, newton_solve, Matrix, SolveReport, Vector, DEFAULT_MAX_ITER, DEFAULT_TOL};

/// Feature layout of `π_k`: intercept, `X`-parents, then `R`-parents outside
/// `S^r_k`. Parents in `S^r_k` equal 1 on every row where the fit or its
/// evaluation applies, so they are folded into the intercept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DesignSpec {
    pub x_parents: Vec<usize>,
    pub r_covariates: Vec<usize>,
    pub fixed_one: Vec<usize>,
}

impl DesignSpec {
    pub fn new(g: &MDag, k: usize, s_r: &IndSet) -> Self {
        DesignSpec {
            x_parents: g.x_parents(k).iter().copied().collect(),
            r_covariates: g.r_parents(k).iter().copied().filter(|r| !s_r.contains(r)).collect(),
            fixed_one: g.r_parents(k).iter().copied().filter(|r| s_r.contains(r)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        1 + self.x_parents.len() + self.r_covariates.len()
    }

    pub fn names(&self) -> Vec<String> {
        std::iter::once("(Intercept)".to_string())
            .chain(self.x_parents.iter().map(|j| format!("X{j}")))
            .chain(self.r_covariates.iter().map(|j| format!("R{j}")))
            .collect()
    }

    /// Design row, or the first missing `X`-parent.
    pub fn features(&self, data: &Dataset, row: usize) -> Result<Vector, EstimationError> {
        let mut f = Vec::with_capacity(self.dim());
        f.push(1.0);
        for &j in &self.x_parents {
            f.push(data.x(row, j).ok_or(EstimationError::MissingParentValue { row, var: j })?);
        }
        f.extend(self.r_covariates.iter().map(|&j| if data.r(row, j) { 1.0 } else { 0.0 }));
        Ok(Vector::from_vec(f))
    }
}

/// `(1, pa(R_k))` for one row, with parents in `s_r` folded into the intercept.
pub fn design_vector(data: &Dataset, row: usize, g: &MDag, k: usize, s_r: &IndSet) -> Result<Vector, EstimationError> {
    DesignSpec::new(g, k, s_r).features(data, row)
}

#[derive(Debug, Clone, Serialize)]
pub struct PropensityFit {
    pub indicator: usize,
    pub signature: String,
    pub tree_hash: u64,
    /// True when the tree is the indicator's forest tree.
    pub canonical: bool,
    #[serde(skip)]
    pub tree: IdTree,
    pub profile: SelectionProfile,
    pub design_spec: DesignSpec,
    #[serde(serialize_with = "serialize_vector")]
    pub theta: Vector,
    /// Indicator never missing in the data: `π ≡ 1`, no parameters.
    pub degenerate: bool,
    pub fit_rows: usize,
    #[serde(skip)]
    pub solve: Option<SolveReport>,
    /// Registry indices of the fits used in `W_k`.
    pub children: Vec<usize>,
}

fn serialize_vector<S: serde::Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(v.iter())
}

impl PropensityFit {
    pub fn dim(&self) -> usize {
        if self.degenerate {
            0
        } else {
            self.design_spec.dim()
        }
    }

    pub fn eval_set(&self) -> &IndSet {
        &self.profile.s_r
    }
}

struct BlockCache {
    p: usize,
    /// `n × p` features, `NaN` where an `X`-parent is missing.
    feats: Vec<f64>,
    fit_mask: Vec<bool>,
    r: Vec<f64>,
}

/// Canonical and tree-variant propensity fits on one dataset.
pub struct FitRegistry {
    pub fits: Vec<PropensityFit>,
    pub canonical: BTreeMap<usize, usize>,
    index: BTreeMap<(usize, String), usize>,
    caches: Vec<BlockCache>,
    n: usize,
    clamp: Option<f64>,
}

impl FitRegistry {
    /// Lays out every fit needed by the forest trees of `roots`, children
    /// before parents. No parameters are estimated yet.
    pub fn plan(g: &MDag, report: &IdReport, data: &Dataset, roots: &IndSet, clamp: Option<f64>) -> Result<Self, EstimationError> {
        if data.k() != g.k() {
            return Err(EstimationError::DimensionMismatch(format!("data has {} columns, graph {}", data.k(), g.k())));
        }
        let mut reg = FitRegistry {
            fits: Vec::new(),
            canonical: BTreeMap::new(),
            index: BTreeMap::new(),
            caches: Vec::new(),
            n: data.n(),
            clamp,
        };
        for &k in report.order.iter().filter(|k| roots.contains(k)) {
            let tree = report.forest.get(&k).ok_or(EstimationError::NotIdentifiedFunctional(k))?;
            let idx = reg.add_tree(g, report, data, tree)?;
            reg.canonical.insert(k, idx);
        }
        Ok(reg)
    }

    fn add_tree(&mut self, g: &MDag, report: &IdReport, data: &Dataset, tree: &IdTree) -> Result<usize, EstimationError> {
        let signature = tree.signature();
        if let Some(&idx) = self.index.get(&(tree.root, signature.clone())) {
            return Ok(idx);
        }
        let children = tree.children.iter().map(|c| self.add_tree(g, report, data, c)).collect::<Result<Vec<_>, _>>()?;
        let k = tree.root;
        let profile = profile_of(g, tree);
        let design_spec = DesignSpec::new(g, k, &profile.s_r);
        let degenerate = data.fully_observed(k);
        let canonical = report.forest.get(&k).is_some_and(|t| t.signature() == signature);
        let cache = self.build_cache(data, k, &profile, &design_spec, &children, degenerate)?;
        let fit = PropensityFit {
            indicator: k,
            tree_hash: tree.structure_hash(),
            signature: signature.clone(),
            canonical,
            tree: tree.clone(),
            profile,
            theta: Vector::zeros(if degenerate { 0 } else { design_spec.dim() }),
            design_spec,
            degenerate,
            fit_rows: cache.fit_mask.iter().filter(|&&m| m).count(),
            solve: None,
            children,
        };
        self.fits.push(fit);
        self.caches.push(cache);
        let idx = self.fits.len() - 1;
        self.index.insert((k, signature), idx);
        Ok(idx)
    }

    fn build_cache(
        &self,
        data: &Dataset,
        k: usize,
        profile: &SelectionProfile,
        design: &DesignSpec,
        children: &[usize],
        degenerate: bool,
    ) -> Result<BlockCache, EstimationError> {
        let n = data.n();
        let p = design.dim();
        let mut feats = vec![f64::NAN; n * p];
        let mut fit_mask = vec![false; n];
        let mut r = vec![0.0; n];
        for row in 0..n {
            r[row] = if data.r(row, k) { 1.0 } else { 0.0 };
            if let Ok(f) = design.features(data, row) {
                feats[row * p..(row + 1) * p].copy_from_slice(f.as_slice());
            }
            if degenerate {
                continue;
            }
            let selected = profile.s_pre.iter().all(|&j| data.r(row, j)) && profile.tree_children.iter().all(|&j| data.r(row, j));
            if !selected {
                continue;
            }
            if let Err(e) = design.features(data, row) {
                return Err(e);
            }
            for &c in children {
                let child = &self.fits[c];
                if !child.degenerate && !child.design_spec.fixed_one.iter().all(|&j| data.r(row, j)) {
                    return Err(EstimationError::Internal(format!(
                        "R{} evaluation set not selected on a fit row of R{k}",
                        child.indicator
                    )));
                }
            }
            fit_mask[row] = true;
        }
        Ok(BlockCache { p, feats, fit_mask, r })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn clamp(&self) -> Option<f64> {
        self.clamp
    }

    pub fn get(&self, indicator: usize, signature: &str) -> Option<&PropensityFit> {
        self.index.get(&(indicator, signature.to_string())).map(|&i| &self.fits[i])
    }

    pub fn canonical_fit(&self, indicator: usize) -> Option<&PropensityFit> {
        self.canonical.get(&indicator).map(|&i| &self.fits[i])
    }

    pub fn variant_count(&self) -> usize {
        self.fits.iter().filter(|f| !f.canonical).count()
    }

    /// Current parameter vectors, one per fit.
    pub fn thetas(&self) -> Vec<Vector> {
        self.fits.iter().map(|f| f.theta.clone()).collect()
    }

    pub(crate) fn fit_mask(&self, b: usize) -> &[bool] {
        &self.caches[b].fit_mask
    }

    /// `π_b` on a row under the given parameters, clamped if requested.
    pub(crate) fn pi_with(&self, b: usize, row: usize, thetas: &[Vector]) -> f64 {
        if self.fits[b].degenerate {
            return 1.0;
        }
        let c = &self.caches[b];
        let f = &c.feats[row * c.p..(row + 1) * c.p];
        let lin: f64 = f.iter().zip(thetas[b].iter()).map(|(a, t)| a * t).sum();
        let pi = expit(lin);
        match self.clamp {
            Some(floor) => pi.max(floor),
            None => pi,
        }
    }

    /// Fitted propensity of fit `b` on a row.
    pub fn pi(&self, b: usize, row: usize) -> f64 {
        let thetas = self.thetas();
        self.pi_with(b, row, &thetas)
    }

    /// `W_b = ∏_{children} 1/π_i` under the given parameters; 1 without children.
    pub(crate) fn weight_with(&self, b: usize, row: usize, thetas: &[Vector]) -> f64 {
        self.fits[b].children.iter().map(|&c| 1.0 / self.pi_with(c, row, thetas)).product()
    }

    /// `W_k` of fit `b` on a row that satisfies its selection.
    pub fn weight_w(&self, b: usize, row: usize) -> Result<f64, EstimationError> {
        if !self.caches[b].fit_mask[row] && !self.fits[b].degenerate {
            return Err(EstimationError::Internal(format!("row {row} outside the fit rows of R{}", self.fits[b].indicator)));
        }
        let thetas = self.thetas();
        for &c in &self.fits[b].children {
            let pi = self.pi_with(c, row, &thetas);
            if pi <= 0.0 || !pi.is_finite() {
                return Err(EstimationError::NonPositivePropensity { indicator: self.fits[c].indicator, row });
            }
        }
        Ok(self.weight_with(b, row, &thetas))
    }

    /// Adds `Ψ_b(row)` into `out` (length `dim(b)`).
    pub(crate) fn psi_into(&self, b: usize, row: usize, thetas: &[Vector], out: &mut [f64]) {
        let c = &self.caches[b];
        if self.fits[b].degenerate || !c.fit_mask[row] {
            return;
        }
        let w = self.weight_with(b, row, thetas);
        let resid = w * (c.r[row] - self.pi_with(b, row, thetas));
        for (o, f) in out.iter_mut().zip(&c.feats[row * c.p..(row + 1) * c.p]) {
            *o += f * resid;
        }
    }

    /// Mean estimating function of fit `b` over all rows.
    pub fn mean_psi(&self, b: usize, thetas: &[Vector]) -> Vector {
        let mut acc = Vector::zeros(self.fits[b].dim());
        for row in 0..self.n {
            self.psi_into(b, row, thetas, acc.as_mut_slice());
        }
        acc / self.n.max(1) as f64
    }

    /// Solves every planned fit in order.
    pub fn fit_all(&mut self) -> Result<(), EstimationError> {
        for b in 0..self.fits.len() {
            self.fit_block(b)?;
        }
        Ok(())
    }

    /// Solves `P_n[1(S̃=1)·1(𝒯=1)·W·f·(R − π)] = 0` for one fit, holding its
    /// children's parameters at their current values.
    pub fn fit_block(&mut self, b: usize) -> Result<(), EstimationError> {
        let fit = &self.fits[b];
        if fit.degenerate {
            return Ok(());
        }
        let k = fit.indicator;
        let p = fit.design_spec.dim();
        if fit.fit_rows < p {
            return Err(EstimationError::InsufficientRows { indicator: k, rows: fit.fit_rows, needed: p });
        }
        let thetas = self.thetas();
        let c = &self.caches[b];
        let mut rows = Vec::with_capacity(fit.fit_rows);
        for row in (0..self.n).filter(|&r| c.fit_mask[r]) {
            let mut w = 1.0;
            for &ch in &fit.children {
                let pi = self.pi_with(ch, row, &thetas);
                if pi <= 0.0 || !pi.is_finite() {
                    return Err(EstimationError::NonPositivePropensity { indicator: self.fits[ch].indicator, row });
                }
                w /= pi;
            }
            rows.push((row, w));
        }
        let n = self.n as f64;
        let feats = |row: usize| &c.feats[row * p..(row + 1) * p];
        let residual = |t: &Vector| {
            let mut acc = Vector::zeros(p);
            for &(row, w) in &rows {
                let f = feats(row);
                let lin: f64 = f.iter().zip(t.iter()).map(|(a, b)| a * b).sum();
                let s = w * (c.r[row] - expit(lin));
                for (o, x) in acc.iter_mut().zip(f) {
                    *o += x * s;
                }
            }
            acc / n
        };
        let jacobian = |t: &Vector| {
            let mut acc = Matrix::zeros(p, p);
            for &(row, w) in &rows {
                let f = feats(row);
                let lin: f64 = f.iter().zip(t.iter()).map(|(a, b)| a * b).sum();
                let pi = expit(lin);
                let s = w * pi * (1.0 - pi);
                for i in 0..p {
                    for j in 0..p {
                        acc[(i, j)] -= s * f[i] * f[j];
                    }
                }
            }
            acc / n
        };
        let report = newton_solve(&residual, Some(&jacobian), Vector::zeros(p), DEFAULT_TOL, DEFAULT_MAX_ITER)
            .map_err(|e| EstimationError::Numerics { indicator: Some(k), source: e })?;
        let fitted: Vec<f64> = rows
            .iter()
            .map(|&(row, _)| expit(feats(row).iter().zip(report.solution.iter()).map(|(a, b)| a * b).sum()))
            .collect();
        let min_pi = fitted.iter().copied().fold(f64::INFINITY, f64::min);
        let max_pi = fitted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !report.converged {
            if min_pi < 1e-6 || max_pi > 1.0 - 1e-6 {
                return Err(EstimationError::Separation { indicator: k });
            }
            return Err(EstimationError::NonConvergence { indicator: Some(k), iterations: report.iterations });
        }
        if min_pi < 0.01 {
            warn!("R{k} [{}]: minimum fitted propensity {min_pi:.4} below 0.01", self.fits[b].signature);
        }
        debug!("fitted R{k} [{}] in {} iterations on {} rows", self.fits[b].signature, report.iterations, rows.len());
        self.fits[b].theta = report.solution.clone();
        self.fits[b].solve = Some(report);
        Ok(())
    }

    /// Overwrites the parameters of every fit; used to evaluate estimating
    /// functions at known values.
    pub fn set_thetas(&mut self, thetas: Vec<Vector>) -> Result<(), EstimationError> {
        if thetas.len() != self.fits.len() || thetas.iter().zip(&self.fits).any(|(t, f)| t.len() != f.dim()) {
            return Err(EstimationError::DimensionMismatch("parameter vectors do not match the registry".into()));
        }
        for (f, t) in self.fits.iter_mut().zip(thetas) {
            f.theta = t;
        }
        Ok(())
    }

    /// Registry indices reachable from the given fits, in registry order.
    pub fn reachable(&self, from: impl IntoIterator<Item = usize>) -> Vec<usize> {
        let mut keep = vec![false; self.fits.len()];
        let mut stack: Vec<usize> = from.into_iter().collect();
        while let Some(b) = stack.pop() {
            if !keep[b] {
                keep[b] = true;
                stack.extend(self.fits[b].children.iter().copied());
            }
        }
        (0..self.fits.len()).filter(|&b| keep[b]).collect()
    }
}

/// Fits every identified indicator plus all pruned variants its tree uses.
pub fn fit_forest(report: &IdReport, data: &Dataset, g: &MDag) -> Result<FitRegistry, EstimationError> {
    let roots: IndSet = report.forest.keys().copied().collect();
    let mut reg = FitRegistry::plan(g, report, data, &roots, None)?;
    reg.fit_all()?;
    Ok(reg)
}
