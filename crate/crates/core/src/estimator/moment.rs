//! Moment conditions `E[M(X̃; θ)] = 0` for target functionals.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::numerics::{expit, Vector};

/// Product of variables, e.g. `X1*X2` or `X2^2` (stored as `[2, 2]`).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Term(pub Vec<usize>);

impl Term {
    pub fn var(j: usize) -> Self {
        Term(vec![j])
    }

    pub fn product(vars: &[usize]) -> Self {
        let mut v = vars.to_vec();
        v.sort_unstable();
        Term(v)
    }

    /// Evaluates on a 1-based value slice (`vals[j]` is `X_j`).
    pub fn eval(&self, vals: &[f64]) -> f64 {
        self.0.iter().map(|&j| vals[j]).product()
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        let mut i = 0;
        while i < self.0.len() {
            let j = self.0[i];
            let run = self.0[i..].iter().take_while(|&&x| x == j).count();
            if !first {
                f.write_str("*")?;
            }
            first = false;
            if run > 1 {
                write!(f, "X{j}^{run}")?;
            } else {
                write!(f, "X{j}")?;
            }
            i += run;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MomentSpec {
    /// `E(X_j)`.
    Mean(usize),
    /// Least squares of `X_outcome` on an intercept plus `terms`.
    LinReg { outcome: usize, terms: Vec<Term> },
    /// Augmented IPW mean of `X_outcome` had the binary `X_treatment` been set
    /// to `level`, adjusting for `adjust`. Parameters are the treatment
    /// logistic model, the outcome regression, then the mean.
    CounterfactualMean { treatment: usize, level: u8, outcome: usize, adjust: Vec<usize> },
}

impl MomentSpec {
    /// Variables that must be observed for `M` to be evaluable.
    pub fn required_vars(&self) -> BTreeSet<usize> {
        match self {
            MomentSpec::Mean(j) => BTreeSet::from([*j]),
            MomentSpec::LinReg { outcome, terms } => {
                let mut s: BTreeSet<usize> = terms.iter().flat_map(|t| t.0.iter().copied()).collect();
                s.insert(*outcome);
                s
            }
            MomentSpec::CounterfactualMean { treatment, outcome, adjust, .. } => {
                let mut s: BTreeSet<usize> = adjust.iter().copied().collect();
                s.insert(*treatment);
                s.insert(*outcome);
                s
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            MomentSpec::Mean(_) => 1,
            MomentSpec::LinReg { terms, .. } => 1 + terms.len(),
            MomentSpec::CounterfactualMean { adjust, .. } => (1 + adjust.len()) + (2 + adjust.len()) + 1,
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            MomentSpec::Mean(j) => vec![format!("E(X{j})")],
            MomentSpec::LinReg { terms, .. } => {
                std::iter::once("(Intercept)".to_string()).chain(terms.iter().map(Term::to_string)).collect()
            }
            MomentSpec::CounterfactualMean { treatment, level, outcome, adjust } => {
                let mut names = vec!["trt:(Intercept)".to_string()];
                names.extend(adjust.iter().map(|a| format!("trt:X{a}")));
                names.push("out:(Intercept)".into());
                names.push(format!("out:X{treatment}"));
                names.extend(adjust.iter().map(|a| format!("out:X{a}")));
                names.push(format!("E(X{outcome}|do(X{treatment}={level}))"));
                names
            }
        }
    }

    /// Index of the headline parameter (the mean, or the last regressor).
    pub fn focus_index(&self) -> usize {
        self.dim() - 1
    }

    fn check(&self, k: usize) -> Result<(), String> {
        let vars = self.required_vars();
        if let Some(bad) = vars.iter().find(|&&j| j == 0 || j > k) {
            return Err(format!("X{bad} is not in a {k}-variable graph"));
        }
        if let MomentSpec::CounterfactualMean { treatment, level, outcome, adjust } = self {
            if *level > 1 {
                return Err("treatment level must be 0 or 1".into());
            }
            if treatment == outcome || adjust.contains(treatment) || adjust.contains(outcome) {
                return Err("treatment, outcome and adjustment variables must be distinct".into());
            }
        }
        if let MomentSpec::LinReg { outcome, terms } = self {
            if terms.iter().any(|t| t.0.contains(outcome)) {
                return Err(format!("outcome X{outcome} appears among the regressors"));
            }
        }
        Ok(())
    }

    pub fn validate(&self, k: usize) -> Result<(), String> {
        self.check(k)
    }

    /// Writes `M(vals; θ)` into `out`. `vals` is 1-based.
    pub fn eval_into(&self, vals: &[f64], theta: &[f64], out: &mut [f64]) {
        match self {
            MomentSpec::Mean(j) => out[0] = vals[*j] - theta[0],
            MomentSpec::LinReg { outcome, terms } => {
                let mut fit = theta[0];
                for (t, b) in terms.iter().zip(&theta[1..]) {
                    fit += b * t.eval(vals);
                }
                let resid = vals[*outcome] - fit;
                out[0] = resid;
                for (o, t) in out[1..].iter_mut().zip(terms) {
                    *o = t.eval(vals) * resid;
                }
            }
            MomentSpec::CounterfactualMean { treatment, level, outcome, adjust } => {
                let q = adjust.len();
                let (alpha, rest) = theta.split_at(1 + q);
                let (gamma, mu) = rest.split_at(2 + q);
                let a = vals[*treatment];
                let y = vals[*outcome];
                let mut lin = alpha[0];
                let mut reg = gamma[0];
                for (n, &c) in adjust.iter().enumerate() {
                    lin += alpha[1 + n] * vals[c];
                    reg += gamma[2 + n] * vals[c];
                }
                let e = expit(lin);
                let fitted_obs = reg + gamma[1] * a;
                let fitted_level = reg + gamma[1] * f64::from(*level);
                out[0] = a - e;
                for (n, &c) in adjust.iter().enumerate() {
                    out[1 + n] = vals[c] * (a - e);
                }
                let r = y - fitted_obs;
                out[1 + q] = r;
                out[2 + q] = a * r;
                for (n, &c) in adjust.iter().enumerate() {
                    out[3 + q + n] = vals[c] * r;
                }
                let (hit, prob) = if *level == 1 { (a, e) } else { (1.0 - a, 1.0 - e) };
                out[3 + 2 * q] = hit / prob * (y - fitted_level) + fitted_level - mu[0];
            }
        }
    }

    pub fn eval(&self, vals: &[f64], theta: &Vector) -> Vector {
        let mut out = Vector::zeros(self.dim());
        self.eval_into(vals, theta.as_slice(), out.as_mut_slice());
        out
    }
}

impl fmt::Display for MomentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MomentSpec::Mean(j) => write!(f, "mean:X{j}"),
            MomentSpec::LinReg { outcome, terms } => {
                let rhs: Vec<String> = terms.iter().map(Term::to_string).collect();
                write!(f, "linreg:X{outcome}~{}", if rhs.is_empty() { "1".into() } else { rhs.join("+") })
            }
            MomentSpec::CounterfactualMean { treatment, level, outcome, adjust } => {
                let adj: Vec<String> = adjust.iter().map(|a| format!("X{a}")).collect();
                write!(f, "cfmean:X{treatment}={level}->X{outcome}|adj={}", adj.join("+"))
            }
        }
    }
}

fn parse_var(s: &str) -> Result<usize, String> {
    let s = s.trim();
    s.strip_prefix('X')
        .filter(|d| !d.is_empty() && !d.starts_with('0') && d.bytes().all(|b| b.is_ascii_digit()))
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| format!("expected a variable like X3, found `{s}`"))
}

fn parse_term(s: &str) -> Result<Term, String> {
    let mut vars = Vec::new();
    for factor in s.split('*') {
        let (name, power) = match factor.split_once('^') {
            Some((n, p)) => (n, p.trim().parse::<usize>().map_err(|_| format!("bad power in `{factor}`"))?),
            None => (factor, 1),
        };
        if power == 0 {
            return Err(format!("zero power in `{factor}`"));
        }
        let j = parse_var(name)?;
        vars.extend(std::iter::repeat_n(j, power));
    }
    Ok(Term::product(&vars))
}

impl FromStr for MomentSpec {
    type Err = String;

    /// `mean:X3`, `linreg:X3~X1+X2+X1*X2+X2^2`, `cfmean:X2=1->X3|adj=X1`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, body) = s.split_once(':').ok_or("moment must look like kind:spec")?;
        match kind.trim() {
            "mean" => Ok(MomentSpec::Mean(parse_var(body)?)),
            "linreg" => {
                let (lhs, rhs) = body.split_once('~').ok_or("linreg needs `outcome~terms`")?;
                let outcome = parse_var(lhs)?;
                let terms = if rhs.trim() == "1" {
                    Vec::new()
                } else {
                    rhs.split('+').map(|t| parse_term(t.trim())).collect::<Result<Vec<_>, _>>()?
                };
                Ok(MomentSpec::LinReg { outcome, terms })
            }
            "cfmean" => {
                let (main, adj) = match body.split_once('|') {
                    Some((m, a)) => (m, Some(a)),
                    None => (body, None),
                };
                let (assign, out) = main.split_once("->").ok_or("cfmean needs `Xt=level->Xy`")?;
                let (t, level) = assign.split_once('=').ok_or("cfmean needs `Xt=level`")?;
                let level: u8 = level.trim().parse().map_err(|_| format!("bad treatment level `{level}`"))?;
                let adjust = match adj {
                    None => Vec::new(),
                    Some(a) => {
                        let list = a.trim().strip_prefix("adj=").ok_or("adjustment must look like adj=X1+X4")?;
                        list.split(['+', ',']).filter(|x| !x.trim().is_empty()).map(parse_var).collect::<Result<_, _>>()?
                    }
                };
                Ok(MomentSpec::CounterfactualMean { treatment: parse_var(t)?, level, outcome: parse_var(out)?, adjust })
            }
            other => Err(format!("unknown moment kind `{other}`")),
        }
    }
}
