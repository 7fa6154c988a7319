//! Weighted linear estimating equations for pseudo-observations, with a
//! subject-clustered sandwich covariance.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::event_data::Covariates;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl Op {
    fn apply(self, a: f64, b: f64) -> bool {
        match self {
            Op::Eq => a == b,
            Op::Ne => a != b,
            Op::Lt => a < b,
            Op::Le => a <= b,
            Op::Gt => a > b,
            Op::Ge => a >= b,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Factor {
    Intercept,
    Var(String),
    Indicator { var: String, op: Op, value: f64 },
}

/// A design column: a product of factors such as `z1*I(z3>=0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub name: String,
    pub factors: Vec<Factor>,
}

fn parse_factor(raw: &str) -> Result<Factor> {
    let s = raw.trim();
    let bad = || Error::Config(format!("cannot parse model term factor `{s}`"));
    if s == "1" {
        return Ok(Factor::Intercept);
    }
    if let Some(inner) = s.strip_prefix("I(").and_then(|r| r.strip_suffix(')')) {
        for (tok, op) in [
            ("==", Op::Eq),
            ("!=", Op::Ne),
            ("<=", Op::Le),
            (">=", Op::Ge),
            ("<", Op::Lt),
            (">", Op::Gt),
        ] {
            if let Some((var, value)) = inner.split_once(tok) {
                let var = var.trim();
                let value: f64 = value.trim().parse().map_err(|_| bad())?;
                if var.is_empty() || !value.is_finite() {
                    return Err(bad());
                }
                return Ok(Factor::Indicator { var: var.to_string(), op, value });
            }
        }
        return Err(bad());
    }
    if s.is_empty() || !s.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '.') {
        return Err(bad());
    }
    Ok(Factor::Var(s.to_string()))
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let factors = split_top_level(s, '*')
            .into_iter()
            .map(parse_factor)
            .collect::<Result<Vec<_>>>()?;
        let name = s.chars().filter(|c| !c.is_whitespace()).collect();
        Ok(Term { name, factors })
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

fn split_top_level(s: &str, sep: char) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            c if c == sep && depth == 0 => {
                out.push(&s[start..i]);
                start = i + c.len_utf8();
            }
            _ => {}
        }
    }
    out.push(&s[start..]);
    out
}

impl Term {
    /// Evaluates the term for one row. The name `t` resolves to the window
    /// start unless a covariate of that name exists.
    pub fn eval(&self, covariates: &Covariates, t: f64) -> Result<f64> {
        let get = |name: &str| -> Result<f64> {
            covariates
                .get(name)
                .copied()
                .or((name == "t").then_some(t))
                .ok_or_else(|| Error::MissingCovariate(name.to_string()))
        };
        let mut v = 1.0;
        for f in &self.factors {
            v *= match f {
                Factor::Intercept => 1.0,
                Factor::Var(name) => get(name)?,
                Factor::Indicator { var, op, value } => f64::from(u8::from(op.apply(get(var)?, *value))),
            };
        }
        Ok(v)
    }

    /// Covariate names the term reads.
    pub fn variables(&self) -> impl Iterator<Item = &str> {
        self.factors.iter().filter_map(|f| match f {
            Factor::Intercept => None,
            Factor::Var(v) | Factor::Indicator { var: v, .. } => Some(v.as_str()),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkingCorrelation {
    #[default]
    Independence,
    Unstructured,
}

impl fmt::Display for WorkingCorrelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WorkingCorrelation::Independence => "independence",
            WorkingCorrelation::Unstructured => "unstructured",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub terms: Vec<Term>,
    pub correlation: WorkingCorrelation,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl ModelSpec {
    pub fn new(terms: &[&str], correlation: WorkingCorrelation) -> Result<Self> {
        let terms = terms.iter().map(|t| t.parse()).collect::<Result<Vec<Term>>>()?;
        if terms.is_empty() {
            return Err(Error::Config("model needs at least one term".into()));
        }
        Ok(ModelSpec { terms, correlation, tolerance: 1e-8, max_iter: 100 })
    }

    /// Parses `"1 + z1 + z1*I(z3>=0)"`.
    pub fn from_formula(formula: &str, correlation: WorkingCorrelation) -> Result<Self> {
        let parts: Vec<&str> = split_top_level(formula, '+').into_iter().map(str::trim).collect();
        Self::new(&parts, correlation)
    }

    pub fn term_names(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.name.clone()).collect()
    }

    pub fn design_row(&self, covariates: &Covariates, t: f64) -> Result<Vec<f64>> {
        self.terms.iter().map(|term| term.eval(covariates, t)).collect()
    }
}

/// One at-risk row entering the fit.
#[derive(Clone, Debug, PartialEq)]
pub struct GeeRow {
    /// Cluster (subject) label.
    pub cluster: String,
    /// Window position, used to index the working correlation.
    pub window: usize,
    pub y: f64,
    /// `R/π̂`.
    pub weight: f64,
    pub x: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub terms: Vec<String>,
    pub estimate: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub se: Vec<f64>,
    pub ci_lo: Vec<f64>,
    pub ci_hi: Vec<f64>,
    pub p_value: Vec<f64>,
    pub n_subjects: usize,
    pub n_rows: usize,
    pub correlation: WorkingCorrelation,
    pub working_correlation: Option<DMatrix<f64>>,
    pub converged: bool,
    pub iterations: usize,
    /// The pairwise correlation estimate was not positive definite and was
    /// replaced by the nearest correlation matrix.
    pub projected: bool,
}

impl FitResult {
    pub fn coefficient(&self, term: &str) -> Option<f64> {
        self.terms.iter().position(|t| t == term).map(|k| self.estimate[k])
    }
}

pub const Z_975: f64 = 1.959_963_984_540_054;

struct Cluster {
    x: DMatrix<f64>,
    y: DVector<f64>,
    w: DVector<f64>,
    windows: Vec<usize>,
}

fn group(rows: &[GeeRow], p: usize) -> Result<Vec<Cluster>> {
    let mut by: BTreeMap<&str, Vec<&GeeRow>> = BTreeMap::new();
    for r in rows {
        if r.x.len() != p {
            return Err(Error::InvalidInput(format!("design row has {} columns, expected {p}", r.x.len())));
        }
        if !(r.y.is_finite() && r.weight.is_finite() && r.weight > 0.0) || r.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "row for subject {} at window {} has a non-finite value or non-positive weight",
                r.cluster, r.window
            )));
        }
        by.entry(&r.cluster).or_default().push(r);
    }
    Ok(by
        .into_values()
        .map(|mut rs| {
            rs.sort_by_key(|r| r.window);
            let m = rs.len();
            Cluster {
                x: DMatrix::from_fn(m, p, |i, j| rs[i].x[j]),
                y: DVector::from_fn(m, |i, _| rs[i].y),
                w: DVector::from_fn(m, |i, _| rs[i].weight),
                windows: rs.iter().map(|r| r.window).collect(),
            }
        })
        .collect())
}

fn check_rank(a: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.max();
    let tol = max * 1e-10 * a.nrows() as f64;
    if !(max > 0.0) || sv.iter().any(|&s| s <= tol) {
        return Err(Error::RankDeficient(format!("terms: {}", names.join(", "))));
    }
    Ok(())
}

/// Solves `Σ_i X_iᵀ V_i⁻¹ W_i (y_i − X_i β) = 0`.
///
/// With independence working correlation this is weighted least squares.
/// With unstructured correlation the window-by-window correlation is
/// re-estimated from weighted residuals until the coefficients settle.
pub fn fit_weighted_gee(rows: &[GeeRow], spec: &ModelSpec) -> Result<FitResult> {
    let p = spec.terms.len();
    let names = spec.term_names();
    let clusters = group(rows, p)?;
    if clusters.len() < p + 1 {
        return Err(Error::TooFewSubjects { needed: p + 1, have: clusters.len() });
    }
    let n_windows = rows.iter().map(|r| r.window + 1).max().unwrap_or(0);

    let mut corr: Option<DMatrix<f64>> = None;
    let mut beta = solve(&clusters, None, p)?;
    let mut converged = true;
    let mut iterations = 0;
    let mut projected = false;
    if spec.correlation == WorkingCorrelation::Unstructured {
        converged = false;
        for it in 1..=spec.max_iter {
            iterations = it;
            let (r, proj) = estimate_correlation(&clusters, &beta, n_windows);
            projected |= proj;
            let next = solve(&clusters, Some(&r), p)?;
            let delta = (&next - &beta).amax();
            beta = next;
            corr = Some(r);
            if delta < spec.tolerance {
                converged = true;
                break;
            }
        }
        if !converged {
            log::warn!("unstructured fit did not converge in {} iterations", spec.max_iter);
        }
    }
    let a = bread(&clusters, corr.as_ref(), p);
    check_rank(&a, &names)?;
    let a_inv = a.clone().try_inverse().ok_or_else(|| Error::RankDeficient(names.join(", ")))?;
    let mut meat = DMatrix::zeros(p, p);
    for c in &clusters {
        let u = score(c, corr.as_ref(), &beta);
        meat += &u * u.transpose();
    }
    let cov = &a_inv * meat * a_inv.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;

    let normal = Normal::standard();
    let se: Vec<f64> = (0..p).map(|k| cov[(k, k)].max(0.0).sqrt()).collect();
    let estimate: Vec<f64> = beta.iter().copied().collect();
    let p_value = estimate
        .iter()
        .zip(&se)
        .map(|(b, s)| {
            if *s > 0.0 {
                2.0 * normal.sf((b / s).abs())
            } else {
                f64::NAN
            }
        })
        .collect();
    Ok(FitResult {
        terms: names,
        ci_lo: estimate.iter().zip(&se).map(|(b, s)| b - Z_975 * s).collect(),
        ci_hi: estimate.iter().zip(&se).map(|(b, s)| b + Z_975 * s).collect(),
        estimate,
        covariance: cov,
        se,
        p_value,
        n_subjects: clusters.len(),
        n_rows: rows.len(),
        correlation: spec.correlation,
        working_correlation: corr,
        converged,
        iterations,
        projected,
    })
}

/// `V_i⁻¹` for a cluster, or `None` for independence.
fn inverse_working(c: &Cluster, corr: Option<&DMatrix<f64>>) -> Option<DMatrix<f64>> {
    let r = corr?;
    let m = c.windows.len();
    let sub = DMatrix::from_fn(m, m, |i, j| r[(c.windows[i], c.windows[j])]);
    Some(
        sub.clone()
            .cholesky()
            .map(|ch| ch.inverse())
            .unwrap_or_else(|| sub.pseudo_inverse(1e-12).expect("svd")),
    )
}

/// `X_iᵀ V_i⁻¹ W_i`.
fn weighted_xt(c: &Cluster, corr: Option<&DMatrix<f64>>) -> DMatrix<f64> {
    let mut xt = c.x.transpose();
    if let Some(vinv) = inverse_working(c, corr) {
        xt = xt * vinv;
    }
    for (j, w) in c.w.iter().enumerate() {
        xt.column_mut(j).scale_mut(*w);
    }
    xt
}

fn bread(clusters: &[Cluster], corr: Option<&DMatrix<f64>>, p: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(p, p);
    for c in clusters {
        a += weighted_xt(c, corr) * &c.x;
    }
    a
}

fn score(c: &Cluster, corr: Option<&DMatrix<f64>>, beta: &DVector<f64>) -> DVector<f64> {
    weighted_xt(c, corr) * (&c.y - &c.x * beta)
}

fn solve(clusters: &[Cluster], corr: Option<&DMatrix<f64>>, p: usize) -> Result<DVector<f64>> {
    let mut a = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    for c in clusters {
        let xt = weighted_xt(c, corr);
        a += &xt * &c.x;
        b += &xt * &c.y;
    }
    let names: Vec<String> = (0..p).map(|k| format!("column {k}")).collect();
    check_rank(&a, &names)?;
    a.lu().solve(&b).ok_or_else(|| Error::RankDeficient("singular estimating equations".into()))
}

/// Pairwise available-case correlation of weighted residuals between
/// windows. Returns the matrix and whether it had to be projected.
fn estimate_correlation(clusters: &[Cluster], beta: &DVector<f64>, k: usize) -> (DMatrix<f64>, bool) {
    let mut cross = DMatrix::<f64>::zeros(k, k);
    let mut sq_a = DMatrix::<f64>::zeros(k, k);
    let mut sq_b = DMatrix::<f64>::zeros(k, k);
    let mut n_pair = DMatrix::<f64>::zeros(k, k);
    for c in clusters {
        let e = &c.y - &c.x * beta;
        for a in 0..e.len() {
            for b in (a + 1)..e.len() {
                let (ja, jb) = (c.windows[a], c.windows[b]);
                let wt = (c.w[a] * c.w[b]).sqrt();
                cross[(ja, jb)] += wt * e[a] * e[b];
                sq_a[(ja, jb)] += wt * e[a] * e[a];
                sq_b[(ja, jb)] += wt * e[b] * e[b];
                n_pair[(ja, jb)] += 1.0;
            }
        }
    }
    let mut r = DMatrix::<f64>::identity(k, k);
    for a in 0..k {
        for b in (a + 1)..k {
            let n = n_pair[(a, b)];
            let denom = (sq_a[(a, b)] * sq_b[(a, b)]).sqrt();
            let rho = if n >= 2.0 && denom > 0.0 {
                (cross[(a, b)] / denom * n / (n - 1.0)).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            r[(a, b)] = rho;
            r[(b, a)] = rho;
        }
    }
    let min_eig = r.clone().symmetric_eigen().eigenvalues.min();
    if min_eig > 1e-6 {
        (r, false)
    } else {
        (nearest_correlation(&r, 1e-6), true)
    }
}

/// Nearest correlation matrix by alternating projections with Dykstra's
/// correction, followed by an eigenvalue floor so the result is invertible.
pub fn nearest_correlation(a: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let clip_psd = |m: &DMatrix<f64>, lo: f64| {
        let sym = (m + m.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let vals = eig.eigenvalues.map(|v| v.max(lo));
        &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
    };
    let mut y = a.clone();
    let mut ds = DMatrix::zeros(n, n);
    for _ in 0..500 {
        let r = &y - &ds;
        let x = clip_psd(&r, 0.0);
        ds = &x - &r;
        let mut next = x;
        for i in 0..n {
            next[(i, i)] = 1.0;
        }
        let change = (&next - &y).amax();
        y = next;
        if change < 1e-12 {
            break;
        }
    }
    let x = clip_psd(&y, floor);
    let d = x.diagonal().map(|v| 1.0 / v.sqrt());
    let mut out = DMatrix::from_diagonal(&d) * x * DMatrix::from_diagonal(&d);
    for i in 0..n {
        out[(i, i)] = 1.0;
    }
    out
}

/// One row of an oracle weighting check.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleRow {
    pub cluster: String,
    pub stratum: String,
    pub at_risk: bool,
    /// Pseudo-observation; ignored when not at risk.
    pub po: f64,
    pub pi: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StratumCheck {
    pub stratum: String,
    pub estimate: f64,
    pub se: f64,
    pub reference: f64,
    pub reference_se: f64,
    pub z: f64,
}

/// Compares the mean of `R·PO/π` in each stratum with a reference value of
/// `E[min(T, τ)]` for that stratum. Standard errors for the estimate are
/// clustered by subject.
pub fn oracle_weight_check(rows: &[OracleRow], reference: &BTreeMap<String, (f64, f64)>) -> Vec<StratumCheck> {
    let mut by: BTreeMap<&str, BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        let v = if r.at_risk { r.po / r.pi } else { 0.0 };
        by.entry(&r.stratum).or_default().entry(&r.cluster).or_default().push(v);
    }
    by.into_iter()
        .filter_map(|(stratum, clusters)| {
            let &(reference, reference_se) = reference.get(stratum)?;
            let n: usize = clusters.values().map(Vec::len).sum();
            let mean = clusters.values().flatten().sum::<f64>() / n as f64;
            let var: f64 = clusters
                .values()
                .map(|vs| vs.iter().map(|v| v - mean).sum::<f64>().powi(2))
                .sum();
            let se = var.sqrt() / n as f64;
            let z = (mean - reference) / (se * se + reference_se * reference_se).sqrt();
            Some(StratumCheck {
                stratum: stratum.to_string(),
                estimate: mean,
                se,
                reference,
                reference_se,
                z,
            })
        })
        .collect()
}
