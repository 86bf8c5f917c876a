//! Response-observation propensity `π(x) = P(δ = 1 | X = x)` and the inverse
//! probability weights derived from it.
//!
//! The propensity model is a logistic regression on a per-covariate basis
//! expansion: continuous covariates get a cubic B-spline basis, binary ones
//! enter linearly and constant ones are dropped. With
//! [`BasisSpec::Identity`] it is plain logistic regression.
//!
//! The weights only correct for missingness that is at random given the
//! covariates (`Y ⊥ δ | X`). Nothing here can detect a violation of that.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bspline::CubicBSpline;
use crate::error::{Error, Result};

const MAX_NEWTON_ITERS: usize = 50;
const GRAD_TOL: f64 = 1e-8;
const HESSIAN_JITTER: f64 = 1e-6;
const MAX_HALVINGS: usize = 30;

/// Requested per-covariate expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisSpec {
    Identity,
    Bspline { df: usize },
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec::Bspline { df: 5 }
    }
}

impl fmt::Display for BasisSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BasisSpec::Identity => write!(f, "identity"),
            BasisSpec::Bspline { df } => write!(f, "bspline:{df}"),
        }
    }
}

impl FromStr for BasisSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "identity" {
            return Ok(BasisSpec::Identity);
        }
        let df = s
            .strip_prefix("bspline:")
            .and_then(|d| d.parse::<usize>().ok())
            .ok_or_else(|| Error::Parse(format!("unknown propensity basis '{s}'")))?;
        if df < 3 {
            return Err(Error::InvalidArgument("bspline df must be >= 3".into()));
        }
        Ok(BasisSpec::Bspline { df })
    }
}

/// Expansion chosen for one covariate at fit time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnBasis {
    Dropped,
    Linear,
    Spline(CubicBSpline),
}

impl ColumnBasis {
    fn ncols(&self) -> usize {
        match self {
            ColumnBasis::Dropped => 0,
            ColumnBasis::Linear => 1,
            ColumnBasis::Spline(b) => b.ncols(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedBasis {
    pub spec: BasisSpec,
    pub columns: Vec<ColumnBasis>,
}

impl FittedBasis {
    pub fn identity(p: usize) -> Self {
        Self {
            spec: BasisSpec::Identity,
            columns: vec![ColumnBasis::Linear; p],
        }
    }

    fn from_data(x: &DMatrix<f64>, spec: BasisSpec) -> Self {
        let columns = (0..x.ncols())
            .map(|j| {
                let col: Vec<f64> = x.column(j).iter().copied().collect();
                let (min, max) = col
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                        (a.min(v), b.max(v))
                    });
                if min == max {
                    return ColumnBasis::Dropped;
                }
                let binary = col.iter().all(|&v| v == 0.0 || v == 1.0);
                match spec {
                    BasisSpec::Bspline { df } if !binary => {
                        let b = CubicBSpline::from_sample(&col, df);
                        if b.ncols() == 0 {
                            ColumnBasis::Linear
                        } else {
                            ColumnBasis::Spline(b)
                        }
                    }
                    _ => ColumnBasis::Linear,
                }
            })
            .collect();
        Self { spec, columns }
    }

    /// Width of the expanded design including the intercept.
    pub fn width(&self) -> usize {
        1 + self.columns.iter().map(ColumnBasis::ncols).sum::<usize>()
    }

    pub fn expand_row(&self, x: &[f64], out: &mut Vec<f64>) -> Result<()> {
        if x.len() != self.columns.len() {
            return Err(Error::DimensionMismatch {
                expected: self.columns.len(),
                got: x.len(),
            });
        }
        out.push(1.0);
        for (c, &v) in self.columns.iter().zip(x) {
            match c {
                ColumnBasis::Dropped => {}
                ColumnBasis::Linear => out.push(v),
                ColumnBasis::Spline(b) => b.eval(v, out),
            }
        }
        Ok(())
    }

    pub fn expand(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let width = self.width();
        let mut data = Vec::with_capacity(x.nrows() * width);
        let mut row = Vec::with_capacity(x.ncols());
        for i in 0..x.nrows() {
            row.clear();
            row.extend(x.row(i).iter());
            self.expand_row(&row, &mut data)?;
        }
        Ok(DMatrix::from_row_slice(x.nrows(), width, &data))
    }
}

/// Fitted propensity model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityFit {
    pub basis: FittedBasis,
    pub coefficients: Vec<f64>,
    pub clip_bounds: (f64, f64),
    pub iterations: usize,
}

pub const DEFAULT_CLIP: (f64, f64) = (0.01, 0.99);

fn validate_clip((lo, hi): (f64, f64)) -> Result<()> {
    if 0.0 < lo && lo < hi && hi < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "clip bounds must satisfy 0 < lo < hi < 1, got ({lo}, {hi})"
        )))
    }
}

impl PropensityFit {
    pub fn from_parts(
        basis: FittedBasis,
        coefficients: Vec<f64>,
        clip_bounds: (f64, f64),
    ) -> Result<Self> {
        validate_clip(clip_bounds)?;
        if coefficients.len() != basis.width() {
            return Err(Error::DimensionMismatch {
                expected: basis.width(),
                got: coefficients.len(),
            });
        }
        Ok(Self {
            basis,
            coefficients,
            clip_bounds,
            iterations: 0,
        })
    }

    pub fn linear_predictor(&self, x: &[f64]) -> Result<f64> {
        let mut row = Vec::with_capacity(self.coefficients.len());
        self.basis.expand_row(x, &mut row)?;
        Ok(row.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum())
    }

    /// `σ(basis(x)·coef)` clipped to the fit's bounds.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let (lo, hi) = self.clip_bounds;
        Ok(sigmoid(self.linear_predictor(x)?).clamp(lo, hi))
    }

    pub fn predict_all(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        let mut row = Vec::with_capacity(x.ncols());
        (0..x.nrows())
            .map(|i| {
                row.clear();
                row.extend(x.row(i).iter());
                self.predict(&row)
            })
            .collect()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn mean_log_likelihood(design: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>) -> f64 {
    let eta = design * beta;
    let n = y.len() as f64;
    eta.iter()
        .zip(y)
        .map(|(&e, &d)| -(d * softplus(-e) + (1.0 - d) * softplus(e)))
        .sum::<f64>()
        / n
}

/// Fits the propensity model on binary observation flags by Newton's method
/// with step-halving.
pub fn fit_propensity(x: &DMatrix<f64>, delta: &[bool], basis: BasisSpec) -> Result<PropensityFit> {
    fit_propensity_with(x, delta, basis, DEFAULT_CLIP)
}

pub fn fit_propensity_with(
    x: &DMatrix<f64>,
    delta: &[bool],
    basis: BasisSpec,
    clip_bounds: (f64, f64),
) -> Result<PropensityFit> {
    newton_fit(x, delta, basis, clip_bounds, MAX_NEWTON_ITERS)
}

fn newton_fit(
    x: &DMatrix<f64>,
    delta: &[bool],
    basis: BasisSpec,
    clip_bounds: (f64, f64),
    max_iters: usize,
) -> Result<PropensityFit> {
    validate_clip(clip_bounds)?;
    let n = x.nrows();
    if delta.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: delta.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let observed = delta.iter().filter(|&&d| d).count();
    if observed == 0 || observed == n {
        return Err(Error::DegenerateResponse);
    }
    let fitted = FittedBasis::from_data(x, basis);
    let design = fitted.expand(x)?;
    let k = design.ncols();
    if n < k + 1 {
        return Err(Error::InsufficientRows {
            need: k + 1,
            have: n,
        });
    }
    let y: Vec<f64> = delta.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect();
    let yv = DVector::from_column_slice(&y);
    let rate = observed as f64 / n as f64;

    let mut beta = DVector::<f64>::zeros(k);
    beta[0] = (rate / (1.0 - rate)).ln();
    let mut ll = mean_log_likelihood(&design, &y, &beta);

    for iter in 0..max_iters {
        let eta = &design * &beta;
        let p = eta.map(sigmoid);
        let grad = design.tr_mul(&(&yv - &p)) / n as f64;
        if grad.amax() < GRAD_TOL {
            return Ok(PropensityFit {
                basis: fitted,
                coefficients: beta.iter().copied().collect(),
                clip_bounds,
                iterations: iter,
            });
        }
        let mut weighted = design.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= p[i] * (1.0 - p[i]);
        }
        let hessian = design.tr_mul(&weighted) / n as f64;
        let chol = Cholesky::new(hessian.clone())
            .or_else(|| Cholesky::new(hessian + DMatrix::identity(k, k) * HESSIAN_JITTER))
            .ok_or(Error::DegenerateDesign)?;
        let step = chol.solve(&grad);

        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let candidate = &beta + &step * t;
            let cand_ll = mean_log_likelihood(&design, &y, &candidate);
            if cand_ll >= ll - 1e-15 {
                beta = candidate;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Err(Error::NonConvergence {
        solver: "propensity newton",
        iterations: max_iters,
        last_iterate: beta.iter().copied().collect(),
    })
}

/// Inverse-probability weights; zero exactly on unobserved rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpwWeights {
    pub w: Vec<f64>,
    /// `true`: weights sum to one. `false`: `δ_i / (n π̂_i)`.
    pub normalized: bool,
}

impl IpwWeights {
    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// Unit weights on observed rows, as for a complete-case fit.
    pub fn uniform(delta: &[bool]) -> Self {
        Self {
            w: delta.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect(),
            normalized: false,
        }
    }
}

pub fn ipw_weights(delta: &[bool], pihat: &[f64], normalized: bool) -> Result<IpwWeights> {
    if delta.len() != pihat.len() {
        return Err(Error::DimensionMismatch {
            expected: delta.len(),
            got: pihat.len(),
        });
    }
    if pihat.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::InvalidArgument(
            "propensities must lie in (0, 1]".into(),
        ));
    }
    if !delta.iter().any(|&d| d) {
        return Err(Error::NoObservedResponses);
    }
    let n = delta.len() as f64;
    let raw: Vec<f64> = delta
        .iter()
        .zip(pihat)
        .map(|(&d, &p)| if d { 1.0 / p } else { 0.0 })
        .collect();
    let w = if normalized {
        let total: f64 = raw.iter().sum();
        raw.iter().map(|r| r / total).collect()
    } else {
        raw.iter().map(|r| r / n).collect()
    };
    Ok(IpwWeights { w, normalized })
}
