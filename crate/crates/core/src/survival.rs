//! Downstream survival evaluation: functional PCA of quantile curves, a
//! linear Cox proportional-hazards model, and Harrell's concordance index.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::SurvivalRecord;
use crate::error::{Error, Result};
use crate::quantile::ProbGrid;

pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 0.98;

/// How many components to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Retain {
    /// Smallest `k` whose cumulative explained variance reaches the fraction.
    VarianceFraction(f64),
    Fixed(usize),
}

impl Default for Retain {
    fn default() -> Self {
        Retain::VarianceFraction(DEFAULT_VARIANCE_THRESHOLD)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpcBasis {
    pub grid: ProbGrid,
    pub mean_fn: Vec<f64>,
    /// `k` rows, each orthonormal under the grid quadrature.
    pub eigenfunctions: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub variance_explained: Vec<f64>,
    /// Sum of all eigenvalues, including the discarded ones.
    pub total_variance: f64,
}

impl FpcBasis {
    pub fn k(&self) -> usize {
        self.eigenfunctions.len()
    }

    /// Quadrature inner products of the centered curve with each component.
    pub fn scores(&self, curve: &[f64]) -> Result<Vec<f64>> {
        if curve.len() != self.grid.len() {
            return Err(Error::GridMismatch);
        }
        let w = self.grid.weights();
        Ok(self
            .eigenfunctions
            .iter()
            .map(|phi| {
                (0..curve.len())
                    .map(|t| w[t] * (curve[t] - self.mean_fn[t]) * phi[t])
                    .sum()
            })
            .collect())
    }

    pub fn reconstruct(&self, scores: &[f64]) -> Vec<f64> {
        let mut out = self.mean_fn.clone();
        for (phi, s) in self.eigenfunctions.iter().zip(scores) {
            for (o, p) in out.iter_mut().zip(phi) {
                *o += s * p;
            }
        }
        out
    }
}

/// Functional PCA of curves sampled on a shared grid. The covariance uses
/// the `1/n` normalization; the discretized operator is symmetrized with the
/// square-root quadrature weights before the eigendecomposition.
pub fn fpca(
    curves: &[&[f64]],
    grid: &ProbGrid,
    retain: Retain,
) -> Result<(FpcBasis, Vec<Vec<f64>>)> {
    let n = curves.len();
    let g = grid.len();
    if n < 2 {
        return Err(Error::InsufficientRows { need: 2, have: n });
    }
    if curves.iter().any(|c| c.len() != g) {
        return Err(Error::GridMismatch);
    }
    if let Retain::Fixed(k) = retain {
        if k > n || k > g {
            return Err(Error::InvalidArgument(format!(
                "requested {k} components from {n} curves on {g} grid points"
            )));
        }
    }
    if let Retain::VarianceFraction(f) = retain {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "variance fraction must lie in (0, 1], got {f}"
            )));
        }
    }
    let mean_fn: Vec<f64> = (0..g)
        .map(|t| curves.iter().map(|c| c[t]).sum::<f64>() / n as f64)
        .collect();
    let sqrt_w: Vec<f64> = grid.weights().iter().map(|w| w.sqrt()).collect();
    // rows of centered, root-weighted curves
    let centered = DMatrix::from_fn(n, g, |i, t| (curves[i][t] - mean_fn[t]) * sqrt_w[t]);
    let op = centered.tr_mul(&centered) / n as f64;
    let total_variance = op.trace();

    let eig = SymmetricEigen::new(op);
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambdas: Vec<f64> = order.iter().map(|&j| eig.eigenvalues[j].max(0.0)).collect();

    let rank_tol = 1e-12 * total_variance.max(f64::MIN_POSITIVE);
    let k = if total_variance <= 0.0 {
        0
    } else {
        match retain {
            Retain::Fixed(k) => k,
            Retain::VarianceFraction(f) => {
                let mut cum = 0.0;
                let mut k = 0;
                for &l in &lambdas {
                    if l <= rank_tol {
                        break;
                    }
                    cum += l;
                    k += 1;
                    if cum / total_variance >= f - 1e-12 {
                        break;
                    }
                }
                k
            }
        }
    };

    let mut eigenfunctions = Vec::with_capacity(k);
    for &j in order.iter().take(k) {
        let u = eig.eigenvectors.column(j);
        let mut phi: Vec<f64> = (0..g).map(|t| u[t] / sqrt_w[t]).collect();
        // sign convention: positive quadrature mass
        let mass: f64 = grid.integrate(&phi);
        if mass < 0.0 {
            phi.iter_mut().for_each(|v| *v = -*v);
        }
        eigenfunctions.push(phi);
    }
    let eigenvalues: Vec<f64> = lambdas[..k].to_vec();
    let variance_explained = if total_variance > 0.0 {
        eigenvalues.iter().map(|l| l / total_variance).collect()
    } else {
        Vec::new()
    };
    let basis = FpcBasis {
        grid: grid.clone(),
        mean_fn,
        eigenfunctions,
        eigenvalues,
        variance_explained,
        total_variance,
    };
    let scores = curves
        .iter()
        .map(|c| basis.scores(c))
        .collect::<Result<Vec<_>>>()?;
    Ok((basis, scores))
}

const COX_MAX_ITERS: usize = 100;
const COX_GRAD_TOL: f64 = 1e-8;
const COX_MAX_HALVINGS: usize = 40;
/// Largest admissible |β_j|·sd(z_j). Under monotone likelihood the Newton
/// iterates drift until the gradient underflows; a log hazard ratio of 30
/// per standard deviation only arises that way.
const COX_MAX_STANDARDIZED_COEF: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub coefficients: Vec<f64>,
    pub log_partial_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl CoxFit {
    /// Linear predictor `zᵀβ` for each row.
    pub fn risk_scores(&self, z: &DMatrix<f64>) -> Result<Vec<f64>> {
        if z.ncols() != self.coefficients.len() {
            return Err(Error::DimensionMismatch {
                expected: self.coefficients.len(),
                got: z.ncols(),
            });
        }
        let beta = DVector::from_column_slice(&self.coefficients);
        Ok((z * beta).iter().copied().collect())
    }
}

/// Breslow log partial likelihood with gradient and information matrix.
/// `order` lists rows by decreasing time.
fn breslow(
    z: &DMatrix<f64>,
    records: &[SurvivalRecord],
    order: &[usize],
    beta: &DVector<f64>,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let k = z.ncols();
    let eta = z * beta;
    let mut s0 = 0.0;
    let mut s1 = DVector::<f64>::zeros(k);
    let mut s2 = DMatrix::<f64>::zeros(k, k);
    let mut ll = 0.0;
    let mut grad = DVector::<f64>::zeros(k);
    let mut info = DMatrix::<f64>::zeros(k, k);
    let mut pos = 0;
    while pos < order.len() {
        let time = records[order[pos]].time;
        let mut end = pos;
        while end < order.len() && records[order[end]].time == time {
            end += 1;
        }
        // every subject with this time joins the risk set before its events count
        for &i in &order[pos..end] {
            let r = eta[i].exp();
            let zi = z.row(i).transpose();
            s0 += r;
            s1 += &zi * r;
            s2 += &zi * zi.transpose() * r;
        }
        let zbar = &s1 / s0;
        for &i in &order[pos..end] {
            if records[i].event {
                ll += eta[i] - s0.ln();
                grad += z.row(i).transpose() - &zbar;
                info += &s2 / s0 - &zbar * zbar.transpose();
            }
        }
        pos = end;
    }
    (ll, grad, info)
}

fn check_survival_inputs(z: &DMatrix<f64>, records: &[SurvivalRecord]) -> Result<()> {
    if z.nrows() != records.len() {
        return Err(Error::DimensionMismatch {
            expected: records.len(),
            got: z.nrows(),
        });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(())
}

/// Maximizes the Breslow partial likelihood by Newton's method with
/// step-halving. Covariates are centered internally; the returned
/// coefficients apply to the raw columns.
pub fn fit_cox(z: &DMatrix<f64>, records: &[SurvivalRecord]) -> Result<CoxFit> {
    check_survival_inputs(z, records)?;
    if !records.iter().any(|r| r.event) {
        return Err(Error::NoEvents);
    }
    let n = z.nrows();
    let k = z.ncols();
    let mut centered = z.clone();
    let mut sds = Vec::with_capacity(k);
    for j in 0..k {
        let col = z.column(j);
        let mean = col.mean();
        sds.push(col.variance().sqrt());
        if col.iter().all(|&v| v == col[0]) {
            return Err(Error::InvalidArgument(format!(
                "covariate column {j} is constant"
            )));
        }
        centered.column_mut(j).add_scalar_mut(-mean);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| records[b].time.total_cmp(&records[a].time));

    let mut beta = DVector::<f64>::zeros(k);
    let finish = |beta: &DVector<f64>, ll: f64, iterations: usize| {
        if beta
            .iter()
            .zip(&sds)
            .any(|(b, sd)| (b * sd).abs() > COX_MAX_STANDARDIZED_COEF)
        {
            return Err(Error::MonotoneLikelihood);
        }
        Ok(CoxFit {
            coefficients: beta.iter().copied().collect(),
            log_partial_likelihood: ll,
            converged: true,
            iterations,
        })
    };
    let (mut ll, mut grad, mut info) = breslow(&centered, records, &order, &beta);
    for iter in 0..COX_MAX_ITERS {
        if grad.amax() < COX_GRAD_TOL {
            return finish(&beta, ll, iter);
        }
        let chol = Cholesky::new(info.clone())
            .or_else(|| Cholesky::new(&info + DMatrix::identity(k, k) * 1e-8))
            .ok_or(Error::DegenerateDesign)?;
        let step = chol.solve(&grad);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..COX_MAX_HALVINGS {
            let cand = &beta + &step * t;
            let (cll, cgrad, cinfo) = breslow(&centered, records, &order, &cand);
            if cll.is_finite() && cll >= ll - 1e-12 * ll.abs().max(1.0) {
                beta = cand;
                ll = cll;
                grad = cgrad;
                info = cinfo;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::MonotoneLikelihood);
        }
    }
    if grad.amax() < COX_GRAD_TOL {
        return finish(&beta, ll, COX_MAX_ITERS);
    }
    Err(Error::NonConvergence {
        solver: "cox newton",
        iterations: COX_MAX_ITERS,
        last_iterate: beta.iter().copied().collect(),
    })
}

/// Partial log-likelihood at fixed coefficients.
pub fn cox_log_partial_likelihood(
    z: &DMatrix<f64>,
    records: &[SurvivalRecord],
    beta: &[f64],
) -> Result<f64> {
    check_survival_inputs(z, records)?;
    if beta.len() != z.ncols() {
        return Err(Error::DimensionMismatch {
            expected: z.ncols(),
            got: beta.len(),
        });
    }
    let mut order: Vec<usize> = (0..z.nrows()).collect();
    order.sort_by(|&a, &b| records[b].time.total_cmp(&records[a].time));
    Ok(breslow(z, records, &order, &DVector::from_column_slice(beta)).0)
}

/// Harrell's C for risk scores (higher score means earlier expected event).
/// A pair is comparable when the earlier of two distinct times is an event;
/// tied scores count one half.
pub fn harrell_c(risk: &[f64], records: &[SurvivalRecord]) -> Result<f64> {
    if risk.len() != records.len() {
        return Err(Error::DimensionMismatch {
            expected: records.len(),
            got: risk.len(),
        });
    }
    let mut comparable = 0u64;
    let mut concordant2 = 0u64; // twice the concordance count, to keep halves exact
    for i in 0..records.len() {
        if !records[i].event {
            continue;
        }
        for j in 0..records.len() {
            if records[i].time < records[j].time {
                comparable += 1;
                concordant2 += match risk[i].partial_cmp(&risk[j]) {
                    Some(std::cmp::Ordering::Greater) => 2,
                    Some(std::cmp::Ordering::Equal) => 1,
                    _ => 0,
                };
            }
        }
    }
    if comparable == 0 {
        return Err(Error::NoComparablePairs);
    }
    Ok(concordant2 as f64 / (2 * comparable) as f64)
}

pub fn c_index(fit: &CoxFit, z: &DMatrix<f64>, records: &[SurvivalRecord]) -> Result<f64> {
    harrell_c(&fit.risk_scores(z)?, records)
}
