//! Weighted global Fréchet regression for quantile-function responses.
//!
//! Under the 2-Wasserstein metric the weighted Fréchet mean with the
//! global-regression weights `ω_in(x)` is the pointwise weighted
//! least-squares surface `α(t) + β(t)ᵀx`, projected onto nondecreasing
//! curves. The fit therefore solves one WLS problem per grid point; they share
//! the same normal-equations matrix, the weighted covariance of `X`.
//!
//! Moments (`X̄`, `Σ̂`) are taken over the weighted rows, so the pointwise WLS
//! prediction coincides with `Σ ω_in(x) Y_i` for the weights returned by
//! [`frechet_weights`].
//!
//! R² is the Wasserstein analogue
//! `1 − Σ w d²(Y, Ŷ) / Σ w d²(Y, Ȳ_w)` with `Ȳ_w` the weighted pointwise mean.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::DistributionalDataset;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_with_jitter, weighted_moments, DESIGN_JITTER};
use crate::par::{map_range, Exec};
use crate::propensity::IpwWeights;
use crate::quantile::{l2_sq, monotone_project, ProbGrid, QuantileFunction};

/// Relative positivity floor of the modulation function, as a fraction of
/// the median absolute training residual.
pub const VARIANCE_FLOOR_FRACTION: f64 = 0.05;
pub const VARIANCE_FLOOR_ABS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrechetFit {
    pub grid: ProbGrid,
    pub alpha: Vec<f64>,
    /// `p` rows, one coefficient curve per covariate.
    pub beta: Vec<Vec<f64>>,
    pub training_xbar: Vec<f64>,
    pub training_cov: Vec<Vec<f64>>,
    #[serde(with = "crate::serde_float")]
    pub r2: f64,
}

/// Pointwise linear model of squared residuals; `ŝ(x, t)` is the floored
/// square root of its prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceModel {
    pub grid: ProbGrid,
    pub alpha: Vec<f64>,
    pub beta: Vec<Vec<f64>>,
    pub floor: f64,
}

/// Rows that carry positive weight, gathered for a fit.
struct WeightedRows<'a> {
    x: DMatrix<f64>,
    y: Vec<&'a [f64]>,
    w: Vec<f64>,
}

fn gather<'a>(
    data: &'a DistributionalDataset,
    weights: &IpwWeights,
    rows: &[usize],
) -> Result<WeightedRows<'a>> {
    if weights.len() != data.n() {
        return Err(Error::DimensionMismatch {
            expected: data.n(),
            got: weights.len(),
        });
    }
    let mut idx = Vec::new();
    let mut y = Vec::new();
    let mut w = Vec::new();
    for &i in rows {
        let wi = weights.w[i];
        if wi > 0.0 {
            let yi = data.observed_response(i).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "row {i} has positive weight but no observed response"
                ))
            })?;
            idx.push(i);
            y.push(yi);
            w.push(wi);
        } else if wi < 0.0 || !wi.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid weight at row {i}")));
        }
    }
    let p = data.p();
    let x = DMatrix::from_fn(idx.len(), p, |r, c| data.x[(idx[r], c)]);
    Ok(WeightedRows { x, y, w })
}

/// `(alpha, beta, xbar, cov)`
type WlsParts = (Vec<f64>, Vec<Vec<f64>>, DVector<f64>, DMatrix<f64>);

/// Pointwise WLS of `targets[i][t]` on `x`.
fn pointwise_wls(
    x: &DMatrix<f64>,
    targets: &[&[f64]],
    w: &[f64],
    grid_len: usize,
    exec: Exec,
) -> Result<WlsParts> {
    let p = x.ncols();
    let m = x.nrows();
    if m < p + 1 {
        return Err(Error::InsufficientRows {
            need: p + 1,
            have: m,
        });
    }
    let (xbar, cov) = weighted_moments(x, w);
    let chol = cholesky_with_jitter(&cov, DESIGN_JITTER)?;
    let total: f64 = w.iter().sum();
    let centered = DMatrix::from_fn(m, p, |i, j| x[(i, j)] - xbar[j]);

    let per_point: Vec<(f64, DVector<f64>)> = map_range(exec, grid_len, |t| {
        let ybar = targets.iter().zip(w).map(|(y, wi)| wi * y[t]).sum::<f64>() / total;
        let mut cross = DVector::<f64>::zeros(p);
        for i in 0..m {
            let dy = w[i] * (targets[i][t] - ybar);
            for j in 0..p {
                cross[j] += centered[(i, j)] * dy;
            }
        }
        cross /= total;
        let b = chol.solve(&cross);
        let a = ybar - b.dot(&xbar);
        (a, b)
    });

    let alpha = per_point.iter().map(|(a, _)| *a).collect();
    let beta = (0..p)
        .map(|j| per_point.iter().map(|(_, b)| b[j]).collect())
        .collect();
    Ok((alpha, beta, xbar, cov))
}

fn evaluate_linear(alpha: &[f64], beta: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let mut out = alpha.to_vec();
    for (bj, &xj) in beta.iter().zip(x) {
        for (o, b) in out.iter_mut().zip(bj) {
            *o += b * xj;
        }
    }
    out
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Global-regression weights `ω_in(x)` for every row; zero where `w_i = 0`.
pub fn frechet_weights(x: &[f64], design: &DMatrix<f64>, weights: &IpwWeights) -> Result<Vec<f64>> {
    let p = design.ncols();
    if x.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: x.len(),
        });
    }
    if weights.len() != design.nrows() {
        return Err(Error::DimensionMismatch {
            expected: design.nrows(),
            got: weights.len(),
        });
    }
    let active: Vec<usize> = (0..design.nrows())
        .filter(|&i| weights.w[i] > 0.0)
        .collect();
    if active.is_empty() {
        return Err(Error::NoObservedResponses);
    }
    let sub = DMatrix::from_fn(active.len(), p, |r, c| design[(active[r], c)]);
    let w: Vec<f64> = active.iter().map(|&i| weights.w[i]).collect();
    let (xbar, cov) = weighted_moments(&sub, &w);
    let chol = cholesky_with_jitter(&cov, DESIGN_JITTER)?;
    let dx = DVector::from_column_slice(x) - &xbar;
    let v = chol.solve(&dx);
    let mut omega = vec![0.0; design.nrows()];
    let mut total = 0.0;
    for (r, &i) in active.iter().enumerate() {
        let lever: f64 = (0..p).map(|j| (sub[(r, j)] - xbar[j]) * v[j]).sum();
        let o = w[r] * (1.0 + lever);
        omega[i] = o;
        total += o;
    }
    for o in &mut omega {
        *o /= total;
    }
    Ok(omega)
}

/// Fits on every row of `data`.
pub fn fit_wfrechet(data: &DistributionalDataset, weights: &IpwWeights) -> Result<FrechetFit> {
    let rows: Vec<usize> = (0..data.n()).collect();
    fit_wfrechet_rows(data, weights, &rows, Exec::default())
}

/// Fits on the subset `rows`; rows with zero weight are ignored.
pub fn fit_wfrechet_rows(
    data: &DistributionalDataset,
    weights: &IpwWeights,
    rows: &[usize],
    exec: Exec,
) -> Result<FrechetFit> {
    let set = gather(data, weights, rows)?;
    let g = data.grid.len();
    let (alpha, beta, xbar, cov) = pointwise_wls(&set.x, &set.y, &set.w, g, exec)?;
    let mut fit = FrechetFit {
        grid: data.grid.clone(),
        alpha,
        beta,
        training_xbar: xbar.iter().copied().collect(),
        training_cov: matrix_rows(&cov),
        r2: f64::NAN,
    };
    fit.r2 = weighted_r2(&fit, &set)?;
    Ok(fit)
}

fn weighted_r2(fit: &FrechetFit, set: &WeightedRows<'_>) -> Result<f64> {
    let grid = &fit.grid;
    let total: f64 = set.w.iter().sum();
    let mean: Vec<f64> = (0..grid.len())
        .map(|t| set.y.iter().zip(&set.w).map(|(y, w)| w * y[t]).sum::<f64>() / total)
        .collect();
    let mut resid = 0.0;
    let mut spread = 0.0;
    let mut row = vec![0.0; set.x.ncols()];
    for i in 0..set.x.nrows() {
        for (j, r) in row.iter_mut().enumerate() {
            *r = set.x[(i, j)];
        }
        let yhat = fit.predict(&row)?;
        resid += set.w[i] * l2_sq(grid, set.y[i], yhat.values());
        spread += set.w[i] * l2_sq(grid, set.y[i], &mean);
    }
    Ok(if spread > 0.0 {
        1.0 - resid / spread
    } else if resid == 0.0 {
        1.0
    } else {
        f64::NAN
    })
}

impl FrechetFit {
    pub fn p(&self) -> usize {
        self.beta.len()
    }

    /// `α(t) + β(t)ᵀx` before projection.
    pub fn predict_raw(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.p() {
            return Err(Error::DimensionMismatch {
                expected: self.p(),
                got: x.len(),
            });
        }
        Ok(evaluate_linear(&self.alpha, &self.beta, x))
    }

    /// Imputed quantile function at `x` (projected onto nondecreasing curves).
    pub fn predict(&self, x: &[f64]) -> Result<QuantileFunction> {
        let raw = self.predict_raw(x)?;
        monotone_project(&raw, &self.grid)
    }
}

impl VarianceModel {
    pub fn p(&self) -> usize {
        self.beta.len()
    }

    /// `ŝ(x, ·)` on the grid.
    pub fn scale(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.p() {
            return Err(Error::DimensionMismatch {
                expected: self.p(),
                got: x.len(),
            });
        }
        Ok(evaluate_linear(&self.alpha, &self.beta, x)
            .into_iter()
            .map(|v| v.max(0.0).sqrt().max(self.floor))
            .collect())
    }
}

/// Regresses squared residuals of `fit` on `X` over `rows` (pointwise WLS).
pub fn fit_variance_model(
    fit: &FrechetFit,
    data: &DistributionalDataset,
    weights: &IpwWeights,
    rows: &[usize],
    exec: Exec,
) -> Result<VarianceModel> {
    if data.grid != fit.grid {
        return Err(Error::GridMismatch);
    }
    let set = gather(data, weights, rows)?;
    let m = set.x.nrows();
    let mut row = vec![0.0; set.x.ncols()];
    let mut squared: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut abs_resid: Vec<f64> = Vec::with_capacity(m * fit.grid.len());
    for i in 0..m {
        for (j, r) in row.iter_mut().enumerate() {
            *r = set.x[(i, j)];
        }
        let mhat = fit.predict(&row)?;
        let r: Vec<f64> = set.y[i]
            .iter()
            .zip(mhat.values())
            .map(|(y, m)| y - m)
            .collect();
        abs_resid.extend(r.iter().map(|v| v.abs()));
        squared.push(r.iter().map(|v| v * v).collect());
    }
    let targets: Vec<&[f64]> = squared.iter().map(Vec::as_slice).collect();
    let (alpha, beta, _, _) = pointwise_wls(&set.x, &targets, &set.w, fit.grid.len(), exec)?;
    let floor = (VARIANCE_FLOOR_FRACTION * median(&mut abs_resid)).max(VARIANCE_FLOOR_ABS);
    Ok(VarianceModel {
        grid: fit.grid.clone(),
        alpha,
        beta,
        floor,
    })
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Empirical Fréchet objective `M_n(γ, x) = (1/n) Σ ω_in(x) d²(Y_i, γ)` over
/// the weighted rows.
pub fn wls_objective(
    candidate: &QuantileFunction,
    x: &[f64],
    data: &DistributionalDataset,
    weights: &IpwWeights,
) -> Result<f64> {
    if candidate.grid() != &data.grid {
        return Err(Error::GridMismatch);
    }
    let omega = frechet_weights(x, &data.x, weights)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &o) in omega.iter().enumerate() {
        if weights.w[i] > 0.0 {
            let y = data
                .observed_response(i)
                .ok_or(Error::NoObservedResponses)?;
            total += o * l2_sq(&data.grid, y, candidate.values());
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `Y_i(t) = shift_i + Σ_j X_ij t` with optional per-row shifts.
    fn linear_dataset(x: DMatrix<f64>, grid: &ProbGrid, shifts: &[f64]) -> DistributionalDataset {
        let n = x.nrows();
        let responses = (0..n)
            .map(|i| {
                let s: f64 = x.row(i).iter().sum();
                Some(grid.points().iter().map(|t| shifts[i] + s * t).collect())
            })
            .collect();
        DistributionalDataset::new(
            (0..n).map(|i| i.to_string()).collect(),
            x,
            grid.clone(),
            responses,
            vec![true; n],
            None,
        )
        .unwrap()
    }

    fn random_x(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, p, |_, _| rng.random::<f64>())
    }

    #[test]
    fn weights_at_mean_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_x(&mut rng, 7, 2);
        let w = IpwWeights {
            w: vec![1.0; 7],
            normalized: false,
        };
        let xbar: Vec<f64> = (0..2).map(|j| x.column(j).mean()).collect();
        for o in frechet_weights(&xbar, &x, &w).unwrap() {
            assert!((o - 1.0 / 7.0).abs() < 1e-14);
        }
    }

    #[test]
    fn equal_weights_reduce_to_unweighted_global_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 9;
        let x = random_x(&mut rng, n, 2);
        let w = IpwWeights {
            w: vec![0.3; n],
            normalized: false,
        };
        let at = [0.9, 0.1];
        let got = frechet_weights(&at, &x, &w).unwrap();
        // plain global weights (1/n)[1 + (x - X̄)ᵀ Σ̂⁻¹ (X_i - X̄)], Σ̂ with 1/n
        let xbar = DVector::from_fn(2, |j, _| x.column(j).mean());
        let mut cov = DMatrix::<f64>::zeros(2, 2);
        for i in 0..n {
            let d = DVector::from_fn(2, |j, _| x[(i, j)] - xbar[j]);
            cov += &d * d.transpose() / n as f64;
        }
        let inv = cov.try_inverse().unwrap();
        let dx = DVector::from_column_slice(&at) - &xbar;
        for i in 0..n {
            let d = DVector::from_fn(2, |j, _| x[(i, j)] - xbar[j]);
            let expected = (1.0 + (dx.transpose() * &inv * d)[(0, 0)]) / n as f64;
            assert!((got[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn two_point_weights_by_hand() {
        // X̄_w = 0.75, Σ̂_w = 0.1875; leverage at x = 1 is (1 - 0.75)(X_i - 0.75)/0.1875
        // giving terms (0, 4/3) and ω = (0, 1)
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let w = IpwWeights {
            w: vec![0.25, 0.75],
            normalized: true,
        };
        let omega = frechet_weights(&[1.0], &x, &w).unwrap();
        assert!(omega[0].abs() < 1e-15);
        assert!((omega[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn omega_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_x(&mut rng, 40, 3);
        let w = IpwWeights {
            w: (0..40)
                .map(|i| {
                    if i % 3 == 0 {
                        0.0
                    } else {
                        rng.random::<f64>() + 0.1
                    }
                })
                .collect(),
            normalized: false,
        };
        for _ in 0..20 {
            let at: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let s: f64 = frechet_weights(&at, &x, &w).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_fit_recovers_generating_curves() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = ProbGrid::uniform(50).unwrap();
        let n = 60;
        let data = linear_dataset(random_x(&mut rng, n, 2), &grid, &vec![0.0; n]);
        let fit = fit_wfrechet(&data, &IpwWeights::uniform(&data.delta)).unwrap();
        for (t, &tp) in grid.points().iter().enumerate() {
            assert!(fit.alpha[t].abs() < 1e-8);
            for b in &fit.beta {
                assert!((b[t] - tp).abs() < 1e-8);
            }
        }
        assert!((fit.r2 - 1.0).abs() < 1e-8);
        let y = fit.predict(&[0.3, 0.4]).unwrap();
        for (v, t) in y.values().iter().zip(grid.points()) {
            assert!((v - 0.7 * t).abs() < 1e-10);
        }
    }

    #[test]
    fn equal_weights_match_ordinary_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = ProbGrid::uniform(20).unwrap();
        let n = 80;
        let shifts: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let data = linear_dataset(random_x(&mut rng, n, 3), &grid, &shifts);
        let fit = fit_wfrechet(
            &data,
            &IpwWeights {
                w: vec![2.5; n],
                normalized: false,
            },
        )
        .unwrap();
        // OLS oracle via SVD of the raw design [1 X]
        let design = DMatrix::from_fn(n, 4, |i, j| if j == 0 { 1.0 } else { data.x[(i, j - 1)] });
        let svd = design.svd(true, true);
        for t in 0..grid.len() {
            let y = DVector::from_fn(n, |i, _| data.responses[i].as_ref().unwrap()[t]);
            let coef = svd.solve(&y, 1e-14).unwrap();
            assert!((fit.alpha[t] - coef[0]).abs() < 1e-10);
            for j in 0..3 {
                assert!((fit.beta[j][t] - coef[j + 1]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn wls_prediction_equals_omega_weighted_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let grid = ProbGrid::uniform(10).unwrap();
        let n = 30;
        let shifts: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let data = linear_dataset(random_x(&mut rng, n, 2), &grid, &shifts);
        let w = IpwWeights {
            w: (0..n).map(|_| rng.random::<f64>() + 0.2).collect(),
            normalized: false,
        };
        let fit = fit_wfrechet(&data, &w).unwrap();
        let at = [0.2, 0.7];
        let omega = frechet_weights(&at, &data.x, &w).unwrap();
        let raw = fit.predict_raw(&at).unwrap();
        for t in 0..grid.len() {
            let mean: f64 = (0..n)
                .map(|i| omega[i] * data.responses[i].as_ref().unwrap()[t])
                .sum();
            assert!((raw[t] - mean).abs() < 1e-10);
        }
    }

    #[test]
    fn prediction_at_mean_is_weighted_mean_curve() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let grid = ProbGrid::uniform(15).unwrap();
        let n = 25;
        let shifts: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let data = linear_dataset(random_x(&mut rng, n, 1), &grid, &shifts);
        let fit = fit_wfrechet(&data, &IpwWeights::uniform(&data.delta)).unwrap();
        let y = fit.predict(&fit.training_xbar.clone()).unwrap();
        for t in 0..grid.len() {
            let mean = (0..n)
                .map(|i| data.responses[i].as_ref().unwrap()[t])
                .sum::<f64>()
                / n as f64;
            assert!((y.values()[t] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn extrapolated_prediction_is_projected() {
        // β(t) decreasing in t so a large x produces a decreasing raw curve
        let grid = ProbGrid::uniform(11).unwrap();
        let n = 20;
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64 / n as f64);
        let responses = (0..n)
            .map(|i| {
                let xi = x[(i, 0)];
                Some(
                    grid.points()
                        .iter()
                        .map(|t| 5.0 * t + xi * (0.3 - 0.2 * t))
                        .collect(),
                )
            })
            .collect();
        let data = DistributionalDataset::new(
            (0..n).map(|i| i.to_string()).collect(),
            x,
            grid.clone(),
            responses,
            vec![true; n],
            None,
        )
        .unwrap();
        let fit = fit_wfrechet(&data, &IpwWeights::uniform(&data.delta)).unwrap();
        let raw = fit.predict_raw(&[100.0]).unwrap();
        assert!(raw.windows(2).any(|w| w[1] < w[0]));
        let projected = fit.predict(&[100.0]).unwrap();
        assert_eq!(projected, monotone_project(&raw, &grid).unwrap());
    }

    #[test]
    fn collinear_and_small_designs_fail() {
        let grid = ProbGrid::uniform(5).unwrap();
        let n = 10;
        let x = DMatrix::from_fn(n, 2, |i, _| i as f64);
        let data = linear_dataset(x, &grid, &vec![0.0; n]);
        assert!(matches!(
            fit_wfrechet(&data, &IpwWeights::uniform(&data.delta)),
            Err(Error::DegenerateDesign)
        ));
        let x = DMatrix::from_fn(2, 2, |i, j| (i + j) as f64);
        let data = linear_dataset(x, &grid, &[0.0, 0.0]);
        assert!(matches!(
            fit_wfrechet(&data, &IpwWeights::uniform(&data.delta)),
            Err(Error::InsufficientRows { .. })
        ));
    }

    #[test]
    fn zero_residuals_hit_absolute_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let grid = ProbGrid::uniform(10).unwrap();
        let n = 30;
        let data = linear_dataset(random_x(&mut rng, n, 1), &grid, &vec![0.0; n]);
        let w = IpwWeights::uniform(&data.delta);
        let rows: Vec<usize> = (0..n).collect();
        let fit = fit_wfrechet(&data, &w).unwrap();
        let var = fit_variance_model(&fit, &data, &w, &rows, Exec::Sequential).unwrap();
        assert_eq!(var.floor, VARIANCE_FLOOR_ABS);
        for s in var.scale(&[0.5]).unwrap() {
            assert_eq!(s, VARIANCE_FLOOR_ABS);
        }
    }

    fn noisy_dataset(
        rng: &mut ChaCha8Rng,
        n: usize,
        sd: impl Fn(f64) -> f64,
    ) -> DistributionalDataset {
        let grid = ProbGrid::uniform(20).unwrap();
        let x = random_x(rng, n, 1);
        let shifts: Vec<f64> = (0..n)
            .map(|i| {
                let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                sd(x[(i, 0)]) * z
            })
            .collect();
        linear_dataset(x, &grid, &shifts)
    }

    #[test]
    fn homoskedastic_scale_is_flat_in_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 5000;
        let data = noisy_dataset(&mut rng, n, |_| 0.2);
        let w = IpwWeights::uniform(&data.delta);
        let rows: Vec<usize> = (0..n).collect();
        let fit = fit_wfrechet(&data, &w).unwrap();
        let var = fit_variance_model(&fit, &data, &w, &rows, Exec::Sequential).unwrap();
        for t in [0, 10, 19] {
            let s: Vec<f64> = (0..=10)
                .map(|k| var.scale(&[k as f64 / 10.0]).unwrap()[t])
                .collect();
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            let sd = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.len() as f64).sqrt();
            assert!(sd / mean < 0.2, "cv {}", sd / mean);
            assert!((mean - 0.2).abs() < 0.03);
        }
    }

    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        for (k, &i) in idx.iter().enumerate() {
            r[i] = k as f64;
        }
        r
    }

    fn spearman(a: &[f64], b: &[f64]) -> f64 {
        let (ra, rb) = (ranks(a), ranks(b));
        let n = a.len() as f64;
        let ma = ra.iter().sum::<f64>() / n;
        let mb = rb.iter().sum::<f64>() / n;
        let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn heteroskedastic_scale_tracks_generating_sd() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 4000;
        let data = noisy_dataset(&mut rng, n, |x| 0.05 + 0.5 * x);
        let w = IpwWeights::uniform(&data.delta);
        let rows: Vec<usize> = (0..n).collect();
        let fit = fit_wfrechet(&data, &w).unwrap();
        let var = fit_variance_model(&fit, &data, &w, &rows, Exec::Sequential).unwrap();
        let xs: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
        let truth: Vec<f64> = xs.iter().map(|x| 0.05 + 0.5 * x).collect();
        for t in 0..20 {
            let s: Vec<f64> = xs.iter().map(|&x| var.scale(&[x]).unwrap()[t]).collect();
            assert!(spearman(&s, &truth) > 0.9);
        }
    }

    #[test]
    fn objective_examples() {
        let grid = ProbGrid::uniform(6).unwrap();
        let x = DMatrix::from_column_slice(1, 1, &[0.4]);
        let y: Vec<f64> = grid.points().iter().map(|t| 2.0 * t).collect();
        let data = DistributionalDataset::new(
            vec!["a".into()],
            x,
            grid.clone(),
            vec![Some(y.clone())],
            vec![true],
            None,
        )
        .unwrap();
        let w = IpwWeights::uniform(&data.delta);
        let cand = QuantileFunction::new(grid.clone(), y).unwrap();
        assert_eq!(wls_objective(&cand, &[0.4], &data, &w).unwrap(), 0.0);
    }

    #[test]
    fn prediction_minimizes_objective_and_objective_is_linear_in_d2() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let grid = ProbGrid::uniform(12).unwrap();
        let n = 50;
        let shifts: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 0.3).collect();
        let data = linear_dataset(random_x(&mut rng, n, 2), &grid, &shifts);
        let w = IpwWeights {
            w: (0..n).map(|_| rng.random::<f64>() + 0.5).collect(),
            normalized: false,
        };
        let fit = fit_wfrechet(&data, &w).unwrap();
        let at = [0.4, 0.6];
        let best = fit.predict(&at).unwrap();
        let base = wls_objective(&best, &at, &data, &w).unwrap();
        for _ in 0..100 {
            let mut v: Vec<f64> = best
                .values()
                .iter()
                .map(|b| b + 0.05 * (rng.random::<f64>() - 0.5))
                .collect();
            v.sort_by(f64::total_cmp);
            let cand = QuantileFunction::new(grid.clone(), v).unwrap();
            assert!(wls_objective(&cand, &at, &data, &w).unwrap() >= base);
        }

        // scaling every response's deviation from the candidate by √2 doubles d²
        let scaled = DistributionalDataset {
            responses: data
                .responses
                .iter()
                .map(|r| {
                    r.as_ref().map(|y| {
                        y.iter()
                            .zip(best.values())
                            .map(|(a, c)| c + std::f64::consts::SQRT_2 * (a - c))
                            .collect()
                    })
                })
                .collect(),
            ..data.clone()
        };
        let doubled = wls_objective(&best, &at, &scaled, &w).unwrap();
        assert!((doubled - 2.0 * base).abs() < 1e-12 * base.abs().max(1.0));
    }
}
