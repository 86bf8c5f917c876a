//! Split conformal prediction bands for imputed quantile functions.
//!
//! The sample is split three ways. The regression is fitted on the first
//! part, the modulation function `ŝ(x, t)` on residuals of the second, and
//! the weighted `1 − α` quantile of sup-norm scores
//! `R = sup_t |Y(t) − m̂(X, t)| / ŝ(X, t)` is taken over the observed rows of
//! the calibration part. Calibration weights are renormalized within that
//! subset.
//!
//! Bands are envelopes `m̂ ± q̂ ŝ` and are not projected onto monotone curves.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DistributionalDataset;
use crate::error::{Error, Result};
use crate::frechet::{fit_variance_model, fit_wfrechet_rows, FrechetFit, VarianceModel};
use crate::par::{map_slice, Exec};
use crate::propensity::IpwWeights;
use crate::quantile::{ProbGrid, QuantileFunction};

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.5, 0.25, 0.25);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train1: Vec<usize>,
    pub train2: Vec<usize>,
    pub calibration: Vec<usize>,
    pub seed: u64,
}

/// Random three-way partition of `0..n`. Part sizes are `⌊n·r1⌋`, `⌊n·r2⌋`
/// and the remainder; each index list is sorted.
pub fn split_data(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<SplitIndices> {
    let (r1, r2, r3) = ratios;
    if !(r1 > 0.0 && r2 > 0.0 && r3 > 0.0) || ((r1 + r2 + r3) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be positive and sum to 1, got ({r1}, {r2}, {r3})"
        )));
    }
    let n1 = (n as f64 * r1).floor() as usize;
    let n2 = (n as f64 * r2).floor() as usize;
    if n1 == 0 || n2 == 0 || n1 + n2 >= n {
        return Err(Error::InvalidArgument(format!(
            "n = {n} is too small for a three-way split"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = [
        order[..n1].to_vec(),
        order[n1..n1 + n2].to_vec(),
        order[n1 + n2..].to_vec(),
    ];
    for p in &mut parts {
        p.sort_unstable();
    }
    let [train1, train2, calibration] = parts;
    Ok(SplitIndices {
        train1,
        train2,
        calibration,
        seed,
    })
}

/// `max_t |y(t) − m̂(t)| / ŝ(t)`.
pub fn nonconformity(y: &QuantileFunction, mhat: &QuantileFunction, shat: &[f64]) -> Result<f64> {
    if y.grid() != mhat.grid() {
        return Err(Error::GridMismatch);
    }
    if shat.len() != y.values().len() {
        return Err(Error::GridMismatch);
    }
    if shat.iter().any(|&s| s.is_nan() || s <= 0.0) {
        return Err(Error::InvalidArgument("modulation must be positive".into()));
    }
    Ok(sup_score(y.values(), mhat.values(), shat))
}

fn sup_score(y: &[f64], mhat: &[f64], shat: &[f64]) -> f64 {
    y.iter()
        .zip(mhat)
        .zip(shat)
        .map(|((a, m), s)| (a - m).abs() / s)
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreQuantile {
    pub qhat: f64,
    /// No score reached the requested mass; `qhat` is the largest score.
    pub saturated: bool,
}

/// `inf{t ∈ scores : Σ w 1{R ≤ t} / Σ w ≥ level}` over rows with positive
/// weight, where `level = 1 − α`, or `(1 − α)(1 + 1/n_eff)` with the
/// finite-sample correction (`n_eff = (Σw)² / Σw²`).
pub fn weighted_score_quantile(
    scores: &[f64],
    weights: &[f64],
    alpha: f64,
    finite_sample: bool,
) -> Result<ScoreQuantile> {
    if scores.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: weights.len(),
        });
    }
    validate_alpha(alpha)?;
    let mut pairs: Vec<(f64, f64)> = scores
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(&s, &w)| (s, w))
        .collect();
    if pairs.is_empty() {
        return Err(Error::NoObservedResponses);
    }
    if pairs.iter().any(|(s, w)| !s.is_finite() || !w.is_finite()) {
        return Err(Error::NonFinite);
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let level = if finite_sample {
        let sq: f64 = pairs.iter().map(|p| p.1 * p.1).sum();
        let n_eff = total * total / sq;
        (1.0 - alpha) * (1.0 + 1.0 / n_eff)
    } else {
        1.0 - alpha
    };
    let mut cum = 0.0;
    for (k, &(s, w)) in pairs.iter().enumerate() {
        cum += w;
        // equal scores form one atom of the empirical distribution
        if k + 1 < pairs.len() && pairs[k + 1].0 == s {
            continue;
        }
        if cum / total >= level - 1e-12 {
            return Ok(ScoreQuantile {
                qhat: s,
                saturated: false,
            });
        }
    }
    Ok(ScoreQuantile {
        qhat: pairs[pairs.len() - 1].0,
        saturated: true,
    })
}

fn validate_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub ratios: (f64, f64, f64),
    pub seed: u64,
    /// Apply the `(1 + 1/n_eff)` level inflation.
    pub finite_sample: bool,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            ratios: DEFAULT_RATIOS,
            seed: 0,
            finite_sample: false,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalModel {
    pub fit: FrechetFit,
    pub variance: VarianceModel,
    pub alpha: f64,
    pub qhat: f64,
    pub saturated: bool,
    pub seed: u64,
    pub ratios: (f64, f64, f64),
    pub finite_sample: bool,
    /// Calibration weights were renormalized over the observed calibration rows.
    pub calibration_renormalized: bool,
    pub n_calibration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBand {
    pub grid: ProbGrid,
    pub center: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl PredictionBand {
    /// `lower ≤ y ≤ upper` at every grid point.
    pub fn contains(&self, y: &[f64]) -> bool {
        y.len() == self.lower.len()
            && y.iter()
                .zip(&self.lower)
                .zip(&self.upper)
                .all(|((v, l), u)| l <= v && v <= u)
    }

    pub fn width(&self) -> Vec<f64> {
        self.upper
            .iter()
            .zip(&self.lower)
            .map(|(u, l)| u - l)
            .collect()
    }
}

fn rows_with_weight(rows: &[usize], weights: &IpwWeights) -> usize {
    rows.iter().filter(|&&i| weights.w[i] > 0.0).count()
}

/// Runs the split-conformal calibration end to end.
pub fn calibrate(
    data: &DistributionalDataset,
    weights: &IpwWeights,
    alpha: f64,
    config: &CalibrationConfig,
) -> Result<ConformalModel> {
    validate_alpha(alpha)?;
    if weights.len() != data.n() {
        return Err(Error::DimensionMismatch {
            expected: data.n(),
            got: weights.len(),
        });
    }
    let split = split_data(data.n(), config.ratios, config.seed)?;
    for (name, rows) in [
        ("train1", &split.train1),
        ("train2", &split.train2),
        ("calibration", &split.calibration),
    ] {
        if rows_with_weight(rows, weights) == 0 {
            return Err(Error::EmptyPartition(name));
        }
    }
    let fit = fit_wfrechet_rows(data, weights, &split.train1, config.exec)?;
    let variance = fit_variance_model(&fit, data, weights, &split.train2, config.exec)?;

    let cal: Vec<usize> = split
        .calibration
        .iter()
        .copied()
        .filter(|&i| weights.w[i] > 0.0)
        .collect();
    let scored: Vec<Result<f64>> = map_slice(config.exec, &cal, |&i| {
        let x = data.row(i);
        let y = data
            .observed_response(i)
            .ok_or(Error::NoObservedResponses)?;
        let mhat = fit.predict(&x)?;
        let shat = variance.scale(&x)?;
        Ok(sup_score(y, mhat.values(), &shat))
    });
    let scores = scored.into_iter().collect::<Result<Vec<f64>>>()?;
    let cal_weights: Vec<f64> = cal.iter().map(|&i| weights.w[i]).collect();
    let q = weighted_score_quantile(&scores, &cal_weights, alpha, config.finite_sample)?;

    Ok(ConformalModel {
        fit,
        variance,
        alpha,
        qhat: q.qhat,
        saturated: q.saturated,
        seed: config.seed,
        ratios: config.ratios,
        finite_sample: config.finite_sample,
        calibration_renormalized: true,
        n_calibration: cal.len(),
    })
}

impl ConformalModel {
    pub fn p(&self) -> usize {
        self.fit.p()
    }

    /// `m̂(x, ·) ± q̂ ŝ(x, ·)`.
    pub fn predict_band(&self, x: &[f64]) -> Result<PredictionBand> {
        let center = self.fit.predict(x)?.into_values();
        let shat = self.variance.scale(x)?;
        let lower = center
            .iter()
            .zip(&shat)
            .map(|(m, s)| m - self.qhat * s)
            .collect();
        let upper = center
            .iter()
            .zip(&shat)
            .map(|(m, s)| m + self.qhat * s)
            .collect();
        Ok(PredictionBand {
            grid: self.fit.grid.clone(),
            center,
            lower,
            upper,
        })
    }

    /// Fraction of `rows` whose response lies inside its band at every grid
    /// point. The response is read regardless of `delta`, so ground truth for
    /// unobserved rows is scored when present.
    pub fn coverage(
        &self,
        data: &DistributionalDataset,
        rows: &[usize],
        exec: Exec,
    ) -> Result<f64> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("empty test set".into()));
        }
        if data.grid != self.fit.grid {
            return Err(Error::GridMismatch);
        }
        let hits: Vec<Result<bool>> = map_slice(exec, rows, |&i| {
            let y = data.responses[i]
                .as_deref()
                .ok_or_else(|| Error::InvalidArgument(format!("test row {i} has no response")))?;
            Ok(self.predict_band(&data.row(i))?.contains(y))
        });
        let mut covered = 0usize;
        for h in hits {
            if h? {
                covered += 1;
            }
        }
        Ok(covered as f64 / rows.len() as f64)
    }
}
