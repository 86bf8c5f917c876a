//! Personalized imputation: per-subject uncertainty radii, threshold-filtered
//! imputation sets and a sweep of a downstream model across thresholds.
//!
//! A missing row `i` is imputed at threshold `γ` when its radius
//! `r̂_i = q̂ · max_t ŝ(X_i, t)` is at most `γ`. For every threshold the
//! downstream evaluator sees the observed rows plus the imputed rows admitted
//! at that threshold.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::ConformalModel;
use crate::dataset::{DistributionalDataset, SurvivalRecord};
use crate::error::{Error, Result};
use crate::par::{map_slice, Exec};
use crate::quantile::ProbGrid;
use crate::survival::{fit_cox, fpca, harrell_c, Retain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRadius {
    pub id: String,
    pub r: f64,
}

pub fn uncertainty_radius(model: &ConformalModel, x: &[f64]) -> Result<f64> {
    Ok(radius_from_scale(model.qhat, &model.variance.scale(x)?))
}

/// `q̂ · max_t ŝ(t)`.
pub fn radius_from_scale(qhat: f64, shat: &[f64]) -> f64 {
    qhat * shat.iter().copied().fold(0.0, f64::max)
}

/// Radii for the given rows of `data`.
pub fn radii_for(
    model: &ConformalModel,
    data: &DistributionalDataset,
    rows: &[usize],
) -> Result<Vec<UncertaintyRadius>> {
    rows.iter()
        .map(|&i| {
            Ok(UncertaintyRadius {
                id: data.ids[i].clone(),
                r: uncertainty_radius(model, &data.row(i))?,
            })
        })
        .collect()
}

/// `B_γ = {i : δ_i = 0 and r̂_i ≤ γ}`; `radii` is indexed by row and ignored
/// on observed rows.
pub fn select_imputable(radii: &[f64], delta: &[bool], gamma: f64) -> Vec<usize> {
    (0..delta.len())
        .filter(|&i| !delta[i] && radii[i] <= gamma)
        .collect()
}

/// `{0, 80, 90, …, 200, ∞}`.
pub fn default_gamma_grid() -> Vec<f64> {
    let mut g = vec![0.0];
    g.extend((8..=20).map(|k| k as f64 * 10.0));
    g.push(f64::INFINITY);
    g
}

/// Rows handed to a downstream evaluator.
#[derive(Debug, Clone)]
pub struct AugmentedDataset<'a> {
    pub grid: &'a ProbGrid,
    /// Source row of each entry.
    pub rows: Vec<usize>,
    pub x: DMatrix<f64>,
    pub curves: Vec<&'a [f64]>,
    pub imputed: Vec<bool>,
    pub survival: Option<Vec<SurvivalRecord>>,
}

impl AugmentedDataset<'_> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Downstream model `T` scored on an augmented dataset.
pub trait Downstream: Sync {
    fn name(&self) -> &str;
    fn evaluate(&self, data: &AugmentedDataset<'_>) -> Result<f64>;
}

/// fPCA scores of the curves (optionally with the scalar covariates) fed to
/// a linear Cox model, scored by Harrell's C.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoxConcordance {
    pub retain: Retain,
    pub include_covariates: bool,
    /// `None`: in-sample C-index. `Some(k)`: `k`-fold cross-validated.
    pub cv_folds: Option<usize>,
    pub seed: u64,
}

impl Default for CoxConcordance {
    fn default() -> Self {
        Self {
            retain: Retain::default(),
            include_covariates: true,
            cv_folds: None,
            seed: 0,
        }
    }
}

impl CoxConcordance {
    pub fn scheme(&self) -> String {
        match self.cv_folds {
            None => "in_sample".to_string(),
            Some(k) => format!("cv{k}"),
        }
    }

    fn design(&self, data: &AugmentedDataset<'_>) -> Result<DMatrix<f64>> {
        let (_, scores) = fpca(&data.curves, data.grid, self.retain)?;
        let k = scores.first().map_or(0, Vec::len);
        let p = if self.include_covariates {
            data.x.ncols()
        } else {
            0
        };
        let mut z = DMatrix::from_fn(data.len(), k + p, |i, j| {
            if j < k {
                scores[i][j]
            } else {
                data.x[(i, j - k)]
            }
        });
        // constant covariate columns carry no information for Cox
        let keep: Vec<usize> = (0..z.ncols())
            .filter(|&j| {
                let c = z.column(j);
                c.iter().any(|&v| v != c[0])
            })
            .collect();
        if keep.len() != z.ncols() {
            z = DMatrix::from_fn(z.nrows(), keep.len(), |i, j| z[(i, keep[j])]);
        }
        if z.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "no informative covariates for the survival model".into(),
            ));
        }
        Ok(z)
    }
}

impl Downstream for CoxConcordance {
    fn name(&self) -> &str {
        "cox"
    }

    fn evaluate(&self, data: &AugmentedDataset<'_>) -> Result<f64> {
        let records = data
            .survival
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("survival outcome required".into()))?;
        let z = self.design(data)?;
        match self.cv_folds {
            None => {
                let fit = fit_cox(&z, records)?;
                harrell_c(&fit.risk_scores(&z)?, records)
            }
            Some(k) => {
                let n = z.nrows();
                if k < 2 || k > n {
                    return Err(Error::InvalidArgument(format!(
                        "invalid fold count {k} for {n} rows"
                    )));
                }
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
                let mut risk = vec![0.0; n];
                for fold in 0..k {
                    let test: Vec<usize> = order.iter().copied().skip(fold).step_by(k).collect();
                    let train: Vec<usize> = (0..n).filter(|i| !test.contains(i)).collect();
                    let zt = DMatrix::from_fn(train.len(), z.ncols(), |i, j| z[(train[i], j)]);
                    let rt: Vec<SurvivalRecord> = train.iter().map(|&i| records[i]).collect();
                    let fit = fit_cox(&zt, &rt)?;
                    for &i in &test {
                        risk[i] = (0..z.ncols())
                            .map(|j| z[(i, j)] * fit.coefficients[j])
                            .sum();
                    }
                }
                harrell_c(&risk, records)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompleteCaseEvaluation {
    pub n: usize,
    pub n_events: usize,
    pub k: usize,
    pub variance_explained: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub c_index: f64,
    pub scheme: String,
    /// Cross-validated C-index when folds were requested.
    pub cv_c_index: Option<f64>,
    /// Row indices of `data` in the order of `scores` and `risk`.
    pub rows: Vec<usize>,
    pub scores: Vec<Vec<f64>>,
    pub risk: Vec<f64>,
}

/// Fits the survival model on the observed rows only.
pub fn evaluate_complete_cases(
    data: &DistributionalDataset,
    evaluator: &CoxConcordance,
) -> Result<CompleteCaseEvaluation> {
    let records = data
        .survival
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("survival outcome required".into()))?;
    let rows = data.observed_indices();
    let curves: Vec<&[f64]> = rows
        .iter()
        .map(|&i| data.observed_response(i).expect("observed"))
        .collect();
    let recs: Vec<SurvivalRecord> = rows.iter().map(|&i| records[i]).collect();
    let (basis, scores) = fpca(&curves, &data.grid, evaluator.retain)?;
    let aug = AugmentedDataset {
        grid: &data.grid,
        x: DMatrix::from_fn(rows.len(), data.p(), |r, c| data.x[(rows[r], c)]),
        curves,
        imputed: vec![false; rows.len()],
        survival: Some(recs.clone()),
        rows: rows.clone(),
    };
    let z = evaluator.design(&aug)?;
    let fit = fit_cox(&z, &recs)?;
    let risk = fit.risk_scores(&z)?;
    let c_index = harrell_c(&risk, &recs)?;
    let cv_c_index = match evaluator.cv_folds {
        Some(_) => Some(evaluator.evaluate(&aug)?),
        None => None,
    };
    Ok(CompleteCaseEvaluation {
        n: rows.len(),
        n_events: recs.iter().filter(|r| r.event).count(),
        k: basis.k(),
        variance_explained: basis.variance_explained,
        coefficients: fit.coefficients,
        converged: fit.converged,
        c_index,
        scheme: evaluator.scheme(),
        cv_c_index,
        rows,
        scores,
        risk,
    })
}

/// Evaluator that always fails; used when no downstream model is requested.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoDownstream;

impl Downstream for NoDownstream {
    fn name(&self) -> &str {
        "none"
    }

    fn evaluate(&self, _: &AugmentedDataset<'_>) -> Result<f64> {
        Err(Error::InvalidArgument("no downstream model".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweepRow {
    #[serde(with = "crate::serde_float")]
    pub gamma: f64,
    pub n_included: usize,
    pub metric: Option<f64>,
    pub error: Option<String>,
}

fn validate_gamma_grid(gamma_grid: &[f64]) -> Result<()> {
    if gamma_grid.is_empty() {
        return Err(Error::InvalidArgument("empty gamma grid".into()));
    }
    if gamma_grid.iter().any(|g| g.is_nan() || *g < 0.0) {
        return Err(Error::InvalidArgument("thresholds must be >= 0".into()));
    }
    if gamma_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(
            "gamma grid must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Sweep with precomputed radii and imputations (both indexed by row; only
/// unobserved rows are read).
pub fn sweep_with(
    data: &DistributionalDataset,
    radii: &[f64],
    imputations: &[Option<Vec<f64>>],
    gamma_grid: &[f64],
    downstream: &dyn Downstream,
    exec: Exec,
) -> Result<Vec<ThresholdSweepRow>> {
    validate_gamma_grid(gamma_grid)?;
    let n = data.n();
    if radii.len() != n || imputations.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: radii.len().min(imputations.len()),
        });
    }
    let observed = data.observed_indices();
    let rows = map_slice(exec, gamma_grid, |&gamma| {
        let admitted = select_imputable(radii, &data.delta, gamma);
        let mut rows = observed.clone();
        rows.extend(&admitted);
        rows.sort_unstable();
        let mut curves = Vec::with_capacity(rows.len());
        let mut imputed = Vec::with_capacity(rows.len());
        for &i in &rows {
            if data.delta[i] {
                curves.push(data.observed_response(i).expect("observed row"));
                imputed.push(false);
            } else {
                match imputations[i].as_deref() {
                    Some(c) => curves.push(c),
                    None => {
                        return ThresholdSweepRow {
                            gamma,
                            n_included: rows.len(),
                            metric: None,
                            error: Some(format!("row {i} admitted without an imputation")),
                        }
                    }
                }
                imputed.push(true);
            }
        }
        let aug = AugmentedDataset {
            grid: &data.grid,
            x: DMatrix::from_fn(rows.len(), data.p(), |r, c| data.x[(rows[r], c)]),
            curves,
            imputed,
            survival: data
                .survival
                .as_ref()
                .map(|s| rows.iter().map(|&i| s[i]).collect()),
            rows,
        };
        let n_included = aug.len();
        match downstream.evaluate(&aug) {
            Ok(m) if m.is_finite() => ThresholdSweepRow {
                gamma,
                n_included,
                metric: Some(m),
                error: None,
            },
            Ok(_) => ThresholdSweepRow {
                gamma,
                n_included,
                metric: None,
                error: Some("non-finite metric".into()),
            },
            Err(e) => ThresholdSweepRow {
                gamma,
                n_included,
                metric: None,
                error: Some(e.to_string()),
            },
        }
    });
    Ok(rows)
}

/// Radii and imputations from the conformal model, then [`sweep_with`].
pub fn sweep_thresholds(
    data: &DistributionalDataset,
    model: &ConformalModel,
    gamma_grid: &[f64],
    downstream: &dyn Downstream,
    exec: Exec,
) -> Result<Vec<ThresholdSweepRow>> {
    let n = data.n();
    let mut radii = vec![f64::NAN; n];
    let mut imputations = vec![None; n];
    for i in data.missing_indices() {
        let x = data.row(i);
        radii[i] = uncertainty_radius(model, &x)?;
        imputations[i] = Some(model.fit.predict(&x)?.into_values());
    }
    sweep_with(data, &radii, &imputations, gamma_grid, downstream, exec)
}

/// Smallest threshold among the rows attaining the maximal metric.
pub fn best_threshold(sweep: &[ThresholdSweepRow]) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for row in sweep {
        if let Some(m) = row.metric {
            match best {
                Some((bm, bg)) if m < bm || (m == bm && row.gamma >= bg) => {}
                _ => best = Some((m, row.gamma)),
            }
        }
    }
    best.map(|(_, g)| g)
        .ok_or_else(|| Error::InvalidArgument("no valid metric in sweep".into()))
}
