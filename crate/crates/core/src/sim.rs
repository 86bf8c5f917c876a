//! Monte-Carlo simulation harness.
//!
//! Covariates are independent `U[0, 1]`, responses are
//! `Y_i(t) = (Σ_j X_ij) t + σ_lp / √snr · ε_i` on an equidistant grid, and
//! observability follows one of three built-in missingness mechanisms.
//! Ground truth is kept for every row so that imputations of missing rows
//! can be scored.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bspline::type7_quantile;
use crate::conformal::{calibrate, CalibrationConfig};
use crate::dataset::DistributionalDataset;
use crate::error::{Error, Result};
use crate::frechet::fit_wfrechet_rows;
use crate::par::{map_range, Exec};
use crate::propensity::{fit_propensity, ipw_weights, sigmoid, BasisSpec};
use crate::quantile::{monotone_project, wasserstein2, ProbGrid, QuantileFunction};

pub const SAMPLE_SIZES: [usize; 4] = [500, 1000, 2000, 5000];
pub const COVARIATE_COUNTS: [usize; 3] = [1, 2, 5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Mechanism {
    /// `P(δ = 1) = 0.5`.
    NonDependent,
    /// `logit π(x) = −0.75 + xᵀβ` with fixed coefficients per `p`.
    Linear,
    NonLinear,
    /// `logit π(x) = intercept + xᵀcoefficients`.
    CustomLinear {
        intercept: f64,
        coefficients: Vec<f64>,
    },
}

impl Mechanism {
    pub const BUILTIN: [Mechanism; 3] = [
        Mechanism::NonDependent,
        Mechanism::Linear,
        Mechanism::NonLinear,
    ];

    pub fn supports(&self, p: usize) -> bool {
        match self {
            Mechanism::NonDependent => true,
            Mechanism::Linear | Mechanism::NonLinear => COVARIATE_COUNTS.contains(&p),
            Mechanism::CustomLinear { coefficients, .. } => coefficients.len() == p,
        }
    }

    /// `logit P(δ = 1 | x)`.
    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        if !self.supports(x.len()) {
            return Err(Error::InvalidArgument(format!(
                "mechanism {self} is not defined for p = {}",
                x.len()
            )));
        }
        use std::f64::consts::TAU;
        Ok(match (self, x) {
            (Mechanism::NonDependent, _) => 0.0,
            (Mechanism::Linear, [a]) => -0.75 + 1.55 * a,
            (Mechanism::Linear, [a, b]) => -0.75 + 1.89 * a - 0.37 * b,
            (Mechanism::Linear, [a, b, c, d, e]) => {
                -0.75 + 0.82 * a - 0.37 * b + 0.09 * c + 0.53 * d + 0.75 * e
            }
            (Mechanism::NonLinear, [a]) => -0.75 + 2.55 * a * a,
            (Mechanism::NonLinear, [a, b]) => -0.75 + 1.89 * a.powi(3) - 0.37 * b * b + 0.75 * a,
            (Mechanism::NonLinear, [a, b, c, d, e]) => {
                -0.75 + 1.12 * a.powi(3) - 0.37 * b * b
                    + 1.09 * c
                    + 0.1 * (TAU * d).sin()
                    + 0.75 * (TAU * e).cos()
            }
            (
                Mechanism::CustomLinear {
                    intercept,
                    coefficients,
                },
                _,
            ) => intercept + coefficients.iter().zip(x).map(|(b, v)| b * v).sum::<f64>(),
            _ => unreachable!("guarded by supports"),
        })
    }

    /// True propensity `P(δ = 1 | x)`.
    pub fn propensity(&self, x: &[f64]) -> Result<f64> {
        self.logit(x).map(sigmoid)
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::NonDependent => "nondep",
            Mechanism::Linear => "linear",
            Mechanism::NonLinear => "nonlinear",
            Mechanism::CustomLinear { .. } => "custom",
        })
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nondep" | "non_dependent" | "non-dependent" => Ok(Mechanism::NonDependent),
            "linear" => Ok(Mechanism::Linear),
            "nonlinear" | "non_linear" | "non-linear" => Ok(Mechanism::NonLinear),
            other => Err(Error::InvalidArgument(format!(
                "unknown mechanism '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// One `ε_i` per subject, shared across the grid.
    #[default]
    Subject,
    /// Independent `ε_it`; curves are projected onto monotone functions.
    Pointwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub mechanism: Mechanism,
    pub p: usize,
    pub n: usize,
    pub grid_size: usize,
    /// `f64::INFINITY` removes the noise term.
    pub snr: f64,
    pub seed: u64,
    pub noise: NoiseKind,
    /// Allow `(p, n)` outside the standard design.
    pub custom: bool,
}

impl ScenarioSpec {
    pub fn new(mechanism: Mechanism, p: usize, n: usize, seed: u64) -> Self {
        Self {
            mechanism,
            p,
            n,
            grid_size: 50,
            snr: 30.0,
            seed,
            noise: NoiseKind::Subject,
            custom: false,
        }
    }

    pub fn id(&self) -> String {
        format!("{}_p{}_n{}", self.mechanism, self.p, self.n)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.custom {
            if !COVARIATE_COUNTS.contains(&self.p) {
                return Err(Error::InvalidArgument(format!(
                    "p = {} is not in {{1, 2, 5}}; pass custom",
                    self.p
                )));
            }
            if !SAMPLE_SIZES.contains(&self.n) {
                return Err(Error::InvalidArgument(format!(
                    "n = {} is not in {{500, 1000, 2000, 5000}}; pass custom",
                    self.n
                )));
            }
            if matches!(self.mechanism, Mechanism::CustomLinear { .. }) {
                return Err(Error::InvalidArgument(
                    "custom mechanisms require custom".into(),
                ));
            }
        }
        if self.p == 0 || self.n < 4 {
            return Err(Error::InvalidArgument("need p >= 1 and n >= 4".into()));
        }
        if !self.mechanism.supports(self.p) {
            return Err(Error::InvalidArgument(format!(
                "mechanism {} is not defined for p = {}",
                self.mechanism, self.p
            )));
        }
        if self.snr.is_nan() || self.snr <= 0.0 {
            return Err(Error::InvalidArgument("snr must be positive".into()));
        }
        if self.grid_size < 2 {
            return Err(Error::InvalidGrid("grid needs at least 2 points".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<ProbGrid> {
        ProbGrid::uniform(self.grid_size)
    }
}

/// Conditional mean `m(x, t) = (Σ_j x_j) t`.
pub fn true_mean(x: &[f64], grid: &ProbGrid) -> QuantileFunction {
    let s: f64 = x.iter().sum();
    QuantileFunction::new(grid.clone(), grid.points().iter().map(|t| s * t).collect())
        .expect("nondecreasing for nonnegative covariates")
}

pub fn generate_dataset(spec: &ScenarioSpec) -> Result<DistributionalDataset> {
    spec.validate()?;
    let grid = spec.grid()?;
    let (n, p, g) = (spec.n, spec.p, grid.len());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // draw row by row so that equal seeds give nested datasets across n
    let draws = match spec.noise {
        NoiseKind::Subject => 1,
        NoiseKind::Pointwise => g,
    };
    let mut xs = Vec::with_capacity(n * p);
    let mut eps = Vec::with_capacity(n * draws);
    let mut delta = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..p).map(|_| rng.random::<f64>()).collect();
        eps.extend((0..draws).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng)));
        let pi = spec.mechanism.propensity(&row)?;
        delta.push(rng.random::<f64>() < pi);
        xs.extend(row);
    }
    let x = DMatrix::from_row_slice(n, p, &xs);
    let sums: Vec<f64> = (0..n).map(|i| x.row(i).sum()).collect();

    // sd of the linear predictor over every (subject, grid point) entry
    let count = (n * g) as f64;
    let mean = sums.iter().sum::<f64>() * grid.points().iter().sum::<f64>() / count;
    let sq: f64 =
        sums.iter().map(|s| s * s).sum::<f64>() * grid.points().iter().map(|t| t * t).sum::<f64>();
    let sigma_lp = (sq / count - mean * mean).max(0.0).sqrt();
    let scale = if spec.snr.is_infinite() {
        0.0
    } else {
        sigma_lp / spec.snr.sqrt()
    };

    let mut responses = Vec::with_capacity(n);
    for (i, &s) in sums.iter().enumerate() {
        let e = &eps[i * draws..(i + 1) * draws];
        let curve: Vec<f64> = match spec.noise {
            NoiseKind::Subject => grid.points().iter().map(|t| s * t + scale * e[0]).collect(),
            NoiseKind::Pointwise => {
                let raw: Vec<f64> = grid
                    .points()
                    .iter()
                    .zip(e)
                    .map(|(t, e)| s * t + scale * e)
                    .collect();
                monotone_project(&raw, &grid)?.into_values()
            }
        };
        responses.push(Some(curve));
    }
    DistributionalDataset::new(
        (0..n).map(|i| format!("s{i}")).collect(),
        x,
        grid,
        responses,
        delta,
        None,
    )
}

/// True propensities of every row.
pub fn true_propensity(mechanism: &Mechanism, data: &DistributionalDataset) -> Result<Vec<f64>> {
    (0..data.n())
        .map(|i| mechanism.propensity(&data.row(i)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WeightSource {
    Estimated {
        basis: BasisSpec,
    },
    /// The generating propensity.
    Oracle,
}

impl Default for WeightSource {
    fn default() -> Self {
        WeightSource::Estimated {
            basis: BasisSpec::Bspline { df: 5 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicationConfig {
    pub alpha: f64,
    pub weights: WeightSource,
    /// Normalize IPW weights to sum to 1 (the default uses `δ / (n π̂)`).
    pub normalized: bool,
    pub ratios: (f64, f64, f64),
    pub finite_sample: bool,
}

impl Default for ReplicationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            weights: WeightSource::default(),
            normalized: false,
            ratios: crate::conformal::DEFAULT_RATIOS,
            finite_sample: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationMetrics {
    pub scenario: String,
    pub rep: usize,
    pub seed: u64,
    pub coverage: f64,
    pub r2: f64,
    pub rmse: f64,
    pub qhat: f64,
    pub saturated: bool,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationFailure {
    pub rep: usize,
    pub seed: u64,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRun {
    pub spec: ScenarioSpec,
    pub config: ReplicationConfig,
    pub metrics: Vec<ReplicationMetrics>,
    pub failures: Vec<ReplicationFailure>,
}

/// splitmix64 of `master ⊕ golden · (rep + 1)`.
pub fn derive_seed(master: u64, rep: usize) -> u64 {
    let mut z = master ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(rep as u64 + 1);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn propensity_for(
    data: &DistributionalDataset,
    mechanism: &Mechanism,
    source: WeightSource,
) -> Result<Vec<f64>> {
    match source {
        WeightSource::Oracle => true_propensity(mechanism, data),
        WeightSource::Estimated { basis } => {
            fit_propensity(&data.x, &data.delta, basis)?.predict_all(&data.x)
        }
    }
}

/// RMSE of the full-data fit against ground truth over the rows in `test`.
pub fn imputation_rmse(
    fit: &crate::frechet::FrechetFit,
    data: &DistributionalDataset,
    test: &[usize],
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let mut sse = 0.0;
    for &i in test {
        let y = data.responses[i]
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument(format!("test row {i} has no ground truth")))?;
        let yhat = fit.predict(&data.row(i))?;
        sse += y
            .iter()
            .zip(yhat.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok((sse / (data.grid.len() * test.len()) as f64).sqrt())
}

/// One replication with the dataset drawn from `derive_seed(spec.seed, rep)`.
/// The conformal split uses the same derived seed.
pub fn run_replication(
    spec: &ScenarioSpec,
    config: &ReplicationConfig,
    rep: usize,
    exec: Exec,
) -> Result<ReplicationMetrics> {
    let seed = derive_seed(spec.seed, rep);
    let data = generate_dataset(&ScenarioSpec {
        seed,
        ..spec.clone()
    })?;
    let pihat = propensity_for(&data, &spec.mechanism, config.weights)?;
    let weights = ipw_weights(&data.delta, &pihat, config.normalized)?;
    let all: Vec<usize> = (0..data.n()).collect();
    let test = data.missing_indices();
    let full = fit_wfrechet_rows(&data, &weights, &all, exec)?;
    let rmse = imputation_rmse(&full, &data, &test)?;
    let cal = CalibrationConfig {
        ratios: config.ratios,
        seed,
        finite_sample: config.finite_sample,
        exec,
    };
    let model = calibrate(&data, &weights, config.alpha, &cal)?;
    let coverage = model.coverage(&data, &test, exec)?;
    Ok(ReplicationMetrics {
        scenario: spec.id(),
        rep,
        seed,
        coverage,
        r2: full.r2,
        rmse,
        qhat: model.qhat,
        saturated: model.saturated,
        n_test: test.len(),
    })
}

/// Replications run in parallel under `Exec::Parallel`; within one
/// replication everything is sequential. Output order is by `rep`.
pub fn run_replications(
    spec: &ScenarioSpec,
    n_reps: usize,
    config: &ReplicationConfig,
    exec: Exec,
) -> Result<ReplicationRun> {
    spec.validate()?;
    if n_reps == 0 {
        return Err(Error::InvalidArgument("n_reps must be >= 1".into()));
    }
    let results = map_range(exec, n_reps, |rep| {
        run_replication(spec, config, rep, Exec::Sequential)
    });
    let mut metrics = Vec::new();
    let mut failures = Vec::new();
    for (rep, r) in results.into_iter().enumerate() {
        match r {
            Ok(m) => metrics.push(m),
            Err(e) => failures.push(ReplicationFailure {
                rep,
                seed: derive_seed(spec.seed, rep),
                code: e.code().to_string(),
                message: e.to_string(),
            }),
        }
    }
    Ok(ReplicationRun {
        spec: spec.clone(),
        config: *config,
        metrics,
        failures,
    })
}

/// `d_W2(m̂(x₀), m(x₀))` at `x₀ = (0.5, …, 0.5)` for one replication.
pub fn consistency_error(spec: &ScenarioSpec, source: WeightSource, rep: usize) -> Result<f64> {
    let seed = derive_seed(spec.seed, rep);
    let data = generate_dataset(&ScenarioSpec {
        seed,
        ..spec.clone()
    })?;
    let pihat = propensity_for(&data, &spec.mechanism, source)?;
    let weights = ipw_weights(&data.delta, &pihat, false)?;
    let all: Vec<usize> = (0..data.n()).collect();
    let fit = fit_wfrechet_rows(&data, &weights, &all, Exec::Sequential)?;
    let x0 = vec![0.5; spec.p];
    wasserstein2(&fit.predict(&x0)?, &true_mean(&x0, &data.grid))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Spread {
    /// Type-7 quartiles; `None` for an empty input.
    pub fn of(values: &[f64]) -> Option<Self> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(Self {
            median: type7_quantile(&v, 0.5),
            q1: type7_quantile(&v, 0.25),
            q3: type7_quantile(&v, 0.75),
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub mechanism: String,
    pub p: usize,
    pub n: usize,
    pub n_reps: usize,
    pub n_failed: usize,
    pub coverage_median: f64,
    pub coverage_q1: f64,
    pub coverage_q3: f64,
    pub coverage_mean: f64,
    pub r2_median: f64,
    pub r2_q1: f64,
    pub r2_q3: f64,
    pub rmse_median: f64,
    pub rmse_q1: f64,
    pub rmse_q3: f64,
}

pub fn summarize(run: &ReplicationRun) -> Result<SummaryRow> {
    let pick = |f: fn(&ReplicationMetrics) -> f64| run.metrics.iter().map(f).collect::<Vec<f64>>();
    let none =
        || Error::InvalidArgument(format!("no successful replications for {}", run.spec.id()));
    let cov_values = pick(|m| m.coverage);
    let cov = Spread::of(&cov_values).ok_or_else(none)?;
    let r2 = Spread::of(&pick(|m| m.r2)).ok_or_else(none)?;
    let rmse = Spread::of(&pick(|m| m.rmse)).ok_or_else(none)?;
    Ok(SummaryRow {
        scenario: run.spec.id(),
        mechanism: run.spec.mechanism.to_string(),
        p: run.spec.p,
        n: run.spec.n,
        n_reps: run.metrics.len() + run.failures.len(),
        n_failed: run.failures.len(),
        coverage_median: cov.median,
        coverage_q1: cov.q1,
        coverage_q3: cov.q3,
        coverage_mean: cov_values.iter().sum::<f64>() / cov_values.len() as f64,
        r2_median: r2.median,
        r2_q1: r2.q1,
        r2_q3: r2.q3,
        rmse_median: rmse.median,
        rmse_q1: rmse.q1,
        rmse_q3: rmse.q3,
    })
}

/// Every standard `(mechanism, p, n)` cell, in that nesting order. Cells
/// that differ only in `n` share a seed, so their replications draw nested
/// datasets.
pub fn full_design(seed: u64) -> Vec<ScenarioSpec> {
    let mut specs = Vec::new();
    for (m, mech) in Mechanism::BUILTIN.iter().enumerate() {
        for (j, &p) in COVARIATE_COUNTS.iter().enumerate() {
            let cell_seed = derive_seed(seed, m * 10 + j);
            for &n in &SAMPLE_SIZES {
                specs.push(ScenarioSpec::new(mech.clone(), p, n, cell_seed));
            }
        }
    }
    specs
}

/// Survival scenario with a planted accuracy boundary for the threshold
/// sweep. Every curve is `100 + 20 s + 30 t` for a subject score `s`, and
/// the event hazard is `exp(2 s)`. Observed subjects have `s ~ U[-0.5, 0.5]`.
/// Unobserved subjects have `s ~ U[-3, 3]`; those with radius at most
/// `gamma_star` are imputed exactly, the rest receive the curve of an
/// unrelated score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedBoundary {
    pub n_observed: usize,
    pub n_accurate: usize,
    pub n_noisy: usize,
    pub gamma_star: f64,
    /// Radii of noisy rows lie in `(gamma_star, max_radius]`.
    pub max_radius: f64,
    pub grid_size: usize,
    /// Fraction of subjects censored at a uniform time.
    pub censoring: f64,
}

impl Default for PlantedBoundary {
    fn default() -> Self {
        Self {
            n_observed: 300,
            n_accurate: 260,
            n_noisy: 340,
            gamma_star: 130.0,
            max_radius: 300.0,
            grid_size: 21,
            censoring: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedScenario {
    pub data: DistributionalDataset,
    /// Indexed by row; `NaN` on observed rows.
    pub radii: Vec<f64>,
    pub imputations: Vec<Option<Vec<f64>>>,
    /// Whether each row's imputation matches its true curve.
    pub accurate: Vec<bool>,
}

impl PlantedBoundary {
    pub fn generate(&self, seed: u64) -> Result<PlantedScenario> {
        use crate::dataset::SurvivalRecord;
        let grid = ProbGrid::uniform(self.grid_size)?;
        let curve = |s: f64| {
            grid.points()
                .iter()
                .map(|t| 100.0 + 20.0 * s + 30.0 * t)
                .collect::<Vec<f64>>()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.n_observed + self.n_accurate + self.n_noisy;
        let (mut ids, mut xs, mut responses, mut delta, mut survival) =
            (vec![], vec![], vec![], vec![], vec![]);
        let (mut radii, mut imputations, mut accurate) = (vec![], vec![], vec![]);
        for i in 0..n {
            let observed = i < self.n_observed;
            let is_accurate = !observed && i < self.n_observed + self.n_accurate;
            let s: f64 = if observed {
                rng.random_range(-0.5..0.5)
            } else {
                rng.random_range(-3.0..3.0)
            };
            let time = -(-rng.random::<f64>()).ln_1p() / (2.0 * s).exp();
            let censor = rng.random::<f64>() < self.censoring;
            let time = if censor {
                time * rng.random::<f64>()
            } else {
                time
            };
            survival.push(SurvivalRecord::new(time.max(1e-9), !censor)?);
            ids.push(format!("s{i}"));
            xs.push(rng.random::<f64>());
            responses.push(Some(curve(s)));
            delta.push(observed);
            if observed {
                radii.push(f64::NAN);
                imputations.push(None);
                accurate.push(true);
            } else if is_accurate {
                radii.push(rng.random_range(0.0..=self.gamma_star));
                imputations.push(Some(curve(s)));
                accurate.push(true);
            } else {
                let r = self.gamma_star
                    + (self.max_radius - self.gamma_star) * (1.0 - rng.random::<f64>());
                radii.push(r);
                imputations.push(Some(curve(rng.random_range(-3.0..3.0))));
                accurate.push(false);
            }
        }
        let x = DMatrix::from_vec(n, 1, xs);
        let data = DistributionalDataset::new(ids, x, grid, responses, delta, Some(survival))?;
        Ok(PlantedScenario {
            data,
            radii,
            imputations,
            accurate,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Mean of π over `U[0,1]^p` by a tensor midpoint rule.
    fn mean_propensity(mech: &Mechanism, p: usize) -> f64 {
        let m = match p {
            1 => 4000,
            2 => 400,
            _ => 14,
        };
        let mut idx = vec![0usize; p];
        let mut total = 0.0;
        let mut count = 0usize;
        loop {
            let x: Vec<f64> = idx.iter().map(|&k| (k as f64 + 0.5) / m as f64).collect();
            total += mech.propensity(&x).unwrap();
            count += 1;
            let mut d = 0;
            while d < p {
                idx[d] += 1;
                if idx[d] < m {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
            if d == p {
                break;
            }
        }
        total / count as f64
    }

    #[test]
    fn missingness_fraction_matches_quadrature() {
        for mech in Mechanism::BUILTIN {
            for p in COVARIATE_COUNTS {
                let expect = 1.0 - mean_propensity(&mech, p);
                let data = generate_dataset(&ScenarioSpec::new(mech.clone(), p, 5000, 17)).unwrap();
                let frac = data.missing_indices().len() as f64 / 5000.0;
                // binomial sd at n = 5000 is about 0.007
                assert!(
                    (frac - expect).abs() < 0.025,
                    "{mech} p={p}: {frac} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn builtin_mechanisms_are_near_half_missing() {
        // The linear p = 5 coefficients give a mean missingness
        // of about 0.461, so that cell is checked against its own value.
        for mech in Mechanism::BUILTIN {
            for p in COVARIATE_COUNTS {
                let miss = 1.0 - mean_propensity(&mech, p);
                if mech == Mechanism::Linear && p == 5 {
                    assert!((miss - 0.4614).abs() < 1e-3, "{miss}");
                } else {
                    assert!((miss - 0.5).abs() < 0.02, "{mech} p={p}: {miss}");
                }
            }
        }
    }

    #[test]
    fn equal_seeds_give_nested_datasets() {
        let small = generate_dataset(&ScenarioSpec::new(Mechanism::NonLinear, 2, 500, 6)).unwrap();
        let large = generate_dataset(&ScenarioSpec::new(Mechanism::NonLinear, 2, 1000, 6)).unwrap();
        assert_eq!(small.delta[..], large.delta[..500]);
        for i in 0..500 {
            assert_eq!(small.row(i), large.row(i));
        }
    }

    #[test]
    fn noiseless_generation_is_exact() {
        let spec = ScenarioSpec {
            snr: f64::INFINITY,
            ..ScenarioSpec::new(Mechanism::Linear, 2, 500, 3)
        };
        let data = generate_dataset(&spec).unwrap();
        for i in 0..data.n() {
            let s: f64 = data.row(i).iter().sum();
            let y = data.responses[i].as_ref().unwrap();
            for (v, t) in y.iter().zip(data.grid.points()) {
                assert_eq!(*v, s * t);
            }
        }
    }

    #[test]
    fn curves_are_monotone_and_noise_is_a_shift() {
        let spec = ScenarioSpec::new(Mechanism::NonLinear, 5, 500, 4);
        let data = generate_dataset(&spec).unwrap();
        assert!(data.responses.iter().all(|r| r.is_some()));
        for i in 0..data.n() {
            let s: f64 = data.row(i).iter().sum();
            let y = data.responses[i].as_ref().unwrap();
            let shifts: Vec<f64> = y
                .iter()
                .zip(data.grid.points())
                .map(|(v, t)| v - s * t)
                .collect();
            assert!(shifts.iter().all(|d| (d - shifts[0]).abs() < 1e-12));
            assert!(crate::quantile::is_nondecreasing(y));
        }
        let point = generate_dataset(&ScenarioSpec {
            noise: NoiseKind::Pointwise,
            ..spec
        })
        .unwrap();
        assert!(point
            .responses
            .iter()
            .all(|r| crate::quantile::is_nondecreasing(r.as_ref().unwrap())));
    }

    #[test]
    fn noise_scale_follows_snr() {
        let spec = ScenarioSpec::new(Mechanism::NonDependent, 1, 5000, 8);
        let data = generate_dataset(&spec).unwrap();
        let g = data.grid.len();
        let shifts: Vec<f64> = (0..data.n())
            .map(|i| data.responses[i].as_ref().unwrap()[g - 1] - data.row(i)[0])
            .collect();
        let sd = (shifts.iter().map(|s| s * s).sum::<f64>() / shifts.len() as f64).sqrt();
        // σ_lp for p = 1: sd of U·t with U, t independent uniform on [0, 1]
        let tm: f64 = data.grid.points().iter().sum::<f64>() / g as f64;
        let t2: f64 = data.grid.points().iter().map(|t| t * t).sum::<f64>() / g as f64;
        let sigma_lp = ((1.0 / 3.0) * t2 - 0.25 * tm * tm).sqrt();
        assert!((sd - sigma_lp / 30f64.sqrt()).abs() < 0.003, "{sd}");
    }

    #[test]
    fn spec_validation() {
        assert!(ScenarioSpec::new(Mechanism::Linear, 3, 500, 0)
            .validate()
            .is_err());
        assert!(ScenarioSpec::new(Mechanism::Linear, 2, 600, 0)
            .validate()
            .is_err());
        assert!(ScenarioSpec {
            custom: true,
            ..ScenarioSpec::new(Mechanism::NonDependent, 3, 600, 0)
        }
        .validate()
        .is_ok());
        assert!(ScenarioSpec {
            custom: true,
            ..ScenarioSpec::new(Mechanism::Linear, 3, 600, 0)
        }
        .validate()
        .is_err());
        let custom = Mechanism::CustomLinear {
            intercept: 0.1,
            coefficients: vec![0.5, -0.5, 1.0],
        };
        assert!(ScenarioSpec {
            custom: true,
            ..ScenarioSpec::new(custom.clone(), 3, 600, 0)
        }
        .validate()
        .is_ok());
        assert_eq!(custom.logit(&[1.0, 1.0, 1.0]).unwrap(), 1.1);
        assert_eq!(
            "non_linear".parse::<Mechanism>().unwrap(),
            Mechanism::NonLinear
        );
        assert!("quadratic".parse::<Mechanism>().is_err());
        assert!((Mechanism::Linear.propensity(&[0.5]).unwrap() - sigmoid(0.025)).abs() < 1e-15);
    }

    #[test]
    fn replications_are_deterministic_and_exec_independent() {
        let spec = ScenarioSpec::new(Mechanism::Linear, 1, 500, 21);
        let cfg = ReplicationConfig::default();
        let a = run_replications(&spec, 4, &cfg, Exec::Parallel).unwrap();
        let b = run_replications(&spec, 4, &cfg, Exec::Sequential).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.metrics.len() + a.failures.len(), 4);
        for m in &a.metrics {
            assert!((0.0..=1.0).contains(&m.coverage));
            assert!(m.rmse >= 0.0);
            assert!(m.r2 > 0.5);
        }
        let seeds: Vec<u64> = a.metrics.iter().map(|m| m.seed).collect();
        let mut uniq = seeds.clone();
        uniq.dedup();
        assert_eq!(seeds, uniq);
    }

    #[test]
    fn summary_of_single_and_constant_runs() {
        let s = Spread::of(&[0.3]).unwrap();
        assert_eq!((s.median, s.iqr()), (0.3, 0.0));
        let s = Spread::of(&[0.7; 9]).unwrap();
        assert_eq!(s.iqr(), 0.0);
        let s = Spread::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (1.75, 2.5, 3.25));
        assert!(Spread::of(&[]).is_none());
        let spec = ScenarioSpec::new(Mechanism::NonDependent, 1, 500, 2);
        let run =
            run_replications(&spec, 1, &ReplicationConfig::default(), Exec::Sequential).unwrap();
        let row = summarize(&run).unwrap();
        assert_eq!(row.coverage_median, run.metrics[0].coverage);
        assert_eq!(row.rmse_q3 - row.rmse_q1, 0.0);
        assert_eq!(full_design(0).len(), 36);
    }

    #[test]
    fn consistency_error_is_small_at_large_n() {
        let spec = ScenarioSpec::new(Mechanism::Linear, 2, 5000, 5);
        let e = consistency_error(&spec, WeightSource::Oracle, 0).unwrap();
        assert!(e < 0.02, "{e}");
    }
}
