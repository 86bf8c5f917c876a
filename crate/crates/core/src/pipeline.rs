//! End-to-end analysis run writing every intermediate artifact to a
//! directory: propensity fit, IPW weights, conformal model, bands for the
//! unobserved rows, uncertainty radii, threshold sweep and a report.
//!
//! Identical inputs and seed produce byte-identical files; the only
//! run-dependent value is the timestamp in `manifest.json`.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::conformal::{calibrate, CalibrationConfig, ConformalModel, DEFAULT_RATIOS};
use crate::dataset::DistributionalDataset;
use crate::error::{Error, Result};
use crate::io::{write_json, write_rows};
use crate::par::Exec;
use crate::personalize::{
    best_threshold, default_gamma_grid, sweep_with, uncertainty_radius, CoxConcordance, Downstream,
    NoDownstream, ThresholdSweepRow,
};
use crate::propensity::{fit_propensity, ipw_weights, BasisSpec, IpwWeights, PropensityFit};
use crate::survival::Retain;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownstreamKind {
    #[default]
    Cox,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub alpha: f64,
    pub ratios: (f64, f64, f64),
    pub basis: BasisSpec,
    /// Normalize IPW weights; the default `δ / (n π̂)` matches the simulation harness.
    pub normalized_weights: bool,
    pub finite_sample: bool,
    pub gamma_grid: Vec<f64>,
    pub downstream: DownstreamKind,
    pub retain: Retain,
    pub include_covariates: bool,
    pub cv_folds: Option<usize>,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            alpha: 0.05,
            ratios: DEFAULT_RATIOS,
            basis: BasisSpec::default(),
            normalized_weights: false,
            finite_sample: false,
            gamma_grid: default_gamma_grid(),
            downstream: DownstreamKind::Cox,
            retain: Retain::default(),
            include_covariates: true,
            cv_folds: None,
            exec: Exec::default(),
        }
    }
}

impl PipelineConfig {
    pub fn calibration(&self) -> CalibrationConfig {
        CalibrationConfig {
            ratios: self.ratios,
            seed: self.seed,
            finite_sample: self.finite_sample,
            exec: self.exec,
        }
    }

    pub fn evaluator(&self) -> Box<dyn Downstream> {
        match self.downstream {
            DownstreamKind::Cox => Box::new(CoxConcordance {
                retain: self.retain,
                include_covariates: self.include_covariates,
                cv_folds: self.cv_folds,
                seed: self.seed,
            }),
            DownstreamKind::None => Box::new(NoDownstream),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub id: String,
    pub delta: u8,
    pub pihat: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub id: String,
    pub t: f64,
    pub center: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusRow {
    pub id: String,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCsvRow {
    #[serde(with = "crate::serde_float")]
    pub gamma: f64,
    pub n_included: usize,
    pub metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepError {
    #[serde(with = "crate::serde_float")]
    pub gamma: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub n: usize,
    pub p: usize,
    pub n_observed: usize,
    pub n_missing: usize,
    pub alpha: f64,
    pub qhat: f64,
    pub saturated: bool,
    pub calibration_renormalized: bool,
    pub n_calibration: usize,
    pub train1_r2: Option<f64>,
    pub propensity_iterations: usize,
    /// Band coverage of the unobserved rows, when their ground truth is known.
    pub coverage: Option<f64>,
    pub n_truth: usize,
    pub downstream: String,
    pub scheme: String,
    pub best_gamma: Option<String>,
    pub best_metric: Option<f64>,
    pub sweep_errors: Vec<SweepError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config: PipelineConfig,
    pub inputs: Vec<String>,
    pub artifacts: Vec<String>,
    pub timestamp_unix: u64,
}

pub const ARTIFACTS: [&str; 7] = [
    "propensity.json",
    "weights.csv",
    "model.json",
    "bands.csv",
    "radii.csv",
    "sweep.csv",
    "report.json",
];

/// Everything the pipeline computes, before anything is written.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// `None` when every row is observed.
    pub propensity: Option<PropensityFit>,
    pub weights: IpwWeights,
    pub pihat: Vec<f64>,
    pub model: ConformalModel,
    pub radii: Vec<RadiusRow>,
    pub sweep: Vec<ThresholdSweepRow>,
    pub report: PipelineReport,
}

fn gamma_label(g: f64) -> String {
    if g.is_infinite() {
        "inf".into()
    } else {
        format!("{g}")
    }
}

/// Runs every stage in memory. Rows of `data` that are unobserved but carry
/// a response are treated as ground truth for the coverage figure.
pub fn run(data: &DistributionalDataset, config: &PipelineConfig) -> Result<PipelineOutput> {
    let n = data.n();
    let missing = data.missing_indices();
    // with every row observed there is nothing to model and π̂ ≡ 1
    let propensity = if missing.is_empty() {
        None
    } else {
        Some(
            fit_propensity(&data.x, &data.delta, config.basis)
                .map_err(|e| e.in_stage("propensity"))?,
        )
    };
    let pihat = match &propensity {
        Some(fit) => fit
            .predict_all(&data.x)
            .map_err(|e| e.in_stage("propensity"))?,
        None => vec![1.0; n],
    };
    let weights = ipw_weights(&data.delta, &pihat, config.normalized_weights)
        .map_err(|e| e.in_stage("weights"))?;

    let model = calibrate(data, &weights, config.alpha, &config.calibration())
        .map_err(|e| e.in_stage("fit"))?;

    let truth: Vec<usize> = missing
        .iter()
        .copied()
        .filter(|&i| data.responses[i].is_some())
        .collect();
    let coverage = if truth.is_empty() {
        None
    } else {
        Some(
            model
                .coverage(data, &truth, config.exec)
                .map_err(|e| e.in_stage("bands"))?,
        )
    };

    let mut radius = vec![f64::NAN; n];
    let mut imputations = vec![None; n];
    let mut radii = Vec::with_capacity(missing.len());
    for &i in &missing {
        let x = data.row(i);
        let r = uncertainty_radius(&model, &x).map_err(|e| e.in_stage("personalize"))?;
        radius[i] = r;
        imputations[i] = Some(
            model
                .fit
                .predict(&x)
                .map_err(|e| e.in_stage("personalize"))?
                .into_values(),
        );
        radii.push(RadiusRow {
            id: data.ids[i].clone(),
            r,
        });
    }

    let gamma_grid = if missing.is_empty() {
        vec![0.0]
    } else {
        config.gamma_grid.clone()
    };
    let evaluator = config.evaluator();
    let sweep = sweep_with(
        data,
        &radius,
        &imputations,
        &gamma_grid,
        evaluator.as_ref(),
        config.exec,
    )
    .map_err(|e| e.in_stage("personalize"))?;
    let best = best_threshold(&sweep).ok();
    let best_metric = best.and_then(|g| sweep.iter().find(|r| r.gamma == g).and_then(|r| r.metric));

    let report = PipelineReport {
        n,
        p: data.p(),
        n_observed: n - missing.len(),
        n_missing: missing.len(),
        alpha: config.alpha,
        qhat: model.qhat,
        saturated: model.saturated,
        calibration_renormalized: model.calibration_renormalized,
        n_calibration: model.n_calibration,
        train1_r2: model.fit.r2.is_finite().then_some(model.fit.r2),
        propensity_iterations: propensity.as_ref().map_or(0, |p| p.iterations),
        coverage,
        n_truth: truth.len(),
        downstream: evaluator.name().to_string(),
        scheme: match config.downstream {
            DownstreamKind::Cox => CoxConcordance {
                cv_folds: config.cv_folds,
                ..Default::default()
            }
            .scheme(),
            DownstreamKind::None => "none".into(),
        },
        best_gamma: best.map(gamma_label),
        best_metric,
        sweep_errors: sweep
            .iter()
            .filter_map(|r| {
                r.error.as_ref().map(|m| SweepError {
                    gamma: r.gamma,
                    message: m.clone(),
                })
            })
            .collect(),
    };
    Ok(PipelineOutput {
        propensity,
        weights,
        pihat,
        model,
        radii,
        sweep,
        report,
    })
}

/// Runs the pipeline and writes the artifacts plus `manifest.json` into `out`.
pub fn run_to_dir(
    data: &DistributionalDataset,
    config: &PipelineConfig,
    out: &Path,
    inputs: &[PathBuf],
) -> Result<PipelineOutput> {
    let output = run(data, config)?;
    std::fs::create_dir_all(out).map_err(|e| Error::from(e).in_stage("write"))?;
    write_artifacts(data, &output, out).map_err(|e| e.in_stage("write"))?;
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        artifacts: ARTIFACTS.iter().map(|s| s.to_string()).collect(),
        timestamp_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    };
    write_json(&out.join("manifest.json"), &manifest).map_err(|e| e.in_stage("write"))?;
    Ok(output)
}

pub fn weight_rows(
    data: &DistributionalDataset,
    pihat: &[f64],
    weights: &IpwWeights,
) -> Vec<WeightRow> {
    (0..data.n())
        .map(|i| WeightRow {
            id: data.ids[i].clone(),
            delta: u8::from(data.delta[i]),
            pihat: pihat[i],
            weight: weights.w[i],
        })
        .collect()
}

/// Long-format band rows for `rows`.
pub fn band_rows(
    model: &ConformalModel,
    data: &DistributionalDataset,
    rows: &[usize],
) -> Result<Vec<BandRow>> {
    let mut out = Vec::with_capacity(rows.len() * data.grid.len());
    for &i in rows {
        let band = model.predict_band(&data.row(i))?;
        for (k, &t) in band.grid.points().iter().enumerate() {
            out.push(BandRow {
                id: data.ids[i].clone(),
                t,
                center: band.center[k],
                lower: band.lower[k],
                upper: band.upper[k],
            });
        }
    }
    Ok(out)
}

pub fn sweep_csv_rows(sweep: &[ThresholdSweepRow]) -> Vec<SweepCsvRow> {
    sweep
        .iter()
        .map(|r| SweepCsvRow {
            gamma: r.gamma,
            n_included: r.n_included,
            metric: r.metric,
        })
        .collect()
}

fn write_artifacts(data: &DistributionalDataset, o: &PipelineOutput, out: &Path) -> Result<()> {
    write_json(&out.join("propensity.json"), &o.propensity)?;
    write_rows(
        &out.join("weights.csv"),
        &weight_rows(data, &o.pihat, &o.weights),
        &["id", "delta", "pihat", "weight"],
    )?;
    write_json(&out.join("model.json"), &o.model)?;
    let bands = band_rows(&o.model, data, &data.missing_indices())?;
    write_rows(
        &out.join("bands.csv"),
        &bands,
        &["id", "t", "center", "lower", "upper"],
    )?;
    write_rows(&out.join("radii.csv"), &o.radii, &["id", "r"])?;
    write_rows(
        &out.join("sweep.csv"),
        &sweep_csv_rows(&o.sweep),
        &["gamma", "n_included", "metric"],
    )?;
    write_json(&out.join("report.json"), &o.report)?;
    Ok(())
}
