use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use wassimpute::conformal::{calibrate, ConformalModel};
use wassimpute::dataset::DistributionalDataset;
use wassimpute::io::{
    attach_truth, fmt_f64, ingest_raw, manifest_path_for, read_covariates, read_dataset, read_json,
    write_dataset, write_json, write_quantiles, write_rejects, write_rows, write_table,
    write_truth,
};
use wassimpute::par::Exec;
use wassimpute::personalize::{
    best_threshold, evaluate_complete_cases, sweep_thresholds, uncertainty_radius, CoxConcordance,
};
use wassimpute::pipeline::{
    self, band_rows, sweep_csv_rows, weight_rows, DownstreamKind, PipelineConfig, RadiusRow,
};
use wassimpute::propensity::{fit_propensity, ipw_weights, BasisSpec};
use wassimpute::quantile::ProbGrid;
use wassimpute::sim::{
    derive_seed, generate_dataset, run_replications, summarize, Mechanism, NoiseKind,
    ReplicationConfig, ScenarioSpec, WeightSource,
};
use wassimpute::survival::Retain;
use wassimpute::{Error, ErrorKind, Result};

#[derive(Parser)]
#[command(
    name = "wassimpute",
    version,
    about = "Distributional imputation with conformal bands"
)]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Number of equidistant probability grid points.
    #[arg(long, global = true)]
    grid_size: Option<usize>,
    /// Miscoverage level of the conformal bands.
    #[arg(long, global = true, default_value_t = 0.05)]
    alpha: f64,
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn raw (id, value) rows into empirical quantile functions.
    Ingest {
        #[arg(long)]
        raw: PathBuf,
        /// One expected id per line; unseen ids are rejected.
        #[arg(long)]
        ids: Option<PathBuf>,
    },
    /// Fit the propensity model and write IPW weights.
    Weights {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Calibrate the conformal model.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Prediction bands for a covariate table.
    Bands {
        #[arg(long)]
        model: PathBuf,
        /// CSV with columns id and x_1..x_p.
        #[arg(long)]
        covariates: PathBuf,
    },
    /// Uncertainty radii and the threshold sweep.
    Personalize {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Complete-case survival model: C-index and fPC score table.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Monte-Carlo replications of one simulation scenario.
    Simulate {
        #[arg(long, value_parser = parse_mechanism)]
        mechanism: Mechanism,
        #[arg(long)]
        p: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 200)]
        reps: usize,
        #[arg(long, default_value_t = 30.0)]
        snr: f64,
        #[arg(long, value_enum, default_value_t = Noise::Subject)]
        noise: Noise,
        /// Permit (p, n) outside the standard design.
        #[arg(long)]
        custom: bool,
        /// Use the generating propensity instead of an estimate.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        finite_sample: bool,
        #[arg(long, value_parser = parse_basis, default_value = "bspline:5")]
        propensity_basis: BasisSpec,
        #[arg(long, value_parser = parse_ratios, default_value = "0.5,0.25,0.25")]
        ratios: (f64, f64, f64),
        /// Also write the first replication's dataset and its ground truth.
        #[arg(long)]
        emit_dataset: bool,
    },
    /// Full pipeline into one artifact directory.
    #[command(alias = "pipeline")]
    Report {
        #[command(flatten)]
        data: DataArgs,
        /// Ground truth for unobserved rows, scored as band coverage.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[command(flatten)]
        fit: FitArgs,
        #[command(flatten)]
        sweep: SweepArgs,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Dataset CSV.
    #[arg(long)]
    data: PathBuf,
    /// Dataset manifest; defaults to the CSV path with a .json extension.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, value_parser = parse_basis, default_value = "bspline:5")]
    propensity_basis: BasisSpec,
    /// Normalize IPW weights to sum to one.
    #[arg(long)]
    normalized_weights: bool,
    #[arg(long, value_parser = parse_ratios, default_value = "0.5,0.25,0.25")]
    ratios: (f64, f64, f64),
    /// Inflate the calibration level by (1 + 1/n_eff).
    #[arg(long)]
    finite_sample: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated thresholds; `inf` admits every unobserved row.
    #[arg(long, value_parser = parse_gamma_grid, default_value = "0,80,90,100,110,120,130,140,150,160,170,180,190,200,inf")]
    gamma_grid: GammaGrid,
    #[arg(long, value_enum, default_value_t = DownstreamArg::Cox)]
    downstream: DownstreamArg,
    /// Keep a fixed number of fPCs instead of a variance fraction.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0.98)]
    var_threshold: f64,
    /// Cross-validate the C-index with this many folds.
    #[arg(long)]
    cv_folds: Option<usize>,
    /// Leave the scalar covariates out of the survival model.
    #[arg(long)]
    no_covariates: bool,
}

#[derive(Clone, Debug)]
struct GammaGrid(Vec<f64>);

#[derive(Clone, Copy, ValueEnum)]
enum DownstreamArg {
    Cox,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum Noise {
    Subject,
    Pointwise,
}

fn parse_mechanism(s: &str) -> std::result::Result<Mechanism, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_basis(s: &str) -> std::result::Result<BasisSpec, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_ratios(s: &str) -> std::result::Result<(f64, f64, f64), String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err("expected three comma-separated ratios".into()),
    }
}

fn parse_gamma_grid(s: &str) -> std::result::Result<GammaGrid, String> {
    s.split(',')
        .map(|p| match p.trim() {
            "inf" | "Inf" | "INF" => Ok(f64::INFINITY),
            other => other.parse::<f64>().map_err(|e| format!("'{other}': {e}")),
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(GammaGrid)
}

impl SweepArgs {
    fn evaluator(&self, seed: u64) -> CoxConcordance {
        CoxConcordance {
            retain: self.retain(),
            include_covariates: !self.no_covariates,
            cv_folds: self.cv_folds,
            seed,
        }
    }

    fn retain(&self) -> Retain {
        match self.k {
            Some(k) => Retain::Fixed(k),
            None => Retain::VarianceFraction(self.var_threshold),
        }
    }
}

impl DataArgs {
    fn load(&self, grid_size: Option<usize>) -> Result<DistributionalDataset> {
        let manifest = self
            .manifest
            .clone()
            .unwrap_or_else(|| manifest_path_for(&self.data));
        let data = read_dataset(&self.data, &manifest)?;
        if let Some(g) = grid_size {
            if g != data.grid.len() {
                return Err(Error::GridMismatch);
            }
        }
        Ok(data)
    }

    fn paths(&self) -> Vec<PathBuf> {
        vec![
            self.data.clone(),
            self.manifest
                .clone()
                .unwrap_or_else(|| manifest_path_for(&self.data)),
        ]
    }
}

fn exec(cli: &Cli) -> Exec {
    if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn configure_threads() -> Result<()> {
    #[cfg(feature = "parallel")]
    if let Ok(v) = std::env::var("WASSIMPUTE_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| {
            Error::InvalidArgument(format!(
                "WASSIMPUTE_THREADS must be a positive integer, got '{v}'"
            ))
        })?;
        if n == 0 {
            return Err(Error::InvalidArgument(
                "WASSIMPUTE_THREADS must be positive".into(),
            ));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    Ok(())
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    std::fs::create_dir_all(&cli.out)?;
    Ok(&cli.out)
}

fn run(cli: &Cli) -> Result<()> {
    configure_threads()?;
    let exec = exec(cli);
    match &cli.command {
        Command::Ingest { raw, ids } => {
            let grid = ProbGrid::uniform(cli.grid_size.unwrap_or(101))?;
            let expected = match ids {
                Some(path) => Some(
                    std::fs::read_to_string(path)?
                        .lines()
                        .map(str::trim)
                        .filter(|l| !l.is_empty())
                        .map(String::from)
                        .collect::<Vec<_>>(),
                ),
                None => None,
            };
            let ingested = ingest_raw(raw, &grid, expected.as_deref())?;
            let out = out_dir(cli)?;
            write_quantiles(
                &out.join("quantiles.csv"),
                &grid,
                &ingested.ids,
                &ingested.quantiles,
            )?;
            write_rejects(&out.join("rejects.csv"), &ingested.rejects)?;
            println!(
                "ingested {} subjects, rejected {}",
                ingested.ids.len(),
                ingested.rejects.len()
            );
        }
        Command::Weights { data, fit } => {
            let d = data.load(cli.grid_size)?;
            let prop = fit_propensity(&d.x, &d.delta, fit.propensity_basis)?;
            let pihat = prop.predict_all(&d.x)?;
            let w = ipw_weights(&d.delta, &pihat, fit.normalized_weights)?;
            let out = out_dir(cli)?;
            write_json(&out.join("propensity.json"), &prop)?;
            write_rows(
                &out.join("weights.csv"),
                &weight_rows(&d, &pihat, &w),
                &["id", "delta", "pihat", "weight"],
            )?;
        }
        Command::Fit { data, fit } => {
            let d = data.load(cli.grid_size)?;
            let cfg = PipelineConfig {
                seed: cli.seed,
                alpha: cli.alpha,
                ratios: fit.ratios,
                basis: fit.propensity_basis,
                normalized_weights: fit.normalized_weights,
                finite_sample: fit.finite_sample,
                exec,
                ..Default::default()
            };
            let prop =
                fit_propensity(&d.x, &d.delta, cfg.basis).map_err(|e| e.in_stage("propensity"))?;
            let pihat = prop.predict_all(&d.x)?;
            let w = ipw_weights(&d.delta, &pihat, cfg.normalized_weights)?;
            let model =
                calibrate(&d, &w, cli.alpha, &cfg.calibration()).map_err(|e| e.in_stage("fit"))?;
            let out = out_dir(cli)?;
            write_json(&out.join("model.json"), &model)?;
            println!(
                "qhat = {}{}",
                model.qhat,
                if model.saturated { " (saturated)" } else { "" }
            );
        }
        Command::Bands { model, covariates } => {
            let m: ConformalModel = read_json(model)?;
            let (ids, x) = read_covariates(covariates, m.p())?;
            let grid = m.fit.grid.clone();
            let responses = vec![None; ids.len()];
            let d = DistributionalDataset::new(
                ids.clone(),
                x,
                grid,
                responses,
                vec![false; ids.len()],
                None,
            )?;
            let rows: Vec<usize> = (0..d.n()).collect();
            let out = out_dir(cli)?;
            write_rows(
                &out.join("bands.csv"),
                &band_rows(&m, &d, &rows)?,
                &["id", "t", "center", "lower", "upper"],
            )?;
        }
        Command::Personalize { data, model, sweep } => {
            let d = data.load(cli.grid_size)?;
            let m: ConformalModel = read_json(model)?;
            let radii = d
                .missing_indices()
                .into_iter()
                .map(|i| {
                    Ok(RadiusRow {
                        id: d.ids[i].clone(),
                        r: uncertainty_radius(&m, &d.row(i))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let grid = if radii.is_empty() {
                vec![0.0]
            } else {
                sweep.gamma_grid.0.clone()
            };
            let rows = match sweep.downstream {
                DownstreamArg::Cox => {
                    sweep_thresholds(&d, &m, &grid, &sweep.evaluator(cli.seed), exec)?
                }
                DownstreamArg::None => {
                    sweep_thresholds(&d, &m, &grid, &wassimpute::personalize::NoDownstream, exec)?
                }
            };
            let out = out_dir(cli)?;
            write_rows(&out.join("radii.csv"), &radii, &["id", "r"])?;
            write_rows(
                &out.join("sweep.csv"),
                &sweep_csv_rows(&rows),
                &["gamma", "n_included", "metric"],
            )?;
            match best_threshold(&rows) {
                Ok(g) => println!("best gamma = {g}"),
                Err(_) => println!("no valid downstream metric"),
            }
        }
        Command::Evaluate { data, sweep } => {
            let d = data.load(cli.grid_size)?;
            let ev = evaluate_complete_cases(&d, &sweep.evaluator(cli.seed))?;
            let out = out_dir(cli)?;
            write_json(
                &out.join("evaluate.json"),
                &serde_json::json!({
                    "n": ev.n,
                    "n_events": ev.n_events,
                    "k": ev.k,
                    "variance_explained": ev.variance_explained,
                    "coefficients": ev.coefficients,
                    "converged": ev.converged,
                    "c_index": ev.c_index,
                    "scheme": ev.scheme,
                    "cv_c_index": ev.cv_c_index,
                }),
            )?;
            write_scores(&out.join("scores.csv"), &d, &ev)?;
            println!("C-index = {:.4}", ev.c_index);
        }
        Command::Simulate {
            mechanism,
            p,
            n,
            reps,
            snr,
            noise,
            custom,
            oracle,
            finite_sample,
            propensity_basis,
            ratios,
            emit_dataset,
        } => {
            let spec = ScenarioSpec {
                mechanism: mechanism.clone(),
                p: *p,
                n: *n,
                grid_size: cli.grid_size.unwrap_or(50),
                snr: *snr,
                seed: cli.seed,
                noise: match noise {
                    Noise::Subject => NoiseKind::Subject,
                    Noise::Pointwise => NoiseKind::Pointwise,
                },
                custom: *custom,
            };
            let config = ReplicationConfig {
                alpha: cli.alpha,
                weights: if *oracle {
                    WeightSource::Oracle
                } else {
                    WeightSource::Estimated {
                        basis: *propensity_basis,
                    }
                },
                normalized: false,
                ratios: *ratios,
                finite_sample: *finite_sample,
            };
            let run = run_replications(&spec, *reps, &config, exec)?;
            let out = out_dir(cli)?;
            write_rows(
                &out.join("metrics.csv"),
                &run.metrics,
                &[
                    "scenario",
                    "rep",
                    "seed",
                    "coverage",
                    "r2",
                    "rmse",
                    "qhat",
                    "saturated",
                    "n_test",
                ],
            )?;
            let summary = summarize(&run)?;
            write_rows(
                &out.join("summary.csv"),
                std::slice::from_ref(&summary),
                &[],
            )?;
            let first_seed = derive_seed(spec.seed, 0);
            if *emit_dataset {
                let data = generate_dataset(&ScenarioSpec {
                    seed: first_seed,
                    ..spec.clone()
                })?;
                write_dataset(
                    &out.join("dataset.csv"),
                    &out.join("dataset.json"),
                    &data,
                    "",
                )?;
                write_truth(&out.join("truth.csv"), &data)?;
            }
            write_json(
                &out.join("manifest.json"),
                &serde_json::json!({
                    "tool": "wassimpute",
                    "version": env!("CARGO_PKG_VERSION"),
                    "spec": spec,
                    "config": config,
                    "reps": reps,
                    "dataset_seed": if *emit_dataset { Some(first_seed) } else { None },
                    "failures": run.failures,
                }),
            )?;
            println!(
                "{}: median coverage {:.4}, R2 {:.4}, RMSE {:.4} ({} failed)",
                summary.scenario,
                summary.coverage_median,
                summary.r2_median,
                summary.rmse_median,
                summary.n_failed
            );
        }
        Command::Report {
            data,
            truth,
            fit,
            sweep,
        } => {
            let mut d = data.load(cli.grid_size)?;
            let mut inputs = data.paths();
            if let Some(t) = truth {
                attach_truth(t, &mut d)?;
                inputs.push(t.clone());
            }
            let cfg = PipelineConfig {
                seed: cli.seed,
                alpha: cli.alpha,
                ratios: fit.ratios,
                basis: fit.propensity_basis,
                normalized_weights: fit.normalized_weights,
                finite_sample: fit.finite_sample,
                gamma_grid: sweep.gamma_grid.0.clone(),
                downstream: match sweep.downstream {
                    DownstreamArg::Cox => DownstreamKind::Cox,
                    DownstreamArg::None => DownstreamKind::None,
                },
                retain: sweep.retain(),
                include_covariates: !sweep.no_covariates,
                cv_folds: sweep.cv_folds,
                exec,
            };
            let out = pipeline::run_to_dir(&d, &cfg, &cli.out, &inputs)?;
            let r = &out.report;
            println!(
                "qhat = {}; coverage = {}; best gamma = {}",
                r.qhat,
                r.coverage.map_or("n/a".into(), |c| c.to_string()),
                r.best_gamma.clone().unwrap_or_else(|| "n/a".into())
            );
        }
    }
    Ok(())
}

fn write_scores(
    path: &Path,
    d: &DistributionalDataset,
    ev: &wassimpute::personalize::CompleteCaseEvaluation,
) -> Result<()> {
    let mut header = vec!["id".to_string()];
    header.extend((1..=ev.k).map(|j| format!("pc_{j}")));
    header.push("risk".into());
    let rows: Vec<Vec<String>> = ev
        .rows
        .iter()
        .zip(&ev.scores)
        .zip(&ev.risk)
        .map(|((&i, s), r)| {
            let mut rec = vec![d.ids[i].clone()];
            rec.extend(s.iter().map(|v| fmt_f64(*v)));
            rec.push(fmt_f64(*r));
            rec
        })
        .collect();
    write_table(path, &header, &rows)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.code());
            ExitCode::from(match e.kind() {
                ErrorKind::Validation => 2,
                ErrorKind::Numerical => 3,
                ErrorKind::Io => 4,
            })
        }
    }
}
