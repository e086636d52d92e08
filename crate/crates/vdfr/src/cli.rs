//! Command-line front door: dataset ingestion, fitting, cross-validation,
//! scenario batches, and surface export.
//!
//! Four subcommands are provided:
//!
//! * `fit` — fit the variable-domain model to a curve table and a subject
//!   table; emits a fit archive (see [`crate::persist`]), a long-format
//!   coefficient-surface grid CSV, and a JSON summary.
//! * `cv` — seeded k-fold cross-validation; emits a per-fold RMSE CSV with
//!   a trailing mean row.
//! * `simulate` — run simulation scenarios from a `key = value` config
//!   file, optionally a named subset of the full scenario grid; emits a
//!   per-replicate CSV and a JSON result per scenario.
//! * `export-surface` — evaluate an archived model's coefficient surface
//!   on a grid; emits long-format `t,T,beta` rows with masked cells
//!   (`t > T`) omitted.
//!
//! All validation failures exit nonzero; with `--json` the error is also
//! written to stdout as a one-line JSON object. Wall-clock timings go to
//! stderr only, so identical inputs produce byte-identical outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::io::{self, IoError};
use crate::model::{self, Family, FitControls, FrozenVariances, ModelError, VdfrFit, VdfrOptions};
use crate::persist::{self, PersistError};
use crate::presmooth::{self, SmoothedCurveSet, SmoothError, VariableDomainDataset};
use crate::simstudy::{
    make_folds, rmse, DomainLaw, ScenarioConfig, ScenarioResult, SimError, TrueBeta,
};

#[derive(Error, Debug)]
pub enum CliError {
    #[error(transparent)]
    Io(#[from] IoError),

    #[error(transparent)]
    Smooth(#[from] SmoothError),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Sim(#[from] SimError),

    #[error(transparent)]
    Persist(#[from] PersistError),

    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },

    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },

    #[error("{path}, line {line}: {message}")]
    Config {
        path: String,
        line: usize,
        message: String,
    },

    #[error("unknown scenario name {name:?}: expected beta<1-4>-<uniform|negbin>-<gaussian|poisson>-<smooth|noisy>-n<100|200|300>")]
    BadScenarioName { name: String },

    #[error("invalid grid spec {spec:?}: expected lo:hi:count with lo < hi and count >= 2")]
    BadGridSpec { spec: String },

    #[error("--folds {folds} needs at least {folds} subjects, got {n}")]
    TooFewSubjectsForFolds { folds: usize, n: usize },
}

/// Variable-domain scalar-on-function regression.
#[derive(Parser, Debug)]
#[command(name = "vdfr", version, about)]
pub struct Cli {
    /// Emit errors as machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit the model to a curve table and a subject table.
    Fit(FitArgs),
    /// Seeded k-fold cross-validation of the model.
    Cv(CvArgs),
    /// Run simulation scenarios from a config file.
    Simulate(SimulateArgs),
    /// Evaluate an archived model's surface on a grid.
    ExportSurface(ExportArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ModelFlags {
    /// Response family.
    #[arg(long, value_parser = parse_family, default_value = "gaussian")]
    pub family: Family,

    /// Per-curve smoothing basis dimension.
    #[arg(long, default_value_t = 25)]
    pub p: usize,

    /// Tensor marginal dimension over t.
    #[arg(long, default_value_t = 25)]
    pub q: usize,

    /// Tensor marginal dimension over the domain length.
    #[arg(long, default_value_t = 25)]
    pub r: usize,
}

impl ModelFlags {
    fn options(&self) -> VdfrOptions {
        VdfrOptions {
            family: self.family,
            p: self.p,
            q: self.q,
            r: self.r,
            ..VdfrOptions::default()
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct InputArgs {
    /// Curve table: header `subject_id,t,x`.
    #[arg(long)]
    pub curves: PathBuf,

    /// Subject table: header `subject_id,y,<covariate names...>`.
    #[arg(long)]
    pub subjects: PathBuf,

    /// Interpolate missing curve values linearly instead of rejecting them.
    #[arg(long)]
    pub impute: bool,

    /// Minimum observations per subject.
    #[arg(long, default_value_t = 10)]
    pub min_obs: usize,
}

impl InputArgs {
    fn load(&self) -> Result<VariableDomainDataset, CliError> {
        let rows = io::read_curves(&self.curves)?;
        let curves = io::group_curves(&rows, &self.curves, self.impute)?;
        let table = io::read_subjects(&self.subjects)?;
        Ok(io::build_dataset(curves, &table, self.min_obs)?)
    }
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: InputArgs,

    #[command(flatten)]
    pub model: ModelFlags,

    /// Grid points per axis for the exported surface.
    #[arg(long, default_value_t = 100)]
    pub grid: usize,

    /// Seed (accepted for interface symmetry; the fit is deterministic).
    #[arg(long, default_value_t = 1)]
    pub seed: u64,

    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CvArgs {
    #[command(flatten)]
    pub input: InputArgs,

    #[command(flatten)]
    pub model: ModelFlags,

    /// Number of folds.
    #[arg(long, default_value_t = 10)]
    pub folds: usize,

    /// Fold-assignment seed.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,

    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Scenario config: `key = value` lines.
    #[arg(long)]
    pub config: PathBuf,

    /// Comma-separated scenario names from the full grid
    /// (`beta1-negbin-poisson-smooth-n100`, ...); the config file then
    /// supplies only the run settings (replicates, seed, folds, p, q, r).
    #[arg(long)]
    pub grid: Option<String>,

    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Fit archive written by `fit`.
    #[arg(long)]
    pub archive: PathBuf,

    /// Grid over t as lo:hi:count (default: 100 points over the archive's
    /// t domain).
    #[arg(long = "t-grid")]
    pub t_grid: Option<String>,

    /// Grid over the domain length T as lo:hi:count (default: 100 points
    /// over the archive's domain-length range).
    #[arg(long = "T-grid")]
    pub domain_grid: Option<String>,

    /// Output CSV path.
    #[arg(long, default_value = "surface.csv")]
    pub out: PathBuf,
}

fn parse_family(s: &str) -> Result<Family, String> {
    match s.to_ascii_lowercase().as_str() {
        "gaussian" => Ok(Family::Gaussian),
        "poisson" => Ok(Family::Poisson),
        other => Err(format!("unknown family `{other}` (accepted: gaussian, poisson)")),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|source| CliError::Write {
        path: path.display().to_string(),
        source,
    })
}

fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect()
}

fn parse_grid_spec(spec: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::BadGridSpec {
        spec: spec.to_string(),
    };
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].parse().map_err(|_| bad())?;
    let count: usize = parts[2].parse().map_err(|_| bad())?;
    if !(hi > lo) || count < 2 {
        return Err(bad());
    }
    Ok(linspace(lo, hi, count))
}

/// Long-format surface CSV: `t,T,beta`. Masked cells (`t > T`) and grid
/// points outside the trained basis domains are omitted.
fn surface_csv(fit: &VdfrFit, t_grid: &[f64], domain_grid: &[f64]) -> Result<String, CliError> {
    let (tlo, thi) = fit.tensor.marginal_t().domain();
    let (dlo, dhi) = fit.tensor.marginal_domain().domain();
    let mut out = String::from("t,T,beta\n");
    for &len in domain_grid {
        if len < dlo || len > dhi {
            continue;
        }
        for &t in t_grid {
            if t < tlo || t > thi {
                continue;
            }
            if let Some(beta) = fit.beta_at(t, len)? {
                writeln!(out, "{t},{len},{beta}").expect("string write cannot fail");
            }
        }
    }
    Ok(out)
}

/// JSON summary of a fit, written next to the archive.
#[derive(Debug, Serialize)]
struct FitSummary {
    family: Family,
    subjects: usize,
    covariates: Vec<String>,
    aic: f64,
    deviance: f64,
    effective_dimension: f64,
    dispersion: f64,
    tau2: Vec<f64>,
    iterations: usize,
    final_change: f64,
    beta_min: f64,
    beta_max: f64,
}

pub fn cmd_fit(args: &FitArgs) -> Result<(), CliError> {
    let start = std::time::Instant::now();
    let data = args.input.load()?;
    let fit = model::fit(&data, &args.model.options())?;

    let (tlo, thi) = fit.tensor.marginal_t().domain();
    let (dlo, dhi) = fit.tensor.marginal_domain().domain();
    let t_grid = linspace(tlo, thi, args.grid.max(2));
    let domain_grid = linspace(dlo, dhi, args.grid.max(2));
    let surface = surface_csv(&fit, &t_grid, &domain_grid)?;

    let mut beta_min = f64::INFINITY;
    let mut beta_max = f64::NEG_INFINITY;
    for &len in &domain_grid {
        for &t in &t_grid {
            if let Some(b) = fit.beta_at(t, len)? {
                beta_min = beta_min.min(b);
                beta_max = beta_max.max(b);
            }
        }
    }
    let summary = FitSummary {
        family: fit.family,
        subjects: data.len(),
        covariates: data.covariate_names().to_vec(),
        aic: fit.aic,
        deviance: fit.deviance,
        effective_dimension: fit.ed,
        dispersion: fit.phi,
        tau2: fit.tau2.clone(),
        iterations: fit.iterations,
        final_change: fit.final_change,
        beta_min,
        beta_max,
    };

    std::fs::create_dir_all(&args.out).map_err(|source| CliError::Write {
        path: args.out.display().to_string(),
        source,
    })?;
    persist::save(&fit, &args.out.join("model.json"))?;
    write_text(&args.out.join("surface.csv"), &surface)?;
    let mut summary_json =
        serde_json::to_string_pretty(&summary).expect("summary serialization cannot fail");
    summary_json.push('\n');
    write_text(&args.out.join("summary.json"), &summary_json)?;

    println!(
        "fit: {} subjects, aic {}, effective dimension {:.2}, {} iterations",
        data.len(),
        fit.aic,
        fit.ed,
        fit.iterations
    );
    eprintln!("fit finished in {:.2}s", start.elapsed().as_secs_f64());
    Ok(())
}

/// Cross-validation: variance components frozen at the full-data fit, one
/// coefficient refit per fold, RMSE on the response scale.
pub fn cmd_cv(args: &CvArgs) -> Result<(), CliError> {
    let start = std::time::Instant::now();
    let data = args.input.load()?;
    let n = data.len();
    if n < args.folds || args.folds < 2 {
        return Err(CliError::TooFewSubjectsForFolds {
            folds: args.folds,
            n,
        });
    }

    let mut options = args.model.options();
    // one tensor for all folds, spanning the full data
    options.t_domain = Some((0.0, data.max_domain()));
    options.domain_range = Some((data.min_domain(), data.max_domain()));

    let smoothed = presmooth::smooth_all(&data, options.p)?;
    let full = model::fit_presmoothed(
        &smoothed,
        data.responses(),
        data.covariates().map(|c| c.as_ref()),
        &options,
    )?;
    options.controls = FitControls {
        freeze: Some(FrozenVariances {
            tau2: full.tau2.clone(),
            phi: full.phi,
        }),
        ..FitControls::default()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let fold_of = make_folds(n, args.folds, &mut rng)?;
    let y = data.responses();
    let mut fold_rmse = Vec::with_capacity(args.folds);
    for f in 0..args.folds {
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, &fi) in fold_of.iter().enumerate() {
            if fi == f {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        let subset = |idx: &[usize]| {
            SmoothedCurveSet::new(
                idx.iter().map(|&i| smoothed.curves()[i].clone()).collect(),
                smoothed.p(),
            )
        };
        let cov_subset = |idx: &[usize]| {
            data.covariates().map(|c| {
                faer::Mat::from_fn(idx.len(), c.ncols(), |i, j| c[(idx[i], j)])
            })
        };
        let y_train: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let train_cov = cov_subset(&train);
        let fit = model::fit_presmoothed(
            &subset(&train),
            &y_train,
            train_cov.as_ref().map(|c| c.as_ref()),
            &options,
        )?;
        let test_cov = cov_subset(&test);
        let y_hat = fit.predict(&subset(&test), test_cov.as_ref().map(|c| c.as_ref()))?;
        let y_test: Vec<f64> = test.iter().map(|&i| y[i]).collect();
        fold_rmse.push(rmse(&y_test, &y_hat));
    }
    let mean = fold_rmse.iter().sum::<f64>() / args.folds as f64;

    let mut csv = String::from("fold,rmse\n");
    for (f, v) in fold_rmse.iter().enumerate() {
        writeln!(csv, "{f},{v}").expect("string write cannot fail");
    }
    writeln!(csv, "mean,{mean}").expect("string write cannot fail");

    std::fs::create_dir_all(&args.out).map_err(|source| CliError::Write {
        path: args.out.display().to_string(),
        source,
    })?;
    write_text(&args.out.join("cv.csv"), &csv)?;
    println!("cv: mean rmse {mean} over {} folds", args.folds);
    eprintln!("cv finished in {:.2}s", start.elapsed().as_secs_f64());
    Ok(())
}

const CONFIG_KEYS: &str =
    "n, family, domain_law, sigma_x, beta, replicates, seed, folds, p, q, r";

/// Parse a `key = value` config file into a scenario, starting from the
/// defaults. Unknown keys and unparsable values error with the line.
pub fn parse_config(path: &Path, text: &str) -> Result<ScenarioConfig, CliError> {
    let mut config = ScenarioConfig::default();
    let err = |line: usize, message: String| CliError::Config {
        path: path.display().to_string(),
        line,
        message,
    };
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(err(line_no, format!("expected `key = value`, got {raw:?}")));
        };
        let (key, value) = (key.trim(), value.trim());
        let parse_num = |what: &str| -> Result<usize, CliError> {
            value
                .parse()
                .map_err(|_| err(line_no, format!("{what} must be a nonnegative integer, got {value:?}")))
        };
        match key {
            "n" => config.n = parse_num("n")?,
            "replicates" => config.replicates = parse_num("replicates")?,
            "folds" => config.folds = parse_num("folds")?,
            "p" => config.p = parse_num("p")?,
            "q" => config.q = parse_num("q")?,
            "r" => config.r = parse_num("r")?,
            "seed" => {
                config.seed = value
                    .parse()
                    .map_err(|_| err(line_no, format!("seed must be an integer, got {value:?}")))?
            }
            "sigma_x" => {
                config.sigma_x = value.parse().map_err(|_| {
                    err(line_no, format!("sigma_x must be a number, got {value:?}"))
                })?
            }
            "family" => {
                config.family = parse_family(value).map_err(|e| err(line_no, e))?;
            }
            "domain_law" => {
                config.domain_law =
                    DomainLaw::from_str(value).map_err(|e| err(line_no, e.to_string()))?
            }
            "beta" => {
                config.beta = TrueBeta::from_str(value).map_err(|e| err(line_no, e.to_string()))?
            }
            unknown => {
                return Err(err(
                    line_no,
                    format!("unknown key {unknown:?} (accepted keys: {CONFIG_KEYS})"),
                ));
            }
        }
    }
    Ok(config)
}

/// Resolve one name from the scenario grid
/// (`beta<k>-<domain>-<family>-<smooth|noisy>-n<N>`) against a base config.
pub fn scenario_from_name(name: &str, base: &ScenarioConfig) -> Result<ScenarioConfig, CliError> {
    let bad = || CliError::BadScenarioName {
        name: name.to_string(),
    };
    let parts: Vec<&str> = name.split('-').collect();
    if parts.len() != 5 {
        return Err(bad());
    }
    let mut config = base.clone();
    config.beta = TrueBeta::from_str(parts[0]).map_err(|_| bad())?;
    config.domain_law = DomainLaw::from_str(parts[1]).map_err(|_| bad())?;
    config.family = parse_family(parts[2]).map_err(|_| bad())?;
    config.sigma_x = match parts[3] {
        "smooth" => 0.0,
        "noisy" => 1.0,
        _ => return Err(bad()),
    };
    config.n = match parts[4] {
        "n100" => 100,
        "n200" => 200,
        "n300" => 300,
        _ => return Err(bad()),
    };
    Ok(config)
}

fn replicate_csv(result: &ScenarioResult) -> String {
    let mut out = String::from(
        "replicate,vdfr_rmse,sof_rmse,vdfr_amse,vdfr_iterations,sof_iterations,eta_clamped\n",
    );
    for r in &result.replicates {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.replicate,
            r.vdfr_rmse,
            r.sof_rmse,
            r.vdfr_amse,
            r.vdfr_iterations,
            r.sof_iterations,
            r.eta_clamped
        )
        .expect("string write cannot fail");
    }
    out
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let start = std::time::Instant::now();
    let text = std::fs::read_to_string(&args.config).map_err(|source| CliError::Read {
        path: args.config.display().to_string(),
        source,
    })?;
    let base = parse_config(&args.config, &text)?;

    let named: Vec<(String, ScenarioConfig)> = match &args.grid {
        None => vec![("scenario".to_string(), base)],
        Some(list) => list
            .split(',')
            .map(|name| {
                let name = name.trim();
                Ok((name.to_string(), scenario_from_name(name, &base)?))
            })
            .collect::<Result<_, CliError>>()?,
    };

    std::fs::create_dir_all(&args.out).map_err(|source| CliError::Write {
        path: args.out.display().to_string(),
        source,
    })?;
    for (name, config) in named {
        config.validate()?;
        let result = crate::simstudy::run_scenario(&config)?;
        write_text(&args.out.join(format!("{name}.csv")), &replicate_csv(&result))?;
        let mut json =
            serde_json::to_string_pretty(&result).expect("result serialization cannot fail");
        json.push('\n');
        write_text(&args.out.join(format!("{name}.json")), &json)?;
        let s = &result.summary;
        println!(
            "{name}: vdfr rmse {} (sd {}), sof rmse {} (sd {}), amse {} (sd {}), wins {}/{}, excluded {}",
            s.vdfr_rmse_mean,
            s.vdfr_rmse_sd,
            s.sof_rmse_mean,
            s.sof_rmse_sd,
            s.vdfr_amse_mean,
            s.vdfr_amse_sd,
            s.vdfr_wins,
            s.included,
            s.excluded
        );
    }
    eprintln!("simulate finished in {:.2}s", start.elapsed().as_secs_f64());
    Ok(())
}

pub fn cmd_export_surface(args: &ExportArgs) -> Result<(), CliError> {
    let fit = persist::load(&args.archive)?;
    let (tlo, thi) = fit.tensor.marginal_t().domain();
    let (dlo, dhi) = fit.tensor.marginal_domain().domain();
    let t_grid = match &args.t_grid {
        Some(spec) => parse_grid_spec(spec)?,
        None => linspace(tlo, thi, 100),
    };
    let domain_grid = match &args.domain_grid {
        Some(spec) => parse_grid_spec(spec)?,
        None => linspace(dlo, dhi, 100),
    };
    let csv = surface_csv(&fit, &t_grid, &domain_grid)?;
    write_text(&args.out, &csv)?;
    println!(
        "exported {} grid cells to {}",
        csv.lines().count() - 1,
        args.out.display()
    );
    Ok(())
}

/// Dispatch a parsed command line.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Cv(args) => cmd_cv(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::ExportSurface(args) => cmd_export_surface(args),
    }
}
