//! Simulation study harness: scenario generation, cross-validated
//! prediction error, coefficient-surface error, and replicate batches.
//!
//! Scenarios combine a sample size, an outcome family, a domain-length
//! law, a curve noise level, and one of four true coefficient surfaces.
//! Each replicate simulates a dataset, fits both the variable-domain
//! estimator and the registered scalar-on-function baseline, and records
//! 10-fold cross-validated RMSE for both plus the surface AMSE for the
//! variable-domain fit.

use std::str::FromStr;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Geometric, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{self, BaselineError};
use crate::basis::{BSplineBasis, BasisError, TensorBasis};
use crate::model::{
    build_transform, build_transform_univariate, fit_pql, reparameterize, Family, FitControls,
    FrozenVariances, MixedModelTransform, ModelError, PqlFit, Reparameterized, VarianceComponent,
    POISSON_ETA_CLAMP,
};
use crate::presmooth::{self, SmoothError, SubjectCurve, VariableDomainDataset};
use crate::quadrature::QuadratureError;

/// Clamp applied to the simulated linear predictor before Poisson
/// response generation (overflow guard; activations are counted).
pub const SIM_ETA_CLAMP: f64 = 20.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown selector `{0}`")]
    BadSelector(String),

    #[error("{n} subjects cannot be split into {folds} folds")]
    TooFewSubjects { n: usize, folds: usize },

    #[error("invalid scenario configuration: {0}")]
    BadConfig(String),

    #[error("coefficient evaluator undefined at (t = {t}, T = {k})")]
    EvaluatorUndefined { t: f64, k: f64 },

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Baseline(#[from] BaselineError),

    #[error(transparent)]
    Smooth(#[from] SmoothError),

    #[error(transparent)]
    Quadrature(#[from] QuadratureError),

    #[error(transparent)]
    Basis(#[from] BasisError),
}

/// Distribution of the per-subject domain lengths `T_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainLaw {
    /// `U(10, 100)` rounded to integers.
    Uniform,
    /// Negative binomial with one success and `p = 0.04` (geometric count
    /// of failures, mean 24), truncated to `[10, 100]`.
    NegBin,
}

impl std::fmt::Display for DomainLaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DomainLaw::Uniform => write!(f, "uniform(10,100)"),
            DomainLaw::NegBin => write!(f, "negbin(1,0.04)"),
        }
    }
}

impl FromStr for DomainLaw {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uniform" | "uniform(10,100)" => Ok(DomainLaw::Uniform),
            "negbin" | "negbin(1,0.04)" | "negbin(1,p=0.04)" => Ok(DomainLaw::NegBin),
            other => Err(SimError::BadSelector(format!(
                "domain law `{other}` (accepted: uniform, negbin)"
            ))),
        }
    }
}

/// One of the four true coefficient surfaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrueBeta {
    Beta1,
    Beta2,
    Beta3,
    Beta4,
}

impl std::fmt::Display for TrueBeta {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let k = match self {
            TrueBeta::Beta1 => 1,
            TrueBeta::Beta2 => 2,
            TrueBeta::Beta3 => 3,
            TrueBeta::Beta4 => 4,
        };
        write!(f, "beta{k}")
    }
}

impl FromStr for TrueBeta {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "beta1" | "1" => Ok(TrueBeta::Beta1),
            "beta2" | "2" => Ok(TrueBeta::Beta2),
            "beta3" | "3" => Ok(TrueBeta::Beta3),
            "beta4" | "4" => Ok(TrueBeta::Beta4),
            other => Err(SimError::BadSelector(format!(
                "true beta `{other}` (accepted: beta1, beta2, beta3, beta4)"
            ))),
        }
    }
}

/// Full description of one simulation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Sample size per replicate.
    pub n: usize,
    pub family: Family,
    pub domain_law: DomainLaw,
    /// Standard deviation of the additive observation noise on the curves.
    pub sigma_x: f64,
    pub beta: TrueBeta,
    pub replicates: usize,
    pub seed: u64,
    pub folds: usize,
    /// Per-curve basis dimension.
    pub p: usize,
    /// Tensor marginal dimension in t.
    pub q: usize,
    /// Tensor marginal dimension in the domain length.
    pub r: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n: 100,
            family: Family::Gaussian,
            domain_law: DomainLaw::Uniform,
            sigma_x: 0.0,
            beta: TrueBeta::Beta1,
            replicates: 30,
            seed: 1,
            folds: 10,
            p: 25,
            q: 25,
            r: 25,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.replicates == 0 {
            return Err(SimError::BadConfig("replicates must be >= 1".into()));
        }
        if self.folds < 2 {
            return Err(SimError::BadConfig("folds must be >= 2".into()));
        }
        if self.n < self.folds {
            return Err(SimError::TooFewSubjects {
                n: self.n,
                folds: self.folds,
            });
        }
        if self.p < 4 || self.q < 4 || self.r < 4 {
            return Err(SimError::BadConfig(
                "basis dimensions p, q, r must be >= 4".into(),
            ));
        }
        if self.sigma_x < 0.0 {
            return Err(SimError::BadConfig("sigma_x must be >= 0".into()));
        }
        Ok(())
    }
}

/// Draw `n` integer domain lengths in `[10, 100]`.
pub fn gen_domains(law: DomainLaw, n: usize, rng: &mut impl Rng) -> Vec<u32> {
    match law {
        DomainLaw::Uniform => (0..n)
            .map(|_| (rng.gen_range(10.0_f64..100.0).round() as u32).clamp(10, 100))
            .collect(),
        DomainLaw::NegBin => {
            let geo = Geometric::new(0.04).expect("valid geometric parameter");
            (0..n)
                .map(|_| (rng.sample(geo) as u32).clamp(10, 100))
                .collect()
        }
    }
}

/// Simulate one curve at `t = 1..T_i`:
/// `X(t) = u + sum_k v_k1 sin(2 pi k t / 100) + v_k2 cos(2 pi k t / 100) + delta(t)`
/// with `u ~ N(0,1)`, `v_k ~ N(0, 4/k^2)`, `delta ~ N(0, sigma_x^2)`.
pub fn gen_curve(t_i: u32, sigma_x: f64, rng: &mut impl Rng) -> Vec<f64> {
    let u: f64 = rng.sample(StandardNormal);
    let mut v = [[0.0_f64; 2]; 10];
    for (k, pair) in v.iter_mut().enumerate() {
        let sd = 2.0 / (k as f64 + 1.0);
        pair[0] = sd * rng.sample::<f64, _>(StandardNormal);
        pair[1] = sd * rng.sample::<f64, _>(StandardNormal);
    }
    (1..=t_i)
        .map(|t| {
            let mut x = u;
            for (k, pair) in v.iter().enumerate() {
                let w = 2.0 * std::f64::consts::PI * (k as f64 + 1.0) * t as f64 / 100.0;
                x += pair[0] * w.sin() + pair[1] * w.cos();
            }
            x + sigma_x * rng.sample::<f64, _>(StandardNormal)
        })
        .collect()
}

/// The true coefficient surface evaluated at `(t, T_i)` with the global
/// maximum length `T = t_max`.
pub fn true_beta(which: TrueBeta, t: f64, t_i: f64, t_max: f64) -> f64 {
    match which {
        TrueBeta::Beta1 => 10.0 * t / t_i - 5.0,
        TrueBeta::Beta2 => {
            (1.0 - 2.0 * t_i / t_max) * (5.0 - 40.0 * (t / t_i - 0.5).powi(2))
        }
        TrueBeta::Beta3 => 5.0 - 10.0 * (t_i - t) / t_max,
        TrueBeta::Beta4 => {
            (2.0 * std::f64::consts::PI * t_i / t_max).sin() * (5.0 - 10.0 * (t_i - t) / t_max)
        }
    }
}

/// True linear predictors `eta_i = (1/T_i) sum_{t=1}^{T_i} X_i(t) beta(t, T_i)`.
pub fn linear_predictors(curves: &[Vec<f64>], which: TrueBeta, t_max: f64) -> Vec<f64> {
    curves
        .iter()
        .map(|x| {
            let t_i = x.len() as f64;
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(j, &v)| v * true_beta(which, (j + 1) as f64, t_i, t_max))
                .sum();
            s / t_i
        })
        .collect()
}

/// Generate responses from the true linear predictors. Returns the
/// responses together with the number of Poisson overflow clamps applied.
pub fn gen_response(eta: &[f64], family: Family, rng: &mut impl Rng) -> (Vec<f64>, usize) {
    match family {
        Family::Gaussian => (
            eta.iter()
                .map(|&e| e + rng.sample::<f64, _>(StandardNormal))
                .collect(),
            0,
        ),
        Family::Poisson => {
            let mut clamped = 0;
            let y = eta
                .iter()
                .map(|&e| {
                    let ec = e.clamp(-SIM_ETA_CLAMP, SIM_ETA_CLAMP);
                    if ec != e {
                        clamped += 1;
                    }
                    let mu = ec.exp();
                    rng.sample(Poisson::new(mu).expect("positive mean"))
                })
                .collect();
            (y, clamped)
        }
    }
}

/// Map a linear predictor to the response scale: identity for Gaussian,
/// clamped exponential for Poisson. Prediction errors are measured as raw
/// response differences on this scale.
pub fn response_from_eta(family: Family, eta_hat: &[f64]) -> Vec<f64> {
    match family {
        Family::Gaussian => eta_hat.to_vec(),
        Family::Poisson => eta_hat
            .iter()
            .map(|&e| e.clamp(-POISSON_ETA_CLAMP, POISSON_ETA_CLAMP).exp())
            .collect(),
    }
}

/// Root mean square prediction error `sqrt(sum (y - yhat)^2 / n)`.
pub fn rmse(y_true: &[f64], y_hat: &[f64]) -> f64 {
    assert_eq!(y_true.len(), y_hat.len());
    let n = y_true.len() as f64;
    let ss: f64 = y_true
        .iter()
        .zip(y_hat)
        .map(|(&a, &b)| (a - b).powi(2))
        .sum();
    (ss / n).sqrt()
}

/// A seeded random partition into `k` near-equal folds; returns the fold
/// index of each subject.
pub fn make_folds(n: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>, SimError> {
    if n < k || k == 0 {
        return Err(SimError::TooFewSubjects { n, folds: k });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut fold_of = vec![0usize; n];
    for (pos, &subject) in order.iter().enumerate() {
        fold_of[subject] = pos % k;
    }
    Ok(fold_of)
}

/// Seeded k-fold cross-validation: `fit_predict(train, test)` must return
/// the test-set predictions on the response scale; the mean fold RMSE is
/// returned.
pub fn cv_mean_rmse<F>(
    y: &[f64],
    folds: usize,
    rng: &mut impl Rng,
    mut fit_predict: F,
) -> Result<f64, SimError>
where
    F: FnMut(&[usize], &[usize]) -> Result<Vec<f64>, SimError>,
{
    let fold_of = make_folds(y.len(), folds, rng)?;
    mean_rmse_over_folds(y, &fold_of, folds, &mut fit_predict)
}

fn mean_rmse_over_folds<F>(
    y: &[f64],
    fold_of: &[usize],
    folds: usize,
    fit_predict: &mut F,
) -> Result<f64, SimError>
where
    F: FnMut(&[usize], &[usize]) -> Result<Vec<f64>, SimError>,
{
    let mut total = 0.0;
    for f in 0..folds {
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, &fi) in fold_of.iter().enumerate() {
            if fi == f {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        let y_hat = fit_predict(&train, &test)?;
        let y_test: Vec<f64> = test.iter().map(|&i| y[i]).collect();
        total += rmse(&y_test, &y_hat);
    }
    Ok(total / folds as f64)
}

/// Average mean square error of a coefficient-surface estimate over the
/// triangle `{(t, k): 1 <= t <= k, 10 <= k <= T}` with the `1/(T(T+1))`
/// normalizer.
pub fn amse<F>(beta_hat: F, which: TrueBeta, t_max: u32) -> Result<f64, SimError>
where
    F: Fn(f64, f64) -> Option<f64>,
{
    let tm = t_max as f64;
    let mut sum = 0.0;
    for k in 10..=t_max {
        for t in 1..=k {
            let (tf, kf) = (t as f64, k as f64);
            let hat = beta_hat(tf, kf).ok_or(SimError::EvaluatorUndefined { t: tf, k: kf })?;
            sum += (true_beta(which, tf, kf, tm) - hat).powi(2);
        }
    }
    Ok(sum / (tm * (tm + 1.0)))
}

/// Per-replicate results of one scenario run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    /// Mean 10-fold CV RMSE of the variable-domain estimator.
    pub vdfr_rmse: f64,
    /// Mean 10-fold CV RMSE of the registered baseline.
    pub sof_rmse: f64,
    /// Surface AMSE of the variable-domain estimator.
    pub vdfr_amse: f64,
    pub vdfr_iterations: usize,
    pub sof_iterations: usize,
    /// Poisson overflow clamps triggered while generating responses.
    pub eta_clamped: usize,
    /// Wall-clock seconds; excluded from serialized output so that
    /// re-runs are byte-identical.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExcludedReplicate {
    pub replicate: usize,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub included: usize,
    pub excluded: usize,
    pub vdfr_rmse_mean: f64,
    pub vdfr_rmse_sd: f64,
    pub sof_rmse_mean: f64,
    pub sof_rmse_sd: f64,
    pub vdfr_amse_mean: f64,
    pub vdfr_amse_sd: f64,
    /// Replicates where the variable-domain estimator beat the baseline
    /// on CV RMSE.
    pub vdfr_wins: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub config: ScenarioConfig,
    pub replicates: Vec<ReplicateRecord>,
    pub excluded: Vec<ExcludedReplicate>,
    pub summary: ScenarioSummary,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Controls for scenario fits: default tolerance with extra iteration
/// headroom, since heavy-tailed Poisson replicates can take a few hundred
/// damped steps to meet the tolerance.
fn sim_controls() -> FitControls {
    FitControls {
        max_iter: 500,
        ..FitControls::default()
    }
}

fn rows(m: faer::MatRef<'_, f64>, idx: &[usize]) -> faer::Mat<f64> {
    faer::Mat::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

/// Cross-validate over precomputed design rows: each fold refits the
/// coefficients with the variance components frozen at the full-data
/// estimates and predicts the held-out rows.
fn cv_frozen(
    rep: &Reparameterized,
    y: &[f64],
    family: Family,
    components: &[VarianceComponent],
    full: &PqlFit,
    fold_of: &[usize],
    folds: usize,
) -> Result<f64, SimError> {
    let controls = FitControls {
        freeze: Some(FrozenVariances {
            tau2: full.tau2.clone(),
            phi: full.phi,
        }),
        ..sim_controls()
    };
    let mut total = 0.0;
    for f in 0..folds {
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, &fi) in fold_of.iter().enumerate() {
            if fi == f {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        let y_train: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let fit = fit_pql(
            rows(rep.x.as_ref(), &train).as_ref(),
            rows(rep.z.as_ref(), &train).as_ref(),
            &y_train,
            family,
            components,
            &controls,
        )?;
        let eta_hat: Vec<f64> = test
            .iter()
            .map(|&i| {
                let mut eta = 0.0;
                for (j, &nu) in fit.nu.iter().enumerate() {
                    eta += rep.x[(i, j)] * nu;
                }
                for (m, &dm) in fit.delta.iter().enumerate() {
                    eta += rep.z[(i, m)] * dm;
                }
                eta
            })
            .collect();
        let y_test: Vec<f64> = test.iter().map(|&i| y[i]).collect();
        total += rmse(&y_test, &response_from_eta(family, &eta_hat));
    }
    Ok(total / folds as f64)
}

/// Recover the tensor-surface coefficients from a fit in the
/// reparameterized coordinates (intercept and covariates excluded).
fn recover_surface(
    transform: &MixedModelTransform,
    rep: &Reparameterized,
    pql: &PqlFit,
) -> Vec<f64> {
    let d = transform.input_dim();
    let nu_null = &pql.nu[1 + rep.n_cov..];
    let mut surface = vec![0.0; d];
    for (pos, &col) in rep.kept_null.iter().enumerate() {
        for i in 0..d {
            surface[i] += transform.t_null()[(i, col)] * nu_null[pos];
        }
    }
    for m in 0..transform.pen_dim() {
        let dm = pql.delta[m];
        if dm != 0.0 {
            for i in 0..d {
                surface[i] += transform.t_pen()[(i, m)] * dm;
            }
        }
    }
    surface
}

/// Variable-domain design on the observation grid: row `i` is an intercept
/// followed by `(1/T_i) sum_{t=1..T_i} Xhat_i(t) M(t, T_i)` — the average
/// over the integer grid the curves are observed on, which is also the
/// quadrature that defines the linear predictor for such curves.
fn observation_grid_design(
    smoothed: &presmooth::SmoothedCurveSet,
    tensor: &TensorBasis,
) -> Result<faer::Mat<f64>, SimError> {
    let n = smoothed.curves().len();
    let d = tensor.dim();
    let mut x = faer::Mat::<f64>::zeros(n, 1 + d);
    for (i, curve) in smoothed.curves().iter().enumerate() {
        x[(i, 0)] = 1.0;
        let ti = curve.domain_len();
        let m = ti.round() as usize;
        let grid: Vec<f64> = (1..=m).map(|t| t as f64).collect();
        let xhat = curve.eval(&grid)?;
        for (t, &xv) in grid.iter().zip(&xhat) {
            let row = tensor.eval_row(*t, ti)?;
            for j in 0..d {
                x[(i, 1 + j)] += xv * row[j] / ti;
            }
        }
    }
    Ok(x)
}

/// Run one replicate: simulate, fit both estimators, cross-validate.
pub fn run_replicate(config: &ScenarioConfig, replicate: usize) -> Result<ReplicateRecord, SimError> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(replicate as u64 + 1);

    // --- data generation ---
    let domains = gen_domains(config.domain_law, config.n, &mut rng);
    let t_max = *domains.iter().max().expect("nonempty sample");
    let curves: Vec<Vec<f64>> = domains
        .iter()
        .map(|&ti| gen_curve(ti, config.sigma_x, &mut rng))
        .collect();
    let eta_true = linear_predictors(&curves, config.beta, t_max as f64);
    let (y, eta_clamped) = gen_response(&eta_true, config.family, &mut rng);
    let fold_of = make_folds(config.n, config.folds, &mut rng)?;

    let subjects: Vec<SubjectCurve> = curves
        .iter()
        .enumerate()
        .map(|(i, values)| {
            let points: Vec<f64> = (1..=values.len()).map(|t| t as f64).collect();
            SubjectCurve::new(format!("subj{i:04}"), points, values.clone())
        })
        .collect();
    let data = VariableDomainDataset::new(subjects, y.clone())?;

    // --- variable-domain estimator ---
    let smoothed = presmooth::smooth_all(&data, config.p)?;
    let tmf = t_max as f64;
    // the domain marginal starts at the law's lower bound so the surface
    // is defined on the whole AMSE triangle
    let dlo = if tmf - 10.0 < 1.0 { tmf - 1.0 } else { 10.0 };
    let tensor = TensorBasis::new(
        BSplineBasis::cubic_pspline_with_dim(0.0, tmf, config.q)?,
        BSplineBasis::cubic_pspline_with_dim(dlo, tmf, config.r)?,
    );
    let design = observation_grid_design(&smoothed, &tensor)?;
    let transform = build_transform(config.q, config.r)?;
    let rep_v = reparameterize(design.as_ref(), 0, &transform)?;
    let comps_v = transform.components();
    let full_v = fit_pql(
        rep_v.x.as_ref(),
        rep_v.z.as_ref(),
        &y,
        config.family,
        &comps_v,
        &sim_controls(),
    )?;
    let surface = recover_surface(&transform, &rep_v, &full_v);
    let vdfr_amse = amse(
        |t, k| {
            tensor
                .eval_row(t, k)
                .ok()
                .map(|row| row.iter().zip(&surface).map(|(&m, &b)| m * b).sum())
        },
        config.beta,
        t_max,
    )?;
    let vdfr_rmse = cv_frozen(
        &rep_v,
        &y,
        config.family,
        &comps_v,
        &full_v,
        &fold_of,
        config.folds,
    )?;

    // --- registered baseline ---
    let registered = baselines::register_linear(&data)?;
    let smooth01 = presmooth::smooth_all(registered.data(), config.p)?;
    let (sof_des, _) = baselines::sof_design(&smooth01, config.q, 201)?;
    let transform_u = build_transform_univariate(config.q)?;
    let rep_s = reparameterize(sof_des.as_ref(), 0, &transform_u)?;
    let comps_s = transform_u.components();
    let full_s = fit_pql(
        rep_s.x.as_ref(),
        rep_s.z.as_ref(),
        &y,
        config.family,
        &comps_s,
        &sim_controls(),
    )?;
    let sof_rmse = cv_frozen(
        &rep_s,
        &y,
        config.family,
        &comps_s,
        &full_s,
        &fold_of,
        config.folds,
    )?;

    Ok(ReplicateRecord {
        replicate,
        vdfr_rmse,
        sof_rmse,
        vdfr_amse,
        vdfr_iterations: full_v.iterations,
        sof_iterations: full_s.iterations,
        eta_clamped,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Run a full scenario: replicates in parallel on independent seed
/// streams, failed replicates excluded and reported.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioResult, SimError> {
    config.validate()?;
    let outcomes: Vec<(usize, Result<ReplicateRecord, String>)> = (0..config.replicates)
        .into_par_iter()
        .map(|r| (r, run_replicate(config, r).map_err(|e| e.to_string())))
        .collect();

    let mut replicates = Vec::new();
    let mut excluded = Vec::new();
    for (r, outcome) in outcomes {
        match outcome {
            Ok(rec) => replicates.push(rec),
            Err(message) => excluded.push(ExcludedReplicate {
                replicate: r,
                message,
            }),
        }
    }

    let v_rmse: Vec<f64> = replicates.iter().map(|r| r.vdfr_rmse).collect();
    let s_rmse: Vec<f64> = replicates.iter().map(|r| r.sof_rmse).collect();
    let v_amse: Vec<f64> = replicates.iter().map(|r| r.vdfr_amse).collect();
    let (vm, vs) = mean_sd(&v_rmse);
    let (sm, ss) = mean_sd(&s_rmse);
    let (am, asd) = mean_sd(&v_amse);
    let wins = replicates
        .iter()
        .filter(|r| r.vdfr_rmse < r.sof_rmse)
        .count();

    Ok(ScenarioResult {
        config: config.clone(),
        summary: ScenarioSummary {
            included: replicates.len(),
            excluded: excluded.len(),
            vdfr_rmse_mean: vm,
            vdfr_rmse_sd: vs,
            sof_rmse_mean: sm,
            sof_rmse_sd: ss,
            vdfr_amse_mean: am,
            vdfr_amse_sd: asd,
            vdfr_wins: wins,
        },
        replicates,
        excluded,
    })
}
