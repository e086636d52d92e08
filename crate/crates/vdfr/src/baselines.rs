//! Registered-domain scalar-on-function baseline.
//!
//! Every curve is linearly rescaled onto `[0, 1]`, after which the ordinary
//! scalar-on-function model `eta = alpha + C gamma + int_0^1 X(t) beta(t) dt`
//! is fitted with the same penalized mixed-model machinery as the main
//! estimator, degenerated to a single marginal basis and one variance
//! component.

use faer::{Mat, MatRef};
use thiserror::Error;

use crate::basis::{BSplineBasis, BasisError};
use crate::model::{
    build_transform_univariate, fit_pql, reparameterize, Family, FitControls, ModelError,
    PqlFit, Reparameterized, POISSON_ETA_CLAMP,
};
use crate::presmooth::{self, SmoothError, SmoothedCurveSet, SubjectCurve, VariableDomainDataset};
use crate::quadrature::{simpson_weights, QuadratureError};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("subject `{id}` has a zero-length domain")]
    ZeroDomain { id: String },

    #[error("curves do not share a common domain: lengths range over [{min}, {max}]")]
    UnequalDomains { min: f64, max: f64 },

    #[error(transparent)]
    Smooth(#[from] SmoothError),

    #[error(transparent)]
    Basis(#[from] BasisError),

    #[error(transparent)]
    Quadrature(#[from] QuadratureError),

    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A variable-domain dataset with every curve linearly registered to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct RegisteredDataset {
    data: VariableDomainDataset,
    original_lengths: Vec<f64>,
}

impl RegisteredDataset {
    /// The registered dataset (all curves on `[0, 1]`).
    pub fn data(&self) -> &VariableDomainDataset {
        &self.data
    }

    /// The original domain length of each subject, in input order.
    pub fn original_lengths(&self) -> &[f64] {
        &self.original_lengths
    }
}

/// Linear time rescaling `t -> t / T_i` onto the common domain `[0, 1]`;
/// values are unchanged.
pub fn register_linear(data: &VariableDomainDataset) -> Result<RegisteredDataset, BaselineError> {
    let mut subjects = Vec::with_capacity(data.len());
    let mut original_lengths = Vec::with_capacity(data.len());
    for subject in data.subjects() {
        let len = subject.domain_len();
        if len <= 0.0 {
            return Err(BaselineError::ZeroDomain {
                id: subject.id.clone(),
            });
        }
        let points: Vec<f64> = subject.points.iter().map(|&t| t / len).collect();
        subjects.push(SubjectCurve::new(
            subject.id.clone(),
            points,
            subject.values.clone(),
        ));
        original_lengths.push(len);
    }
    let mut registered = VariableDomainDataset::new(subjects, data.responses().to_vec())?;
    if let Some(c) = data.covariates() {
        registered = registered.with_covariates(c.clone(), data.covariate_names().to_vec())?;
    }
    let data = registered;
    Ok(RegisteredDataset {
        data,
        original_lengths,
    })
}

/// Options for the baseline fit.
#[derive(Debug, Clone)]
pub struct SofOptions {
    pub family: Family,
    /// Per-curve basis dimension.
    pub p: usize,
    /// Coefficient basis dimension.
    pub q: usize,
    /// Simpson node count for the inner-product matrix.
    pub nodes: usize,
    pub controls: FitControls,
}

impl Default for SofOptions {
    fn default() -> Self {
        Self {
            family: Family::Gaussian,
            p: 25,
            q: 25,
            nodes: 201,
            controls: FitControls::default(),
        }
    }
}

/// A fitted scalar-on-function baseline with univariate coefficient
/// function `beta(t)` on the registered domain.
#[derive(Debug, Clone)]
pub struct SofFit {
    pub family: Family,
    pub basis: BSplineBasis,
    pub alpha: f64,
    pub gamma: Vec<f64>,
    /// Coefficients of `beta(t)` in `basis`.
    pub coefficients: Vec<f64>,
    pub tau2: f64,
    pub phi: f64,
    pub ed: f64,
    pub deviance: f64,
    pub aic: f64,
    pub iterations: usize,
    pub dropped_null_columns: Vec<usize>,
    pub eta: Vec<f64>,
    pub fitted: Vec<f64>,
    nodes: usize,
}

impl SofFit {
    /// The coefficient function at a registered time point.
    pub fn beta_at(&self, t: f64) -> Result<f64, BasisError> {
        let row = self.basis.eval_point(t)?;
        Ok(row.iter().zip(&self.coefficients).map(|(&v, &c)| v * c).sum())
    }

    /// Out-of-sample predictions on the response scale for curves smoothed
    /// on the same common domain.
    pub fn predict(
        &self,
        curves: &SmoothedCurveSet,
        covariates: Option<MatRef<'_, f64>>,
    ) -> Result<Vec<f64>, BaselineError> {
        let n_cov = covariates.map_or(0, |c| c.ncols());
        if n_cov != self.gamma.len() {
            return Err(BaselineError::Model(ModelError::DimensionMismatch(
                format!("{} covariates supplied, model has {}", n_cov, self.gamma.len()),
            )));
        }
        let design = inner_product_design(curves, &self.basis, self.nodes)?;
        let mut out = Vec::with_capacity(curves.len());
        for i in 0..curves.len() {
            let mut eta = self.alpha;
            if let Some(c) = covariates {
                for j in 0..n_cov {
                    eta += c[(i, j)] * self.gamma[j];
                }
            }
            for j in 0..self.coefficients.len() {
                eta += design[(i, j)] * self.coefficients[j];
            }
            out.push(match self.family {
                Family::Gaussian => eta,
                Family::Poisson => eta.clamp(-POISSON_ETA_CLAMP, POISSON_ETA_CLAMP).exp(),
            });
        }
        Ok(out)
    }

    pub fn aic(&self) -> f64 {
        self.aic
    }
}

/// The `N x q` design block with row `i = a_i' J / L`, where
/// `J_kl = int_0^L phi_k(t) varphi_l(t) dt` over the curves' common
/// domain `[0, L]`.
fn inner_product_design(
    curves: &SmoothedCurveSet,
    coef_basis: &BSplineBasis,
    nodes: usize,
) -> Result<Mat<f64>, BaselineError> {
    let lens = curves.domain_lengths();
    let max = lens.iter().fold(0.0_f64, |m, &v| m.max(v));
    let min = lens.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    if max - min > 1e-9 * max.max(1.0) {
        return Err(BaselineError::UnequalDomains { min, max });
    }
    let p = curves.p();
    let q = coef_basis.dim();
    let curve_basis = &curves.curves()[0].basis;
    let scale_coef = {
        let (lo, hi) = coef_basis.domain();
        (lo, hi)
    };
    let (w_nodes, weights) = simpson_weights(0.0, max, nodes)?;
    let mut j_mat = Mat::<f64>::zeros(p, q);
    for (&t, &w) in w_nodes.iter().zip(&weights) {
        let (ps, pv) = curve_basis.eval_local(t)?;
        // coefficient basis shares the common domain after registration,
        // but allow it to live on a rescaled copy of the same interval
        let tc = scale_coef.0 + (t / max) * (scale_coef.1 - scale_coef.0);
        let (qs, qv) = coef_basis.eval_local(tc)?;
        for (a, &pa) in pv.iter().enumerate() {
            for (b, &qb) in qv.iter().enumerate() {
                j_mat[(ps + a, qs + b)] += w * pa * qb;
            }
        }
    }
    let inv = 1.0 / max;
    let mut design = Mat::<f64>::zeros(curves.len(), q);
    for (i, curve) in curves.curves().iter().enumerate() {
        for j in 0..q {
            design[(i, j)] = inv
                * (0..p)
                    .map(|k| curve.coefficients[k] * j_mat[(k, j)])
                    .sum::<f64>();
        }
    }
    Ok(design)
}

/// The baseline design `[1 | inner-product block]` and its coefficient
/// basis, for callers that drive the mixed-model solver directly (e.g.
/// cross-validation over row subsets).
pub fn sof_design(
    curves: &SmoothedCurveSet,
    q: usize,
    nodes: usize,
) -> Result<(Mat<f64>, BSplineBasis), BaselineError> {
    let len = curves.curves()[0].domain_len();
    let coef_basis = BSplineBasis::cubic_pspline_with_dim(0.0, len, q)?;
    let block = inner_product_design(curves, &coef_basis, nodes)?;
    let n = curves.len();
    let mut design = Mat::<f64>::zeros(n, 1 + q);
    for i in 0..n {
        design[(i, 0)] = 1.0;
        for j in 0..q {
            design[(i, 1 + j)] = block[(i, j)];
        }
    }
    Ok((design, coef_basis))
}

/// Fit the univariate scalar-on-function model on curves sharing a common
/// domain: the degenerate single-marginal case of the main machinery.
pub fn fit_univariate(
    curves: &SmoothedCurveSet,
    responses: &[f64],
    covariates: Option<MatRef<'_, f64>>,
    options: &SofOptions,
) -> Result<SofFit, BaselineError> {
    if curves.len() != responses.len() {
        return Err(BaselineError::Model(ModelError::DimensionMismatch(
            format!("{} curves for {} responses", curves.len(), responses.len()),
        )));
    }
    let len = curves.curves()[0].domain_len();
    let coef_basis = BSplineBasis::cubic_pspline_with_dim(0.0, len, options.q)?;
    let block = inner_product_design(curves, &coef_basis, options.nodes)?;

    let n = curves.len();
    let n_cov = covariates.map_or(0, |c| c.ncols());
    let mut design = Mat::<f64>::zeros(n, 1 + n_cov + options.q);
    for i in 0..n {
        design[(i, 0)] = 1.0;
        if let Some(c) = covariates {
            for j in 0..n_cov {
                design[(i, 1 + j)] = c[(i, j)];
            }
        }
        for j in 0..options.q {
            design[(i, 1 + n_cov + j)] = block[(i, j)];
        }
    }

    let transform = build_transform_univariate(options.q)?;
    let rep = reparameterize(design.as_ref(), n_cov, &transform)?;
    let components = transform.components();
    let pql = fit_pql(
        rep.x.as_ref(),
        rep.z.as_ref(),
        responses,
        options.family,
        &components,
        &options.controls,
    )?;
    Ok(assemble_sof(&transform, &rep, pql, coef_basis, options))
}

fn assemble_sof(
    transform: &crate::model::MixedModelTransform,
    rep: &Reparameterized,
    pql: PqlFit,
    basis: BSplineBasis,
    options: &SofOptions,
) -> SofFit {
    let n_cov = rep.n_cov;
    let alpha = pql.nu[0];
    let gamma = pql.nu[1..1 + n_cov].to_vec();
    let nu_null = &pql.nu[1 + n_cov..];
    let q = transform.input_dim();
    let mut coefficients = vec![0.0; q];
    for (pos, &col) in rep.kept_null.iter().enumerate() {
        for i in 0..q {
            coefficients[i] += transform.t_null()[(i, col)] * nu_null[pos];
        }
    }
    for m in 0..transform.pen_dim() {
        let dm = pql.delta[m];
        for i in 0..q {
            coefficients[i] += transform.t_pen()[(i, m)] * dm;
        }
    }
    SofFit {
        family: options.family,
        basis,
        alpha,
        gamma,
        coefficients,
        tau2: pql.tau2.first().copied().unwrap_or(f64::NAN),
        phi: pql.phi,
        ed: pql.ed,
        deviance: pql.deviance,
        aic: pql.aic,
        iterations: pql.iterations,
        dropped_null_columns: rep.dropped_null.clone(),
        eta: pql.eta,
        fitted: pql.fitted,
        nodes: options.nodes,
    }
}

/// Fit the baseline end to end: register, presmooth on `[0, 1]`, fit.
pub fn fit_sof(
    registered: &RegisteredDataset,
    options: &SofOptions,
) -> Result<SofFit, BaselineError> {
    let curves = presmooth::smooth_all(registered.data(), options.p)?;
    fit_univariate(
        &curves,
        registered.data().responses(),
        registered.data().covariates().map(|c| c.as_ref()),
        options,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use faer::Side;
    use faer::linalg::solvers::Solve;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn toy_dataset(rng: &mut ChaCha8Rng) -> VariableDomainDataset {
        let subjects = (0..12)
            .map(|i| {
                let len = 20.0 + 30.0 * rng.gen::<f64>();
                let m = 15 + (i % 4) * 3;
                let points: Vec<f64> = (0..m).map(|k| len * k as f64 / (m - 1) as f64).collect();
                let values = points
                    .iter()
                    .map(|&t| (t / 10.0).sin() + 0.1 * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                SubjectCurve::new(format!("s{i}"), points, values)
            })
            .collect();
        let responses = (0..12).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        VariableDomainDataset::new(subjects, responses).unwrap()
    }

    #[test]
    fn registration_rescales_points_linearly() {
        let subjects = vec![SubjectCurve::new(
            "a",
            (0..11).map(|k| 5.0 * k as f64).collect(),
            vec![1.0; 11],
        )];
        let data = VariableDomainDataset::new(subjects, vec![0.0]).unwrap();
        let reg = register_linear(&data).unwrap();
        let pts = &reg.data().subjects()[0].points;
        assert_eq!(pts[0], 0.0);
        assert!((pts[5] - 0.5).abs() < 1e-15);
        assert_eq!(pts[10], 1.0);
        assert_eq!(reg.original_lengths(), &[50.0]);
    }

    #[test]
    fn registration_is_identity_on_unit_domains_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = toy_dataset(&mut rng);
        let reg = register_linear(&data).unwrap();
        for (subject, (orig, &len)) in reg
            .data()
            .subjects()
            .iter()
            .zip(data.subjects().iter().zip(reg.original_lengths()))
        {
            // values unchanged, abscissae recover the originals exactly
            assert_eq!(subject.values, orig.values);
            for (&p, &t) in subject.points.iter().zip(&orig.points) {
                assert!((p * len - t).abs() < 1e-12 * len.max(1.0));
            }
        }
        // already-registered data is unchanged
        let reg2 = register_linear(reg.data()).unwrap();
        for (a, b) in reg2.data().subjects().iter().zip(reg.data().subjects()) {
            assert_eq!(a.points, b.points);
        }
    }

    fn constant_curve_dataset(
        xs: &[f64],
        y: &[f64],
        m: usize,
        len: f64,
    ) -> VariableDomainDataset {
        let subjects = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let points: Vec<f64> = (0..m).map(|k| len * k as f64 / (m - 1) as f64).collect();
                SubjectCurve::new(format!("s{i}"), points, vec![x; m])
            })
            .collect();
        VariableDomainDataset::new(subjects, y.to_vec()).unwrap()
    }

    #[test]
    fn constant_curves_reduce_to_plain_regression() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 40;
        let xs: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = xs
            .iter()
            .map(|&x| 0.5 + 1.3 * x + 0.3 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let data = constant_curve_dataset(&xs, &y, 20, 30.0);
        let reg = register_linear(&data).unwrap();
        let options = SofOptions {
            p: 8,
            q: 8,
            ..SofOptions::default()
        };
        let fit = fit_sof(&reg, &options).unwrap();
        // the rank guard must have collapsed the collinear null column
        assert!(!fit.dropped_null_columns.is_empty());

        // direct least-squares oracle on (1, x)
        let xmat = faer::Mat::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
        let yv = faer::Mat::from_fn(n, 1, |i, _| y[i]);
        let sol = (xmat.transpose() * &xmat)
            .llt(Side::Lower)
            .unwrap()
            .solve(&(xmat.transpose() * &yv));
        for i in 0..n {
            let oracle = sol[(0, 0)] + sol[(1, 0)] * xs[i];
            assert!(
                (fit.eta[i] - oracle).abs() < 1e-6,
                "subject {i}: {} vs {}",
                fit.eta[i],
                oracle
            );
        }
    }

    #[test]
    fn registered_fit_matches_native_common_domain_fit() {
        // curves share one domain; registering to [0,1] then fitting must
        // equal fitting directly on the native domain with the 1/T weight
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 25;
        let len = 20.0;
        let m = 30;
        let subjects: Vec<SubjectCurve> = (0..n)
            .map(|i| {
                let points: Vec<f64> = (0..m).map(|k| len * k as f64 / (m - 1) as f64).collect();
                let a = rng.sample::<f64, _>(StandardNormal);
                let b = rng.sample::<f64, _>(StandardNormal);
                let values = points
                    .iter()
                    .map(|&t| {
                        a + b * (t / 7.0).cos() + 0.05 * rng.sample::<f64, _>(StandardNormal)
                    })
                    .collect();
                SubjectCurve::new(format!("s{i}"), points, values)
            })
            .collect();
        let y: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let data = VariableDomainDataset::new(subjects, y.clone()).unwrap();

        let options = SofOptions {
            p: 10,
            q: 9,
            ..SofOptions::default()
        };
        let reg = register_linear(&data).unwrap();
        let fit_a = fit_sof(&reg, &options).unwrap();

        let native_curves = presmooth::smooth_all(&data, options.p).unwrap();
        let fit_b = fit_univariate(&native_curves, &y, None, &options).unwrap();

        for i in 0..n {
            assert!(
                (fit_a.eta[i] - fit_b.eta[i]).abs() < 1e-6,
                "subject {i}: {} vs {}",
                fit_a.eta[i],
                fit_b.eta[i]
            );
        }
        // coefficient functions agree after rescaling the argument
        for k in 0..=20 {
            let t = k as f64 / 20.0;
            let ba = fit_a.beta_at(t).unwrap();
            let bb = fit_b.beta_at(t * len).unwrap();
            assert!((ba - bb).abs() < 1e-6, "t {t}: {ba} vs {bb}");
        }
    }

    #[test]
    fn predicting_training_curves_reproduces_fitted_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let data = toy_dataset(&mut rng);
        let reg = register_linear(&data).unwrap();
        let options = SofOptions {
            p: 8,
            q: 8,
            ..SofOptions::default()
        };
        let fit = fit_sof(&reg, &options).unwrap();
        let curves = presmooth::smooth_all(reg.data(), options.p).unwrap();
        let pred = fit.predict(&curves, None).unwrap();
        for i in 0..pred.len() {
            assert!((pred[i] - fit.fitted[i]).abs() < 1e-9);
        }
    }
}
