//! Per-curve penalized smoothing of raw variable-domain observations.
//!
//! Each noisy curve is projected on a cubic B-spline basis over its own
//! domain `[0, T_i]` by penalized least squares with a second-order
//! difference penalty; the smoothing parameter is chosen per curve by GCV.

use crate::basis::{BSplineBasis, BasisError, DifferenceMatrix};
use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::prelude::*;
use faer::Side;
use rayon::prelude::*;
use thiserror::Error;

/// Minimum observations per curve before smoothing is attempted.
pub const DEFAULT_MIN_OBS: usize = 10;

/// Default basis dimension for the sample curves.
pub const DEFAULT_P: usize = 25;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum SmoothError {
    #[error("observation points must be strictly increasing")]
    NonIncreasingPoints,

    #[error("observation points must be nonnegative (left-aligned), found {0}")]
    NegativePoint(f64),

    #[error("curve has {got} observations, need at least {min}")]
    TooFewObservations { got: usize, min: usize },

    #[error("points ({points}) and values ({values}) lengths differ")]
    LengthMismatch { points: usize, values: usize },

    #[error("{curves} curves but {responses} responses")]
    ResponseLengthMismatch { curves: usize, responses: usize },

    #[error("covariate matrix has {rows} rows for {curves} curves")]
    CovariateRowMismatch { rows: usize, curves: usize },

    #[error("duplicate subject id {0:?}")]
    DuplicateSubject(String),

    #[error("normal equations are singular (lambda = {lambda})")]
    SingularSystem { lambda: f64 },

    #[error("empty smoothing-parameter grid")]
    EmptyGrid,

    #[error("GCV degenerate: effective dimension >= observation count on the whole grid")]
    DegenerateGcv,

    #[error(transparent)]
    Basis(#[from] BasisError),

    #[error("subject {id:?}: {source}")]
    Subject {
        id: String,
        #[source]
        source: Box<SmoothError>,
    },
}

/// One raw curve: strictly increasing observation points on `[0, T_i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectCurve {
    pub id: String,
    pub points: Vec<f64>,
    pub values: Vec<f64>,
}

impl SubjectCurve {
    pub fn new(id: impl Into<String>, points: Vec<f64>, values: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            points,
            values,
        }
    }

    /// Domain length `T_i`, the last observation point.
    pub fn domain_len(&self) -> f64 {
        *self.points.last().unwrap_or(&0.0)
    }

    fn validate(&self, min_obs: usize) -> Result<(), SmoothError> {
        if self.points.len() != self.values.len() {
            return Err(SmoothError::LengthMismatch {
                points: self.points.len(),
                values: self.values.len(),
            });
        }
        if self.points.len() < min_obs {
            return Err(SmoothError::TooFewObservations {
                got: self.points.len(),
                min: min_obs,
            });
        }
        if let Some(&p) = self.points.iter().find(|p| **p < 0.0) {
            return Err(SmoothError::NegativePoint(p));
        }
        if self.points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SmoothError::NonIncreasingPoints);
        }
        Ok(())
    }
}

/// N curves with scalar responses and optional scalar covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableDomainDataset {
    subjects: Vec<SubjectCurve>,
    responses: Vec<f64>,
    covariates: Option<Mat<f64>>,
    covariate_names: Vec<String>,
    min_obs: usize,
}

impl VariableDomainDataset {
    pub fn new(subjects: Vec<SubjectCurve>, responses: Vec<f64>) -> Result<Self, SmoothError> {
        Self::with_min_observations(subjects, responses, DEFAULT_MIN_OBS)
    }

    pub fn with_min_observations(
        subjects: Vec<SubjectCurve>,
        responses: Vec<f64>,
        min_obs: usize,
    ) -> Result<Self, SmoothError> {
        if subjects.len() != responses.len() {
            return Err(SmoothError::ResponseLengthMismatch {
                curves: subjects.len(),
                responses: responses.len(),
            });
        }
        let mut seen = std::collections::HashSet::new();
        for s in &subjects {
            if !seen.insert(s.id.clone()) {
                return Err(SmoothError::DuplicateSubject(s.id.clone()));
            }
            s.validate(min_obs).map_err(|e| SmoothError::Subject {
                id: s.id.clone(),
                source: Box::new(e),
            })?;
        }
        Ok(Self {
            subjects,
            responses,
            covariates: None,
            covariate_names: Vec::new(),
            min_obs,
        })
    }

    pub fn with_covariates(
        mut self,
        covariates: Mat<f64>,
        names: Vec<String>,
    ) -> Result<Self, SmoothError> {
        if covariates.nrows() != self.subjects.len() {
            return Err(SmoothError::CovariateRowMismatch {
                rows: covariates.nrows(),
                curves: self.subjects.len(),
            });
        }
        self.covariates = Some(covariates);
        self.covariate_names = names;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn subjects(&self) -> &[SubjectCurve] {
        &self.subjects
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn covariates(&self) -> Option<&Mat<f64>> {
        self.covariates.as_ref()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn min_observations(&self) -> usize {
        self.min_obs
    }

    pub fn domain_lengths(&self) -> Vec<f64> {
        self.subjects.iter().map(|s| s.domain_len()).collect()
    }

    pub fn max_domain(&self) -> f64 {
        self.domain_lengths().into_iter().fold(0.0, f64::max)
    }

    pub fn min_domain(&self) -> f64 {
        self.domain_lengths().into_iter().fold(f64::INFINITY, f64::min)
    }
}

/// A smoothed curve: basis on `[0, T_i]` and its fitted coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedCurve {
    pub id: String,
    pub basis: BSplineBasis,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub gcv: f64,
}

impl SmoothedCurve {
    pub fn domain_len(&self) -> f64 {
        self.basis.domain().1
    }

    /// Fitted curve values at the given points.
    pub fn eval(&self, points: &[f64]) -> Result<Vec<f64>, BasisError> {
        let phi = self.basis.eval(points)?;
        Ok((0..points.len())
            .map(|m| {
                (0..self.basis.dim())
                    .map(|j| phi[(m, j)] * self.coefficients[j])
                    .sum()
            })
            .collect())
    }
}

/// The per-subject coefficient blocks of the block-diagonal matrix A.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedCurveSet {
    curves: Vec<SmoothedCurve>,
    p: usize,
}

impl SmoothedCurveSet {
    pub fn new(curves: Vec<SmoothedCurve>, p: usize) -> Self {
        debug_assert!(curves.iter().all(|c| c.coefficients.len() == p));
        Self { curves, p }
    }

    pub fn len(&self) -> usize {
        self.curves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn curves(&self) -> &[SmoothedCurve] {
        &self.curves
    }

    pub fn domain_lengths(&self) -> Vec<f64> {
        self.curves.iter().map(|c| c.domain_len()).collect()
    }
}

/// Logarithmic grid `1e-5 ..= 1e5`, 31 points.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..31).map(|i| 10f64.powf(-5.0 + i as f64 / 3.0)).collect()
}

struct CurveSystem {
    phi: Mat<f64>,
    phi_t_phi: Mat<f64>,
    penalty: Mat<f64>,
    phi_t_y: Mat<f64>,
    values: Vec<f64>,
}

impl CurveSystem {
    fn build(points: &[f64], values: &[f64], p: usize) -> Result<Self, SmoothError> {
        if points.len() != values.len() {
            return Err(SmoothError::LengthMismatch {
                points: points.len(),
                values: values.len(),
            });
        }
        if points.len() < DEFAULT_MIN_OBS {
            return Err(SmoothError::TooFewObservations {
                got: points.len(),
                min: DEFAULT_MIN_OBS,
            });
        }
        let hi = *points.last().unwrap();
        let basis = BSplineBasis::cubic_pspline_with_dim(0.0, hi, p)?;
        let phi = basis.eval(points)?;
        let penalty = DifferenceMatrix::second(p)?.gram();
        let phi_t_phi = phi.transpose() * &phi;
        let y = Mat::from_fn(values.len(), 1, |i, _| values[i]);
        let phi_t_y = phi.transpose() * &y;
        Ok(Self {
            phi,
            phi_t_phi,
            penalty,
            phi_t_y,
            values: values.to_vec(),
        })
    }

    /// Solve the penalized normal equations at a fixed lambda.
    /// Returns coefficients, residual sum of squares, and hat-matrix trace.
    fn solve(&self, lambda: f64) -> Result<(Vec<f64>, f64, f64), SmoothError> {
        let p = self.phi_t_phi.nrows();
        let mut lhs = self.phi_t_phi.clone();
        for i in 0..p {
            for j in 0..p {
                lhs[(i, j)] += lambda * self.penalty[(i, j)];
            }
        }
        let llt = lhs
            .llt(Side::Lower)
            .map_err(|_| SmoothError::SingularSystem { lambda })?;
        let a = llt.solve(&self.phi_t_y);
        let inv = DenseSolveCore::inverse(&llt);
        // tr(H) = tr((Phi'Phi + lambda D'D)^-1 Phi'Phi)
        let mut tr_h = 0.0;
        for i in 0..p {
            for j in 0..p {
                tr_h += inv[(i, j)] * self.phi_t_phi[(j, i)];
            }
        }
        let mut rss = 0.0;
        for m in 0..self.values.len() {
            let fit: f64 = (0..p).map(|j| self.phi[(m, j)] * a[(j, 0)]).sum();
            rss += (self.values[m] - fit).powi(2);
        }
        Ok(((0..p).map(|j| a[(j, 0)]).collect(), rss, tr_h))
    }
}

/// Penalized least-squares coefficients for one curve at a fixed lambda:
/// `argmin ||values - Phi a||^2 + lambda ||D2 a||^2`.
pub fn smooth_curve(
    points: &[f64],
    values: &[f64],
    p: usize,
    lambda: f64,
) -> Result<Vec<f64>, SmoothError> {
    let sys = CurveSystem::build(points, values, p)?;
    let (a, _, _) = sys.solve(lambda)?;
    Ok(a)
}

/// Grid search for the GCV-minimizing smoothing parameter.
///
/// `GCV(lambda) = m * RSS / (m - tr H)^2`; ties break toward larger lambda.
pub fn select_lambda_gcv(
    points: &[f64],
    values: &[f64],
    p: usize,
    grid: &[f64],
) -> Result<(f64, f64), SmoothError> {
    if grid.is_empty() {
        return Err(SmoothError::EmptyGrid);
    }
    let sys = CurveSystem::build(points, values, p)?;
    let m = values.len() as f64;
    let mut sorted = grid.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best: Option<(f64, f64)> = None;
    for &lambda in &sorted {
        let (_, rss, tr_h) = sys.solve(lambda)?;
        if tr_h >= m {
            continue;
        }
        let gcv = m * rss / (m - tr_h).powi(2);
        match best {
            Some((_, g)) if gcv > g => {}
            _ => best = Some((lambda, gcv)),
        }
    }
    best.ok_or(SmoothError::DegenerateGcv)
}

/// Smooth every curve in the dataset with a common basis dimension `p`,
/// selecting the smoothing parameter independently per curve.
pub fn smooth_all(
    data: &VariableDomainDataset,
    p: usize,
) -> Result<SmoothedCurveSet, SmoothError> {
    let grid = default_lambda_grid();
    let curves: Result<Vec<SmoothedCurve>, SmoothError> = data
        .subjects()
        .par_iter()
        .map(|s| {
            let wrap = |e: SmoothError| SmoothError::Subject {
                id: s.id.clone(),
                source: Box::new(e),
            };
            let (lambda, gcv) =
                select_lambda_gcv(&s.points, &s.values, p, &grid).map_err(wrap)?;
            let coefficients = smooth_curve(&s.points, &s.values, p, lambda).map_err(wrap)?;
            let basis = BSplineBasis::cubic_pspline_with_dim(0.0, s.domain_len(), p).map_err(|e| {
                SmoothError::Subject {
                    id: s.id.clone(),
                    source: Box::new(e.into()),
                }
            })?;
            Ok(SmoothedCurve {
                id: s.id.clone(),
                basis,
                coefficients,
                lambda,
                gcv,
            })
        })
        .collect();
    Ok(SmoothedCurveSet::new(curves?, p))
}
