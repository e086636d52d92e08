//! The variable-domain functional regression estimator.
//!
//! Pipeline: per-curve coefficients (presmooth) -> partial inner products
//! (quadrature) -> design `B = [1 | C | A Psi]` -> anisotropic tensor
//! penalty -> orthogonal mixed-model reparametrization `B T = [X | Z]` ->
//! penalized quasi-likelihood with Schall-type variance-component updates.
//! The fitted surface coefficients come back through `theta = T omega`.

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::{Mat, MatRef, Side};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{BSplineBasis, BasisError, DifferenceMatrix, TensorBasis};
use crate::linalg::{cond2, kron};
use crate::presmooth::{self, SmoothError, SmoothedCurveSet, VariableDomainDataset};
use crate::quadrature::{assemble_psi, default_node_count, PsiMatrix, QuadratureError};

/// Condition-number threshold beyond which null-space design columns are
/// dropped from the fixed-effect block.
pub const RANK_GUARD_CONDITION: f64 = 1e10;

/// Linear-predictor clamp applied inside the Poisson IRLS step.
pub const POISSON_ETA_CLAMP: f64 = 30.0;

/// Upper bound on the Poisson IRLS working weights. Uncapped weights equal
/// the fitted means, which can reach `exp(30)`; a few such subjects then
/// dominate the normal equations so completely that Cholesky pivots fall
/// below accumulated rounding error. Capping trades a negligible amount of
/// information from extreme counts for a bounded condition number.
pub const POISSON_WEIGHT_CAP: f64 = 1e8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("basis construction failed: {0}")]
    Basis(#[from] BasisError),

    #[error("curve smoothing failed: {0}")]
    Smooth(#[from] SmoothError),

    #[error("quadrature failed: {0}")]
    Quadrature(#[from] QuadratureError),

    #[error("marginal dimension {0} must be at least 3")]
    MarginalTooSmall(usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("eigendecomposition of the penalty gram matrix did not converge")]
    EigenFailure,

    #[error("mixed-model system is not positive definite")]
    SingularSystem,

    #[error(
        "non-finite working weights at iteration {iteration}; \
         the linear predictor overflowed despite clipping"
    )]
    NonFiniteWeights { iteration: usize },

    #[error(
        "PQL did not converge in {max_iter} iterations \
         (last relative change {last_change:.3e})"
    )]
    NonConvergence {
        max_iter: usize,
        last_change: f64,
        trace: Vec<f64>,
    },

    #[error("fixed-effect design is rank deficient even after dropping all null-space columns")]
    RankDeficient,

    #[error("domain length {len} outside the training range [{lo}, {hi}]")]
    DomainOutOfRange { len: f64, lo: f64, hi: f64 },
}

/// Response family of the generalized model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Poisson,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Family::Gaussian => write!(f, "gaussian"),
            Family::Poisson => write!(f, "poisson"),
        }
    }
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(Family::Gaussian),
            "poisson" => Ok(Family::Poisson),
            other => Err(format!(
                "unknown family `{other}` (expected `gaussian` or `poisson`)"
            )),
        }
    }
}

/// The anisotropic tensor-product penalty
/// `P = lambda_t (I_r (x) D_t' D_t) + lambda_T (D_T' D_T (x) I_q)`
/// under the t-fastest coefficient ordering.
#[derive(Debug, Clone)]
pub struct TensorPenalty {
    q: usize,
    r: usize,
    lambda_t: f64,
    lambda_domain: f64,
    matrix: Mat<f64>,
}

impl TensorPenalty {
    pub fn q(&self) -> usize {
        self.q
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn lambda_t(&self) -> f64 {
        self.lambda_t
    }

    pub fn lambda_domain(&self) -> f64 {
        self.lambda_domain
    }

    /// The assembled `(q r) x (q r)` penalty matrix.
    pub fn matrix(&self) -> &Mat<f64> {
        &self.matrix
    }
}

/// Build the anisotropic penalty for marginal dimensions `q` (in t) and
/// `r` (in the domain length T).
pub fn build_penalty(
    q: usize,
    r: usize,
    lambda_t: f64,
    lambda_domain: f64,
) -> Result<TensorPenalty, ModelError> {
    if q < 3 {
        return Err(ModelError::MarginalTooSmall(q));
    }
    if r < 3 {
        return Err(ModelError::MarginalTooSmall(r));
    }
    let gram_t = DifferenceMatrix::second(q)?.gram();
    let gram_domain = DifferenceMatrix::second(r)?.gram();
    let eye_q = Mat::<f64>::identity(q, q);
    let eye_r = Mat::<f64>::identity(r, r);
    let matrix = faer::Scale(lambda_t) * kron(eye_r.as_ref(), gram_t.as_ref())
        + faer::Scale(lambda_domain) * kron(gram_domain.as_ref(), eye_q.as_ref());
    Ok(TensorPenalty {
        q,
        r,
        lambda_t,
        lambda_domain,
        matrix,
    })
}

/// Eigenpairs of one marginal difference gram matrix, split into the
/// two-dimensional null space and the strictly positive part.
struct MarginalEigen {
    null: Mat<f64>,     // dim x 2
    penalized: Mat<f64>, // dim x (dim - 2)
    sigma: Vec<f64>,    // dim - 2 positive eigenvalues, ascending
}

fn marginal_eigen(dim: usize) -> Result<MarginalEigen, ModelError> {
    let gram = DifferenceMatrix::second(dim)?.gram();
    let evd = gram
        .self_adjoint_eigen(Side::Lower)
        .map_err(|_| ModelError::EigenFailure)?;
    let s = evd.S().column_vector();
    let u = evd.U();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| s[a].partial_cmp(&s[b]).unwrap());
    let tol = 1e-8 * s[order[dim - 1]].max(1.0);
    if s[order[1]].abs() > tol || s[order[2]] <= tol {
        return Err(ModelError::EigenFailure);
    }
    let null = Mat::from_fn(dim, 2, |i, j| u[(i, order[j])]);
    let penalized = Mat::from_fn(dim, dim - 2, |i, j| u[(i, order[j + 2])]);
    let sigma = order[2..].iter().map(|&k| s[k]).collect();
    Ok(MarginalEigen {
        null,
        penalized,
        sigma,
    })
}

/// Orthogonal reparametrization `T = [T_n | T_s]` of the penalized surface
/// coefficients, with the diagonal precision weights of each variance
/// component over the columns of `T_s`.
#[derive(Debug, Clone)]
pub struct MixedModelTransform {
    q: usize,
    r: usize,
    t_null: Mat<f64>,
    t_pen: Mat<f64>,
    /// Per penalized column: eigenvalue weight multiplying `1/tau_t^2`.
    lambda_t_diag: Vec<f64>,
    /// Per penalized column: eigenvalue weight multiplying `1/tau_T^2`;
    /// identically zero in the univariate (r = 1) case.
    lambda_domain_diag: Vec<f64>,
    sigma_t: Vec<f64>,
    sigma_domain: Vec<f64>,
}

impl MixedModelTransform {
    pub fn q(&self) -> usize {
        self.q
    }

    pub fn r(&self) -> usize {
        self.r
    }

    /// Total coefficient dimension `q * r`.
    pub fn input_dim(&self) -> usize {
        self.q * self.r
    }

    pub fn null_dim(&self) -> usize {
        self.t_null.ncols()
    }

    pub fn pen_dim(&self) -> usize {
        self.t_pen.ncols()
    }

    pub fn t_null(&self) -> &Mat<f64> {
        &self.t_null
    }

    pub fn t_pen(&self) -> &Mat<f64> {
        &self.t_pen
    }

    pub fn sigma_t(&self) -> &[f64] {
        &self.sigma_t
    }

    pub fn sigma_domain(&self) -> &[f64] {
        &self.sigma_domain
    }

    /// The full orthogonal matrix `[T_n | T_s]`.
    pub fn matrix(&self) -> Mat<f64> {
        let d = self.input_dim();
        let nn = self.null_dim();
        Mat::from_fn(d, d, |i, j| {
            if j < nn {
                self.t_null[(i, j)]
            } else {
                self.t_pen[(i, j - nn)]
            }
        })
    }

    /// Variance components acting on the penalized block: the `t`-direction
    /// component always, the domain-direction component when `r > 1`.
    pub fn components(&self) -> Vec<VarianceComponent> {
        let mut out = vec![VarianceComponent {
            name: "tau_t".to_string(),
            diag: self.lambda_t_diag.clone(),
        }];
        if self.lambda_domain_diag.iter().any(|&v| v != 0.0) {
            out.push(VarianceComponent {
                name: "tau_T".to_string(),
                diag: self.lambda_domain_diag.clone(),
            });
        }
        out
    }
}

/// Build the bivariate transform for marginal dimensions `q`, `r >= 3`.
///
/// Column order of `T_s` follows the three penalized blocks:
/// `[U_Ts (x) U_tn | U_Tn (x) U_ts | U_Ts (x) U_ts]`.
pub fn build_transform(q: usize, r: usize) -> Result<MixedModelTransform, ModelError> {
    if q < 3 {
        return Err(ModelError::MarginalTooSmall(q));
    }
    if r < 3 {
        return Err(ModelError::MarginalTooSmall(r));
    }
    let et = marginal_eigen(q)?;
    let ed = marginal_eigen(r)?;
    let t_null = kron(ed.null.as_ref(), et.null.as_ref());
    let block1 = kron(ed.penalized.as_ref(), et.null.as_ref());
    let block2 = kron(ed.null.as_ref(), et.penalized.as_ref());
    let block3 = kron(ed.penalized.as_ref(), et.penalized.as_ref());
    let t_pen = crate::linalg::hstack(&[block1.as_ref(), block2.as_ref(), block3.as_ref()]);

    let mut lambda_t_diag = Vec::with_capacity(t_pen.ncols());
    let mut lambda_domain_diag = Vec::with_capacity(t_pen.ncols());
    // block 1: precision (1/tau_T^2) Sigma_T (x) I_2
    for &s in &ed.sigma {
        for _ in 0..2 {
            lambda_t_diag.push(0.0);
            lambda_domain_diag.push(s);
        }
    }
    // block 2: precision (1/tau_t^2) I_2 (x) Sigma_t
    for _ in 0..2 {
        for &s in &et.sigma {
            lambda_t_diag.push(s);
            lambda_domain_diag.push(0.0);
        }
    }
    // block 3: (1/tau_T^2) Sigma_T (x) I_{q-2} + (1/tau_t^2) I_{r-2} (x) Sigma_t
    for &sd in &ed.sigma {
        for &st in &et.sigma {
            lambda_t_diag.push(st);
            lambda_domain_diag.push(sd);
        }
    }
    Ok(MixedModelTransform {
        q,
        r,
        t_null,
        t_pen,
        lambda_t_diag,
        lambda_domain_diag,
        sigma_t: et.sigma,
        sigma_domain: ed.sigma,
    })
}

/// Degenerate univariate transform (`r = 1`): a single marginal basis in t
/// with one variance component, as used by the registered-domain baseline.
pub fn build_transform_univariate(q: usize) -> Result<MixedModelTransform, ModelError> {
    if q < 3 {
        return Err(ModelError::MarginalTooSmall(q));
    }
    let et = marginal_eigen(q)?;
    let lambda_t_diag = et.sigma.clone();
    let lambda_domain_diag = vec![0.0; et.sigma.len()];
    Ok(MixedModelTransform {
        q,
        r: 1,
        t_null: et.null,
        t_pen: et.penalized,
        lambda_t_diag,
        lambda_domain_diag,
        sigma_t: et.sigma,
        sigma_domain: Vec::new(),
    })
}

/// Full design `B = [1 | C | A Psi]` with theta ordering `(alpha, gamma, b)`.
pub fn assemble_design(
    psi: &PsiMatrix,
    covariates: Option<MatRef<'_, f64>>,
) -> Result<Mat<f64>, ModelError> {
    let n = psi.design().nrows();
    let n_cov = covariates.map_or(0, |c| c.ncols());
    if let Some(c) = covariates {
        if c.nrows() != n {
            return Err(ModelError::DimensionMismatch(format!(
                "covariate rows ({}) != subject count ({})",
                c.nrows(),
                n
            )));
        }
    }
    let qr = psi.design().ncols();
    let mut b = Mat::<f64>::zeros(n, 1 + n_cov + qr);
    for i in 0..n {
        b[(i, 0)] = 1.0;
        if let Some(c) = covariates {
            for j in 0..n_cov {
                b[(i, 1 + j)] = c[(i, j)];
            }
        }
        for j in 0..qr {
            b[(i, 1 + n_cov + j)] = psi.design()[(i, j)];
        }
    }
    Ok(b)
}

/// The reparameterized design `B T = [X | Z]`, with the rank-guarded list
/// of retained null-space columns.
#[derive(Debug, Clone)]
pub struct Reparameterized {
    pub x: Mat<f64>,
    pub z: Mat<f64>,
    pub n_cov: usize,
    /// Indices (into `0..null_dim`) of the null-space columns kept in `X`.
    pub kept_null: Vec<usize>,
    /// Null-space columns dropped by the rank guard.
    pub dropped_null: Vec<usize>,
}

/// Split the design into fixed and random parts. If the fixed-effect block
/// becomes numerically rank deficient (condition number above
/// [`RANK_GUARD_CONDITION`]), null-space columns are dropped front-first
/// and recorded.
pub fn reparameterize(
    design: MatRef<'_, f64>,
    n_cov: usize,
    transform: &MixedModelTransform,
) -> Result<Reparameterized, ModelError> {
    let n = design.nrows();
    let d = transform.input_dim();
    if design.ncols() != 1 + n_cov + d {
        return Err(ModelError::DimensionMismatch(format!(
            "design has {} columns, expected {}",
            design.ncols(),
            1 + n_cov + d
        )));
    }
    let surface = design.submatrix(0, 1 + n_cov, n, d);
    let bn = surface * transform.t_null();
    let z = surface * transform.t_pen();

    let mut kept: Vec<usize> = (0..transform.null_dim()).collect();
    let mut dropped = Vec::new();
    loop {
        let x = Mat::from_fn(n, 1 + n_cov + kept.len(), |i, j| {
            if j < 1 + n_cov {
                design[(i, j)]
            } else {
                bn[(i, kept[j - 1 - n_cov])]
            }
        });
        if cond2(x.as_ref()) <= RANK_GUARD_CONDITION {
            return Ok(Reparameterized {
                x,
                z,
                n_cov,
                kept_null: kept,
                dropped_null: dropped,
            });
        }
        if kept.is_empty() {
            return Err(ModelError::RankDeficient);
        }
        dropped.push(kept.remove(0));
    }
}

/// One variance component: a diagonal precision weight per column of `Z`.
#[derive(Debug, Clone)]
pub struct VarianceComponent {
    pub name: String,
    pub diag: Vec<f64>,
}

/// Frozen variance components: PQL runs the IRLS loop only.
#[derive(Debug, Clone)]
pub struct FrozenVariances {
    pub tau2: Vec<f64>,
    pub phi: f64,
}

/// Controls for the PQL loop.
#[derive(Debug, Clone)]
pub struct FitControls {
    pub tol: f64,
    pub max_iter: usize,
    pub freeze: Option<FrozenVariances>,
    /// Warm-start values for the variance components (one per component).
    pub tau2_init: Option<Vec<f64>>,
}

impl Default for FitControls {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 200,
            freeze: None,
            tau2_init: None,
        }
    }
}

/// Converged PQL solution.
#[derive(Debug, Clone)]
pub struct PqlFit {
    pub nu: Vec<f64>,
    pub delta: Vec<f64>,
    pub tau2: Vec<f64>,
    pub phi: f64,
    /// Total effective dimension (fixed block plus shrunk random block).
    pub ed: f64,
    pub ed_components: Vec<f64>,
    pub deviance: f64,
    pub aic: f64,
    pub eta: Vec<f64>,
    pub fitted: Vec<f64>,
    pub rss: f64,
    pub iterations: usize,
    pub final_change: f64,
}

const TAU2_FLOOR: f64 = 1e-8;
const TAU2_CEIL: f64 = 1e12;

/// Cholesky factorization of a symmetrically equilibrated SPD system.
///
/// Scaling rows and columns by `1/sqrt(diag)` before factoring keeps the
/// factorization stable when IRLS weights span many orders of magnitude
/// (Poisson means reach `exp(+-30)`), which would otherwise push the raw
/// normal equations past the reach of an unpivoted Cholesky.
struct ScaledLlt {
    llt: faer::linalg::solvers::Llt<f64>,
    scale: Vec<f64>,
}

impl ScaledLlt {
    fn new(h: &Mat<f64>) -> Result<Self, ModelError> {
        let d = h.nrows();
        let scale: Vec<f64> = (0..d)
            .map(|i| {
                let v = h[(i, i)];
                if v.is_finite() && v > 0.0 {
                    1.0 / v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let hs = Mat::from_fn(d, d, |i, j| h[(i, j)] * scale[i] * scale[j]);
        let llt = match hs.llt(Side::Lower) {
            Ok(llt) => llt,
            Err(_) => {
                // numerically rank-deficient (e.g. the variance components
                // sit at the ceiling, removing the ridge): retry with a
                // relative jitter that only touches unsupported directions
                let hj = Mat::from_fn(d, d, |i, j| {
                    hs[(i, j)] + if i == j { 1e-10 * d as f64 } else { 0.0 }
                });
                hj.llt(Side::Lower)
                    .map_err(|_| ModelError::SingularSystem)?
            }
        };
        Ok(Self { llt, scale })
    }

    fn solve(&self, rhs: &Mat<f64>) -> Mat<f64> {
        let r = Mat::from_fn(rhs.nrows(), rhs.ncols(), |i, j| {
            rhs[(i, j)] * self.scale[i]
        });
        let s = self.llt.solve(&r);
        Mat::from_fn(rhs.nrows(), rhs.ncols(), |i, j| s[(i, j)] * self.scale[i])
    }

    fn inverse(&self) -> Mat<f64> {
        let inv = DenseSolveCore::inverse(&self.llt);
        Mat::from_fn(inv.nrows(), inv.ncols(), |i, j| {
            inv[(i, j)] * self.scale[i] * self.scale[j]
        })
    }
}

fn family_deviance(family: Family, y: &[f64], mu: &[f64], rss: f64) -> f64 {
    match family {
        Family::Gaussian => {
            let n = y.len() as f64;
            n * (rss.max(1e-300) / n).ln()
        }
        Family::Poisson => {
            let mut dev = 0.0;
            for (&yi, &mi) in y.iter().zip(mu) {
                if yi > 0.0 {
                    dev += yi * (yi / mi).ln() - (yi - mi);
                } else {
                    dev += mi;
                }
            }
            2.0 * dev
        }
    }
}

/// Penalized quasi-likelihood with Schall-type REML variance updates.
///
/// Iterates (a) the IRLS working response and weights; (b) the mixed-model
/// solve `(C' W C + phi G^-1) omega = C' W z`; (c) the update
/// `tau_j^2 = delta' Lambda_j delta / ed_j`, where the effective dimension
/// of the shared precision block is apportioned between the components in
/// proportion to their precision contributions. Stops when the relative
/// change of every `tau^2` and of the linear predictor drops below `tol`.
pub fn fit_pql(
    x: MatRef<'_, f64>,
    z: MatRef<'_, f64>,
    y: &[f64],
    family: Family,
    components: &[VarianceComponent],
    controls: &FitControls,
) -> Result<PqlFit, ModelError> {
    let n = y.len();
    let nf = x.ncols();
    let np = z.ncols();
    let d = nf + np;
    if x.nrows() != n || z.nrows() != n {
        return Err(ModelError::DimensionMismatch(format!(
            "design rows ({}, {}) != response length ({})",
            x.nrows(),
            z.nrows(),
            n
        )));
    }
    for c in components {
        if c.diag.len() != np {
            return Err(ModelError::DimensionMismatch(format!(
                "component `{}` has {} weights for {} random columns",
                c.name,
                c.diag.len(),
                np
            )));
        }
    }
    let k = components.len();

    let c = Mat::from_fn(n, d, |i, j| if j < nf { x[(i, j)] } else { z[(i, j - nf)] });

    let mut tau2: Vec<f64> = match (&controls.freeze, &controls.tau2_init) {
        (Some(f), _) => f.tau2.clone(),
        (None, Some(t)) => t.clone(),
        (None, None) => vec![1.0; k],
    };
    if tau2.len() != k {
        return Err(ModelError::DimensionMismatch(format!(
            "{} tau^2 values for {} components",
            tau2.len(),
            k
        )));
    }
    let mut phi = match (&controls.freeze, family) {
        (Some(f), _) => f.phi,
        (_, Family::Poisson) => 1.0,
        (_, Family::Gaussian) => 1.0,
    };

    // Gaussian weights are constant, so the cross products can be reused.
    let gaussian_ctc = match family {
        Family::Gaussian => {
            let ctc = c.transpose() * &c;
            let yv = Mat::from_fn(n, 1, |i, _| y[i]);
            let cty = c.transpose() * &yv;
            Some((ctc, cty))
        }
        Family::Poisson => None,
    };

    let mut eta: Vec<f64> = match family {
        Family::Gaussian => y.to_vec(),
        Family::Poisson => y.iter().map(|&v| v.max(0.5).ln()).collect(),
    };
    let mut omega = vec![0.0; d];
    // components pinned at the upper variance boundary (see below)
    let mut pinned = vec![false; k];
    let mut tau_hist: Vec<Vec<f64>> = Vec::new();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut last_change = f64::INFINITY;
    let mut last_llt = None;
    let mut rss = 0.0;

    for iter in 0..controls.max_iter {
        iterations = iter + 1;
        // (a) working response and weights
        let (w, zvec): (Vec<f64>, Vec<f64>) = match family {
            Family::Gaussian => (vec![1.0; n], y.to_vec()),
            Family::Poisson => {
                let mut w = Vec::with_capacity(n);
                let mut zv = Vec::with_capacity(n);
                for i in 0..n {
                    let e = eta[i].clamp(-POISSON_ETA_CLAMP, POISSON_ETA_CLAMP);
                    let mu = e.exp();
                    if !mu.is_finite() || mu <= 0.0 {
                        return Err(ModelError::NonFiniteWeights { iteration: iter });
                    }
                    w.push(mu.min(POISSON_WEIGHT_CAP));
                    zv.push(e + (y[i] - mu) / mu);
                }
                (w, zv)
            }
        };

        // (b) mixed-model solve
        let (mut h, ctwz) = match (&gaussian_ctc, family) {
            (Some((ctc, cty)), _) => (ctc.clone(), cty.clone()),
            (None, _) => {
                let cw = Mat::from_fn(n, d, |i, j| w[i] * c[(i, j)]);
                let h = c.transpose() * &cw;
                let wz = Mat::from_fn(n, 1, |i, _| w[i] * zvec[i]);
                (h, c.transpose() * &wz)
            }
        };
        let g: Vec<f64> = (0..np)
            .map(|m| {
                components
                    .iter()
                    .zip(&tau2)
                    .map(|(comp, &t)| comp.diag[m] / t)
                    .sum::<f64>()
            })
            .collect();
        for m in 0..np {
            h[(nf + m, nf + m)] += phi * g[m];
        }
        let llt = ScaledLlt::new(&h)?;
        let sol = llt.solve(&ctwz);
        let mut omega_new: Vec<f64> = (0..d).map(|j| sol[(j, 0)]).collect();
        let mut eta_new: Vec<f64> = (0..n)
            .map(|i| (0..d).map(|j| c[(i, j)] * omega_new[j]).sum())
            .collect();

        // Step-halving for Poisson fits: at fixed variance components the
        // IRLS step targets the penalized deviance, but a full step can
        // overshoot and cycle when the linear predictor spans many orders
        // of magnitude. Halve the step toward the previous iterate until
        // the objective (evaluated at the current components) stops
        // increasing.
        let mut objective_stalled = false;
        if family == Family::Poisson && iter > 0 {
            let pdev = |om: &[f64], et: &[f64]| -> f64 {
                let mu: Vec<f64> = et
                    .iter()
                    .map(|&e| e.clamp(-POISSON_ETA_CLAMP, POISSON_ETA_CLAMP).exp())
                    .collect();
                let mut p = family_deviance(family, y, &mu, 0.0);
                for m in 0..np {
                    p += phi * g[m] * om[nf + m] * om[nf + m];
                }
                p
            };
            let prev = pdev(&omega, &eta);
            let mut tries = 0;
            while pdev(&omega_new, &eta_new) > prev * (1.0 + 1e-10) + 1e-10 && tries < 30 {
                for j in 0..d {
                    omega_new[j] = 0.5 * (omega_new[j] + omega[j]);
                }
                for i in 0..n {
                    eta_new[i] = (0..d).map(|j| c[(i, j)] * omega_new[j]).sum();
                }
                tries += 1;
            }
            // When the coefficient step no longer moves the objective the
            // remaining parameter drift lies in a flat (unidentified)
            // direction; the fit itself has converged.
            let accepted = pdev(&omega_new, &eta_new);
            objective_stalled = (prev - accepted).abs() <= 1e-9 * (prev.abs() + 1.0);
        }

        rss = match family {
            Family::Gaussian => y
                .iter()
                .zip(&eta_new)
                .map(|(&yi, &ei)| (yi - ei).powi(2))
                .sum(),
            Family::Poisson => y
                .iter()
                .zip(&eta_new)
                .map(|(&yi, &ei)| {
                    (yi - ei.clamp(-POISSON_ETA_CLAMP, POISSON_ETA_CLAMP).exp()).powi(2)
                })
                .sum(),
        };

        let mut tau_change: f64 = 0.0;
        if controls.freeze.is_none() {
            // the matrix inverse is only needed for the variance updates,
            // so frozen fits skip it inside the loop
            let inv = llt.inverse();
            // per-column shrinkage of the random block
            let ed_m: Vec<f64> = (0..np)
                .map(|m| (1.0 - phi * g[m] * inv[(nf + m, nf + m)]).clamp(0.0, 1.0))
                .collect();
            let ed_total = nf as f64 + ed_m.iter().sum::<f64>();
            // (c) Schall updates with proportional apportioning
            let delta = &omega_new[nf..];
            for (j, comp) in components.iter().enumerate() {
                if pinned[j] {
                    continue;
                }
                let num: f64 = (0..np).map(|m| comp.diag[m] * delta[m] * delta[m]).sum();
                let ed_j: f64 = (0..np)
                    .filter(|&m| g[m] > 0.0)
                    .map(|m| ed_m[m] * (comp.diag[m] / tau2[j]) / g[m])
                    .sum();
                if ed_j > 1e-12 {
                    let mut t_new = num / ed_j;
                    // Upper boundary: once tau^2 >> phi the effective
                    // smoothing (phi / tau^2) is numerically zero and the
                    // fit no longer depends on tau^2, but the Schall update
                    // keeps oscillating around a huge value and never meets
                    // the relative-change criterion. Pin the component at
                    // the ceiling and stop updating it.
                    if t_new > 1e8 * phi.max(1e-12) {
                        tau2[j] = TAU2_CEIL;
                        pinned[j] = true;
                        continue;
                    }
                    let ratio = t_new / tau2[j];
                    // A persistent geometric decay means the REML estimate
                    // sits at the zero boundary; square the decay ratio to
                    // reach it in finitely many steps, and snap once the
                    // component is effectively unidentifiable.
                    if ratio < 0.98 && t_new < 1e-2 {
                        t_new = tau2[j] * ratio * ratio;
                    }
                    if t_new < 1e-5 {
                        t_new = TAU2_FLOOR;
                    }
                    let t_new = t_new.clamp(TAU2_FLOOR, TAU2_CEIL);
                    tau_change = tau_change.max((t_new - tau2[j]).abs() / tau2[j]);
                    tau2[j] = t_new;
                }
            }
            if family == Family::Gaussian {
                let denom = (n as f64 - ed_total).max(1.0);
                phi = (rss / denom).max(1e-12);
            }
            // Aitken extrapolation for slowly contracting Schall tails:
            // when successive updates decay geometrically toward an
            // interior fixed point the likelihood is nearly flat in that
            // direction, and the plain iteration can need thousands of
            // steps. Jump each such component to its extrapolated limit.
            tau_hist.push(tau2.clone());
            if tau_hist.len() > 3 {
                tau_hist.remove(0);
            }
            let in_tail = trace.last().is_some_and(|&c| c < 1e-3);
            if tau_hist.len() == 3 && in_tail {
                let mut jumped = false;
                for j in 0..k {
                    if pinned[j] {
                        continue;
                    }
                    let d1 = tau_hist[1][j] - tau_hist[0][j];
                    let d2 = tau_hist[2][j] - tau_hist[1][j];
                    if d1.abs() < f64::EPSILON * tau_hist[1][j].abs() {
                        continue;
                    }
                    let r = d2 / d1;
                    if (0.5..0.9995).contains(&r) {
                        let limit =
                            (tau_hist[2][j] + d2 * r / (1.0 - r)).clamp(TAU2_FLOOR, TAU2_CEIL);
                        tau_change = tau_change.max((limit - tau2[j]).abs() / tau2[j]);
                        tau2[j] = limit;
                        jumped = true;
                    }
                }
                if jumped {
                    tau_hist.clear();
                }
            }
        }

        let eta_scale = 1.0 + eta_new.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let eta_change = eta
            .iter()
            .zip(&eta_new)
            .fold(0.0_f64, |m, (&a, &b)| m.max((a - b).abs()))
            / eta_scale;
        last_change = eta_change.max(tau_change);
        trace.push(last_change);

        eta = eta_new;
        omega = omega_new;
        last_llt = Some(llt);

        if last_change < controls.tol || (objective_stalled && tau_change < controls.tol) {
            converged = true;
            break;
        }
    }

    if !converged {
        return Err(ModelError::NonConvergence {
            max_iter: controls.max_iter,
            last_change,
            trace,
        });
    }

    // final effective dimension from the converged system
    let inv = last_llt.expect("at least one iteration ran").inverse();
    let g: Vec<f64> = (0..np)
        .map(|m| {
            components
                .iter()
                .zip(&tau2)
                .map(|(comp, &t)| comp.diag[m] / t)
                .sum::<f64>()
        })
        .collect();
    let ed_m: Vec<f64> = (0..np)
        .map(|m| (1.0 - phi * g[m] * inv[(nf + m, nf + m)]).clamp(0.0, 1.0))
        .collect();
    let ed = nf as f64 + ed_m.iter().sum::<f64>();
    let ed_components: Vec<f64> = components
        .iter()
        .enumerate()
        .map(|(j, comp)| {
            (0..np)
                .filter(|&m| g[m] > 0.0)
                .map(|m| ed_m[m] * (comp.diag[m] / tau2[j]) / g[m])
                .sum()
        })
        .collect();

    let fitted: Vec<f64> = match family {
        Family::Gaussian => eta.clone(),
        Family::Poisson => eta
            .iter()
            .map(|&e| e.clamp(-POISSON_ETA_CLAMP, POISSON_ETA_CLAMP).exp())
            .collect(),
    };
    let deviance = family_deviance(family, y, &fitted, rss);
    let aic = deviance + 2.0 * ed;

    Ok(PqlFit {
        nu: omega[..nf].to_vec(),
        delta: omega[nf..].to_vec(),
        tau2,
        phi,
        ed,
        ed_components,
        deviance,
        aic,
        eta,
        fitted,
        rss,
        iterations,
        final_change: last_change,
    })
}

/// Quadrature node-count rule used when assembling the partial inner
/// products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeRule {
    /// `max(51, 2 ceil(T) + 1)` nodes.
    Default,
    /// A fixed odd node count for every curve.
    Fixed(usize),
}

impl NodeRule {
    pub fn count(&self, len: f64) -> usize {
        match self {
            NodeRule::Default => default_node_count(len),
            NodeRule::Fixed(n) => *n,
        }
    }
}

/// Options for the full estimator.
#[derive(Debug, Clone)]
pub struct VdfrOptions {
    pub family: Family,
    /// Per-curve basis dimension.
    pub p: usize,
    /// Marginal dimension in t.
    pub q: usize,
    /// Marginal dimension in the domain length.
    pub r: usize,
    pub node_rule: NodeRule,
    /// Override for the t marginal domain (default `[0, max T_i]`).
    pub t_domain: Option<(f64, f64)>,
    /// Override for the domain-length marginal (default `[min T_i, max T_i]`).
    pub domain_range: Option<(f64, f64)>,
    pub controls: FitControls,
}

impl Default for VdfrOptions {
    fn default() -> Self {
        Self {
            family: Family::Gaussian,
            p: 25,
            q: 25,
            r: 25,
            node_rule: NodeRule::Default,
            t_domain: None,
            domain_range: None,
            controls: FitControls::default(),
        }
    }
}

/// A fitted variable-domain functional regression model.
#[derive(Debug, Clone)]
pub struct VdfrFit {
    pub family: Family,
    pub tensor: TensorBasis,
    pub node_rule: NodeRule,
    pub alpha: f64,
    pub gamma: Vec<f64>,
    /// Surface coefficients `b` (length `q * r`, t-index fastest).
    pub surface: Vec<f64>,
    pub nu: Vec<f64>,
    pub delta: Vec<f64>,
    pub tau2: Vec<f64>,
    pub phi: f64,
    pub ed: f64,
    pub deviance: f64,
    pub aic: f64,
    pub iterations: usize,
    pub final_change: f64,
    pub dropped_null_columns: Vec<usize>,
    pub eta: Vec<f64>,
    pub fitted: Vec<f64>,
}

impl VdfrFit {
    /// Full coefficient vector `theta = (alpha, gamma, b)`.
    pub fn theta(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(1 + self.gamma.len() + self.surface.len());
        out.push(self.alpha);
        out.extend_from_slice(&self.gamma);
        out.extend_from_slice(&self.surface);
        out
    }

    /// The coefficient surface at one point; errors outside the basis
    /// domains, `None` above the diagonal (t > T).
    pub fn beta_at(&self, t: f64, domain_len: f64) -> Result<Option<f64>, ModelError> {
        let eps = 1e-9 * (1.0 + domain_len.abs());
        if t > domain_len + eps {
            return Ok(None);
        }
        let row = self.tensor.eval_row(t, domain_len)?;
        Ok(Some(
            row.iter().zip(&self.surface).map(|(&m, &b)| m * b).sum(),
        ))
    }

    /// The surface evaluated on a grid (rows indexed by `t_grid`, columns
    /// by `domain_grid`), with `NaN` marking the masked region `t > T`.
    pub fn beta_surface(
        &self,
        t_grid: &[f64],
        domain_grid: &[f64],
    ) -> Result<Mat<f64>, ModelError> {
        let mut out = Mat::<f64>::zeros(t_grid.len(), domain_grid.len());
        for (j, &len) in domain_grid.iter().enumerate() {
            for (i, &t) in t_grid.iter().enumerate() {
                out[(i, j)] = match self.beta_at(t, len)? {
                    Some(v) => v,
                    None => f64::NAN,
                };
            }
        }
        Ok(out)
    }

    /// Out-of-sample predictions on the response scale. Domain lengths must
    /// lie inside the training range of the domain marginal.
    pub fn predict(
        &self,
        curves: &SmoothedCurveSet,
        covariates: Option<MatRef<'_, f64>>,
    ) -> Result<Vec<f64>, ModelError> {
        let (dlo, dhi) = self.tensor.marginal_domain().domain();
        for curve in curves.curves() {
            let len = curve.domain_len();
            let eps = 1e-9 * (1.0 + dhi.abs());
            if len < dlo - eps || len > dhi + eps {
                return Err(ModelError::DomainOutOfRange {
                    len,
                    lo: dlo,
                    hi: dhi,
                });
            }
        }
        let n_cov = covariates.map_or(0, |c| c.ncols());
        if n_cov != self.gamma.len() {
            return Err(ModelError::DimensionMismatch(format!(
                "{} covariates supplied, model has {}",
                n_cov,
                self.gamma.len()
            )));
        }
        let rule = self.node_rule;
        let psi = assemble_psi(curves, &self.tensor, |len| rule.count(len))?;
        let mut out = Vec::with_capacity(curves.len());
        for i in 0..curves.len() {
            let mut eta = self.alpha;
            if let Some(c) = covariates {
                for j in 0..n_cov {
                    eta += c[(i, j)] * self.gamma[j];
                }
            }
            for j in 0..self.surface.len() {
                eta += psi.design()[(i, j)] * self.surface[j];
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

/// Fit the model end to end: presmooth every curve, assemble the partial
/// inner products, reparameterize, and run PQL.
pub fn fit(dataset: &VariableDomainDataset, options: &VdfrOptions) -> Result<VdfrFit, ModelError> {
    let curves = presmooth::smooth_all(dataset, options.p)?;
    fit_presmoothed(
        &curves,
        dataset.responses(),
        dataset.covariates().map(|c| c.as_ref()),
        options,
    )
}

/// Fit starting from already-smoothed curves.
pub fn fit_presmoothed(
    curves: &SmoothedCurveSet,
    responses: &[f64],
    covariates: Option<MatRef<'_, f64>>,
    options: &VdfrOptions,
) -> Result<VdfrFit, ModelError> {
    let lens = curves.domain_lengths();
    let max_len = lens.iter().fold(0.0_f64, |m, &v| m.max(v));
    let min_len = lens.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let (tlo, thi) = options.t_domain.unwrap_or((0.0, max_len));
    let (mut dlo, dhi) = options.domain_range.unwrap_or((min_len, max_len));
    if dhi - dlo < 1e-6 * dhi.abs().max(1.0) {
        // all domains (numerically) equal: widen so the marginal is valid
        dlo = (dhi - dhi.abs().max(1.0)).max(0.0);
        if dhi - dlo < 1e-6 {
            dlo = dhi - 1.0;
        }
    }
    let tensor = TensorBasis::new(
        BSplineBasis::cubic_pspline_with_dim(tlo, thi, options.q)?,
        BSplineBasis::cubic_pspline_with_dim(dlo, dhi, options.r)?,
    );
    fit_with_tensor(curves, responses, covariates, tensor, options)
}

/// Fit with an explicitly constructed tensor basis.
pub fn fit_with_tensor(
    curves: &SmoothedCurveSet,
    responses: &[f64],
    covariates: Option<MatRef<'_, f64>>,
    tensor: TensorBasis,
    options: &VdfrOptions,
) -> Result<VdfrFit, ModelError> {
    if curves.len() != responses.len() {
        return Err(ModelError::DimensionMismatch(format!(
            "{} curves for {} responses",
            curves.len(),
            responses.len()
        )));
    }
    let rule = options.node_rule;
    let psi = assemble_psi(curves, &tensor, |len| rule.count(len))?;
    let design = assemble_design(&psi, covariates)?;
    let q = tensor.marginal_t().dim();
    let r = tensor.marginal_domain().dim();
    let transform = build_transform(q, r)?;
    let rep = reparameterize(design.as_ref(), covariates.map_or(0, |c| c.ncols()), &transform)?;
    let components = transform.components();
    let pql = fit_pql(
        rep.x.as_ref(),
        rep.z.as_ref(),
        responses,
        options.family,
        &components,
        &options.controls,
    )?;
    assemble_fit(&transform, &rep, pql, tensor, options)
}

fn assemble_fit(
    transform: &MixedModelTransform,
    rep: &Reparameterized,
    pql: PqlFit,
    tensor: TensorBasis,
    options: &VdfrOptions,
) -> Result<VdfrFit, ModelError> {
    let n_cov = rep.n_cov;
    let alpha = pql.nu[0];
    let gamma = pql.nu[1..1 + n_cov].to_vec();
    let nu_null = &pql.nu[1 + n_cov..];

    // theta surface block = T_n (kept columns) nu_null + T_s delta
    let d = transform.input_dim();
    let mut surface = vec![0.0; d];
    for (col_pos, &col) in rep.kept_null.iter().enumerate() {
        for i in 0..d {
            surface[i] += transform.t_null()[(i, col)] * nu_null[col_pos];
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

    Ok(VdfrFit {
        family: options.family,
        tensor,
        node_rule: options.node_rule,
        alpha,
        gamma,
        surface,
        nu: pql.nu,
        delta: pql.delta,
        tau2: pql.tau2,
        phi: pql.phi,
        ed: pql.ed,
        deviance: pql.deviance,
        aic: pql.aic,
        iterations: pql.iterations,
        final_change: pql.final_change,
        dropped_null_columns: rep.dropped_null.clone(),
        eta: pql.eta,
        fitted: pql.fitted,
    })
}
