//! B-spline bases (univariate and tensor-product) and difference matrices.
//!
//! Two knot layouts are provided: clamped (boundary knots repeated
//! `degree + 1` times) and uniform P-spline knots (equally spaced,
//! extended `degree` steps beyond each boundary). Both are partitions of
//! unity on the closed domain; only the uniform layout pairs with the
//! integer difference penalty so that polynomials up to the difference
//! order are penalty-free.

use faer::prelude::*;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum BasisError {
    #[error("degenerate domain: lo ({lo}) must be strictly less than hi ({hi})")]
    DegenerateDomain { lo: f64, hi: f64 },

    #[error("spline degree must be at least 1, got {0}")]
    InvalidDegree(usize),

    #[error("point {point} outside the basis domain [{lo}, {hi}]")]
    OutOfDomain { point: f64, lo: f64, hi: f64 },

    #[error("difference order {order} requires more than {order} coefficients, got {dim}")]
    InvalidDifferenceOrder { order: usize, dim: usize },
}

/// Knot layout of a B-spline basis.
///
/// `Clamped` repeats the boundary knots `degree + 1` times so the basis
/// interpolates at the endpoints. `Uniform` extends equally spaced knots
/// `degree` steps beyond each boundary (the P-spline layout); its Greville
/// sites are equally spaced, so the integer difference penalty on the
/// coefficients leaves polynomials up to the difference order penalty-free.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnotStyle {
    Clamped,
    Uniform,
}

/// Univariate B-spline basis on a closed interval.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineBasis {
    degree: usize,
    style: KnotStyle,
    lo: f64,
    hi: f64,
    knots: Vec<f64>,
}

impl BSplineBasis {
    /// Clamped basis with `interior_knots` equally spaced interior knots.
    /// The dimension is `interior_knots + degree + 1`.
    pub fn new(lo: f64, hi: f64, interior_knots: usize, degree: usize) -> Result<Self, BasisError> {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(BasisError::DegenerateDomain { lo, hi });
        }
        if degree < 1 {
            return Err(BasisError::InvalidDegree(degree));
        }
        let mut knots = Vec::with_capacity(interior_knots + 2 * (degree + 1));
        knots.extend(std::iter::repeat(lo).take(degree + 1));
        for i in 1..=interior_knots {
            let f = i as f64 / (interior_knots + 1) as f64;
            knots.push(lo + f * (hi - lo));
        }
        knots.extend(std::iter::repeat(hi).take(degree + 1));
        Ok(Self {
            degree,
            style: KnotStyle::Clamped,
            lo,
            hi,
            knots,
        })
    }

    /// Uniform-knot (P-spline) basis with `segments` equal knot spans on
    /// the domain and `degree` extension knots beyond each boundary.
    /// The dimension is `segments + degree`.
    pub fn uniform(lo: f64, hi: f64, segments: usize, degree: usize) -> Result<Self, BasisError> {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(BasisError::DegenerateDomain { lo, hi });
        }
        if degree < 1 {
            return Err(BasisError::InvalidDegree(degree));
        }
        assert!(segments >= 1, "uniform basis needs at least one knot span");
        let h = (hi - lo) / segments as f64;
        let d = degree as isize;
        let knots: Vec<f64> = (-d..=segments as isize + d)
            .map(|i| lo + i as f64 * h)
            .collect();
        Ok(Self {
            degree,
            style: KnotStyle::Uniform,
            lo,
            hi,
            knots,
        })
    }

    /// Cubic clamped basis.
    pub fn cubic(lo: f64, hi: f64, interior_knots: usize) -> Result<Self, BasisError> {
        Self::new(lo, hi, interior_knots, 3)
    }

    /// Cubic clamped basis of a given dimension (`dim >= 4`).
    pub fn cubic_with_dim(lo: f64, hi: f64, dim: usize) -> Result<Self, BasisError> {
        assert!(dim >= 4, "cubic basis needs dimension >= 4");
        Self::new(lo, hi, dim - 4, 3)
    }

    /// Cubic uniform-knot (P-spline) basis of a given dimension
    /// (`dim >= 4`).
    pub fn cubic_pspline_with_dim(lo: f64, hi: f64, dim: usize) -> Result<Self, BasisError> {
        assert!(dim >= 4, "cubic basis needs dimension >= 4");
        Self::uniform(lo, hi, dim - 3, 3)
    }

    pub fn dim(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn style(&self) -> KnotStyle {
        self.style
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Number of knots strictly inside the open domain.
    pub fn interior_knots(&self) -> usize {
        self.knots
            .iter()
            .filter(|&&k| k > self.lo && k < self.hi)
            .count()
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Greville abscissae: the knot averages at which a spline with
    /// coefficients `f(xi_j)` reproduces any linear function `f` exactly.
    pub fn greville(&self) -> Vec<f64> {
        let d = self.degree;
        (0..self.dim())
            .map(|j| self.knots[j + 1..j + 1 + d].iter().sum::<f64>() / d as f64)
            .collect()
    }

    fn contains(&self, x: f64) -> bool {
        // closed domain, with a hair of slack for accumulated rounding
        let eps = 1e-12 * (1.0 + self.hi.abs().max(self.lo.abs()));
        x >= self.lo - eps && x <= self.hi + eps
    }

    /// Knot span index `j` with `knots[j] <= x < knots[j+1]`.
    fn span(&self, x: f64) -> usize {
        let n = self.dim();
        if x >= self.knots[n] {
            return n - 1;
        }
        let d = self.degree;
        // binary search over [d, n)
        let mut lo = d;
        let mut hi = n;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if x < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Nonzero basis values at `x`: `(first_index, values)` where
    /// `values.len() == degree + 1`.
    pub fn eval_local(&self, x: f64) -> Result<(usize, Vec<f64>), BasisError> {
        if !self.contains(x) {
            return Err(BasisError::OutOfDomain {
                point: x,
                lo: self.lo,
                hi: self.hi,
            });
        }
        let x = x.clamp(self.lo, self.hi);
        let d = self.degree;
        let span = self.span(x);
        let mut vals = vec![0.0; d + 1];
        let mut left = vec![0.0; d + 1];
        let mut right = vec![0.0; d + 1];
        vals[0] = 1.0;
        for j in 1..=d {
            left[j] = x - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = vals[r] / (right[r + 1] + left[j - r]);
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
        Ok((span - d, vals))
    }

    /// Dense row of all basis functions evaluated at `x`.
    pub fn eval_point(&self, x: f64) -> Result<Vec<f64>, BasisError> {
        let (start, vals) = self.eval_local(x)?;
        let mut row = vec![0.0; self.dim()];
        row[start..start + vals.len()].copy_from_slice(&vals);
        Ok(row)
    }

    /// Evaluation matrix: row `m` holds all basis functions at `points[m]`.
    pub fn eval(&self, points: &[f64]) -> Result<Mat<f64>, BasisError> {
        let mut out = Mat::<f64>::zeros(points.len(), self.dim());
        for (m, &x) in points.iter().enumerate() {
            let (start, vals) = self.eval_local(x)?;
            for (k, v) in vals.iter().enumerate() {
                out[(m, start + k)] = *v;
            }
        }
        Ok(out)
    }
}

/// Tensor-product basis `M(t, T)` built from two univariate marginals.
///
/// Coefficient ordering: the `t` index varies fastest, i.e. the row at
/// `(t, T)` is `kron(psi(T), varphi(t))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBasis {
    marginal_t: BSplineBasis,
    marginal_domain: BSplineBasis,
}

impl TensorBasis {
    pub fn new(marginal_t: BSplineBasis, marginal_domain: BSplineBasis) -> Self {
        Self {
            marginal_t,
            marginal_domain,
        }
    }

    /// Marginal over the within-curve time argument `t` (dimension `q`).
    pub fn marginal_t(&self) -> &BSplineBasis {
        &self.marginal_t
    }

    /// Marginal over the domain-length argument `T` (dimension `r`).
    pub fn marginal_domain(&self) -> &BSplineBasis {
        &self.marginal_domain
    }

    pub fn dim(&self) -> usize {
        self.marginal_t.dim() * self.marginal_domain.dim()
    }

    /// Row vector of length `q * r` at `(t, T)`.
    pub fn eval_row(&self, t: f64, domain_len: f64) -> Result<Vec<f64>, BasisError> {
        let phi = self.marginal_t.eval_point(t)?;
        let psi = self.marginal_domain.eval_point(domain_len)?;
        let mut out = vec![0.0; self.dim()];
        crate::linalg::row_kron_into(&psi, &phi, &mut out);
        Ok(out)
    }
}

/// Finite-difference matrix of a given order acting on coefficient vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceMatrix {
    order: usize,
    input_dim: usize,
    matrix: Mat<f64>,
}

impl DifferenceMatrix {
    pub fn new(order: usize, input_dim: usize) -> Result<Self, BasisError> {
        if order < 1 || input_dim <= order {
            return Err(BasisError::InvalidDifferenceOrder {
                order,
                dim: input_dim,
            });
        }
        // order-th difference stencil: signed binomial coefficients
        let mut stencil = vec![0.0_f64; order + 1];
        let mut c = 1.0_f64;
        for (j, s) in stencil.iter_mut().enumerate() {
            *s = if j % 2 == 0 { c } else { -c };
            c = c * (order - j) as f64 / (j + 1) as f64;
        }
        let mut matrix = Mat::<f64>::zeros(input_dim - order, input_dim);
        for i in 0..input_dim - order {
            for (j, s) in stencil.iter().enumerate() {
                matrix[(i, i + j)] = *s;
            }
        }
        Ok(Self {
            order,
            input_dim,
            matrix,
        })
    }

    /// Default second-order differences.
    pub fn second(input_dim: usize) -> Result<Self, BasisError> {
        Self::new(2, input_dim)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn matrix(&self) -> &Mat<f64> {
        &self.matrix
    }

    /// The penalty Gram matrix `D' D`.
    pub fn gram(&self) -> Mat<f64> {
        self.matrix.transpose() * &self.matrix
    }
}
