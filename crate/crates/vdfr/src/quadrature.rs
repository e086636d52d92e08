//! Composite Simpson integration and the partial-inner-product blocks
//! linking each curve basis to the bivariate coefficient basis.

use crate::basis::{BSplineBasis, BasisError, TensorBasis};
use crate::presmooth::SmoothedCurveSet;
use faer::prelude::*;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum QuadratureError {
    #[error("composite Simpson needs an odd node count >= 3, got {0}")]
    InvalidNodeCount(usize),

    #[error("invalid interval [{lo}, {hi}]")]
    InvalidInterval { lo: f64, hi: f64 },

    #[error("domain length {len} outside the coefficient basis range [{lo}, {hi}]")]
    DomainOutOfRange { len: f64, lo: f64, hi: f64 },

    #[error(transparent)]
    Basis(#[from] BasisError),

    #[error("subject {id:?}: {source}")]
    Subject {
        id: String,
        #[source]
        source: Box<QuadratureError>,
    },
}

/// Equally spaced composite Simpson nodes and weights on `[lo, hi]`.
/// Weights are `h/3 * (1, 4, 2, 4, ..., 4, 1)` and sum to `hi - lo`.
pub fn simpson_weights(
    lo: f64,
    hi: f64,
    n_nodes: usize,
) -> Result<(Vec<f64>, Vec<f64>), QuadratureError> {
    if hi <= lo {
        return Err(QuadratureError::InvalidInterval { lo, hi });
    }
    if n_nodes < 3 || n_nodes % 2 == 0 {
        return Err(QuadratureError::InvalidNodeCount(n_nodes));
    }
    let h = (hi - lo) / (n_nodes - 1) as f64;
    let nodes: Vec<f64> = (0..n_nodes).map(|i| lo + h * i as f64).collect();
    let weights: Vec<f64> = (0..n_nodes)
        .map(|i| {
            let c = if i == 0 || i == n_nodes - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            c * h / 3.0
        })
        .collect();
    Ok((nodes, weights))
}

/// Default node count for a domain of length `len`: `2 * ceil(len) + 1`,
/// at least 51. Always odd.
pub fn default_node_count(len: f64) -> usize {
    (2 * (len.ceil() as usize) + 1).max(51)
}

/// The weighted partial inner product
/// `Psi_i = (1/T_i) * integral_0^{T_i} phi(t) M(t, T_i) dt`, a `p x (q r)`
/// matrix accumulated node by node with Simpson weights.
pub fn partial_inner_product(
    curve_basis: &BSplineBasis,
    tensor: &TensorBasis,
    domain_len: f64,
    n_nodes: usize,
) -> Result<Mat<f64>, QuadratureError> {
    let (dlo, dhi) = tensor.marginal_domain().domain();
    let eps = 1e-9 * (1.0 + dhi.abs());
    if domain_len < dlo - eps || domain_len > dhi + eps {
        return Err(QuadratureError::DomainOutOfRange {
            len: domain_len,
            lo: dlo,
            hi: dhi,
        });
    }
    let (_, curve_hi) = curve_basis.domain();
    if domain_len > curve_hi + eps {
        return Err(QuadratureError::InvalidInterval {
            lo: 0.0,
            hi: domain_len,
        });
    }
    let p = curve_basis.dim();
    let q = tensor.marginal_t().dim();
    let r = tensor.marginal_domain().dim();
    let (nodes, weights) = simpson_weights(0.0, domain_len, n_nodes)?;
    let (psi_start, psi_vals) = tensor
        .marginal_domain()
        .eval_local(domain_len.clamp(dlo, dhi))?;
    let mut out = Mat::<f64>::zeros(p, q * r);
    for (&t, &w) in nodes.iter().zip(&weights) {
        let (phi_start, phi_vals) = curve_basis.eval_local(t)?;
        let (vphi_start, vphi_vals) = tensor.marginal_t().eval_local(t)?;
        for (jj, &pv) in phi_vals.iter().enumerate() {
            let row = phi_start + jj;
            let wpv = w * pv;
            for (kk, &sv) in psi_vals.iter().enumerate() {
                let base = (psi_start + kk) * q + vphi_start;
                for (ll, &vv) in vphi_vals.iter().enumerate() {
                    out[(row, base + ll)] += wpv * sv * vv;
                }
            }
        }
    }
    let inv = 1.0 / domain_len;
    for j in 0..q * r {
        for i in 0..p {
            out[(i, j)] *= inv;
        }
    }
    Ok(out)
}

/// Per-subject `Psi_i` blocks plus the assembled model rows `A Psi`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiMatrix {
    blocks: Vec<Mat<f64>>,
    design: Mat<f64>,
}

impl PsiMatrix {
    pub fn blocks(&self) -> &[Mat<f64>] {
        &self.blocks
    }

    /// The `N x (q r)` matrix with row `i = a_i' Psi_i`.
    pub fn design(&self) -> &Mat<f64> {
        &self.design
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// Assemble all `Psi_i` blocks and the product rows `a_i' Psi_i`.
pub fn assemble_psi(
    curves: &SmoothedCurveSet,
    tensor: &TensorBasis,
    node_rule: impl Fn(f64) -> usize,
) -> Result<PsiMatrix, QuadratureError> {
    let qr = tensor.dim();
    let mut blocks = Vec::with_capacity(curves.len());
    let mut design = Mat::<f64>::zeros(curves.len(), qr);
    for (i, curve) in curves.curves().iter().enumerate() {
        let len = curve.domain_len();
        let block = partial_inner_product(&curve.basis, tensor, len, node_rule(len)).map_err(
            |e| QuadratureError::Subject {
                id: curve.id.clone(),
                source: Box::new(e),
            },
        )?;
        for j in 0..qr {
            design[(i, j)] = (0..curves.p())
                .map(|k| curve.coefficients[k] * block[(k, j)])
                .sum();
        }
        blocks.push(block);
    }
    Ok(PsiMatrix { blocks, design })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presmooth::SmoothedCurve;
    use proptest::prelude::*;

    fn simpson_integrate(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        let (nodes, w) = simpson_weights(lo, hi, n).unwrap();
        nodes.iter().zip(&w).map(|(&t, &w)| w * f(t)).sum()
    }

    fn trapezoid(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        let h = (hi - lo) / (n - 1) as f64;
        let mut s = 0.5 * (f(lo) + f(hi));
        for i in 1..n - 1 {
            s += f(lo + h * i as f64);
        }
        s * h
    }

    #[test]
    fn simpson_basics() {
        assert!((simpson_integrate(|_| 1.0, 0.0, 1.0, 3) - 1.0).abs() < 1e-15);
        assert!((simpson_integrate(|t| t * t * t, 0.0, 1.0, 3) - 0.25).abs() < 1e-15);
        let pi = std::f64::consts::PI;
        assert!((simpson_integrate(f64::sin, 0.0, pi, 101) - 2.0).abs() < 2e-8);
        let (_, w) = simpson_weights(2.0, 7.0, 11).unwrap();
        assert!((w.iter().sum::<f64>() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn simpson_rejects_bad_inputs() {
        assert!(matches!(
            simpson_weights(0.0, 1.0, 4),
            Err(QuadratureError::InvalidNodeCount(4))
        ));
        assert!(simpson_weights(0.0, 1.0, 1).is_err());
        assert!(simpson_weights(1.0, 1.0, 3).is_err());
    }

    #[test]
    fn default_node_count_rule() {
        assert_eq!(default_node_count(10.0), 51);
        assert_eq!(default_node_count(30.0), 61);
        assert_eq!(default_node_count(100.0), 201);
        assert_eq!(default_node_count(30.2), 63);
    }

    fn toy_tensor(dlo: f64, dhi: f64) -> TensorBasis {
        TensorBasis::new(
            BSplineBasis::cubic(0.0, dhi, 0).unwrap(),
            BSplineBasis::cubic(dlo, dhi, 0).unwrap(),
        )
    }

    #[test]
    fn column_sums_recover_psi_row() {
        // summing a Psi_i block over curve-basis rows and over the t-marginal
        // index must give psi_k(T_i) exactly (partition-of-unity integral)
        let curve_basis = BSplineBasis::cubic(0.0, 40.0, 8).unwrap();
        let tensor = TensorBasis::new(
            BSplineBasis::cubic(0.0, 100.0, 3).unwrap(),
            BSplineBasis::cubic(10.0, 100.0, 2).unwrap(),
        );
        let len = 40.0;
        let psi = partial_inner_product(&curve_basis, &tensor, len, 81).unwrap();
        let psi_row = tensor.marginal_domain().eval_point(len).unwrap();
        let q = tensor.marginal_t().dim();
        for (k, want) in psi_row.iter().enumerate() {
            let got: f64 = (0..curve_basis.dim())
                .map(|j| (0..q).map(|l| psi[(j, k * q + l)]).sum::<f64>())
                .sum();
            assert!((got - want).abs() < 1e-12, "k = {k}: {got} vs {want}");
        }
    }

    #[test]
    fn matches_fine_trapezoid_oracle() {
        let curve_basis = BSplineBasis::cubic(0.0, 1.0, 0).unwrap();
        let tensor = toy_tensor(0.5, 1.0);
        let len = 1.0;
        let psi = partial_inner_product(&curve_basis, &tensor, len, 201).unwrap();
        let q = tensor.marginal_t().dim();
        let psi_row = tensor.marginal_domain().eval_point(len).unwrap();
        for j in 0..curve_basis.dim() {
            for k in 0..tensor.marginal_domain().dim() {
                for l in 0..q {
                    let oracle = trapezoid(
                        |t| {
                            curve_basis.eval_point(t).unwrap()[j]
                                * tensor.marginal_t().eval_point(t).unwrap()[l]
                        },
                        0.0,
                        len,
                        100_001,
                    ) * psi_row[k]
                        / len;
                    assert!(
                        (psi[(j, k * q + l)] - oracle).abs() < 1e-9,
                        "entry ({j}, {k}, {l})"
                    );
                }
            }
        }
    }

    #[test]
    fn rescaling_both_bases_leaves_psi_invariant() {
        // the 1/T weight cancels the substitution Jacobian
        for scale in [2.0, 5.0] {
            let t1 = 8.0;
            let t2 = t1 * scale;
            let b1 = BSplineBasis::cubic(0.0, t1, 4).unwrap();
            let b2 = BSplineBasis::cubic(0.0, t2, 4).unwrap();
            let tensor1 = TensorBasis::new(
                BSplineBasis::cubic(0.0, t1, 3).unwrap(),
                BSplineBasis::cubic(t1 / 2.0, t1, 1).unwrap(),
            );
            let tensor2 = TensorBasis::new(
                BSplineBasis::cubic(0.0, t2, 3).unwrap(),
                BSplineBasis::cubic(t2 / 2.0, t2, 1).unwrap(),
            );
            let p1 = partial_inner_product(&b1, &tensor1, t1, 201).unwrap();
            let p2 = partial_inner_product(&b2, &tensor2, t2, 201).unwrap();
            for j in 0..p1.nrows() {
                for k in 0..p1.ncols() {
                    assert!((p1[(j, k)] - p2[(j, k)]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn node_count_convergence_is_monotone() {
        let curve_basis = BSplineBasis::cubic(0.0, 10.0, 6).unwrap();
        let tensor = TensorBasis::new(
            BSplineBasis::cubic(0.0, 10.0, 5).unwrap(),
            BSplineBasis::cubic(5.0, 10.0, 2).unwrap(),
        );
        let len = 10.0;
        let oracle = {
            let q = tensor.marginal_t().dim();
            let psi_row = tensor.marginal_domain().eval_point(len).unwrap();
            let mut m = Mat::<f64>::zeros(curve_basis.dim(), tensor.dim());
            for j in 0..curve_basis.dim() {
                for l in 0..q {
                    let v = trapezoid(
                        |t| {
                            curve_basis.eval_point(t).unwrap()[j]
                                * tensor.marginal_t().eval_point(t).unwrap()[l]
                        },
                        0.0,
                        len,
                        100_001,
                    ) / len;
                    for (k, s) in psi_row.iter().enumerate() {
                        m[(j, k * q + l)] = v * s;
                    }
                }
            }
            m
        };
        let mut last_err = f64::INFINITY;
        for n in [11usize, 21, 41, 81] {
            let psi = partial_inner_product(&curve_basis, &tensor, len, n).unwrap();
            let err = crate::linalg::max_abs((&psi - &oracle).as_ref());
            assert!(err < last_err, "error did not decrease at {n} nodes");
            last_err = err;
        }
    }

    fn toy_curve(id: &str, len: f64, coefs: Vec<f64>) -> SmoothedCurve {
        let basis = BSplineBasis::cubic_with_dim(0.0, len, coefs.len()).unwrap();
        SmoothedCurve {
            id: id.into(),
            basis,
            coefficients: coefs,
            lambda: 1.0,
            gcv: 0.0,
        }
    }

    #[test]
    fn assemble_determinism_and_zero_rows() {
        let tensor = toy_tensor(5.0, 20.0);
        let coefs = vec![0.4, -1.0, 2.0, 0.3];
        let set = SmoothedCurveSet::new(
            vec![
                toy_curve("a", 12.0, coefs.clone()),
                toy_curve("b", 12.0, coefs),
                toy_curve("c", 15.0, vec![0.0; 4]),
            ],
            4,
        );
        let psi = assemble_psi(&set, &tensor, default_node_count).unwrap();
        let d = psi.design();
        for j in 0..d.ncols() {
            assert_eq!(d[(0, j)], d[(1, j)], "identical subjects differ at col {j}");
            assert_eq!(d[(2, j)], 0.0, "zero coefficients give nonzero row");
        }
    }

    #[test]
    fn assemble_matches_pointwise_curve_integration() {
        // oracle: integrate the smoothed curve against M(t, T_i) pointwise
        let tensor = toy_tensor(5.0, 20.0);
        let set = SmoothedCurveSet::new(
            vec![
                toy_curve("a", 10.0, vec![1.0, -0.5, 0.25, 2.0]),
                toy_curve("b", 16.0, vec![0.0, 1.0, 1.0, -1.0]),
                toy_curve("c", 20.0, vec![2.0, 2.0, -3.0, 0.5]),
            ],
            4,
        );
        let psi = assemble_psi(&set, &tensor, |_| 201).unwrap();
        for (i, curve) in set.curves().iter().enumerate() {
            let len = curve.domain_len();
            for col in 0..tensor.dim() {
                let oracle = trapezoid(
                    |t| {
                        let x = curve.eval(&[t]).unwrap()[0];
                        x * tensor.eval_row(t, len).unwrap()[col]
                    },
                    0.0,
                    len,
                    20_001,
                ) / len;
                assert!(
                    (psi.design()[(i, col)] - oracle).abs() < 1e-7,
                    "row {i} col {col}"
                );
            }
        }
    }

    #[test]
    fn out_of_range_domain_is_an_error() {
        let tensor = toy_tensor(5.0, 20.0);
        let basis = BSplineBasis::cubic(0.0, 30.0, 4).unwrap();
        assert!(matches!(
            partial_inner_product(&basis, &tensor, 30.0, 51),
            Err(QuadratureError::DomainOutOfRange { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn simpson_exact_for_cubics(a in -3.0_f64..3.0, b in -3.0_f64..3.0,
                                    c in -3.0_f64..3.0, d in -3.0_f64..3.0,
                                    lo in -5.0_f64..2.0, width in 0.5_f64..10.0,
                                    half_segments in 1usize..20) {
            let hi = lo + width;
            let n = 2 * half_segments + 1;
            let f = |t: f64| a + b * t + c * t * t + d * t * t * t;
            let exact = {
                let pr = |t: f64| a * t + b * t * t / 2.0 + c * t.powi(3) / 3.0 + d * t.powi(4) / 4.0;
                pr(hi) - pr(lo)
            };
            let got = simpson_integrate(f, lo, hi, n);
            prop_assert!((got - exact).abs() < 1e-12 * (1.0 + exact.abs()));
        }

        #[test]
        fn psi_contraction_is_bilinear(seed in 0u64..1000) {
            use rand::prelude::*;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let tensor = toy_tensor(5.0, 20.0);
            let a1: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a2: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let sum: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| x + y).collect();
            let set = SmoothedCurveSet::new(
                vec![
                    toy_curve("a", 12.0, a1),
                    toy_curve("b", 12.0, a2),
                    toy_curve("s", 12.0, sum),
                ],
                4,
            );
            let psi = assemble_psi(&set, &tensor, |_| 51).unwrap();
            let d = psi.design();
            for j in 0..d.ncols() {
                prop_assert!((d[(0, j)] + d[(1, j)] - d[(2, j)]).abs() < 1e-12);
            }
        }
    }
}
