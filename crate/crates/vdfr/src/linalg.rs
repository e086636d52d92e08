//! Small dense-matrix helpers shared across the crate.

use faer::prelude::*;
use faer::MatRef;

/// Kronecker product `a (x) b`.
pub fn kron(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    let (am, an) = (a.nrows(), a.ncols());
    let (bm, bn) = (b.nrows(), b.ncols());
    let mut out = Mat::<f64>::zeros(am * bm, an * bn);
    for i in 0..am {
        for j in 0..an {
            let s = a[(i, j)];
            if s == 0.0 {
                continue;
            }
            for k in 0..bm {
                for l in 0..bn {
                    out[(i * bm + k, j * bn + l)] = s * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Kronecker product of two row vectors, written into `out`.
pub fn row_kron_into(a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(out.len(), a.len() * b.len());
    let nb = b.len();
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            out[i * nb + j] = ai * bj;
        }
    }
}

/// Horizontal concatenation of matrices with equal row counts.
pub fn hstack(blocks: &[MatRef<'_, f64>]) -> Mat<f64> {
    if blocks.is_empty() {
        return Mat::zeros(0, 0);
    }
    let m = blocks[0].nrows();
    let n: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::<f64>::zeros(m, n);
    let mut off = 0;
    for b in blocks {
        assert_eq!(b.nrows(), m, "hstack: row count mismatch");
        for j in 0..b.ncols() {
            for i in 0..m {
                out[(i, off + j)] = b[(i, j)];
            }
        }
        off += b.ncols();
    }
    out
}

/// Rows of `m` selected by `idx`, in order.
pub fn select_rows(m: MatRef<'_, f64>, idx: &[usize]) -> Mat<f64> {
    let mut out = Mat::<f64>::zeros(idx.len(), m.ncols());
    for (k, &i) in idx.iter().enumerate() {
        for j in 0..m.ncols() {
            out[(k, j)] = m[(i, j)];
        }
    }
    out
}

/// 2-norm condition number estimate via singular values.
pub fn cond2(m: MatRef<'_, f64>) -> f64 {
    match m.singular_values() {
        Ok(sv) if !sv.is_empty() => {
            let smax = sv[0];
            let smin = sv[sv.len() - 1];
            if smin <= 0.0 {
                f64::INFINITY
            } else {
                smax / smin
            }
        }
        _ => f64::INFINITY,
    }
}

pub fn max_abs(m: MatRef<'_, f64>) -> f64 {
    let mut v: f64 = 0.0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            v = v.max(m[(i, j)].abs());
        }
    }
    v
}
