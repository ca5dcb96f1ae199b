//! Dense helpers on top of `nalgebra`: singular values by one-sided Jacobi
//! iteration and operator norms between weighted (fractional-power) metrics.

use nalgebra::DMatrix;
use num_complex::Complex64;

/// Off-diagonal orthogonality tolerance for the Jacobi sweeps.
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 80;

/// Singular values of `a`, sorted in decreasing order.
///
/// One-sided (Hestenes) Jacobi: plane rotations are applied to column pairs
/// until every pair is orthogonal to `JACOBI_TOL` relative to the column
/// norms; the singular values are then the column norms.
pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    // Work on the orientation with fewer columns.
    let mut work = if a.ncols() > a.nrows() {
        a.transpose()
    } else {
        a.clone()
    };
    let rows = work.nrows();
    let cols = work.ncols();
    if cols == 0 {
        return Vec::new();
    }

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..cols - 1 {
            for j in i + 1..cols {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for r in 0..rows {
                    let x = work[(r, i)];
                    let y = work[(r, j)];
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..rows {
                    let x = work[(r, i)];
                    let y = work[(r, j)];
                    work[(r, i)] = c * x - s * y;
                    work[(r, j)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sv: Vec<f64> = (0..cols).map(|j| work.column(j).norm()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Spectral norm (largest singular value).
pub fn op_norm(a: &DMatrix<f64>) -> f64 {
    singular_values(a).first().copied().unwrap_or(0.0)
}

/// Spectral norm of a complex matrix, through its real 2n x 2n embedding
/// `[[Re, -Im], [Im, Re]]`, which has the same singular values (doubled).
pub fn op_norm_complex(a: &DMatrix<Complex64>) -> f64 {
    op_norm(&realify(a))
}

pub(crate) fn realify(a: &DMatrix<Complex64>) -> DMatrix<f64> {
    let (r, c) = a.shape();
    let mut out = DMatrix::zeros(2 * r, 2 * c);
    for i in 0..r {
        for j in 0..c {
            let z = a[(i, j)];
            out[(i, j)] = z.re;
            out[(i, j + c)] = -z.im;
            out[(i + r, j)] = z.im;
            out[(i + r, j + c)] = z.re;
        }
    }
    out
}

/// Norm of `t` as a map from the metric weighted by `source` to the metric
/// weighted by `target`: the largest singular value of `diag(target) t diag(source)^-1`.
pub fn mixed_norm(target: &[f64], t: &DMatrix<f64>, source: &[f64]) -> f64 {
    op_norm(&weigh(target, t, source))
}

pub fn mixed_norm_complex(target: &[f64], t: &DMatrix<Complex64>, source: &[f64]) -> f64 {
    let mut w = t.clone();
    for i in 0..w.nrows() {
        for j in 0..w.ncols() {
            w[(i, j)] *= target[i] / source[j];
        }
    }
    op_norm_complex(&w)
}

fn weigh(target: &[f64], t: &DMatrix<f64>, source: &[f64]) -> DMatrix<f64> {
    assert_eq!(target.len(), t.nrows());
    assert_eq!(source.len(), t.ncols());
    DMatrix::from_fn(t.nrows(), t.ncols(), |i, j| t[(i, j)] * target[i] / source[j])
}

/// Number of singular values above `threshold`.
pub fn numerical_rank(a: &DMatrix<f64>, threshold: f64) -> usize {
    singular_values(a).iter().filter(|&&s| s > threshold).count()
}

/// Ratio of extreme singular values; infinite for singular input.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = singular_values(a);
    match (sv.first(), sv.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        (Some(_), Some(_)) => f64::INFINITY,
        _ => 1.0,
    }
}

/// Largest absolute entry.
pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn max_abs_complex(a: &DMatrix<Complex64>) -> f64 {
    a.iter().fold(0.0_f64, |acc, z| acc.max(z.norm()))
}
