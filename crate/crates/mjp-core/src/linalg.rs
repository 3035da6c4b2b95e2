//! Small dense linear-algebra helpers over nalgebra: SVD, cutoff
//! pseudo-inverse and ridge least squares. Matrices stay tiny (at most a few
//! hundred rows), so robustness beats speed here.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub fn dmatrix(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

pub fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = m.singular_values().iter().cloned().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

/// Moore-Penrose pseudo-inverse with singular values below
/// `rel_cutoff * sigma_max` treated as zero. Also reports (sigma_min,
/// sigma_max, effective rank) for conditioning diagnostics.
pub fn pinv_with_cutoff(m: &DMatrix<f64>, rel_cutoff: f64) -> Result<(DMatrix<f64>, f64, f64, usize)> {
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().ok_or_else(|| Error::Numeric {
        op: "pinv",
        detail: "svd did not produce U".into(),
    })?;
    let vt = svd.v_t.as_ref().ok_or_else(|| Error::Numeric {
        op: "pinv",
        detail: "svd did not produce V^T".into(),
    })?;
    let sigma = &svd.singular_values;
    let smax = sigma.iter().cloned().fold(0.0, f64::max);
    let smin = sigma.iter().cloned().fold(f64::INFINITY, f64::min);
    let cutoff = rel_cutoff * smax;
    let mut rank = 0;
    let inv = DMatrix::from_fn(sigma.len(), sigma.len(), |i, j| {
        if i == j && sigma[i] > cutoff {
            1.0 / sigma[i]
        } else {
            0.0
        }
    });
    for s in sigma.iter() {
        if *s > cutoff {
            rank += 1;
        }
    }
    let pinv = vt.transpose() * inv * u.transpose();
    Ok((pinv, if smin.is_finite() { smin } else { 0.0 }, smax, rank))
}

/// Solves min_W ||X W - Y||^2 + ridge ||W||^2 by the normal equations.
/// The jitter keeps rank-deficient designs solvable.
pub fn lstsq_ridge(x: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    if x.nrows() != y.nrows() {
        return Err(Error::dimension(
            "lstsq_ridge",
            &[x.nrows(), x.ncols()],
            &[y.nrows(), y.ncols()],
        ));
    }
    let xtx = x.transpose() * x + DMatrix::identity(x.ncols(), x.ncols()) * ridge;
    let xty = x.transpose() * y;
    xtx.lu().solve(&xty).ok_or_else(|| Error::Numeric {
        op: "lstsq_ridge",
        detail: "normal equations singular".into(),
    })
}

/// Top-k right singular vectors (D x k) of the given matrix.
pub fn top_right_singular_vectors(m: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.as_ref().ok_or_else(|| Error::Numeric {
        op: "svd",
        detail: "svd did not produce V^T".into(),
    })?;
    if k > vt.nrows() {
        return Err(Error::contract(format!(
            "requested {k} singular vectors, only {} available",
            vt.nrows()
        )));
    }
    // nalgebra's svd sorts singular values descending; rows of V^T align.
    Ok(vt.rows(0, k).transpose().into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singular_values_are_descending() {
        let m = dmatrix(3, 3, &[3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0]);
        let sv = singular_values(&m);
        assert!((sv[0] - 3.0).abs() < 1e-12);
        assert!((sv[1] - 2.0).abs() < 1e-12);
        assert!((sv[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pinv_recovers_solution_of_full_rank_system() {
        let a = dmatrix(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let x = dmatrix(2, 1, &[2.0, -1.0]);
        let b = &a * &x;
        let (pinv, smin, smax, rank) = pinv_with_cutoff(&a, 1e-10).unwrap();
        let xhat = pinv * b;
        assert!((xhat - x).norm() < 1e-12);
        assert!(smin > 0.0 && smax >= smin);
        assert_eq!(rank, 2);
    }

    #[test]
    fn pinv_flags_rank_deficiency() {
        let a = dmatrix(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let (_, _, _, rank) = pinv_with_cutoff(&a, 1e-10).unwrap();
        assert_eq!(rank, 1);
    }

    #[test]
    fn ridge_lstsq_fits_exact_affine_map() {
        // y = 3x - 1 through a design with an intercept column
        let x = dmatrix(4, 2, &[0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0, 1.0]);
        let y = dmatrix(4, 1, &[-1.0, 2.0, 5.0, 8.0]);
        let w = lstsq_ridge(&x, &y, 1e-10).unwrap();
        assert!((w[(0, 0)] - 3.0).abs() < 1e-6);
        assert!((w[(1, 0)] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn top_singular_vectors_span_the_image() {
        // rank-1: all rows are multiples of (1, 2, 2)/3
        let m = dmatrix(4, 3, &[1.0, 2.0, 2.0, 2.0, 4.0, 4.0, -1.0, -2.0, -2.0, 0.5, 1.0, 1.0]);
        let v = top_right_singular_vectors(&m, 1).unwrap();
        let dir = v.column(0);
        let unit = [1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0];
        let dot: f64 = dir.iter().zip(unit.iter()).map(|(a, b)| a * b).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-10);
    }
}
