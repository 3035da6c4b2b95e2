//! Spectral and probing analysis of position-embedding tables.
//!
//! The spectral summary measures how much of a PE table's variance a
//! low-dimensional PCA projection retains (ratio of squared singular
//! values); the probe fits a cross-validated linear regression from PE rows
//! back to grid positions to quantify how much location information the
//! rows carry.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::SeededRng;

/// Singular spectrum of a (centered) PE table.
#[derive(Clone, Debug, Serialize)]
pub struct SpectralSummary {
    /// Singular values, descending.
    pub singular_values: Vec<f64>,
    /// Per-dimension share of total squared singular value.
    pub explained_ratio: Vec<f64>,
    /// Running sum of `explained_ratio`; ends at exactly 1.
    pub cumulative_energy: Vec<f64>,
    pub centered: bool,
}

impl SpectralSummary {
    /// Explained variance of the top `dims` directions.
    pub fn explained_at(&self, dims: usize) -> Result<f64> {
        if dims == 0 || dims > self.cumulative_energy.len() {
            return Err(Error::contract(format!(
                "dims {dims} out of 1..={}",
                self.cumulative_energy.len()
            )));
        }
        Ok(self.cumulative_energy[dims - 1])
    }
}

/// Column-centers a row-major matrix in place.
fn center_columns(rows: usize, cols: usize, data: &mut [f64]) {
    for j in 0..cols {
        let mean = (0..rows).map(|r| data[r * cols + j]).sum::<f64>() / rows as f64;
        for r in 0..rows {
            data[r * cols + j] -= mean;
        }
    }
}

/// Full spectral summary of an N x D table (pass PE rows without the class
/// row). Centering is the default PCA convention and can be disabled to
/// match raw-SVD readings.
pub fn spectral_summary(rows: usize, cols: usize, data: &[f64], center: bool) -> Result<SpectralSummary> {
    if rows == 0 || cols == 0 || data.len() != rows * cols {
        return Err(Error::contract(format!(
            "spectral summary of a {rows}x{cols} table with {} values",
            data.len()
        )));
    }
    let mut work = data.to_vec();
    if center {
        center_columns(rows, cols, &mut work);
    }
    let sv = linalg::singular_values(&linalg::dmatrix(rows, cols, &work));
    let total: f64 = sv.iter().map(|s| s * s).sum();
    let mut explained = Vec::with_capacity(sv.len());
    let mut cumulative = Vec::with_capacity(sv.len());
    let mut running = 0.0;
    for s in &sv {
        let share = if total > 0.0 { s * s / total } else { 0.0 };
        explained.push(share);
        running += s * s;
        cumulative.push(if total > 0.0 { running / total } else { 0.0 });
    }
    // guard the exact endpoint against rounding drift
    if total > 0.0 {
        if let Some(last) = cumulative.last_mut() {
            *last = 1.0;
        }
    }
    Ok(SpectralSummary {
        singular_values: sv,
        explained_ratio: explained,
        cumulative_energy: cumulative,
        centered: center,
    })
}

/// Ratio of the top-`dims` squared singular values to the total.
pub fn pca_explained_variance(
    rows: usize,
    cols: usize,
    data: &[f64],
    dims: usize,
    center: bool,
) -> Result<f64> {
    if dims == 0 || dims > rows.min(cols) {
        return Err(Error::contract(format!(
            "dims {dims} out of 1..={}",
            rows.min(cols)
        )));
    }
    spectral_summary(rows, cols, data, center)?.explained_at(dims)
}

/// Cumulative energy curve (explained variance at every dimension).
pub fn cumulative_energy(rows: usize, cols: usize, data: &[f64], center: bool) -> Result<Vec<f64>> {
    Ok(spectral_summary(rows, cols, data, center)?.cumulative_energy)
}

/// Cross-validated MAE of linear position regression from PE rows.
#[derive(Clone, Debug, Serialize)]
pub struct ProbeResult {
    /// 1-D sequence-index regression: per-fold MAE, mean and sample std.
    pub mae_1d: Vec<f64>,
    pub mae_1d_mean: f64,
    pub mae_1d_std: f64,
    /// 2-D normalized grid-coordinate regression.
    pub mae_2d: Vec<f64>,
    pub mae_2d_mean: f64,
    pub mae_2d_std: f64,
    pub folds: usize,
}

pub const PROBE_FOLDS: usize = 5;
const PROBE_RIDGE: f64 = 1e-10;

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Ordinary least squares (with an intercept column and a ridge jitter)
/// mapping PE rows to 1-D indices and 2-D normalized grid coordinates,
/// evaluated by seeded 5-fold cross-validation.
pub fn position_probe(
    rows: usize,
    cols: usize,
    data: &[f64],
    grid_k: usize,
    seed: u64,
) -> Result<ProbeResult> {
    if rows != grid_k * grid_k {
        return Err(Error::contract(format!(
            "{rows} PE rows do not form a {grid_k}x{grid_k} grid"
        )));
    }
    if data.len() != rows * cols {
        return Err(Error::contract("PE data length mismatch"));
    }
    if rows < PROBE_FOLDS {
        return Err(Error::contract(format!(
            "need at least {PROBE_FOLDS} rows for {PROBE_FOLDS}-fold CV"
        )));
    }
    let norm = (grid_k.max(2) - 1) as f64;
    let mut order: Vec<usize> = (0..rows).collect();
    SeededRng::new(seed).shuffle(&mut order);

    let mut mae_1d = Vec::with_capacity(PROBE_FOLDS);
    let mut mae_2d = Vec::with_capacity(PROBE_FOLDS);
    for fold in 0..PROBE_FOLDS {
        let test: Vec<usize> = order
            .iter()
            .enumerate()
            .filter(|(i, _)| i % PROBE_FOLDS == fold)
            .map(|(_, &r)| r)
            .collect();
        let train: Vec<usize> = order
            .iter()
            .enumerate()
            .filter(|(i, _)| i % PROBE_FOLDS != fold)
            .map(|(_, &r)| r)
            .collect();

        let design = |idx: &[usize]| {
            let mut x = Vec::with_capacity(idx.len() * (cols + 1));
            for &r in idx {
                x.extend_from_slice(&data[r * cols..(r + 1) * cols]);
                x.push(1.0);
            }
            linalg::dmatrix(idx.len(), cols + 1, &x)
        };
        let targets = |idx: &[usize]| {
            let mut t1 = Vec::with_capacity(idx.len());
            let mut t2 = Vec::with_capacity(idx.len() * 2);
            for &r in idx {
                t1.push(r as f64);
                t2.push((r / grid_k) as f64 / norm);
                t2.push((r % grid_k) as f64 / norm);
            }
            (
                linalg::dmatrix(idx.len(), 1, &t1),
                linalg::dmatrix(idx.len(), 2, &t2),
            )
        };

        let xtr = design(&train);
        let xte = design(&test);
        let (y1tr, y2tr) = targets(&train);
        let (y1te, y2te) = targets(&test);

        let w1 = linalg::lstsq_ridge(&xtr, &y1tr, PROBE_RIDGE)?;
        let w2 = linalg::lstsq_ridge(&xtr, &y2tr, PROBE_RIDGE)?;

        let p1 = &xte * &w1;
        let p2 = &xte * &w2;
        let m1 = (&p1 - &y1te).abs().sum() / p1.len() as f64;
        let m2 = (&p2 - &y2te).abs().sum() / p2.len() as f64;
        mae_1d.push(m1);
        mae_2d.push(m2);
    }
    let (m1, s1) = mean_std(&mae_1d);
    let (m2, s2) = mean_std(&mae_2d);
    Ok(ProbeResult {
        mae_1d,
        mae_1d_mean: m1,
        mae_1d_std: s1,
        mae_2d,
        mae_2d_mean: m2,
        mae_2d_std: s2,
        folds: PROBE_FOLDS,
    })
}

/// Training-set (non-CV) MAE of the same probe; used to expose overfitting
/// against the cross-validated numbers.
pub fn probe_train_mae_2d(rows: usize, cols: usize, data: &[f64], grid_k: usize) -> Result<f64> {
    if rows != grid_k * grid_k {
        return Err(Error::contract("rows do not form a square grid"));
    }
    let norm = (grid_k.max(2) - 1) as f64;
    let mut x = Vec::with_capacity(rows * (cols + 1));
    let mut y = Vec::with_capacity(rows * 2);
    for r in 0..rows {
        x.extend_from_slice(&data[r * cols..(r + 1) * cols]);
        x.push(1.0);
        y.push((r / grid_k) as f64 / norm);
        y.push((r % grid_k) as f64 / norm);
    }
    let xm = linalg::dmatrix(rows, cols + 1, &x);
    let ym = linalg::dmatrix(rows, 2, &y);
    let w = linalg::lstsq_ridge(&xm, &ym, PROBE_RIDGE)?;
    let p = &xm * &w;
    Ok((&p - &ym).abs().sum() / p.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_matrix_explains_everything_in_one_dim() {
        // rows proportional to (1, 2, 2); already column-centered by pairing
        let data = vec![
            1.0, 2.0, 2.0, //
            -1.0, -2.0, -2.0, //
            2.0, 4.0, 4.0, //
            -2.0, -4.0, -4.0,
        ];
        let ev = pca_explained_variance(4, 3, &data, 1, true).unwrap();
        assert!((ev - 1.0).abs() < 1e-12);
    }

    /// Constructed spectrum (2, 1, 1, 0): dims=1 explains 4/6. The matrix is
    /// built from orthonormal columns orthogonal to the ones vector, so
    /// column means are zero and centering is a no-op.
    #[test]
    fn constructed_spectrum_ratio() {
        let data = vec![
            1.0, 0.5, 0.5, 0.0, //
            -1.0, 0.5, -0.5, 0.0, //
            1.0, -0.5, -0.5, 0.0, //
            -1.0, -0.5, 0.5, 0.0,
        ];
        let s = spectral_summary(4, 4, &data, true).unwrap();
        assert!((s.singular_values[0] - 2.0).abs() < 1e-12);
        assert!((s.singular_values[1] - 1.0).abs() < 1e-12);
        assert!((s.singular_values[2] - 1.0).abs() < 1e-12);
        assert!(s.singular_values[3].abs() < 1e-12);
        let ev1 = s.explained_at(1).unwrap();
        assert!((ev1 - 4.0 / 6.0).abs() < 1e-12);
        // identical with centering off, since column means are already zero
        let raw = spectral_summary(4, 4, &data, false).unwrap();
        assert!((raw.explained_at(1).unwrap() - ev1).abs() < 1e-12);
    }

    #[test]
    fn cumulative_curve_is_monotone_and_ends_at_one() {
        let mut rng = SeededRng::new(1);
        let data: Vec<f64> = (0..20 * 6).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let curve = cumulative_energy(20, 6, &data, true).unwrap();
        for w in curve.windows(2) {
            assert!(w[1] >= w[0] - 1e-15);
        }
        assert_eq!(*curve.last().unwrap(), 1.0);
    }

    #[test]
    fn explained_variance_is_rotation_invariant() {
        let mut rng = SeededRng::new(2);
        let data: Vec<f64> = (0..12 * 5).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let ev = pca_explained_variance(12, 5, &data, 2, true).unwrap();
        // rotate rows by a random orthogonal matrix on the right
        let m = nalgebra::DMatrix::<f64>::from_fn(5, 5, |_, _| rng.uniform_in(-1.0, 1.0));
        let q = m.qr().q();
        let rotated = linalg::dmatrix(12, 5, &data) * q;
        let ev_rot =
            pca_explained_variance(12, 5, &linalg::to_row_major(&rotated), 2, true).unwrap();
        assert!((ev - ev_rot).abs() < 1e-10);
    }

    #[test]
    fn dims_out_of_range_rejected() {
        let data = vec![0.0; 12];
        assert!(pca_explained_variance(4, 3, &data, 0, true).is_err());
        assert!(pca_explained_variance(4, 3, &data, 4, true).is_err());
    }

    fn affine_pe(k: usize, d: usize, noise: f64, seed: u64) -> Vec<f64> {
        let mut rng = SeededRng::new(seed);
        let l: Vec<f64> = (0..2 * d).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let c0: Vec<f64> = (0..d).map(|_| rng.uniform_in(-0.1, 0.1)).collect();
        let norm = (k - 1).max(1) as f64;
        let mut data = vec![0.0; k * k * d];
        for idx in 0..k * k {
            let (ci, cj) = ((idx / k) as f64 / norm, (idx % k) as f64 / norm);
            for j in 0..d {
                data[idx * d + j] =
                    c0[j] + ci * l[j] + cj * l[d + j] + noise * rng.normal();
            }
        }
        data
    }

    #[test]
    fn probe_recovers_affine_positions_exactly() {
        let (k, d) = (4, 9);
        let data = affine_pe(k, d, 0.0, 3);
        let r = position_probe(k * k, d, &data, k, 42).unwrap();
        assert_eq!(r.folds, 5);
        assert_eq!(r.mae_2d.len(), 5);
        assert!(r.mae_2d_mean < 1e-8, "2-D MAE {}", r.mae_2d_mean);
    }

    /// Pure-noise embeddings with D >= N: the train MAE collapses while the
    /// CV MAE stays near the predict-the-mean baseline — the overfitting
    /// signature the probe must expose.
    #[test]
    fn probe_exposes_overfitting_on_noise() {
        let (k, d) = (4, 32); // D = 32 >= N = 16
        let mut rng = SeededRng::new(4);
        let data: Vec<f64> = (0..k * k * d).map(|_| rng.normal()).collect();
        let train_mae = probe_train_mae_2d(k * k, d, &data, k).unwrap();
        assert!(train_mae < 1e-6, "train MAE {train_mae}");
        let r = position_probe(k * k, d, &data, k, 7).unwrap();
        // mean-prediction baseline MAE for uniform coords on [0,1] is 0.25
        assert!(r.mae_2d_mean > 0.125, "CV MAE {}", r.mae_2d_mean);
    }

    #[test]
    fn probe_mae_increases_with_noise() {
        let (k, d) = (5, 8);
        let mut prev = -1.0;
        for (i, noise) in [0.0, 0.05, 0.25].iter().enumerate() {
            let data = affine_pe(k, d, *noise, 10 + i as u64);
            let r = position_probe(k * k, d, &data, k, 11).unwrap();
            assert!(
                r.mae_2d_mean > prev,
                "noise {noise}: {} not > {prev}",
                r.mae_2d_mean
            );
            prev = r.mae_2d_mean;
        }
    }

    #[test]
    fn probe_requires_square_grid() {
        let data = vec![0.0; 12 * 4];
        assert!(position_probe(12, 4, &data, 3, 0).is_err());
    }
}
