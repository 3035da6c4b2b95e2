//! Evaluation metrics: classification consistency under patch shuffling,
//! class-embedding distance, and the image-similarity scores used to judge
//! gradient-inversion recoveries.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::jigsaw::ImageTensor;

/// Squared Euclidean distance between two class embeddings. Reported
/// per-image, then averaged by the harness.
pub fn diff_norm(cls_a: &[f64], cls_b: &[f64]) -> f64 {
    assert_eq!(cls_a.len(), cls_b.len(), "embedding dims differ");
    cls_a
        .iter()
        .zip(cls_b)
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// Unsquared variant, kept for cross-checking reported magnitudes.
pub fn diff_norm_unsquared(cls_a: &[f64], cls_b: &[f64]) -> f64 {
    diff_norm(cls_a, cls_b).sqrt()
}

/// Index of the maximum entry; ties break to the lowest index, so both sides
/// of a consistency pair resolve identically.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Fraction of prediction pairs whose argmax agrees.
pub fn consistency(pairs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    if pairs.is_empty() {
        return 1.0;
    }
    let same = pairs
        .iter()
        .filter(|(a, b)| argmax(a) == argmax(b))
        .count();
    same as f64 / pairs.len() as f64
}

fn check_same_shape(a: &ImageTensor, b: &ImageTensor, op: &'static str) -> Result<()> {
    if (a.h, a.w, a.c) != (b.h, b.w, b.c) {
        return Err(Error::dimension(op, &[a.h, a.w, a.c], &[b.h, b.w, b.c]));
    }
    Ok(())
}

/// Per-pixel mean squared error.
pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same_shape(a, b, "mse")?;
    let n = a.pixels.len() as f64;
    Ok(a.pixels
        .iter()
        .zip(&b.pixels)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// 10 log10(1 / MSE) for unit-range images; `None` flags an infinite PSNR
/// (identical images).
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<Option<f64>> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(None);
    }
    Ok(Some(10.0 * (1.0 / m).log10()))
}

/// SSIM window edge (non-overlapping windows).
pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean SSIM over non-overlapping 8x8 windows and channels, unit dynamic
/// range, population moments.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same_shape(a, b, "ssim")?;
    let wh = a.h / SSIM_WINDOW;
    let ww = a.w / SSIM_WINDOW;
    if wh == 0 || ww == 0 {
        return Err(Error::contract(format!(
            "image {}x{} smaller than the {}px SSIM window",
            a.h, a.w, SSIM_WINDOW
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..a.c {
        for wi in 0..wh {
            for wj in 0..ww {
                let (mut ma, mut mb) = (0.0, 0.0);
                let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        ma += a.get(wi * SSIM_WINDOW + i, wj * SSIM_WINDOW + j, ch);
                        mb += b.get(wi * SSIM_WINDOW + i, wj * SSIM_WINDOW + j, ch);
                    }
                }
                ma /= n;
                mb /= n;
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let xa = a.get(wi * SSIM_WINDOW + i, wj * SSIM_WINDOW + j, ch) - ma;
                        let xb = b.get(wi * SSIM_WINDOW + i, wj * SSIM_WINDOW + j, ch) - mb;
                        va += xa * xa;
                        vb += xb * xb;
                        cov += xa * xb;
                    }
                }
                va /= n;
                vb /= n;
                cov /= n;
                let s = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Magnitude spectrum of one channel via a direct separable 2-D DFT.
/// O(HW(H+W)) — fine at desk scale and dependency-free.
fn dft2_magnitude(img: &ImageTensor, ch: usize) -> Vec<f64> {
    let (h, w) = (img.h, img.w);
    // row transforms
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for i in 0..h {
        for kj in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for j in 0..w {
                let ang = -2.0 * std::f64::consts::PI * (kj * j) as f64 / w as f64;
                let v = img.get(i, j, ch);
                sr += v * ang.cos();
                si += v * ang.sin();
            }
            re[i * w + kj] = sr;
            im[i * w + kj] = si;
        }
    }
    // column transforms
    let mut mag = vec![0.0; h * w];
    for kj in 0..w {
        for ki in 0..h {
            let (mut sr, mut si) = (0.0, 0.0);
            for i in 0..h {
                let ang = -2.0 * std::f64::consts::PI * (ki * i) as f64 / h as f64;
                let (r, m) = (re[i * w + kj], im[i * w + kj]);
                sr += r * ang.cos() - m * ang.sin();
                si += r * ang.sin() + m * ang.cos();
            }
            mag[ki * w + kj] = (sr * sr + si * si).sqrt();
        }
    }
    mag
}

/// Cosine similarity between the 2-D DFT magnitude spectra, averaged over
/// channels. Phase is ignored.
pub fn fft2d_cos(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same_shape(a, b, "fft2d_cos")?;
    let mut total = 0.0;
    for ch in 0..a.c {
        let ma = dft2_magnitude(a, ch);
        let mb = dft2_magnitude(b, ch);
        let dot: f64 = ma.iter().zip(&mb).map(|(x, y)| x * y).sum();
        let na: f64 = ma.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = mb.iter().map(|x| x * x).sum::<f64>().sqrt();
        total += if na == 0.0 || nb == 0.0 {
            if na == nb {
                1.0
            } else {
                0.0
            }
        } else {
            dot / (na * nb)
        };
    }
    Ok(total / a.c as f64)
}

/// Image-similarity scores for one recovery.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ImageScores {
    pub mse: f64,
    /// `None` marks an infinite PSNR (zero MSE).
    pub psnr_db: Option<f64>,
    pub ssim: f64,
    pub fft2d_cos: f64,
}

pub fn image_scores(a: &ImageTensor, b: &ImageTensor) -> Result<ImageScores> {
    Ok(ImageScores {
        mse: mse(a, b)?,
        psnr_db: psnr(a, b)?,
        ssim: ssim(a, b)?,
        fft2d_cos: fft2d_cos(a, b)?,
    })
}

/// Aggregate evaluation record emitted by the harness.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub top1: f64,
    pub diff_norm: f64,
    pub diff_norm_unsquared: f64,
    pub consistency: f64,
}
