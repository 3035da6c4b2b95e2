//! Closed-form gradient-inversion of the input image from leaked
//! per-parameter gradients (federated-learning threat model: the attacker
//! knows the model parameters and one sample's parameter gradients, but not
//! the mask or permutation).
//!
//! Because the first attention sub-layer consumes z0 directly, the loss
//! depends on z0 only through Q = z0 Wq + bq (and K, V alike), giving
//!
//!   dl/dz0          = (dl/dQ) Wq^T + (dl/dK) Wk^T + (dl/dV) Wv^T
//!   dl/dWq          = z0^T (dl/dQ)
//!   z0^T (dl/dz0)   = Gq Wq^T + Gk Wk^T + Gv Wv^T          (identity)
//!
//! where the G are the leaked first-block weight gradients. The position
//! table only ever enters z0, so its leaked gradient stands in for dl/dz0,
//! and the identity becomes a linear system solved for z0 in least squares.
//! Patches follow by subtracting the attacker's copy of the position table
//! and applying the pseudo-inverse of the patch projection.
//!
//! When masked positions read the shared unknown embedding instead, the
//! leaked position-table gradient is zero at those rows and no longer equals
//! dl/dz0, which is exactly what degrades the recovery.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::jigsaw::{
    blockwise_mask, jigsaw_shuffle, patchify, unpatchify, BinaryMask, ImageTensor, PatchSequence,
    PermutationMap,
};
use crate::linalg;
use crate::metrics::{image_scores, ImageScores};
use crate::model::{bind_model, model_forward, ForwardMode, ModelSnapshot, ViTConfig};
use crate::rng::SeededRng;
use crate::tensor::{Tape, Tensor};

/// Relative singular-value cutoff of the least-squares pseudo-inverse.
pub const PINV_CUTOFF: f64 = 1e-10;

/// Everything recorded from one single-image forward/backward, plus the
/// attacker-known parameters it was taken against. The activation-side
/// gradients (`z0_grad`, `q_grad`, ...) exist for oracle checks only; the
/// attack itself touches nothing beyond parameter gradients and parameters.
#[derive(Clone, Debug)]
pub struct GradientCapture {
    pub config: ViTConfig,
    /// True input-layer output (oracle).
    pub z0_value: Tensor,
    /// True dl/dz0 (oracle).
    pub z0_grad: Tensor,
    /// Leaked position-table gradient dl/dE_pos.
    pub pos_grad: Tensor,
    /// Leaked first-block weight gradients.
    pub wq_grad: Tensor,
    pub wk_grad: Tensor,
    pub wv_grad: Tensor,
    /// First-block activation gradients (oracle).
    pub q_grad: Tensor,
    pub k_grad: Tensor,
    pub v_grad: Tensor,
    /// Attacker-known parameters.
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub pos_table: Tensor,
    pub patch_proj: Tensor,
    /// Bookkeeping for evaluation.
    pub input_mode: ForwardMode,
    pub mask: Option<BinaryMask>,
    pub original: ImageTensor,
    /// The image the gradients were actually computed on (equals `original`
    /// in standard mode, the reassembled shuffled image otherwise).
    pub presented: ImageTensor,
}

/// Runs one forward/backward on a single image (cross-entropy only, batch of
/// one) and records the gradients the attack and its oracles need. For the
/// shuffled modes the caller supplies the mask and permutation produced by
/// the jigsaw pipeline.
pub fn capture_gradients(
    snap: &ModelSnapshot,
    img: &ImageTensor,
    label: usize,
    mode: ForwardMode,
    mask: Option<&BinaryMask>,
    perm: Option<&PermutationMap>,
) -> Result<GradientCapture> {
    let config = snap.config;
    if mode != ForwardMode::Standard && perm.is_none() {
        return Err(Error::contract(
            "shuffled capture modes need the permutation that built the input",
        ));
    }
    let raw = patchify(img, config.patch)?;
    let patches = match (mode, perm) {
        (ForwardMode::Standard, _) => raw,
        (_, Some(p)) => p.apply_to_patches(&raw),
        _ => unreachable!(),
    };
    let presented = unpatchify(&patches, config.image_h, config.image_w, config.channels, config.patch)?;

    let tape = Tape::new();
    let bound = bind_model(&tape, snap);
    let out = model_forward(&tape, &bound, &config, &patches, mode, mask, perm, false)?;
    let loss = tape.cross_entropy(out.logits, &[label])?;
    tape.backward(loss)?;

    let grad_tensor = |v| -> Result<Tensor> {
        let g = tape.grad(v).ok_or_else(|| Error::Numeric {
            op: "capture_gradients",
            detail: "missing gradient".into(),
        })?;
        Ok(Tensor::new(tape.shape(v), g)?)
    };
    let b0 = &bound.blocks[0];
    Ok(GradientCapture {
        config,
        z0_value: tape.detach(out.z0),
        z0_grad: grad_tensor(out.z0)?,
        pos_grad: grad_tensor(bound.embed.pos_table)?,
        wq_grad: grad_tensor(b0.w_q)?,
        wk_grad: grad_tensor(b0.w_k)?,
        wv_grad: grad_tensor(b0.w_v)?,
        q_grad: grad_tensor(out.first_block.q)?,
        k_grad: grad_tensor(out.first_block.k)?,
        v_grad: grad_tensor(out.first_block.v)?,
        w_q: snap.blocks[0].w_q.clone(),
        w_k: snap.blocks[0].w_k.clone(),
        w_v: snap.blocks[0].w_v.clone(),
        pos_table: snap.embed.pos_table.clone(),
        patch_proj: snap.embed.patch_proj.clone(),
        input_mode: mode,
        mask: mask.cloned(),
        original: img.clone(),
        presented,
    })
}

fn dm(t: &Tensor) -> DMatrix<f64> {
    linalg::dmatrix(t.shape()[0], t.shape()[1], t.data())
}

/// Right-hand side of the linear system: Gq Wq^T + Gk Wk^T + Gv Wv^T.
fn weight_grad_rhs(cap: &GradientCapture) -> DMatrix<f64> {
    dm(&cap.wq_grad) * dm(&cap.w_q).transpose()
        + dm(&cap.wk_grad) * dm(&cap.w_k).transpose()
        + dm(&cap.wv_grad) * dm(&cap.w_v).transpose()
}

impl GradientCapture {
    /// Relative Frobenius residual of z0^T (dl/dz0) = sum_i G_i W_i^T using
    /// the true z0 and its true gradient. Validates the gradient
    /// bookkeeping and the architectural assumption before any solving.
    pub fn identity_residual(&self) -> f64 {
        let lhs = dm(&self.z0_value).transpose() * dm(&self.z0_grad);
        let rhs = weight_grad_rhs(self);
        (&lhs - &rhs).norm() / rhs.norm().max(f64::MIN_POSITIVE)
    }

    /// Same contraction built from the activation gradients (oracle): the
    /// leaked weight gradient of Wq must equal z0^T (dl/dQ) exactly.
    pub fn weight_grad_residual(&self) -> f64 {
        let z0t = dm(&self.z0_value).transpose();
        let mut worst: f64 = 0.0;
        for (wg, ag) in [
            (&self.wq_grad, &self.q_grad),
            (&self.wk_grad, &self.k_grad),
            (&self.wv_grad, &self.v_grad),
        ] {
            let expect = &z0t * dm(ag);
            let got = dm(wg);
            let denom = expect.norm().max(f64::MIN_POSITIVE);
            worst = worst.max((&got - &expect).norm() / denom);
        }
        worst
    }
}

/// Outcome of one closed-form recovery. Raw floats are retained; clamping
/// to [0, 1] happens only where an image is reported or scored.
#[derive(Clone, Debug)]
pub struct AttackResult {
    pub patches: PatchSequence,
    pub image_raw: ImageTensor,
    /// Smallest/largest singular value of the system matrix.
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rank: usize,
    /// Set when the system cannot pin down every token row.
    pub ill_conditioned: bool,
}

/// Solves the linear system for z0 from the leaked gradients, subtracts the
/// attacker's copy of the position table, inverts the patch projection, and
/// reassembles the image.
pub fn april_recover(cap: &GradientCapture) -> Result<AttackResult> {
    let config = &cap.config;
    let tokens = config.n_patches() + 1;
    // (dl/dE_pos)^T z0 = (sum_i G_i W_i^T)^T, solved in least squares
    let system = dm(&cap.pos_grad).transpose(); // D x (N+1)
    let rhs = weight_grad_rhs(cap).transpose(); // D x D
    let (pinv, sigma_min, sigma_max, rank) = linalg::pinv_with_cutoff(&system, PINV_CUTOFF)?;
    let z0_hat = pinv * rhs; // (N+1) x D
    let ill_conditioned = rank < tokens;

    // patches = (z0 - E_pos)[1..] E^+
    let pos = dm(&cap.pos_table);
    let diff = &z0_hat - &pos;
    let patch_rows = diff.rows(1, tokens - 1).into_owned();
    let (e_pinv, _, _, _) = linalg::pinv_with_cutoff(&dm(&cap.patch_proj), PINV_CUTOFF)?;
    let x_hat = patch_rows * e_pinv; // N x (P*P*C)

    let patches = PatchSequence {
        n: config.n_patches(),
        width: config.patch_width(),
        data: linalg::to_row_major(&x_hat),
    };
    let image_raw = unpatchify(
        &patches,
        config.image_h,
        config.image_w,
        config.channels,
        config.patch,
    )?;
    Ok(AttackResult {
        patches,
        image_raw,
        sigma_min,
        sigma_max,
        rank,
        ill_conditioned,
    })
}

/// The three evaluation settings: which input the gradients are captured on
/// and which image the recovery is scored against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Scenario {
    /// Gradients of the original image, scored against the original.
    A,
    /// Gradients of the shuffled image, scored against the shuffled image.
    B,
    /// Gradients of the shuffled image, scored against the original.
    C,
}

impl Scenario {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "a" | "A" => Ok(Scenario::A),
            "b" | "B" => Ok(Scenario::B),
            "c" | "C" => Ok(Scenario::C),
            other => Err(Error::contract(format!("unknown scenario {other:?}"))),
        }
    }
}

/// One image's attack outcome within an evaluation run.
#[derive(Clone, Debug, Serialize)]
pub struct AttackRecord {
    pub index: usize,
    pub scores: ImageScores,
    pub sigma_min: f64,
    pub rank: usize,
    pub ill_conditioned: bool,
}

/// Mean and sample standard deviation of the per-image similarity scores.
#[derive(Clone, Debug, Serialize)]
pub struct AttackReport {
    pub scenario: Scenario,
    pub gamma: f64,
    pub no_unk: bool,
    pub records: Vec<AttackRecord>,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub fft2d_cos_mean: f64,
    pub fft2d_cos_std: f64,
    /// Mean over finite PSNR values.
    pub psnr_mean_db: f64,
    pub psnr_infinite: usize,
    pub ill_conditioned_count: usize,
    /// Raw recovered images, populated only when requested.
    #[serde(skip)]
    pub recoveries: Vec<ImageTensor>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs the attack over an image set in one scenario. Shuffles derive from
/// `(seed, image index)`, so scenarios b and c see identical inputs for the
/// same seed. `no_unk` feeds shuffled patches with the original position
/// table (the ablation without the unknown embedding).
pub fn evaluate_attack(
    snap: &ModelSnapshot,
    images: &[(ImageTensor, usize)],
    scenario: Scenario,
    gamma: f64,
    no_unk: bool,
    min_block_area: usize,
    seed: u64,
) -> Result<AttackReport> {
    evaluate_attack_keeping(snap, images, scenario, gamma, no_unk, min_block_area, seed, false)
}

/// As [`evaluate_attack`], optionally retaining the raw recovered images.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_attack_keeping(
    snap: &ModelSnapshot,
    images: &[(ImageTensor, usize)],
    scenario: Scenario,
    gamma: f64,
    no_unk: bool,
    min_block_area: usize,
    seed: u64,
    keep_recoveries: bool,
) -> Result<AttackReport> {
    let config = snap.config;
    let root = SeededRng::new(seed);
    let mut records = Vec::with_capacity(images.len());
    let mut recoveries = Vec::new();
    for (i, (img, label)) in images.iter().enumerate() {
        let cap = match scenario {
            Scenario::A => capture_gradients(snap, img, *label, ForwardMode::Standard, None, None)?,
            Scenario::B | Scenario::C => {
                let mut mask_rng = root.derive2(crate::model::STREAM_MASK, i as u64);
                let mut perm_rng = root.derive2(crate::model::STREAM_PERM, i as u64);
                let mask = blockwise_mask(
                    config.grid_h(),
                    config.grid_w(),
                    gamma,
                    min_block_area,
                    &mut mask_rng,
                )?;
                let patches = patchify(img, config.patch)?;
                let (_, perm) = jigsaw_shuffle(&patches, &mask, &mut perm_rng)?;
                let mode = if no_unk {
                    ForwardMode::Oblivious
                } else {
                    ForwardMode::MjpAware
                };
                capture_gradients(snap, img, *label, mode, Some(&mask), Some(&perm))?
            }
        };
        let result = april_recover(&cap)?;
        let reference = match scenario {
            Scenario::A | Scenario::C => &cap.original,
            Scenario::B => &cap.presented,
        };
        let scores = image_scores(&result.image_raw.clamped(), reference)?;
        records.push(AttackRecord {
            index: i,
            scores,
            sigma_min: result.sigma_min,
            rank: result.rank,
            ill_conditioned: result.ill_conditioned,
        });
        if keep_recoveries {
            recoveries.push(result.image_raw.clone());
        }
    }
    let (mse_mean, mse_std) = mean_std(&records.iter().map(|r| r.scores.mse).collect::<Vec<_>>());
    let (ssim_mean, ssim_std) =
        mean_std(&records.iter().map(|r| r.scores.ssim).collect::<Vec<_>>());
    let (fft_mean, fft_std) = mean_std(
        &records
            .iter()
            .map(|r| r.scores.fft2d_cos)
            .collect::<Vec<_>>(),
    );
    let finite_psnr: Vec<f64> = records.iter().filter_map(|r| r.scores.psnr_db).collect();
    let (psnr_mean, _) = mean_std(&finite_psnr);
    let infinite = records.len() - finite_psnr.len();
    let ill = records.iter().filter(|r| r.ill_conditioned).count();
    Ok(AttackReport {
        scenario,
        gamma,
        no_unk,
        records,
        mse_mean,
        mse_std,
        ssim_mean,
        ssim_std,
        fft2d_cos_mean: fft_mean,
        fft2d_cos_std: fft_std,
        psnr_mean_db: psnr_mean,
        psnr_infinite: infinite,
        ill_conditioned_count: ill,
        recoveries,
    })
}
