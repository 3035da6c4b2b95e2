//! Input embeddings: patch projection, the position table with its shared
//! unknown-position embedding, and the dense absolute localization (DAL)
//! regressors.
//!
//! The position table has N+1 rows; row 0 belongs to the class token and is
//! never replaced by the unknown embedding and never regressed by DAL. When
//! a mask is active, every masked grid position shares the single `unk` row,
//! so its gradient accumulates once per masked cell.

use crate::error::{Error, Result};
use crate::jigsaw::BinaryMask;
use crate::linalg;
use crate::rng::SeededRng;
use crate::tensor::{Tape, Tensor, Var};

/// Shared init scale for embedding tables.
pub const EMBED_INIT_SIGMA: f64 = 0.02;
/// Hidden width of the nonlinear DAL regressor.
pub const DAL_MLP_HIDDEN: usize = 64;

#[derive(Clone, Debug)]
pub struct EmbeddingState {
    /// (P*P*C) x D patch projection.
    pub patch_proj: Tensor,
    /// (N+1) x D position table; row 0 is the class-token position.
    pub pos_table: Tensor,
    /// 1 x D shared unknown-position embedding.
    pub unk: Tensor,
    /// 1 x D class token.
    pub cls: Tensor,
}

impl EmbeddingState {
    pub fn init(patch_width: usize, n_patches: usize, dim: usize, rng: &mut SeededRng) -> Self {
        EmbeddingState {
            patch_proj: Tensor::xavier_uniform(patch_width, dim, rng).with_grad(),
            pos_table: Tensor::trunc_normal(vec![n_patches + 1, dim], EMBED_INIT_SIGMA, rng)
                .with_grad(),
            unk: Tensor::trunc_normal(vec![1, dim], EMBED_INIT_SIGMA, rng).with_grad(),
            cls: Tensor::trunc_normal(vec![1, dim], EMBED_INIT_SIGMA, rng).with_grad(),
        }
    }

    /// Zeroes and freezes the position table and unknown embedding (the
    /// "no position information" ablation).
    pub fn freeze_zero_pe(&mut self) {
        self.pos_table = Tensor::zeros(self.pos_table.shape().to_vec());
        self.unk = Tensor::zeros(self.unk.shape().to_vec());
    }

    pub fn dim(&self) -> usize {
        self.pos_table.cols()
    }

    pub fn n_patches(&self) -> usize {
        self.pos_table.rows() - 1
    }
}

/// Tape handles for one forward pass over an [`EmbeddingState`].
#[derive(Clone, Copy, Debug)]
pub struct BoundEmbedding {
    pub patch_proj: Var,
    pub pos_table: Var,
    pub unk: Var,
    pub cls: Var,
}

pub fn bind_embedding(tape: &Tape, state: &EmbeddingState) -> BoundEmbedding {
    BoundEmbedding {
        patch_proj: tape.leaf(&state.patch_proj),
        pos_table: tape.leaf(&state.pos_table),
        unk: tape.leaf(&state.unk),
        cls: tape.leaf(&state.cls),
    }
}

/// Projects flattened patches through the patch projection: N x (P*P*C)
/// times (P*P*C) x D.
pub fn embed_patches(tape: &Tape, patches: Var, embed: &BoundEmbedding) -> Result<Var> {
    tape.matmul(patches, embed.patch_proj)
}

/// Builds the effective position table for a masked forward pass: row 0 is
/// kept, masked grid cells read the shared unknown embedding, the rest keep
/// their own rows. With an all-clear mask the output equals the position
/// table bit for bit.
pub fn assemble_mjp_pe(tape: &Tape, embed: &BoundEmbedding, mask: &BinaryMask) -> Result<Var> {
    let n = tape.shape(embed.pos_table)[0] - 1;
    if mask.n_cells() != n {
        return Err(Error::dimension(
            "assemble_mjp_pe",
            &tape.shape(embed.pos_table),
            &[mask.grid_h(), mask.grid_w()],
        ));
    }
    let mut parts: Vec<Var> = Vec::new();
    // Walk position-table rows 0..=N; row j > 0 corresponds to grid cell
    // j - 1. Runs of kept rows become single slices.
    let mut run_start = 0usize;
    for j in 1..=n {
        if mask.is_masked(j - 1) {
            if run_start < j {
                parts.push(tape.slice_rows(embed.pos_table, run_start, j)?);
            }
            parts.push(embed.unk);
            run_start = j + 1;
        }
    }
    if run_start <= n {
        parts.push(tape.slice_rows(embed.pos_table, run_start, n + 1)?);
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    tape.concat_rows(&parts)
}

/// Which position table the input layer adds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PeMode {
    /// The original table (also used for oblivious evaluation, where patches
    /// are shuffled but the model is not told).
    Standard,
    /// Masked cells replaced by the shared unknown embedding.
    MjpAware,
}

/// Prepends the class token to the projected patches and adds position
/// embeddings: z0 = [cls; x E] + PE.
pub fn input_layer(
    tape: &Tape,
    patches: Var,
    embed: &BoundEmbedding,
    mode: PeMode,
    mask: Option<&BinaryMask>,
) -> Result<Var> {
    let projected = embed_patches(tape, patches, embed)?;
    let with_cls = tape.concat_rows(&[embed.cls, projected])?;
    let pe = match mode {
        PeMode::Standard => embed.pos_table,
        PeMode::MjpAware => {
            let mask = mask.ok_or_else(|| {
                Error::contract("input_layer in mjp-aware mode requires a mask")
            })?;
            assemble_mjp_pe(tape, embed, mask)?
        }
    };
    tape.add(with_cls, pe)
}

// ── grid coordinates ────────────────────────────────────────────────────

/// Per-patch grid coordinates on a K x K grid, row-major, either normalized
/// to [0, 1] or raw 1-based.
#[derive(Clone, Debug)]
pub struct GridCoords {
    pub k: usize,
    pub normalized: bool,
    data: Vec<f64>, // K*K x 2
}

impl GridCoords {
    pub fn new(k: usize, normalized: bool) -> Self {
        let mut data = Vec::with_capacity(k * k * 2);
        for i in 0..k {
            for j in 0..k {
                if normalized {
                    let d = (k.max(2) - 1) as f64;
                    data.push(i as f64 / d);
                    data.push(j as f64 / d);
                } else {
                    data.push((i + 1) as f64);
                    data.push((j + 1) as f64);
                }
            }
        }
        GridCoords {
            k,
            normalized,
            data,
        }
    }

    pub fn n(&self) -> usize {
        self.k * self.k
    }

    pub fn coord(&self, idx: usize) -> (f64, f64) {
        (self.data[idx * 2], self.data[idx * 2 + 1])
    }

    /// All N coordinates as an N x 2 tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n(), 2], self.data.clone()).unwrap()
    }

    /// Coordinates of the given patch indices as an M x 2 tensor.
    pub fn subset_tensor(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * 2);
        for &i in indices {
            data.push(self.data[i * 2]);
            data.push(self.data[i * 2 + 1]);
        }
        Tensor::new(vec![indices.len(), 2], data).unwrap()
    }
}

// ── DAL regressors ──────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DalVariant {
    /// Affine map D -> 2.
    Linear,
    /// Three-layer MLP D -> h -> h -> 2 with gelu.
    Mlp,
    /// Non-parametric: project onto the top-2 principal components, then
    /// align to the grid by a least-squares affine map. Recomputed on every
    /// call; gradients flow into the PE rows only.
    Pca,
}

#[derive(Clone, Debug)]
pub struct DalRegressor {
    pub variant: DalVariant,
    /// (weight, bias) pairs; empty for the PCA variant.
    pub layers: Vec<(Tensor, Tensor)>,
}

impl DalRegressor {
    pub fn init(variant: DalVariant, dim: usize, rng: &mut SeededRng) -> Self {
        let layers = match variant {
            DalVariant::Linear => vec![(
                Tensor::xavier_uniform(dim, 2, rng).with_grad(),
                Tensor::zeros(vec![1, 2]).with_grad(),
            )],
            DalVariant::Mlp => {
                let h = DAL_MLP_HIDDEN;
                vec![
                    (
                        Tensor::xavier_uniform(dim, h, rng).with_grad(),
                        Tensor::zeros(vec![1, h]).with_grad(),
                    ),
                    (
                        Tensor::xavier_uniform(h, h, rng).with_grad(),
                        Tensor::zeros(vec![1, h]).with_grad(),
                    ),
                    (
                        Tensor::xavier_uniform(h, 2, rng).with_grad(),
                        Tensor::zeros(vec![1, 2]).with_grad(),
                    ),
                ]
            }
            DalVariant::Pca => Vec::new(),
        };
        DalRegressor { variant, layers }
    }
}

#[derive(Clone, Debug)]
pub struct BoundDal {
    pub variant: DalVariant,
    pub layers: Vec<(Var, Var)>,
}

pub fn bind_dal(tape: &Tape, reg: &DalRegressor) -> BoundDal {
    BoundDal {
        variant: reg.variant,
        layers: reg
            .layers
            .iter()
            .map(|(w, b)| (tape.leaf(w), tape.leaf(b)))
            .collect(),
    }
}

/// Predicts grid coordinates from PE rows (M x D -> M x 2). The PCA variant
/// needs the true coordinates for its affine alignment and at least 3 rows.
pub fn dal_predict(tape: &Tape, pe_rows: Var, reg: &BoundDal, targets: &Tensor) -> Result<Var> {
    match reg.variant {
        DalVariant::Linear => {
            let (w, b) = reg.layers[0];
            tape.add_row_bias(tape.matmul(pe_rows, w)?, b)
        }
        DalVariant::Mlp => {
            let mut h = pe_rows;
            let last = reg.layers.len() - 1;
            for (li, (w, b)) in reg.layers.iter().enumerate() {
                h = tape.add_row_bias(tape.matmul(h, *w)?, *b)?;
                if li != last {
                    h = tape.gelu(h);
                }
            }
            Ok(h)
        }
        DalVariant::Pca => {
            let shape = tape.shape(pe_rows);
            let (m, d) = (shape[0], shape[1]);
            if m < 3 {
                return Err(Error::contract(format!(
                    "PCA regression needs at least 3 rows, got {m}"
                )));
            }
            // Projection and alignment are functions of the current values
            // and enter the graph as constants, so the loss stays linear in
            // the PE rows and gradients flow into them alone.
            let rows = tape.value(pe_rows);
            let mut col_mean = vec![0.0; d];
            for r in 0..m {
                for j in 0..d {
                    col_mean[j] += rows[r * d + j];
                }
            }
            for v in col_mean.iter_mut() {
                *v /= m as f64;
            }
            let centered: Vec<f64> = (0..m * d)
                .map(|i| rows[i] - col_mean[i % d])
                .collect();
            let v2 = linalg::top_right_singular_vectors(&linalg::dmatrix(m, d, &centered), 2)?;

            let proj = linalg::dmatrix(m, d, &centered) * &v2; // M x 2
            // affine alignment [proj 1] A = targets
            let mut design = Vec::with_capacity(m * 3);
            for r in 0..m {
                design.push(proj[(r, 0)]);
                design.push(proj[(r, 1)]);
                design.push(1.0);
            }
            let a = linalg::lstsq_ridge(
                &linalg::dmatrix(m, 3, &design),
                &linalg::dmatrix(m, 2, targets.data()),
                1e-12,
            )?;

            let neg_mean = tape.constant(
                vec![1, d],
                col_mean.iter().map(|v| -v).collect(),
            )?;
            let v2_const = tape.constant(vec![d, 2], linalg::to_row_major(&v2))?;
            let a2 = tape.constant(
                vec![2, 2],
                vec![a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]],
            )?;
            let bias = tape.constant(vec![1, 2], vec![a[(2, 0)], a[(2, 1)]])?;
            let centered_var = tape.add_row_bias(pe_rows, neg_mean)?;
            let proj_var = tape.matmul(centered_var, v2_const)?;
            tape.add_row_bias(tape.matmul(proj_var, a2)?, bias)
        }
    }
}

/// Outcome of a DAL loss evaluation.
pub struct DalLoss {
    pub loss: Var,
    /// Set when the unmasked set was empty (gamma = 1), in which case the
    /// loss is a constant zero.
    pub empty_unmasked: bool,
}

/// Mean L1 distance between regressed and true coordinates over the
/// unmasked, non-class PE rows (all grid rows when `all_rows` is set).
pub fn dal_loss(
    tape: &Tape,
    embed: &BoundEmbedding,
    reg: &BoundDal,
    mask: &BinaryMask,
    coords: &GridCoords,
    all_rows: bool,
) -> Result<DalLoss> {
    let n = tape.shape(embed.pos_table)[0] - 1;
    if mask.n_cells() != n || coords.n() != n {
        return Err(Error::dimension(
            "dal_loss",
            &[mask.n_cells()],
            &[n, coords.n()],
        ));
    }
    let indices: Vec<usize> = (0..n)
        .filter(|&i| all_rows || !mask.is_masked(i))
        .collect();
    if indices.is_empty() {
        return Ok(DalLoss {
            loss: tape.scalar_const(0.0),
            empty_unmasked: true,
        });
    }
    // Coalesce consecutive indices into row slices of the position table
    // (offset by one for the class row).
    let mut parts: Vec<Var> = Vec::new();
    let mut run_start = indices[0];
    let mut prev = indices[0];
    for &i in &indices[1..] {
        if i != prev + 1 {
            parts.push(tape.slice_rows(embed.pos_table, run_start + 1, prev + 2)?);
            run_start = i;
        }
        prev = i;
    }
    parts.push(tape.slice_rows(embed.pos_table, run_start + 1, prev + 2)?);
    let pe_rows = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_rows(&parts)?
    };

    let targets = coords.subset_tensor(&indices);
    let pred = dal_predict(tape, pe_rows, reg, &targets)?;
    let target_var = tape.leaf(&targets);
    Ok(DalLoss {
        loss: tape.l1_loss(pred, target_var)?,
        empty_unmasked: false,
    })
}

/// L_total = L_ce + lambda * L_dal.
pub fn total_loss(tape: &Tape, ce: Var, dal: Var, lambda: f64) -> Result<Var> {
    tape.add(ce, tape.scale(dal, lambda))
}
