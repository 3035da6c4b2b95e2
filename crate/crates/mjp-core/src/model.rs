//! Toy vision-transformer classifier.
//!
//! Layout: patch embedding + position table, `depth` attention/MLP blocks,
//! final layer norm, linear head on the class row.
//!
//! The first attention sub-layer is *inversion-transparent*: it consumes the
//! embedded input z0 directly, with no pre-norm and no skip connection, so
//! z0 reaches the loss only through the first Q/K/V projections. That keeps
//! the first block's weight gradients an exact linear system in z0, which
//! the gradient-inversion evaluator depends on. All later sub-layers (and
//! every MLP sub-layer) are standard pre-norm residual blocks.

use crate::embed::{
    bind_dal, bind_embedding, dal_loss, input_layer, total_loss, BoundDal, BoundEmbedding,
    DalRegressor, DalVariant, EmbeddingState, GridCoords, PeMode,
};
use crate::error::{Error, Result};
use crate::jigsaw::{blockwise_mask, jigsaw_shuffle, patchify, BinaryMask, ImageTensor,
    PatchSequence, PermutationMap};
use crate::rng::SeededRng;
use crate::tensor::{AdamWState, Tape, Tensor, Var};

/// RNG stream purposes used by the training loop; fixed so any iteration's
/// draws can be reproduced in isolation.
pub const STREAM_MASK: u64 = 1;
pub const STREAM_PERM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViTConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
}

impl ViTConfig {
    /// Desk-scale default: 32x32x3 images, 4px patches (8x8 grid), dim 64,
    /// 4 blocks of 4 heads, mlp ratio 4.
    pub fn toy_default() -> Self {
        ViTConfig {
            image_h: 32,
            image_w: 32,
            channels: 3,
            patch: 4,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            classes: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_h % self.patch != 0 || self.image_w % self.patch != 0 {
            return Err(Error::contract(format!(
                "image {}x{} not divisible by patch {}",
                self.image_h, self.image_w, self.patch
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::contract(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.depth == 0 || self.classes == 0 {
            return Err(Error::contract("depth and classes must be positive"));
        }
        Ok(())
    }

    pub fn grid_h(&self) -> usize {
        self.image_h / self.patch
    }

    pub fn grid_w(&self) -> usize {
        self.image_w / self.patch
    }

    pub fn n_patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn patch_width(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    /// Pre-attention norm; `None` marks the inversion-transparent first
    /// block (attention reads the block input raw, no skip connection).
    pub ln1: Option<(Tensor, Tensor)>,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2: (Tensor, Tensor),
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

impl BlockParams {
    fn init(dim: usize, hidden: usize, with_ln1: bool, rng: &mut SeededRng) -> Self {
        let ln = |rng: &mut SeededRng| {
            let _ = rng;
            (
                Tensor::full(vec![1, dim], 1.0).with_grad(),
                Tensor::zeros(vec![1, dim]).with_grad(),
            )
        };
        BlockParams {
            ln1: with_ln1.then(|| ln(rng)),
            w_q: Tensor::xavier_uniform(dim, dim, rng).with_grad(),
            b_q: Tensor::zeros(vec![1, dim]).with_grad(),
            w_k: Tensor::xavier_uniform(dim, dim, rng).with_grad(),
            b_k: Tensor::zeros(vec![1, dim]).with_grad(),
            w_v: Tensor::xavier_uniform(dim, dim, rng).with_grad(),
            b_v: Tensor::zeros(vec![1, dim]).with_grad(),
            w_o: Tensor::xavier_uniform(dim, dim, rng).with_grad(),
            b_o: Tensor::zeros(vec![1, dim]).with_grad(),
            ln2: ln(rng),
            mlp_w1: Tensor::xavier_uniform(dim, hidden, rng).with_grad(),
            mlp_b1: Tensor::zeros(vec![1, hidden]).with_grad(),
            mlp_w2: Tensor::xavier_uniform(hidden, dim, rng).with_grad(),
            mlp_b2: Tensor::zeros(vec![1, dim]).with_grad(),
        }
    }
}

/// Full parameter set plus config; serializable by the harness and
/// reloadable to bit-identical forward outputs.
#[derive(Clone, Debug)]
pub struct ModelSnapshot {
    pub config: ViTConfig,
    pub embed: EmbeddingState,
    pub blocks: Vec<BlockParams>,
    pub final_ln: (Tensor, Tensor),
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub dal: Option<DalRegressor>,
    /// Extra per-index table for the experimental IDX ablation.
    pub idx_table: Option<Tensor>,
}

impl ModelSnapshot {
    pub fn init(
        config: ViTConfig,
        dal: Option<DalVariant>,
        use_idx: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        config.validate()?;
        let dim = config.dim;
        let embed = EmbeddingState::init(config.patch_width(), config.n_patches(), dim, rng);
        let blocks = (0..config.depth)
            .map(|bi| BlockParams::init(dim, config.mlp_hidden(), bi != 0, rng))
            .collect();
        Ok(ModelSnapshot {
            config,
            embed,
            blocks,
            final_ln: (
                Tensor::full(vec![1, dim], 1.0).with_grad(),
                Tensor::zeros(vec![1, dim]).with_grad(),
            ),
            head_w: Tensor::xavier_uniform(dim, config.classes, rng).with_grad(),
            head_b: Tensor::zeros(vec![1, config.classes]).with_grad(),
            dal: dal.map(|v| DalRegressor::init(v, dim, rng)),
            idx_table: use_idx.then(|| {
                Tensor::trunc_normal(
                    vec![config.n_patches(), dim],
                    crate::embed::EMBED_INIT_SIGMA,
                    rng,
                )
                .with_grad()
            }),
        })
    }

    /// Zeroes and freezes all position information (the PE-free ablation).
    pub fn freeze_zero_pe(&mut self) {
        self.embed.freeze_zero_pe();
    }

    /// Canonical (name, tensor) listing; the same order everywhere.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed.patch_proj".into(), &self.embed.patch_proj),
            ("embed.pos_table".into(), &self.embed.pos_table),
            ("embed.unk".into(), &self.embed.unk),
            ("embed.cls".into(), &self.embed.cls),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some((g, bias)) = &b.ln1 {
                out.push((format!("block{i}.ln1.gain"), g));
                out.push((format!("block{i}.ln1.bias"), bias));
            }
            out.push((format!("block{i}.w_q"), &b.w_q));
            out.push((format!("block{i}.b_q"), &b.b_q));
            out.push((format!("block{i}.w_k"), &b.w_k));
            out.push((format!("block{i}.b_k"), &b.b_k));
            out.push((format!("block{i}.w_v"), &b.w_v));
            out.push((format!("block{i}.b_v"), &b.b_v));
            out.push((format!("block{i}.w_o"), &b.w_o));
            out.push((format!("block{i}.b_o"), &b.b_o));
            out.push((format!("block{i}.ln2.gain"), &b.ln2.0));
            out.push((format!("block{i}.ln2.bias"), &b.ln2.1));
            out.push((format!("block{i}.mlp_w1"), &b.mlp_w1));
            out.push((format!("block{i}.mlp_b1"), &b.mlp_b1));
            out.push((format!("block{i}.mlp_w2"), &b.mlp_w2));
            out.push((format!("block{i}.mlp_b2"), &b.mlp_b2));
        }
        out.push(("final_ln.gain".into(), &self.final_ln.0));
        out.push(("final_ln.bias".into(), &self.final_ln.1));
        out.push(("head.weight".into(), &self.head_w));
        out.push(("head.bias".into(), &self.head_b));
        if let Some(dal) = &self.dal {
            for (li, (w, b)) in dal.layers.iter().enumerate() {
                out.push((format!("dal.{li}.weight"), w));
                out.push((format!("dal.{li}.bias"), b));
            }
        }
        if let Some(t) = &self.idx_table {
            out.push(("idx.table".into(), t));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embed.patch_proj".into(), &mut self.embed.patch_proj),
            ("embed.pos_table".into(), &mut self.embed.pos_table),
            ("embed.unk".into(), &mut self.embed.unk),
            ("embed.cls".into(), &mut self.embed.cls),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            if let Some((g, bias)) = &mut b.ln1 {
                out.push((format!("block{i}.ln1.gain"), g));
                out.push((format!("block{i}.ln1.bias"), bias));
            }
            out.push((format!("block{i}.w_q"), &mut b.w_q));
            out.push((format!("block{i}.b_q"), &mut b.b_q));
            out.push((format!("block{i}.w_k"), &mut b.w_k));
            out.push((format!("block{i}.b_k"), &mut b.b_k));
            out.push((format!("block{i}.w_v"), &mut b.w_v));
            out.push((format!("block{i}.b_v"), &mut b.b_v));
            out.push((format!("block{i}.w_o"), &mut b.w_o));
            out.push((format!("block{i}.b_o"), &mut b.b_o));
            out.push((format!("block{i}.ln2.gain"), &mut b.ln2.0));
            out.push((format!("block{i}.ln2.bias"), &mut b.ln2.1));
            out.push((format!("block{i}.mlp_w1"), &mut b.mlp_w1));
            out.push((format!("block{i}.mlp_b1"), &mut b.mlp_b1));
            out.push((format!("block{i}.mlp_w2"), &mut b.mlp_w2));
            out.push((format!("block{i}.mlp_b2"), &mut b.mlp_b2));
        }
        out.push(("final_ln.gain".into(), &mut self.final_ln.0));
        out.push(("final_ln.bias".into(), &mut self.final_ln.1));
        out.push(("head.weight".into(), &mut self.head_w));
        out.push(("head.bias".into(), &mut self.head_b));
        if let Some(dal) = &mut self.dal {
            for (li, (w, b)) in dal.layers.iter_mut().enumerate() {
                out.push((format!("dal.{li}.weight"), w));
                out.push((format!("dal.{li}.bias"), b));
            }
        }
        if let Some(t) = &mut self.idx_table {
            out.push(("idx.table".into(), t));
        }
        out
    }

    pub fn param_sizes(&self) -> Vec<(String, usize)> {
        self.named_params()
            .into_iter()
            .map(|(n, t)| (n, t.numel()))
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.named_params_mut() {
            t.zero_grad();
        }
    }
}

// ── bound (on-tape) views ───────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct BoundBlock {
    pub ln1: Option<(Var, Var)>,
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub ln2: (Var, Var),
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
}

#[derive(Clone, Debug)]
pub struct BoundModel {
    pub embed: BoundEmbedding,
    pub blocks: Vec<BoundBlock>,
    pub final_ln: (Var, Var),
    pub head_w: Var,
    pub head_b: Var,
    pub dal: Option<BoundDal>,
    pub idx_table: Option<Var>,
    named: Vec<(String, Var)>,
}

impl BoundModel {
    /// (name, var) pairs in the same order as `ModelSnapshot::named_params`.
    pub fn named_vars(&self) -> &[(String, Var)] {
        &self.named
    }
}

pub fn bind_model(tape: &Tape, snap: &ModelSnapshot) -> BoundModel {
    let embed = bind_embedding(tape, &snap.embed);
    let mut named: Vec<(String, Var)> = vec![
        ("embed.patch_proj".into(), embed.patch_proj),
        ("embed.pos_table".into(), embed.pos_table),
        ("embed.unk".into(), embed.unk),
        ("embed.cls".into(), embed.cls),
    ];
    let mut blocks = Vec::with_capacity(snap.blocks.len());
    for (i, b) in snap.blocks.iter().enumerate() {
        let ln1 = b.ln1.as_ref().map(|(g, bias)| {
            let vg = tape.leaf(g);
            let vb = tape.leaf(bias);
            named.push((format!("block{i}.ln1.gain"), vg));
            named.push((format!("block{i}.ln1.bias"), vb));
            (vg, vb)
        });
        let bb = BoundBlock {
            ln1,
            w_q: tape.leaf(&b.w_q),
            b_q: tape.leaf(&b.b_q),
            w_k: tape.leaf(&b.w_k),
            b_k: tape.leaf(&b.b_k),
            w_v: tape.leaf(&b.w_v),
            b_v: tape.leaf(&b.b_v),
            w_o: tape.leaf(&b.w_o),
            b_o: tape.leaf(&b.b_o),
            ln2: (tape.leaf(&b.ln2.0), tape.leaf(&b.ln2.1)),
            mlp_w1: tape.leaf(&b.mlp_w1),
            mlp_b1: tape.leaf(&b.mlp_b1),
            mlp_w2: tape.leaf(&b.mlp_w2),
            mlp_b2: tape.leaf(&b.mlp_b2),
        };
        named.push((format!("block{i}.w_q"), bb.w_q));
        named.push((format!("block{i}.b_q"), bb.b_q));
        named.push((format!("block{i}.w_k"), bb.w_k));
        named.push((format!("block{i}.b_k"), bb.b_k));
        named.push((format!("block{i}.w_v"), bb.w_v));
        named.push((format!("block{i}.b_v"), bb.b_v));
        named.push((format!("block{i}.w_o"), bb.w_o));
        named.push((format!("block{i}.b_o"), bb.b_o));
        named.push((format!("block{i}.ln2.gain"), bb.ln2.0));
        named.push((format!("block{i}.ln2.bias"), bb.ln2.1));
        named.push((format!("block{i}.mlp_w1"), bb.mlp_w1));
        named.push((format!("block{i}.mlp_b1"), bb.mlp_b1));
        named.push((format!("block{i}.mlp_w2"), bb.mlp_w2));
        named.push((format!("block{i}.mlp_b2"), bb.mlp_b2));
        blocks.push(bb);
    }
    let final_ln = (tape.leaf(&snap.final_ln.0), tape.leaf(&snap.final_ln.1));
    named.push(("final_ln.gain".into(), final_ln.0));
    named.push(("final_ln.bias".into(), final_ln.1));
    let head_w = tape.leaf(&snap.head_w);
    let head_b = tape.leaf(&snap.head_b);
    named.push(("head.weight".into(), head_w));
    named.push(("head.bias".into(), head_b));
    let dal = snap.dal.as_ref().map(|d| {
        let bd = bind_dal(tape, d);
        for (li, (w, b)) in bd.layers.iter().enumerate() {
            named.push((format!("dal.{li}.weight"), *w));
            named.push((format!("dal.{li}.bias"), *b));
        }
        bd
    });
    let idx_table = snap.idx_table.as_ref().map(|t| {
        let v = tape.leaf(t);
        named.push(("idx.table".into(), v));
        v
    });
    BoundModel {
        embed,
        blocks,
        final_ln,
        head_w,
        head_b,
        dal,
        idx_table,
        named,
    }
}

// ── forward ─────────────────────────────────────────────────────────────

/// How patches and position embeddings are paired at the input layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Unshuffled patches, original PE table.
    Standard,
    /// Shuffled patches with the mask known to the model: masked positions
    /// read the shared unknown embedding.
    MjpAware,
    /// Shuffled patches, original PE table; the model is not told.
    Oblivious,
}

/// First-block activations needed by the gradient-capture path.
#[derive(Clone, Copy, Debug)]
pub struct MsaHooks {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

pub struct ForwardOutput {
    /// 1 x classes.
    pub logits: Var,
    /// Post-norm class row (input to the head), 1 x dim.
    pub cls_embed: Var,
    /// Input-layer output (N+1) x dim.
    pub z0: Var,
    /// Q/K/V of the first block.
    pub first_block: MsaHooks,
    /// Per-block attention maps (heads x tokens x tokens), when requested.
    pub attention: Option<Vec<Tensor>>,
}

/// Multi-head self-attention: per-head softmax(Q K^T / sqrt(d)) V, heads
/// concatenated and output-projected. Returns the full-width Q/K/V handles.
pub fn msa_forward(
    tape: &Tape,
    z: Var,
    block: &BoundBlock,
    heads: usize,
    attn_sink: Option<&mut Vec<Tensor>>,
) -> Result<(Var, MsaHooks)> {
    let dim = tape.shape(z)[1];
    if heads == 0 || dim % heads != 0 {
        return Err(Error::contract(format!(
            "dim {dim} not divisible by heads {heads}"
        )));
    }
    let hd = dim / heads;
    let q = tape.add_row_bias(tape.matmul(z, block.w_q)?, block.b_q)?;
    let k = tape.add_row_bias(tape.matmul(z, block.w_k)?, block.b_k)?;
    let v = tape.add_row_bias(tape.matmul(z, block.w_v)?, block.b_v)?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    let mut maps: Vec<Tensor> = Vec::new();
    for h in 0..heads {
        let (c0, c1) = (h * hd, (h + 1) * hd);
        let qh = tape.slice_cols(q, c0, c1)?;
        let kh = tape.slice_cols(k, c0, c1)?;
        let vh = tape.slice_cols(v, c0, c1)?;
        let scores = tape.scale(tape.matmul_nt(qh, kh)?, scale);
        let attn = tape.softmax_rows(scores)?;
        if attn_sink.is_some() {
            maps.push(tape.detach(attn));
        }
        head_outs.push(tape.matmul(attn, vh)?);
    }
    if let Some(sink) = attn_sink {
        let tokens = tape.shape(z)[0];
        let mut stacked = Vec::with_capacity(heads * tokens * tokens);
        for m in &maps {
            stacked.extend_from_slice(m.data());
        }
        sink.push(Tensor::new(vec![heads, tokens, tokens], stacked)?);
    }
    let concat = tape.concat_cols(&head_outs)?;
    let out = tape.add_row_bias(tape.matmul(concat, block.w_o)?, block.b_o)?;
    Ok((
        out,
        MsaHooks { q, k, v },
    ))
}

/// Adds the IDX ablation's index embeddings: each masked destination row
/// receives the table row of the patch's original index.
fn add_index_embeddings(
    tape: &Tape,
    z0: Var,
    idx_table: Var,
    mask: &BinaryMask,
    perm: &PermutationMap,
) -> Result<Var> {
    let n = perm.len();
    let dim = tape.shape(z0)[1];
    let zero_row = tape.constant(vec![1, dim], vec![0.0; dim])?;
    let inv = perm.inverse();
    let mut parts: Vec<Var> = Vec::with_capacity(n + 1);
    parts.push(zero_row); // class row
    for dest in 0..n {
        if mask.is_masked(dest) {
            let orig = inv.dest(dest);
            parts.push(tape.slice_rows(idx_table, orig, orig + 1)?);
        } else {
            parts.push(zero_row);
        }
    }
    let idx_matrix = tape.concat_rows(&parts)?;
    tape.add(z0, idx_matrix)
}

/// Runs the full model. `patches` must already be shuffled for the aware and
/// oblivious modes; `mask` is required in aware mode; `perm` is consumed
/// only by the IDX ablation.
#[allow(clippy::too_many_arguments)]
pub fn model_forward(
    tape: &Tape,
    bound: &BoundModel,
    config: &ViTConfig,
    patches: &PatchSequence,
    mode: ForwardMode,
    mask: Option<&BinaryMask>,
    perm: Option<&PermutationMap>,
    collect_attention: bool,
) -> Result<ForwardOutput> {
    if patches.n != config.n_patches() || patches.width != config.patch_width() {
        return Err(Error::dimension(
            "model_forward",
            &[patches.n, patches.width],
            &[config.n_patches(), config.patch_width()],
        ));
    }
    let pe_mode = match mode {
        ForwardMode::Standard | ForwardMode::Oblivious => PeMode::Standard,
        ForwardMode::MjpAware => PeMode::MjpAware,
    };
    if mode == ForwardMode::MjpAware && mask.is_none() {
        return Err(Error::contract("mjp-aware forward requires a mask"));
    }
    let patches_var = tape.constant(vec![patches.n, patches.width], patches.data.clone())?;
    let mut z0 = input_layer(tape, patches_var, &bound.embed, pe_mode, mask)?;
    if let (Some(idx), Some(perm), Some(mask)) = (bound.idx_table, perm, mask) {
        z0 = add_index_embeddings(tape, z0, idx, mask, perm)?;
    }

    let mut attention = collect_attention.then(Vec::new);
    let mut z = z0;
    let mut first_hooks: Option<MsaHooks> = None;
    for block in &bound.blocks {
        let (attn_in, transparent) = match block.ln1 {
            Some((g, b)) => (tape.layer_norm(z, g, b)?, false),
            None => (z, true),
        };
        let (attn_out, hooks) = msa_forward(
            tape,
            attn_in,
            block,
            config.heads,
            attention.as_mut(),
        )?;
        if first_hooks.is_none() {
            first_hooks = Some(hooks);
        }
        z = if transparent {
            attn_out
        } else {
            tape.add(z, attn_out)?
        };
        let m = tape.layer_norm(z, block.ln2.0, block.ln2.1)?;
        let h = tape.gelu(tape.add_row_bias(tape.matmul(m, block.mlp_w1)?, block.mlp_b1)?);
        let mlp_out = tape.add_row_bias(tape.matmul(h, block.mlp_w2)?, block.mlp_b2)?;
        z = tape.add(z, mlp_out)?;
    }
    let zf = tape.layer_norm(z, bound.final_ln.0, bound.final_ln.1)?;
    let cls_embed = tape.slice_rows(zf, 0, 1)?;
    let logits = tape.add_row_bias(tape.matmul(cls_embed, bound.head_w)?, bound.head_b)?;
    Ok(ForwardOutput {
        logits,
        cls_embed,
        z0,
        first_block: first_hooks.expect("at least one block"),
        attention,
    })
}

/// Convenience wrapper: forward a raw image in a given mode with a fresh
/// tape, returning detached logits and class embedding.
pub fn forward_image(
    snap: &ModelSnapshot,
    img: &ImageTensor,
    mode: ForwardMode,
    mask: Option<&BinaryMask>,
    perm: Option<&PermutationMap>,
) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let bound = bind_model(&tape, snap);
    let patches = patchify(img, snap.config.patch)?;
    let patches = match (mode, perm) {
        (ForwardMode::Standard, _) | (_, None) => patches,
        (_, Some(p)) => p.apply_to_patches(&patches),
    };
    let out = model_forward(
        &tape,
        &bound,
        &snap.config,
        &patches,
        mode,
        mask,
        perm,
        false,
    )?;
    Ok((tape.detach(out.logits), tape.detach(out.cls_embed)))
}

// ── training ────────────────────────────────────────────────────────────

/// Ablation switches for the training pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VariantFlags {
    /// Shuffle masked patches during training.
    pub jp: bool,
    /// Replace masked-position PEs with the shared unknown embedding.
    pub unk: bool,
    /// Add index embeddings at shuffled destinations.
    pub idx: bool,
    /// Shuffle all patches and the pixels inside each patch.
    pub spp: bool,
}

impl VariantFlags {
    pub fn none() -> Self {
        VariantFlags {
            jp: false,
            unk: false,
            idx: false,
            spp: false,
        }
    }

    pub fn mjp() -> Self {
        VariantFlags {
            jp: true,
            unk: true,
            idx: false,
            spp: false,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainHyper {
    pub gamma: f64,
    pub lambda: f64,
    pub min_block_area: usize,
    pub dal_all_rows: bool,
    pub normalized_coords: bool,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            gamma: 0.15,
            lambda: 0.01,
            min_block_area: 2,
            dal_all_rows: false,
            normalized_coords: true,
        }
    }
}

/// Loss pieces of one step; `total` is reconstructed as
/// `ce + lambda * dal` so the identity holds exactly.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub ce: f64,
    pub dal: f64,
    pub lambda: f64,
    pub total: f64,
    /// Samples whose unmasked set was empty (gamma = 1).
    pub dal_empty_samples: usize,
}

/// Per-sample forward/backward: returns the losses and the parameter
/// gradients of this sample, in `named_vars` order.
pub struct SampleGrads {
    pub ce: f64,
    pub dal: f64,
    pub dal_empty: bool,
    /// Predicted class (argmax of the logits).
    pub pred: usize,
    pub grads: Vec<(String, Vec<f64>)>,
}

/// Shuffles the pixels inside every patch row (fresh permutation per patch).
pub fn permute_pixels_within_patches(
    patches: &PatchSequence,
    channels: usize,
    rng: &mut SeededRng,
) -> PatchSequence {
    let px = patches.width / channels;
    let mut out = patches.data.clone();
    for r in 0..patches.n {
        let mut order: Vec<usize> = (0..px).collect();
        rng.shuffle(&mut order);
        let src = patches.row(r).to_vec();
        let dst = &mut out[r * patches.width..(r + 1) * patches.width];
        for (to, &from) in order.iter().enumerate() {
            for c in 0..channels {
                dst[to * channels + c] = src[from * channels + c];
            }
        }
    }
    PatchSequence {
        n: patches.n,
        width: patches.width,
        data: out,
    }
}

/// One sample of the MJP training pipeline: fresh mask and permutation,
/// aware-mode forward, cross-entropy plus weighted DAL, backward.
pub fn sample_grads(
    snap: &ModelSnapshot,
    img: &ImageTensor,
    label: usize,
    flags: VariantFlags,
    hyper: &TrainHyper,
    mask_rng: &mut SeededRng,
    perm_rng: &mut SeededRng,
) -> Result<SampleGrads> {
    let config = &snap.config;
    let tape = Tape::new();
    let bound = bind_model(&tape, snap);
    let raw_patches = patchify(img, config.patch)?;

    let (patches, mask, perm, mode) = if flags.spp {
        let full = blockwise_mask(config.grid_h(), config.grid_w(), 1.0, 1, mask_rng)?;
        let (shuffled, perm) = jigsaw_shuffle(&raw_patches, &full, perm_rng)?;
        let scrambled = permute_pixels_within_patches(&shuffled, config.channels, perm_rng);
        (scrambled, full, perm, ForwardMode::Oblivious)
    } else if flags.jp && hyper.gamma > 0.0 {
        let mask = blockwise_mask(
            config.grid_h(),
            config.grid_w(),
            hyper.gamma,
            hyper.min_block_area,
            mask_rng,
        )?;
        let (shuffled, perm) = jigsaw_shuffle(&raw_patches, &mask, perm_rng)?;
        let mode = if flags.unk {
            ForwardMode::MjpAware
        } else {
            ForwardMode::Oblivious
        };
        (shuffled, mask, perm, mode)
    } else {
        let n = config.n_patches();
        (
            raw_patches,
            BinaryMask::zeros(config.grid_h(), config.grid_w()),
            PermutationMap::identity(n),
            ForwardMode::Standard,
        )
    };

    let out = model_forward(
        &tape,
        &bound,
        config,
        &patches,
        mode,
        Some(&mask),
        Some(&perm),
        false,
    )?;
    let pred = crate::metrics::argmax(&tape.value(out.logits));
    let ce = tape.cross_entropy(out.logits, &[label])?;

    let (dal_var, dal_val, dal_empty) = match &bound.dal {
        Some(reg) if !flags.spp => {
            let coords = GridCoords::new(config.grid_h(), hyper.normalized_coords);
            let dal = dal_loss(
                &tape,
                &bound.embed,
                reg,
                &mask,
                &coords,
                hyper.dal_all_rows,
            )?;
            let v = tape.scalar(dal.loss);
            (Some(dal.loss), v, dal.empty_unmasked)
        }
        _ => (None, 0.0, false),
    };

    let loss = match dal_var {
        Some(d) => total_loss(&tape, ce, d, hyper.lambda)?,
        None => ce,
    };
    tape.backward(loss)?;

    let grads = bound
        .named_vars()
        .iter()
        .filter_map(|(name, var)| tape.grad(*var).map(|g| (name.clone(), g)))
        .collect();
    Ok(SampleGrads {
        ce: tape.scalar(ce),
        dal: dal_val,
        dal_empty,
        pred,
        grads,
    })
}

/// One optimizer step over a batch: per-sample fresh masks/permutations
/// (streams derived from `iter_rng` by sample index), mean gradients, one
/// AdamW update at the current `state.params.lr`.
pub fn train_step(
    snap: &mut ModelSnapshot,
    batch: &[(&ImageTensor, usize)],
    flags: VariantFlags,
    hyper: &TrainHyper,
    iter_rng: &SeededRng,
    state: &mut AdamWState,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::contract("empty training batch"));
    }
    if flags.spp && snap.dal.is_some() {
        return Err(Error::contract(
            "spp scrambles patch contents; DAL does not apply",
        ));
    }
    snap.zero_grads();
    let mut ce_sum = 0.0;
    let mut dal_sum = 0.0;
    let mut empties = 0usize;
    let inv_b = 1.0 / batch.len() as f64;
    let mut acc: Vec<(String, Vec<f64>)> = Vec::new();
    for (i, (img, label)) in batch.iter().enumerate() {
        let mut mask_rng = iter_rng.derive2(STREAM_MASK, i as u64);
        let mut perm_rng = iter_rng.derive2(STREAM_PERM, i as u64);
        let s = sample_grads(snap, img, *label, flags, hyper, &mut mask_rng, &mut perm_rng)?;
        ce_sum += s.ce;
        dal_sum += s.dal;
        empties += s.dal_empty as usize;
        merge_grads(&mut acc, s.grads);
    }
    apply_grads(snap, &acc, inv_b);
    let mut named = snap.named_params_mut();
    state.step(&mut named)?;

    let ce = ce_sum * inv_b;
    let dal = dal_sum * inv_b;
    Ok(LossBreakdown {
        ce,
        dal,
        lambda: hyper.lambda,
        total: ce + hyper.lambda * dal,
        dal_empty_samples: empties,
    })
}

/// Adds `delta` gradients into `acc` (name-aligned, order-preserving).
pub fn merge_grads(acc: &mut Vec<(String, Vec<f64>)>, delta: Vec<(String, Vec<f64>)>) {
    for (name, g) in delta {
        match acc.iter_mut().find(|(n, _)| *n == name) {
            Some((_, a)) => {
                for (x, y) in a.iter_mut().zip(&g) {
                    *x += y;
                }
            }
            None => acc.push((name, g)),
        }
    }
}

/// Writes `scale * acc` into the parameter gradient slots.
pub fn apply_grads(snap: &mut ModelSnapshot, acc: &[(String, Vec<f64>)], scale: f64) {
    let mut named = snap.named_params_mut();
    for (name, g) in acc {
        if let Some((_, t)) = named.iter_mut().find(|(n, _)| n == name) {
            let scaled: Vec<f64> = g.iter().map(|x| x * scale).collect();
            t.accumulate_grad(&scaled);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::AdamWParams;

    fn tiny_config() -> ViTConfig {
        ViTConfig {
            image_h: 16,
            image_w: 16,
            channels: 3,
            patch: 4,
            dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            classes: 4,
        }
    }

    fn random_image(config: &ViTConfig, rng: &mut SeededRng) -> ImageTensor {
        let px = (0..config.image_h * config.image_w * config.channels)
            .map(|_| rng.uniform())
            .collect();
        ImageTensor::new(config.image_h, config.image_w, config.channels, px).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ViTConfig::toy_default().validate().is_ok());
        let mut bad = ViTConfig::toy_default();
        bad.dim = 30; // not divisible by 4 heads
        assert!(bad.validate().is_err());
        let mut bad2 = ViTConfig::toy_default();
        bad2.patch = 5;
        assert!(bad2.validate().is_err());
    }

    #[test]
    fn toy_default_parameter_count_is_desk_scale() {
        let mut rng = SeededRng::new(0);
        let snap = ModelSnapshot::init(ViTConfig::toy_default(), None, false, &mut rng).unwrap();
        let n = snap.n_params();
        assert!((150_000..280_000).contains(&n), "got {n}");
    }

    /// Degenerate single-token attention: weights are 1, so with zero
    /// output bias the block returns V * W_o.
    #[test]
    fn single_token_attention_passes_value_through_output_proj() {
        let mut rng = SeededRng::new(1);
        let block = BlockParams::init(8, 16, false, &mut rng);
        let tape = Tape::new();
        let bound = bind_block_for_test(&tape, &block);
        let z = tape
            .constant(vec![1, 8], (0..8).map(|i| 0.1 * i as f64).collect())
            .unwrap();
        let (out, hooks) = msa_forward(&tape, z, &bound, 2, None).unwrap();
        // expected: concat of per-head V slices = V, then * w_o (+ b_o = 0)
        let expect = tape
            .add_row_bias(tape.matmul(hooks.v, bound.w_o).unwrap(), bound.b_o)
            .unwrap();
        let (a, b) = (tape.value(out), tape.value(expect));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_value_projection_zeroes_attention_output() {
        let mut rng = SeededRng::new(2);
        let mut block = BlockParams::init(8, 16, false, &mut rng);
        block.w_v = Tensor::zeros(vec![8, 8]).with_grad();
        block.b_v = Tensor::zeros(vec![1, 8]).with_grad();
        block.b_o = Tensor::zeros(vec![1, 8]).with_grad();
        let tape = Tape::new();
        let bound = bind_block_for_test(&tape, &block);
        let z = tape
            .constant(vec![5, 8], (0..40).map(|i| (i as f64 * 0.37).sin()).collect())
            .unwrap();
        let (out, _) = msa_forward(&tape, z, &bound, 2, None).unwrap();
        assert!(tape.value(out).iter().all(|&x| x == 0.0));
    }

    /// Permuting non-class token rows permutes attention outputs the same
    /// way (MSA itself carries no position information).
    #[test]
    fn msa_is_permutation_equivariant() {
        let mut rng = SeededRng::new(3);
        let block = BlockParams::init(16, 32, false, &mut rng);
        let tokens = 7;
        let z0: Vec<f64> = (0..tokens * 16).map(|_| rng.uniform_in(-1.0, 1.0)).collect();

        // permutation of all rows
        let mut order: Vec<usize> = (0..tokens).collect();
        rng.shuffle(&mut order);
        let mut zp = vec![0.0; z0.len()];
        for (dst, &src) in order.iter().enumerate() {
            zp[dst * 16..(dst + 1) * 16].copy_from_slice(&z0[src * 16..(src + 1) * 16]);
        }

        let run = |data: Vec<f64>| {
            let tape = Tape::new();
            let bound = bind_block_for_test(&tape, &block);
            let z = tape.constant(vec![tokens, 16], data).unwrap();
            let (out, _) = msa_forward(&tape, z, &bound, 4, None).unwrap();
            tape.value(out)
        };
        let out0 = run(z0);
        let outp = run(zp);
        for (dst, &src) in order.iter().enumerate() {
            for j in 0..16 {
                let d = (outp[dst * 16 + j] - out0[src * 16 + j]).abs();
                assert!(d < 1e-12, "row {dst} col {j}: {d}");
            }
        }
    }

    fn bind_block_for_test(tape: &Tape, block: &BlockParams) -> BoundBlock {
        BoundBlock {
            ln1: block
                .ln1
                .as_ref()
                .map(|(g, b)| (tape.leaf(g), tape.leaf(b))),
            w_q: tape.leaf(&block.w_q),
            b_q: tape.leaf(&block.b_q),
            w_k: tape.leaf(&block.w_k),
            b_k: tape.leaf(&block.b_k),
            w_v: tape.leaf(&block.w_v),
            b_v: tape.leaf(&block.b_v),
            w_o: tape.leaf(&block.w_o),
            b_o: tape.leaf(&block.b_o),
            ln2: (tape.leaf(&block.ln2.0), tape.leaf(&block.ln2.1)),
            mlp_w1: tape.leaf(&block.mlp_w1),
            mlp_b1: tape.leaf(&block.mlp_b1),
            mlp_w2: tape.leaf(&block.mlp_w2),
            mlp_b2: tape.leaf(&block.mlp_b2),
        }
    }

    #[test]
    fn aware_with_zero_mask_matches_standard_bit_exactly() {
        let config = tiny_config();
        let mut rng = SeededRng::new(4);
        let snap = ModelSnapshot::init(config, None, false, &mut rng).unwrap();
        let img = random_image(&config, &mut rng);
        let mask = BinaryMask::zeros(config.grid_h(), config.grid_w());

        let (l1, c1) = forward_image(&snap, &img, ForwardMode::Standard, None, None).unwrap();
        let (l2, c2) =
            forward_image(&snap, &img, ForwardMode::MjpAware, Some(&mask), None).unwrap();
        assert_eq!(l1.data(), l2.data());
        assert_eq!(c1.data(), c2.data());
    }

    #[test]
    fn oblivious_with_identity_permutation_matches_standard_bit_exactly() {
        let config = tiny_config();
        let mut rng = SeededRng::new(5);
        let snap = ModelSnapshot::init(config, None, false, &mut rng).unwrap();
        let img = random_image(&config, &mut rng);
        let perm = PermutationMap::identity(config.n_patches());

        let (l1, c1) = forward_image(&snap, &img, ForwardMode::Standard, None, None).unwrap();
        let (l2, c2) =
            forward_image(&snap, &img, ForwardMode::Oblivious, None, Some(&perm)).unwrap();
        assert_eq!(l1.data(), l2.data());
        assert_eq!(c1.data(), c2.data());
    }

    /// Re-drawing the jigsaw permutation of a fixed mask must not move the
    /// class embedding: masked rows share one unknown embedding and MSA is
    /// permutation-equivariant.
    #[test]
    fn aware_mode_is_invariant_to_the_permutation_within_a_mask() {
        let config = tiny_config();
        let mut rng = SeededRng::new(6);
        let snap = ModelSnapshot::init(config, None, false, &mut rng).unwrap();
        let img = random_image(&config, &mut rng);
        let patches = patchify(&img, config.patch).unwrap();
        let mask = BinaryMask::from_indices(
            config.grid_h(),
            config.grid_w(),
            &[0, 1, 2, 5, 6, 9, 10, 15],
        )
        .unwrap();

        let mut embeds = Vec::new();
        for seed in [100u64, 200, 300] {
            let mut prng = SeededRng::new(seed);
            let (shuffled, _) = jigsaw_shuffle(&patches, &mask, &mut prng).unwrap();
            let tape = Tape::new();
            let bound = bind_model(&tape, &snap);
            let out = model_forward(
                &tape,
                &bound,
                &config,
                &shuffled,
                ForwardMode::MjpAware,
                Some(&mask),
                None,
                false,
            )
            .unwrap();
            embeds.push(tape.value(out.cls_embed));
        }
        for e in &embeds[1..] {
            let dev = embeds[0]
                .iter()
                .zip(e)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(dev < 1e-9, "max deviation {dev}");
        }
    }

    /// With the position table and unknown embedding frozen at zero, the
    /// class embedding ignores any full patch permutation.
    #[test]
    fn pe_free_model_is_permutation_invariant() {
        let config = tiny_config();
        let mut rng = SeededRng::new(7);
        let mut snap = ModelSnapshot::init(config, None, false, &mut rng).unwrap();
        snap.freeze_zero_pe();
        let img = random_image(&config, &mut rng);
        let patches = patchify(&img, config.patch).unwrap();

        let base = {
            let tape = Tape::new();
            let bound = bind_model(&tape, &snap);
            let out = model_forward(
                &tape,
                &bound,
                &config,
                &patches,
                ForwardMode::Standard,
                None,
                None,
                false,
            )
            .unwrap();
            tape.value(out.cls_embed)
        };
        for seed in 0..20u64 {
            let mut prng = SeededRng::new(seed);
            let mut order: Vec<usize> = (0..config.n_patches()).collect();
            prng.shuffle(&mut order);
            let perm = PermutationMap::from_forward(order).unwrap();
            let shuffled = perm.apply_to_patches(&patches);
            let tape = Tape::new();
            let bound = bind_model(&tape, &snap);
            let out = model_forward(
                &tape,
                &bound,
                &config,
                &shuffled,
                ForwardMode::Oblivious,
                None,
                None,
                false,
            )
            .unwrap();
            let e = tape.value(out.cls_embed);
            let dev = base
                .iter()
                .zip(&e)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(dev < 1e-9, "seed {seed}: deviation {dev}");
        }
    }

    #[test]
    fn train_step_breakdown_identity_and_gamma_zero_reduction() {
        let config = tiny_config();
        let mut rng = SeededRng::new(8);
        let mut snap =
            ModelSnapshot::init(config, Some(DalVariant::Linear), false, &mut rng).unwrap();
        let mut snap_vanilla = snap.clone();
        let imgs: Vec<ImageTensor> = (0..4).map(|_| random_image(&config, &mut rng)).collect();
        let batch: Vec<(&ImageTensor, usize)> =
            imgs.iter().enumerate().map(|(i, im)| (im, i % 4)).collect();

        let sizes = snap.param_sizes();
        let mut opt = AdamWState::new(AdamWParams::default(), &sizes);
        let hyper = TrainHyper {
            gamma: 0.25,
            ..Default::default()
        };
        let iter_rng = SeededRng::new(99).derive(0);
        let lb = train_step(
            &mut snap,
            &batch,
            VariantFlags::mjp(),
            &hyper,
            &iter_rng,
            &mut opt,
        )
        .unwrap();
        assert_eq!(lb.total, lb.ce + lb.lambda * lb.dal);

        // gamma = 0 and lambda = 0 must match a plain standard-mode step
        let mut opt_a = AdamWState::new(AdamWParams::default(), &sizes);
        let mut opt_b = AdamWState::new(AdamWParams::default(), &sizes);
        let hyper0 = TrainHyper {
            gamma: 0.0,
            lambda: 0.0,
            ..Default::default()
        };
        let mut snap_jp = snap_vanilla.clone();
        let lb_jp = train_step(
            &mut snap_jp,
            &batch,
            VariantFlags::mjp(),
            &hyper0,
            &iter_rng,
            &mut opt_a,
        )
        .unwrap();
        let lb_plain = train_step(
            &mut snap_vanilla,
            &batch,
            VariantFlags::none(),
            &hyper0,
            &iter_rng,
            &mut opt_b,
        )
        .unwrap();
        assert_eq!(lb_jp.ce, lb_plain.ce);
        for ((na, ta), (nb, tb)) in snap_jp
            .named_params()
            .iter()
            .zip(snap_vanilla.named_params().iter())
        {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "param {na} diverged");
        }
    }

    /// Overfitting a fixed batch drives the loss near zero quickly.
    #[test]
    fn overfits_one_batch() {
        let config = tiny_config();
        let mut rng = SeededRng::new(9);
        let mut snap = ModelSnapshot::init(config, None, false, &mut rng).unwrap();
        let imgs: Vec<ImageTensor> = (0..8).map(|_| random_image(&config, &mut rng)).collect();
        let batch: Vec<(&ImageTensor, usize)> =
            imgs.iter().enumerate().map(|(i, im)| (im, i % 4)).collect();
        let mut opt = AdamWState::new(
            AdamWParams {
                lr: 3e-3,
                weight_decay: 0.0,
                ..Default::default()
            },
            &snap.param_sizes(),
        );
        let hyper = TrainHyper {
            gamma: 0.0,
            lambda: 0.0,
            ..Default::default()
        };
        let root = SeededRng::new(17);
        let mut last = f64::INFINITY;
        for it in 0..50u64 {
            let lb = train_step(
                &mut snap,
                &batch,
                VariantFlags::none(),
                &hyper,
                &root.derive(it),
                &mut opt,
            )
            .unwrap();
            last = lb.total;
        }
        assert!(last < 0.1, "loss after 50 steps: {last}");
    }

    #[test]
    fn same_seed_same_trajectory() {
        let config = tiny_config();
        let run = || {
            let mut rng = SeededRng::new(10);
            let mut snap =
                ModelSnapshot::init(config, Some(DalVariant::Linear), false, &mut rng).unwrap();
            let imgs: Vec<ImageTensor> =
                (0..4).map(|_| random_image(&config, &mut rng)).collect();
            let batch: Vec<(&ImageTensor, usize)> =
                imgs.iter().enumerate().map(|(i, im)| (im, i % 4)).collect();
            let mut opt = AdamWState::new(AdamWParams::default(), &snap.param_sizes());
            let root = SeededRng::new(5);
            let mut losses = Vec::new();
            for it in 0..5u64 {
                let lb = train_step(
                    &mut snap,
                    &batch,
                    VariantFlags::mjp(),
                    &TrainHyper::default(),
                    &root.derive(it),
                    &mut opt,
                )
                .unwrap();
                losses.push(lb.total.to_bits());
            }
            losses
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn spp_with_dal_is_a_config_error() {
        let config = tiny_config();
        let mut rng = SeededRng::new(11);
        let mut snap =
            ModelSnapshot::init(config, Some(DalVariant::Linear), false, &mut rng).unwrap();
        let img = random_image(&config, &mut rng);
        let batch = [(&img, 0usize)];
        let mut opt = AdamWState::new(AdamWParams::default(), &snap.param_sizes());
        let flags = VariantFlags {
            spp: true,
            ..VariantFlags::none()
        };
        assert!(train_step(
            &mut snap,
            &batch,
            flags,
            &TrainHyper::default(),
            &SeededRng::new(0),
            &mut opt,
        )
        .is_err());
    }

    #[test]
    fn snapshot_clone_preserves_forward_bitwise() {
        let config = tiny_config();
        let mut rng = SeededRng::new(12);
        let snap = ModelSnapshot::init(config, None, false, &mut rng).unwrap();
        let img = random_image(&config, &mut rng);
        let copy = snap.clone();
        let (l1, _) = forward_image(&snap, &img, ForwardMode::Standard, None, None).unwrap();
        let (l2, _) = forward_image(&copy, &img, ForwardMode::Standard, None, None).unwrap();
        assert_eq!(l1.data(), l2.data());
    }

    #[test]
    fn named_params_align_with_bound_vars() {
        let config = tiny_config();
        let mut rng = SeededRng::new(13);
        let snap =
            ModelSnapshot::init(config, Some(DalVariant::Mlp), true, &mut rng).unwrap();
        let tape = Tape::new();
        let bound = bind_model(&tape, &snap);
        let names_a: Vec<String> = snap.named_params().into_iter().map(|(n, _)| n).collect();
        let names_b: Vec<String> = bound.named_vars().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names_a, names_b);
    }
}
