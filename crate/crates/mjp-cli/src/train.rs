//! Training and evaluation loops over the synthetic datasets.
//!
//! Gradient work parallelizes over fixed-size chunks of each batch; chunk
//! sums merge in batch order, so results are bit-identical for a given seed
//! regardless of thread count. Per-sample mask/permutation streams derive
//! from (seed, global step, sample position), matching the single-threaded
//! `train_step` semantics.

use rayon::prelude::*;

use mjp_core::jigsaw::blockwise_mask;
use mjp_core::jigsaw::{jigsaw_shuffle, patchify};
use mjp_core::metrics::{argmax, consistency, diff_norm, diff_norm_unsquared};
use mjp_core::model::{
    apply_grads, bind_model, merge_grads, model_forward, sample_grads, ForwardMode,
    ModelSnapshot, SampleGrads, STREAM_MASK, STREAM_PERM,
};
use mjp_core::tensor::{cosine_lr, AdamWParams, AdamWState, Tape};
use mjp_core::SeededRng;

use crate::config::{EvalMode, RunConfig};
use crate::dataset::Dataset;
use crate::error::{CliError, Result};
use crate::report::ReportWriter;

/// Fixed parallel chunk size; summation order (and therefore bit-level
/// results) must not depend on the machine's thread count.
pub const GRAD_CHUNK: usize = 8;

/// Stream ids for epoch shuffling and evaluation, disjoint from the
/// per-sample mask/permutation purposes.
const STREAM_EPOCH: u64 = 10;
const STREAM_STEP: u64 = 11;

#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub dal: f64,
    pub train_acc: f64,
}

pub struct TrainResult {
    pub snapshot: ModelSnapshot,
    pub optimizer: AdamWState,
    pub epochs: Vec<EpochStats>,
}

fn check_dataset(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    if (data.h, data.w, data.c) != (cfg.image_h, cfg.image_w, cfg.channels) {
        return Err(CliError::config(format!(
            "dataset is {}x{}x{}, config expects {}x{}x{}",
            data.h, data.w, data.c, cfg.image_h, cfg.image_w, cfg.channels
        )));
    }
    if let Some((_, bad)) = data
        .records
        .iter()
        .find(|(_, label)| *label >= cfg.classes)
    {
        return Err(CliError::config(format!(
            "label {bad} out of {} classes",
            cfg.classes
        )));
    }
    Ok(())
}

/// Trains a fresh model on `data` per the config; logs per-epoch loss and
/// accuracy to the report when given.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    mut report: Option<&mut ReportWriter>,
    verbose: bool,
) -> Result<TrainResult> {
    cfg.validate()?;
    check_dataset(cfg, data)?;
    if data.is_empty() {
        return Err(CliError::config("cannot train on an empty dataset"));
    }

    let mut rng = SeededRng::new(cfg.seed);
    let mut snapshot = ModelSnapshot::init(
        cfg.vit_config(),
        cfg.dal.to_variant(),
        cfg.idx,
        &mut rng,
    )?;
    if cfg.pe_free {
        snapshot.freeze_zero_pe();
    }
    let mut optimizer = AdamWState::new(
        AdamWParams {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        },
        &snapshot.param_sizes(),
    );

    let n = data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let warmup_steps = (cfg.warmup_epochs * steps_per_epoch) as u64;
    let flags = cfg.flags();
    let hyper = cfg.hyper();
    let root = SeededRng::new(cfg.seed);

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        root.derive2(STREAM_EPOCH, epoch as u64).shuffle(&mut order);

        let (mut ce_sum, mut dal_sum, mut correct, mut seen) = (0.0, 0.0, 0usize, 0usize);
        for batch_ids in order.chunks(cfg.batch_size) {
            let iter_rng = root.derive2(STREAM_STEP, global_step);
            let lr = cosine_lr(global_step, total_steps, warmup_steps, cfg.lr, cfg.min_lr);

            // positions within the batch index the sample streams, so the
            // chunking below never changes which randomness a sample gets
            let jobs: Vec<(usize, usize)> = batch_ids.iter().cloned().enumerate().collect();
            let chunk_outs: Vec<Result<ChunkOut>> = jobs
                .par_chunks(GRAD_CHUNK)
                .map(|chunk| run_chunk(&snapshot, data, chunk, flags, &hyper, &iter_rng))
                .collect();

            snapshot.zero_grads();
            let mut acc: Vec<(String, Vec<f64>)> = Vec::new();
            for out in chunk_outs {
                let out = out?;
                ce_sum += out.ce_sum;
                dal_sum += out.dal_sum;
                correct += out.correct;
                merge_grads(&mut acc, out.grads);
            }
            seen += batch_ids.len();
            apply_grads(&mut snapshot, &acc, 1.0 / batch_ids.len() as f64);
            optimizer.params.lr = lr;
            let mut named = snapshot.named_params_mut();
            optimizer.step(&mut named)?;
            global_step += 1;
        }

        let stats = EpochStats {
            epoch,
            ce: ce_sum / seen as f64,
            dal: dal_sum / seen as f64,
            loss: ce_sum / seen as f64 + cfg.lambda * (dal_sum / seen as f64),
            train_acc: correct as f64 / seen as f64,
        };
        if let Some(r) = report.as_deref_mut() {
            r.emit(&format!("train_loss[epoch={epoch}]"), stats.loss, None)?;
            r.emit(&format!("train_acc[epoch={epoch}]"), stats.train_acc, None)?;
        }
        if verbose {
            eprintln!(
                "epoch {:>3}: loss {:.4} (ce {:.4}, dal {:.4}) acc {:.3}",
                epoch, stats.loss, stats.ce, stats.dal, stats.train_acc
            );
        }
        epochs.push(stats);
    }

    Ok(TrainResult {
        snapshot,
        optimizer,
        epochs,
    })
}

struct ChunkOut {
    ce_sum: f64,
    dal_sum: f64,
    correct: usize,
    grads: Vec<(String, Vec<f64>)>,
}

fn run_chunk(
    snapshot: &ModelSnapshot,
    data: &Dataset,
    chunk: &[(usize, usize)],
    flags: mjp_core::model::VariantFlags,
    hyper: &mjp_core::model::TrainHyper,
    iter_rng: &SeededRng,
) -> Result<ChunkOut> {
    let mut out = ChunkOut {
        ce_sum: 0.0,
        dal_sum: 0.0,
        correct: 0,
        grads: Vec::new(),
    };
    for (pos, idx) in chunk {
        let (img, label) = &data.records[*idx];
        let mut mask_rng = iter_rng.derive2(STREAM_MASK, *pos as u64);
        let mut perm_rng = iter_rng.derive2(STREAM_PERM, *pos as u64);
        let s: SampleGrads =
            sample_grads(snapshot, img, *label, flags, hyper, &mut mask_rng, &mut perm_rng)?;
        out.ce_sum += s.ce;
        out.dal_sum += s.dal;
        out.correct += (s.pred == *label) as usize;
        merge_grads(&mut out.grads, s.grads);
    }
    Ok(out)
}

/// One gamma's evaluation row: clean accuracy, distance, and consistency
/// between each image and its freshly shuffled counterpart.
#[derive(Clone, Copy, Debug)]
pub struct EvalOutcome {
    pub gamma: f64,
    pub top1: f64,
    pub shuffled_top1: f64,
    pub diff_norm: f64,
    pub diff_norm_unsquared: f64,
    pub consistency: f64,
}

/// Evaluates a snapshot over the gamma sweep. Shuffles derive from
/// `(eval_seed, gamma index, image index)`, so different checkpoints see
/// identical perturbations.
pub fn evaluate(
    snap: &ModelSnapshot,
    data: &Dataset,
    gammas: &[f64],
    mode: EvalMode,
    eval_seed: u64,
    min_block_area: usize,
) -> Result<Vec<EvalOutcome>> {
    let config = snap.config;
    if data.is_empty() {
        return Err(CliError::config("cannot evaluate on an empty dataset"));
    }
    check_against_model(&config, data)?;
    let root = SeededRng::new(eval_seed);
    let mut out = Vec::with_capacity(gammas.len());
    for (gi, &gamma) in gammas.iter().enumerate() {
        let groot = root.derive(gi as u64);
        let rows: Vec<Result<(bool, bool, f64, f64, (Vec<f64>, Vec<f64>))>> = data
            .records
            .par_iter()
            .enumerate()
            .map(|(i, (img, label))| {
                let tape = Tape::new();
                let bound = bind_model(&tape, snap);
                let patches = patchify(img, config.patch)?;
                let clean = model_forward(
                    &tape,
                    &bound,
                    &config,
                    &patches,
                    ForwardMode::Standard,
                    None,
                    None,
                    false,
                )?;
                let mut mask_rng = groot.derive2(STREAM_MASK, i as u64);
                let mut perm_rng = groot.derive2(STREAM_PERM, i as u64);
                let mask = blockwise_mask(
                    config.grid_h(),
                    config.grid_w(),
                    gamma,
                    min_block_area,
                    &mut mask_rng,
                )?;
                let (shuffled, _) = jigsaw_shuffle(&patches, &mask, &mut perm_rng)?;
                let (fmode, fmask) = match mode {
                    EvalMode::Oblivious => (ForwardMode::Oblivious, None),
                    EvalMode::Aware => (ForwardMode::MjpAware, Some(&mask)),
                };
                let pert = model_forward(
                    &tape, &bound, &config, &shuffled, fmode, fmask, None, false,
                )?;
                let la = tape.value(clean.logits);
                let lb = tape.value(pert.logits);
                let ca = tape.value(clean.cls_embed);
                let cb = tape.value(pert.cls_embed);
                Ok((
                    argmax(&la) == *label,
                    argmax(&lb) == *label,
                    diff_norm(&ca, &cb),
                    diff_norm_unsquared(&ca, &cb),
                    (la, lb),
                ))
            })
            .collect();

        let mut top1 = 0usize;
        let mut top1_shuffled = 0usize;
        let mut dn = 0.0;
        let mut dnu = 0.0;
        let mut pairs = Vec::with_capacity(data.len());
        for row in rows {
            let (ok_a, ok_b, d, du, pair) = row?;
            top1 += ok_a as usize;
            top1_shuffled += ok_b as usize;
            dn += d;
            dnu += du;
            pairs.push(pair);
        }
        let n = data.len() as f64;
        out.push(EvalOutcome {
            gamma,
            top1: top1 as f64 / n,
            shuffled_top1: top1_shuffled as f64 / n,
            diff_norm: dn / n,
            diff_norm_unsquared: dnu / n,
            consistency: consistency(&pairs),
        });
    }
    Ok(out)
}

fn check_against_model(config: &mjp_core::model::ViTConfig, data: &Dataset) -> Result<()> {
    if (data.h, data.w, data.c) != (config.image_h, config.image_w, config.channels) {
        return Err(CliError::config(format!(
            "dataset is {}x{}x{}, model expects {}x{}x{}",
            data.h, data.w, data.c, config.image_h, config.image_w, config.channels
        )));
    }
    Ok(())
}

/// Emits one evaluation row into the report, metric names keyed by gamma.
pub fn emit_eval(report: &mut ReportWriter, mode: EvalMode, row: &EvalOutcome) -> Result<()> {
    let tag = format!("[gamma={},mode={}]", row.gamma, mode.as_str());
    report.emit(&format!("top1{tag}"), row.top1, None)?;
    report.emit(&format!("shuffled_top1{tag}"), row.shuffled_top1, None)?;
    report.emit(&format!("diff_norm{tag}"), row.diff_norm, None)?;
    report.emit(
        &format!("diff_norm_unsquared{tag}"),
        row.diff_norm_unsquared,
        None,
    )?;
    report.emit(&format!("consistency{tag}"), row.consistency, None)?;
    Ok(())
}
