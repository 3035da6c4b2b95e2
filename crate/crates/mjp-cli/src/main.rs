//! `mjp`: train, probe and attack a toy vision transformer with
//! masked-jigsaw-puzzle position embeddings.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use mjp_cli::checkpoint::{load_checkpoint, save_checkpoint};
use mjp_cli::config::{EvalMode, RunConfig};
use mjp_cli::dataset::{generate, Dataset, DatasetKind};
use mjp_cli::error::{CliError, Result};
use mjp_cli::ppm::{read_ppm, write_ppm, write_tensor_dump};
use mjp_cli::report::{export_csv, ReportWriter};
use mjp_cli::train::{emit_eval, evaluate, train};
use mjp_core::analysis::{position_probe, spectral_summary};
use mjp_core::attack::{evaluate_attack_keeping, Scenario};
use mjp_core::jigsaw::{blockwise_mask, jigsaw_shuffle, patchify, unpatchify};
use mjp_core::SeededRng;

#[derive(Parser)]
#[command(name = "mjp", version, about = "masked jigsaw puzzle position-embedding lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config file (key = value lines); defaults apply otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override (also overrides the config's seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[command(flatten)]
        common: Common,
        /// layout-classes | texture-classes
        #[arg(long)]
        kind: String,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training dataset (MJPD).
        #[arg(long)]
        data: PathBuf,
        /// Optional held-out dataset evaluated after training.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines report path (appended).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Ablation row A..J (overrides the config's variant flags).
        #[arg(long)]
        variant: Option<String>,
        /// Training-time mask ratio override.
        #[arg(long)]
        gamma: Option<f64>,
        /// DAL regressor override: ln | nln | pca | none.
        #[arg(long)]
        dal: Option<String>,
        /// Print per-epoch progress.
        #[arg(long)]
        verbose: bool,
    },
    /// Evaluate a checkpoint: Top-1, embedding distance, consistency.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated evaluation mask ratios (defaults to the config's).
        #[arg(long)]
        gamma: Option<String>,
        /// oblivious | aware
        #[arg(long)]
        eval_mode: Option<String>,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also export per-metric CSVs next to the report.
        #[arg(long)]
        csv: bool,
    },
    /// Gradient-inversion attack over a dataset slice.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// a | b | c
        #[arg(long)]
        scenario: String,
        /// Mask ratio used to build the shuffled inputs (scenarios b/c).
        #[arg(long)]
        gamma: Option<f64>,
        /// Feed shuffled patches with the original position table.
        #[arg(long)]
        no_unk: bool,
        /// Number of images from the head of the dataset.
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Output directory for recovered images.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write recovered images as PPM.
        #[arg(long)]
        ppm: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Spectral summary and position probe of a checkpoint's PE table.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for CSV curves.
        #[arg(long)]
        out: PathBuf,
        /// Skip column centering before the SVD.
        #[arg(long)]
        no_center: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Shuffle one image and write the result plus the permutation.
    ShuffleDemo {
        #[command(flatten)]
        common: Common,
        /// Input PPM image.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Or: dataset file plus --index.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        patch: Option<usize>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common, base: RunConfig) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::io(path.display().to_string(), e))?;
            RunConfig::parse_onto(base, &text)?
        }
        None => base,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn open_report(
    path: &Option<PathBuf>,
    verb: &str,
    cfg: &RunConfig,
) -> Result<Option<ReportWriter>> {
    match path {
        None => Ok(None),
        Some(p) => {
            let run_id = format!("{verb}-{}-s{}", cfg.hash(), cfg.seed);
            Ok(Some(ReportWriter::append(
                p,
                run_id,
                cfg.hash(),
                cfg.seed,
                None,
            )?))
        }
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData {
            common,
            kind,
            count,
            out,
        } => {
            let cfg = load_config(&common, RunConfig::default())?;
            let kind = DatasetKind::parse(&kind)?;
            let ds = generate(
                kind,
                count,
                cfg.image_h,
                cfg.image_w,
                cfg.channels,
                cfg.seed,
            )?;
            ds.save(&out)?;
            println!(
                "wrote {} images ({}x{}x{}) to {}",
                ds.len(),
                ds.h,
                ds.w,
                ds.c,
                out.display()
            );
            Ok(())
        }

        Command::Train {
            common,
            data,
            eval_data,
            out,
            report,
            variant,
            gamma,
            dal,
            verbose,
        } => {
            let mut cfg = load_config(&common, RunConfig::default())?;
            if let Some(v) = &variant {
                cfg.apply_variant(v)?;
            }
            if let Some(g) = gamma {
                cfg.gamma = g;
            }
            if let Some(d) = &dal {
                cfg.dal = mjp_cli::DalChoice::parse(d)?;
            }
            cfg.validate()?;
            let train_set = Dataset::load(&data)?;
            let mut writer = open_report(&report, "train", &cfg)?;
            let result = train(&cfg, &train_set, writer.as_mut(), verbose)?;
            save_checkpoint(&out, &result.snapshot, &cfg, Some(&result.optimizer))?;
            println!(
                "trained {} epochs on {} images; checkpoint at {}",
                cfg.epochs,
                train_set.len(),
                out.display()
            );
            if let Some(eval_path) = eval_data {
                let eval_set = Dataset::load(&eval_path)?;
                let rows = evaluate(
                    &result.snapshot,
                    &eval_set,
                    &[cfg.eval_gamma],
                    cfg.eval_mode,
                    cfg.eval_seed,
                    cfg.min_block_area,
                )?;
                for row in &rows {
                    if let Some(w) = writer.as_mut() {
                        emit_eval(w, cfg.eval_mode, row)?;
                    }
                    println!(
                        "eval gamma {:.2}: top1 {:.4} consistency {:.4} diff_norm {:.4}",
                        row.gamma, row.top1, row.consistency, row.diff_norm
                    );
                }
            }
            if let Some(w) = writer.as_mut() {
                w.flush()?;
            }
            Ok(())
        }

        Command::Eval {
            common,
            checkpoint,
            data,
            gamma,
            eval_mode,
            report,
            csv,
        } => {
            let loaded = load_checkpoint(&checkpoint)?;
            let mut cfg = loaded.config.clone();
            if let Some(path) = &common.config {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::io(path.display().to_string(), e))?;
                cfg = RunConfig::parse_onto(cfg, &text)?;
            }
            if let Some(seed) = common.seed {
                cfg.eval_seed = seed;
            }
            let mode = match eval_mode {
                Some(s) => EvalMode::parse(&s)?,
                None => cfg.eval_mode,
            };
            let gammas: Vec<f64> = match gamma {
                None => vec![cfg.eval_gamma],
                Some(list) => list
                    .split(',')
                    .map(|t| {
                        t.trim()
                            .parse::<f64>()
                            .map_err(|_| CliError::config(format!("bad gamma {t:?}")))
                    })
                    .collect::<Result<_>>()?,
            };
            let eval_set = Dataset::load(&data)?;
            let rows = evaluate(
                &loaded.snapshot,
                &eval_set,
                &gammas,
                mode,
                cfg.eval_seed,
                cfg.min_block_area,
            )?;
            let mut writer = open_report(&report, "eval", &cfg)?;
            for row in &rows {
                if let Some(w) = writer.as_mut() {
                    emit_eval(w, mode, row)?;
                }
                println!(
                    "gamma {:.2} ({} eval): top1 {:.4} shuffled_top1 {:.4} consistency {:.4} diff_norm {:.4} ({:.4} unsquared)",
                    row.gamma, mode.as_str(), row.top1, row.shuffled_top1, row.consistency,
                    row.diff_norm, row.diff_norm_unsquared
                );
            }
            if let Some(w) = writer.as_mut() {
                w.flush()?;
            }
            if csv {
                if let Some(rp) = &report {
                    let dir = rp.parent().unwrap_or(Path::new(".")).join("csv");
                    let files = export_csv(rp, &dir)?;
                    println!("exported {} CSV files to {}", files.len(), dir.display());
                }
            }
            Ok(())
        }

        Command::Attack {
            common,
            checkpoint,
            data,
            scenario,
            gamma,
            no_unk,
            count,
            out,
            ppm,
            report,
        } => {
            let loaded = load_checkpoint(&checkpoint)?;
            let mut cfg = loaded.config.clone();
            if let Some(seed) = common.seed {
                cfg.eval_seed = seed;
            }
            let scenario = Scenario::parse(&scenario)?;
            let gamma = gamma.unwrap_or(cfg.eval_gamma);
            let ds = Dataset::load(&data)?;
            let images: Vec<_> = ds.records.iter().take(count).cloned().collect();
            if images.is_empty() {
                return Err(CliError::config("no images to attack"));
            }
            let rep = evaluate_attack_keeping(
                &loaded.snapshot,
                &images,
                scenario,
                gamma,
                no_unk,
                cfg.min_block_area,
                cfg.eval_seed,
                out.is_some(),
            )?;
            println!(
                "scenario {:?} gamma {:.2} no_unk {}: MSE {:.6} (std {:.6}), SSIM {:.4}, FFT-cos {:.4}, PSNR {:.2} dB ({} infinite), {} ill-conditioned",
                rep.scenario, rep.gamma, rep.no_unk, rep.mse_mean, rep.mse_std, rep.ssim_mean,
                rep.fft2d_cos_mean, rep.psnr_mean_db, rep.psnr_infinite, rep.ill_conditioned_count
            );
            if let Some(dir) = &out {
                std::fs::create_dir_all(dir)
                    .map_err(|e| CliError::io(dir.display().to_string(), e))?;
                for (i, img) in rep.recoveries.iter().enumerate() {
                    let base = dir.join(format!("recovered_{i:03}"));
                    write_tensor_dump(
                        &base.with_extension("bin"),
                        &[img.h, img.w, img.c],
                        &img.pixels,
                    )?;
                    if ppm {
                        write_ppm(&base.with_extension("ppm"), &img.clamped())?;
                    }
                }
                println!("recovered images in {}", dir.display());
            }
            if let Some(rp) = &report {
                let mut w = open_report(&Some(rp.clone()), "attack", &cfg)?.unwrap();
                let tag = format!(
                    "[scenario={:?},gamma={},no_unk={}]",
                    rep.scenario, rep.gamma, rep.no_unk
                );
                w.emit(&format!("attack_mse{tag}"), rep.mse_mean, Some(rep.mse_std))?;
                w.emit(&format!("attack_ssim{tag}"), rep.ssim_mean, Some(rep.ssim_std))?;
                w.emit(
                    &format!("attack_fft2d_cos{tag}"),
                    rep.fft2d_cos_mean,
                    Some(rep.fft2d_cos_std),
                )?;
                w.emit(&format!("attack_psnr_db{tag}"), rep.psnr_mean_db, None)?;
                w.emit(
                    &format!("attack_psnr_infinite{tag}"),
                    rep.psnr_infinite as f64,
                    None,
                )?;
                w.emit(
                    &format!("attack_ill_conditioned{tag}"),
                    rep.ill_conditioned_count as f64,
                    None,
                )?;
                w.flush()?;
            }
            Ok(())
        }

        Command::Analyze {
            common,
            checkpoint,
            out,
            no_center,
            report,
        } => {
            let loaded = load_checkpoint(&checkpoint)?;
            let mut cfg = loaded.config.clone();
            if let Some(seed) = common.seed {
                cfg.eval_seed = seed;
            }
            let table = &loaded.snapshot.embed.pos_table;
            let (rows, cols) = (table.rows() - 1, table.cols());
            // class row excluded: it carries no grid position
            let pe = &table.data()[cols..];
            let summary = spectral_summary(rows, cols, pe, !no_center)?;

            std::fs::create_dir_all(&out)
                .map_err(|e| CliError::io(out.display().to_string(), e))?;
            let spectrum_path = out.join("spectrum.csv");
            let mut text = String::from("dim,singular_value,explained_ratio,cumulative_energy\n");
            for i in 0..summary.singular_values.len() {
                text.push_str(&format!(
                    "{},{},{},{}\n",
                    i + 1,
                    summary.singular_values[i],
                    summary.explained_ratio[i],
                    summary.cumulative_energy[i]
                ));
            }
            std::fs::write(&spectrum_path, text)
                .map_err(|e| CliError::io(spectrum_path.display().to_string(), e))?;

            let grid_k = loaded.snapshot.config.grid_h();
            let mut probe_line = String::new();
            let probe = if grid_k == loaded.snapshot.config.grid_w() {
                let p = position_probe(rows, cols, pe, grid_k, cfg.eval_seed)?;
                probe_line = format!(
                    "probe 1-D MAE {:.4} +/- {:.4}; 2-D MAE {:.4} +/- {:.4} over {} folds",
                    p.mae_1d_mean, p.mae_1d_std, p.mae_2d_mean, p.mae_2d_std, p.folds
                );
                let probe_path = out.join("probe.csv");
                let mut t = String::from("fold,mae_1d,mae_2d\n");
                for i in 0..p.folds {
                    t.push_str(&format!("{},{},{}\n", i, p.mae_1d[i], p.mae_2d[i]));
                }
                std::fs::write(&probe_path, t)
                    .map_err(|e| CliError::io(probe_path.display().to_string(), e))?;
                Some(p)
            } else {
                None
            };

            println!(
                "spectrum: EV@1 {:.4}, EV@2 {:.4}, EV@3 {:.4} (centered: {})",
                summary.cumulative_energy.first().copied().unwrap_or(0.0),
                summary.cumulative_energy.get(1).copied().unwrap_or(1.0),
                summary.cumulative_energy.get(2).copied().unwrap_or(1.0),
                summary.centered
            );
            if !probe_line.is_empty() {
                println!("{probe_line}");
            }

            if let Some(rp) = &report {
                let mut w = open_report(&Some(rp.clone()), "analyze", &cfg)?.unwrap();
                for dims in 1..=summary.cumulative_energy.len().min(8) {
                    w.emit(
                        &format!("pe_explained_variance[dims={dims}]"),
                        summary.cumulative_energy[dims - 1],
                        None,
                    )?;
                }
                if let Some(p) = &probe {
                    w.emit("pe_probe_mae_1d", p.mae_1d_mean, Some(p.mae_1d_std))?;
                    w.emit("pe_probe_mae_2d", p.mae_2d_mean, Some(p.mae_2d_std))?;
                }
                w.flush()?;
            }
            println!("analysis written to {}", out.display());
            Ok(())
        }

        Command::ShuffleDemo {
            common,
            image,
            data,
            index,
            patch,
            gamma,
            out,
        } => {
            let cfg = load_config(&common, RunConfig::default())?;
            let patch = patch.unwrap_or(cfg.patch);
            let gamma = gamma.unwrap_or(cfg.gamma);
            let img = match (&image, &data) {
                (Some(p), _) => read_ppm(p)?,
                (None, Some(d)) => {
                    let ds = Dataset::load(d)?;
                    ds.records
                        .get(index)
                        .ok_or_else(|| {
                            CliError::config(format!("index {index} out of {}", ds.len()))
                        })?
                        .0
                        .clone()
                }
                (None, None) => {
                    return Err(CliError::config("need --image or --data"));
                }
            };
            let patches = patchify(&img, patch)?;
            let (gh, gw) = (img.h / patch, img.w / patch);
            let mut rng = SeededRng::new(cfg.seed);
            let mask = blockwise_mask(gh, gw, gamma, cfg.min_block_area, &mut rng)?;
            let (shuffled, perm) = jigsaw_shuffle(&patches, &mask, &mut rng)?;
            let shuffled_img = unpatchify(&shuffled, img.h, img.w, img.c, patch)?;

            std::fs::create_dir_all(&out)
                .map_err(|e| CliError::io(out.display().to_string(), e))?;
            write_ppm(&out.join("original.ppm"), &img)?;
            write_ppm(&out.join("shuffled.ppm"), &shuffled_img)?;
            let mut lines = String::new();
            for i in 0..perm.len() {
                lines.push_str(&format!("{} -> {}\n", i, perm.dest(i)));
            }
            std::fs::write(out.join("permutation.txt"), lines)
                .map_err(|e| CliError::io(out.display().to_string(), e))?;
            println!(
                "shuffled {} of {} patches (realized {:.3}); outputs in {}",
                mask.masked_count(),
                mask.n_cells(),
                mask.realized_fraction(),
                out.display()
            );
            Ok(())
        }
    }
}
