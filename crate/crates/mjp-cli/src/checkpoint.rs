//! Checkpoint container.
//!
//! Layout (little-endian): magic `MJPC`, version u32, config blob (u32
//! length + canonical config text), u32 parameter count, then per parameter:
//! name (u32 length + UTF-8), rank u32, dims (u32 each), f64 payload.
//! An optional optimizer section follows: flag u8; when set, step u64 and a
//! u32-counted list of (name, length u32, m f64s, v f64s).
//!
//! Save then load reproduces parameters bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use mjp_core::model::ModelSnapshot;
use mjp_core::tensor::{AdamWParams, AdamWState, Tensor};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MJPC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// The loader rebuilds the snapshot's structure from the embedded config,
/// so the pair must agree before anything hits disk.
fn check_structure(snap: &ModelSnapshot, config: &RunConfig) -> Result<()> {
    if snap.config != config.vit_config() {
        return Err(CliError::config(
            "snapshot model dimensions disagree with the config being saved",
        ));
    }
    if snap.dal.is_some() != config.dal.to_variant().is_some() {
        return Err(CliError::config(
            "snapshot DAL structure disagrees with the config being saved",
        ));
    }
    if snap.idx_table.is_some() != config.idx {
        return Err(CliError::config(
            "snapshot IDX table disagrees with the config being saved",
        ));
    }
    Ok(())
}

pub fn save_checkpoint(
    path: &Path,
    snap: &ModelSnapshot,
    config: &RunConfig,
    opt: Option<&AdamWState>,
) -> Result<()> {
    check_structure(snap, config)?;
    let file = File::create(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let p = path.display().to_string();
    let io = |e| CliError::io(p.clone(), e);

    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    let blob = config.to_canonical_string();
    w.write_all(&(blob.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(blob.as_bytes()).map_err(io)?;

    let params = snap.named_params();
    w.write_all(&(params.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, t) in &params {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())
            .map_err(io)?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }

    match opt {
        None => w.write_all(&[0u8]).map_err(io)?,
        Some(state) => {
            w.write_all(&[1u8]).map_err(io)?;
            w.write_all(&state.step.to_le_bytes()).map_err(io)?;
            let names: Vec<&str> = state.moment_names().collect();
            w.write_all(&(names.len() as u32).to_le_bytes()).map_err(io)?;
            for name in names {
                let (m, v) = state.moments_of(name).expect("listed name");
                w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
                w.write_all(name.as_bytes()).map_err(io)?;
                w.write_all(&(m.len() as u32).to_le_bytes()).map_err(io)?;
                for &x in m {
                    w.write_all(&x.to_le_bytes()).map_err(io)?;
                }
                for &x in v {
                    w.write_all(&x.to_le_bytes()).map_err(io)?;
                }
            }
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub snapshot: ModelSnapshot,
    pub config: RunConfig,
    pub optimizer: Option<AdamWState>,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let file = File::open(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let p = path.display().to_string();

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| CliError::io(p.clone(), e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CliError::format(&p, "bad magic, not an MJPC file"));
    }
    let mut u32b = [0u8; 4];
    let mut u64b = [0u8; 8];
    macro_rules! rd_u32 {
        () => {{
            r.read_exact(&mut u32b)
                .map_err(|e| CliError::io(p.clone(), e))?;
            u32::from_le_bytes(u32b) as usize
        }};
    }
    macro_rules! rd_u64 {
        () => {{
            r.read_exact(&mut u64b)
                .map_err(|e| CliError::io(p.clone(), e))?;
            u64::from_le_bytes(u64b)
        }};
    }
    let version = rd_u32!();
    if version as u32 != CHECKPOINT_VERSION {
        return Err(CliError::format(&p, format!("unsupported version {version}")));
    }
    let blob_len = rd_u32!();
    let mut blob = vec![0u8; blob_len];
    r.read_exact(&mut blob)
        .map_err(|e| CliError::io(p.clone(), e))?;
    let text = String::from_utf8(blob).map_err(|_| CliError::format(&p, "config not UTF-8"))?;
    let config = RunConfig::parse(&text)?;

    // rebuild the structural skeleton from the config, then fill by name
    let mut rng = mjp_core::SeededRng::new(config.seed);
    let mut snapshot = ModelSnapshot::init(
        config.vit_config(),
        config.dal.to_variant(),
        config.idx,
        &mut rng,
    )?;
    if config.pe_free {
        snapshot.freeze_zero_pe();
    }

    let count = rd_u32!();
    let mut loaded: Vec<(String, Tensor)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = rd_u32!();
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| CliError::io(p.clone(), e))?;
        let name =
            String::from_utf8(name).map_err(|_| CliError::format(&p, "name not UTF-8"))?;
        let rank = rd_u32!();
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(rd_u32!());
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut f64b = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut f64b)
                .map_err(|e| CliError::io(p.clone(), e))?;
            data.push(f64::from_le_bytes(f64b));
        }
        loaded.push((name, Tensor::new(shape, data)?));
    }

    {
        let mut targets = snapshot.named_params_mut();
        if targets.len() != loaded.len() {
            return Err(CliError::format(
                &p,
                format!(
                    "checkpoint has {} parameters, config implies {}",
                    loaded.len(),
                    targets.len()
                ),
            ));
        }
        for (name, tensor) in loaded {
            let slot = targets
                .iter_mut()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| CliError::format(&p, format!("unexpected parameter {name}")))?;
            if slot.1.shape() != tensor.shape() {
                return Err(CliError::format(&p, format!("shape mismatch for {name}")));
            }
            let rg = slot.1.requires_grad;
            *slot.1 = if rg { tensor.with_grad() } else { tensor };
        }
    }

    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)
        .map_err(|e| CliError::io(p.clone(), e))?;
    let optimizer = if flag[0] == 1 {
        let step = rd_u64!();
        let n = rd_u32!();
        let mut state = AdamWState::new(
            AdamWParams {
                lr: config.lr,
                weight_decay: config.weight_decay,
                beta1: config.beta1,
                beta2: config.beta2,
                eps: config.adam_eps,
            },
            &snapshot.param_sizes(),
        );
        state.step = step;
        for _ in 0..n {
            let name_len = rd_u32!();
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)
                .map_err(|e| CliError::io(p.clone(), e))?;
            let name =
                String::from_utf8(name).map_err(|_| CliError::format(&p, "name not UTF-8"))?;
            let len = rd_u32!();
            let mut read_vec = |len: usize| -> Result<Vec<f64>> {
                let mut out = Vec::with_capacity(len);
                let mut f64b = [0u8; 8];
                for _ in 0..len {
                    r.read_exact(&mut f64b)
                        .map_err(|e| CliError::io(p.clone(), e))?;
                    out.push(f64::from_le_bytes(f64b));
                }
                Ok(out)
            };
            let m = read_vec(len)?;
            let v = read_vec(len)?;
            state.set_moments(&name, m, v)?;
        }
        Some(state)
    } else {
        None
    };

    Ok(LoadedCheckpoint {
        snapshot,
        config,
        optimizer,
    })
}
