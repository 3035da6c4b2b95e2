//! Synthetic datasets and the binary container they live in.
//!
//! Container layout (little-endian): magic `MJPD`, version u32, count u32,
//! H u32, W u32, C u32, then `count` records of (label u32, H*W*C f32
//! pixels in [0, 1]).
//!
//! Two generators:
//! - `layout-classes`: the label is the quadrant holding a small bright
//!   block, so the class depends on the global arrangement of patches and
//!   shuffling destroys evidence;
//! - `texture-classes`: the label is a per-patch micro-pattern repeated
//!   across the whole image, so any patch permutation preserves it — the
//!   shuffle-invariant control set.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use mjp_core::jigsaw::ImageTensor;
use mjp_core::SeededRng;

use crate::error::{CliError, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"MJPD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub records: Vec<(ImageTensor, usize)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let io = |e| CliError::io(path.display().to_string(), e);
        w.write_all(DATASET_MAGIC).map_err(io)?;
        w.write_all(&DATASET_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())
            .map_err(io)?;
        for v in [self.h, self.w, self.c] {
            w.write_all(&(v as u32).to_le_bytes()).map_err(io)?;
        }
        for (img, label) in &self.records {
            w.write_all(&(*label as u32).to_le_bytes()).map_err(io)?;
            for &px in &img.pixels {
                w.write_all(&(px as f32).to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let file = File::open(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
        let mut r = BufReader::new(file);
        let p = path.display().to_string();
        let io = |e| CliError::io(p.clone(), e);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != DATASET_MAGIC {
            return Err(CliError::format(&p, "bad magic, not an MJPD file"));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
            r.read_exact(&mut u32buf)
                .map_err(|e| CliError::io(p.clone(), e))?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let version = read_u32(&mut r)?;
        if version != DATASET_VERSION {
            return Err(CliError::format(&p, format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let h = read_u32(&mut r)? as usize;
        let w = read_u32(&mut r)? as usize;
        let c = read_u32(&mut r)? as usize;
        let pixels_per = h * w * c;
        let mut records = Vec::with_capacity(count);
        let mut fbuf = vec![0u8; pixels_per * 4];
        for i in 0..count {
            let label = read_u32(&mut r)? as usize;
            r.read_exact(&mut fbuf)
                .map_err(|_| CliError::format(&p, format!("truncated record {i} of {count}")))?;
            let mut pixels = Vec::with_capacity(pixels_per);
            for chunk in fbuf.chunks_exact(4) {
                let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
                if !(0.0..=1.0).contains(&v) {
                    return Err(CliError::format(&p, format!("pixel {v} outside [0,1]")));
                }
                pixels.push(v);
            }
            records.push((ImageTensor::new(h, w, c, pixels)?, label));
        }
        // a trailing byte means the declared count undershoots the payload
        let mut probe = [0u8; 1];
        if r.read(&mut probe).map_err(io)? != 0 {
            return Err(CliError::format(&p, "trailing bytes after declared count"));
        }
        Ok(Dataset { h, w, c, records })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    LayoutClasses,
    TextureClasses,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "layout-classes" => Ok(DatasetKind::LayoutClasses),
            "texture-classes" => Ok(DatasetKind::TextureClasses),
            other => Err(CliError::config(format!("unknown dataset kind {other:?}"))),
        }
    }
}

/// Bright-block side length in pixels for layout classes.
const LAYOUT_BLOCK_PX: usize = 8;
const LAYOUT_BG_LO: f64 = 0.0;
const LAYOUT_BG_HI: f64 = 0.35;
const LAYOUT_FG_LO: f64 = 0.7;
const LAYOUT_FG_HI: f64 = 1.0;

/// Layout classes: one bright LAYOUT_BLOCK_PX square placed uniformly at
/// random inside one quadrant; the label is that quadrant (0 = top-left,
/// 1 = top-right, 2 = bottom-left, 3 = bottom-right).
pub fn generate_layout(count: usize, h: usize, w: usize, c: usize, seed: u64) -> Result<Dataset> {
    if h < 2 * LAYOUT_BLOCK_PX || w < 2 * LAYOUT_BLOCK_PX {
        return Err(CliError::config(format!(
            "layout classes need at least {0}x{0} quadrants",
            LAYOUT_BLOCK_PX
        )));
    }
    let mut rng = SeededRng::new(seed);
    let (qh, qw) = (h / 2, w / 2);
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let label = rng.below(4);
        let mut img = ImageTensor::zeros(h, w, c);
        for px in img.pixels.iter_mut() {
            *px = rng.uniform_in(LAYOUT_BG_LO, LAYOUT_BG_HI);
        }
        let (qi, qj) = (label / 2, label % 2);
        let top = qi * qh + rng.below(qh - LAYOUT_BLOCK_PX + 1);
        let left = qj * qw + rng.below(qw - LAYOUT_BLOCK_PX + 1);
        for i in top..top + LAYOUT_BLOCK_PX {
            for j in left..left + LAYOUT_BLOCK_PX {
                for ch in 0..c {
                    img.set(i, j, ch, rng.uniform_in(LAYOUT_FG_LO, LAYOUT_FG_HI));
                }
            }
        }
        records.push((img, label));
    }
    Ok(Dataset { h, w, c, records })
}

/// Independent oracle for layout labels: the quadrant with the largest mean
/// intensity.
pub fn layout_label_oracle(img: &ImageTensor) -> usize {
    let (qh, qw) = (img.h / 2, img.w / 2);
    let mut best = (0usize, f64::NEG_INFINITY);
    for q in 0..4 {
        let (qi, qj) = (q / 2, q % 2);
        let mut sum = 0.0;
        for i in 0..qh {
            for j in 0..qw {
                for ch in 0..img.c {
                    sum += img.get(qi * qh + i, qj * qw + j, ch);
                }
            }
        }
        if sum > best.1 {
            best = (q, sum);
        }
    }
    best.0
}

const TEXTURE_NOISE: f64 = 0.08;

/// Texture classes: every patch of the image carries the same micro-pattern
/// (0 vertical stripes, 1 horizontal stripes, 2 checkerboard, 3 flat), so
/// the label survives any patch permutation.
pub fn generate_texture(count: usize, h: usize, w: usize, c: usize, seed: u64) -> Result<Dataset> {
    let mut rng = SeededRng::new(seed);
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let label = rng.below(4);
        let mut img = ImageTensor::zeros(h, w, c);
        for i in 0..h {
            for j in 0..w {
                let base = match label {
                    0 => {
                        if j % 2 == 0 {
                            0.85
                        } else {
                            0.15
                        }
                    }
                    1 => {
                        if i % 2 == 0 {
                            0.85
                        } else {
                            0.15
                        }
                    }
                    2 => {
                        if (i + j) % 2 == 0 {
                            0.85
                        } else {
                            0.15
                        }
                    }
                    _ => 0.5,
                };
                for ch in 0..c {
                    let v = (base + rng.uniform_in(-TEXTURE_NOISE, TEXTURE_NOISE)).clamp(0.0, 1.0);
                    img.set(i, j, ch, v);
                }
            }
        }
        records.push((img, label));
    }
    Ok(Dataset { h, w, c, records })
}

/// Independent oracle for texture labels from per-axis variation energy.
pub fn texture_label_oracle(img: &ImageTensor) -> usize {
    let mut ei = 0.0; // variation along rows (vertical change)
    let mut ej = 0.0; // variation along columns (horizontal change)
    for i in 0..img.h {
        for j in 0..img.w {
            if i + 1 < img.h {
                ei += (img.get(i + 1, j, 0) - img.get(i, j, 0)).abs();
            }
            if j + 1 < img.w {
                ej += (img.get(i, j + 1, 0) - img.get(i, j, 0)).abs();
            }
        }
    }
    ei /= ((img.h - 1) * img.w) as f64;
    ej /= (img.h * (img.w - 1)) as f64;
    // stripe flips reach |0.85 - 0.15| = 0.7; noise stays near 2*0.08
    let threshold = 0.35;
    match (ei > threshold, ej > threshold) {
        (false, true) => 0,
        (true, false) => 1,
        (true, true) => 2,
        (false, false) => 3,
    }
}

pub fn generate(
    kind: DatasetKind,
    count: usize,
    h: usize,
    w: usize,
    c: usize,
    seed: u64,
) -> Result<Dataset> {
    match kind {
        DatasetKind::LayoutClasses => generate_layout(count, h, w, c, seed),
        DatasetKind::TextureClasses => generate_texture(count, h, w, c, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mjp_core::jigsaw::{patchify, unpatchify, PermutationMap};

    #[test]
    fn layout_labels_match_the_quadrant_oracle() {
        let ds = generate_layout(200, 32, 32, 3, 7).unwrap();
        for (img, label) in &ds.records {
            assert_eq!(layout_label_oracle(img), *label);
        }
    }

    #[test]
    fn texture_labels_survive_full_patch_permutation() {
        let ds = generate_texture(50, 32, 32, 3, 8).unwrap();
        let mut rng = SeededRng::new(9);
        for (img, label) in &ds.records {
            assert_eq!(texture_label_oracle(img), *label);
            let patches = patchify(img, 4).unwrap();
            let mut order: Vec<usize> = (0..patches.n).collect();
            rng.shuffle(&mut order);
            let perm = PermutationMap::from_forward(order).unwrap();
            let shuffled = perm.apply_to_patches(&patches);
            let back = unpatchify(&shuffled, 32, 32, 3, 4).unwrap();
            assert_eq!(texture_label_oracle(&back), *label);
        }
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.mjpd");
        let ds = Dataset {
            h: 32,
            w: 32,
            c: 3,
            records: vec![],
        };
        ds.save(&path).unwrap();
        let loaded = Dataset::load(&path).unwrap();
        assert_eq!(loaded.len(), 0);
        assert_eq!((loaded.h, loaded.w, loaded.c), (32, 32, 3));
    }

    #[test]
    fn dataset_round_trip_preserves_f32_quantized_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.mjpd");
        let ds = generate_layout(5, 16, 16, 3, 3).unwrap();
        ds.save(&path).unwrap();
        let loaded = Dataset::load(&path).unwrap();
        assert_eq!(loaded.len(), 5);
        for ((a, la), (b, lb)) in ds.records.iter().zip(&loaded.records) {
            assert_eq!(la, lb);
            for (x, y) in a.pixels.iter().zip(&b.pixels) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        // and a second save of the loaded set is byte-identical
        let path2 = dir.path().join("ds2.mjpd");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mjpd");
        let ds = generate_layout(3, 16, 16, 1, 1).unwrap();
        ds.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(Dataset::load(&path).is_err());
    }
}
