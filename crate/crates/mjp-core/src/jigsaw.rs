//! Patch extraction and the block-wise random jigsaw shuffle.
//!
//! An input image is cut into a sequence of flattened P x P patches. A
//! block-wise sampler then marks a fraction gamma of the patch grid, and the
//! marked positions are shuffled by a uniform random permutation of the
//! masked set; unmasked patches never move. `unpatchify` is the exact
//! inverse of `patchify` and is used when reassembling recovered patches
//! into an image.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// H x W x C image, pixels row-major channel-last in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub pixels: Vec<f64>,
}

impl ImageTensor {
    pub fn new(h: usize, w: usize, c: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != h * w * c {
            return Err(Error::contract(format!(
                "image buffer length {} does not match {h}x{w}x{c}",
                pixels.len()
            )));
        }
        Ok(ImageTensor { h, w, c, pixels })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        ImageTensor {
            h,
            w,
            c,
            pixels: vec![0.0; h * w * c],
        }
    }

    pub fn get(&self, i: usize, j: usize, ch: usize) -> f64 {
        self.pixels[(i * self.w + j) * self.c + ch]
    }

    pub fn set(&mut self, i: usize, j: usize, ch: usize, v: f64) {
        self.pixels[(i * self.w + j) * self.c + ch] = v;
    }

    /// Copy with every pixel clamped to [0, 1].
    pub fn clamped(&self) -> ImageTensor {
        ImageTensor {
            h: self.h,
            w: self.w,
            c: self.c,
            pixels: self.pixels.iter().map(|p| p.clamp(0.0, 1.0)).collect(),
        }
    }
}

/// N rows of flattened patches, each P*P*C wide.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub n: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl PatchSequence {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.width..(k + 1) * self.width]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.width], self.data.clone()).unwrap()
    }
}

/// Binary mask over the patch grid with its requested mask ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    grid_h: usize,
    grid_w: usize,
    cells: Vec<bool>,
    pub gamma_target: f64,
}

impl BinaryMask {
    pub fn zeros(grid_h: usize, grid_w: usize) -> Self {
        BinaryMask {
            grid_h,
            grid_w,
            cells: vec![false; grid_h * grid_w],
            gamma_target: 0.0,
        }
    }

    /// Mask with exactly the given cells set, mainly for tests and ablations.
    pub fn from_indices(grid_h: usize, grid_w: usize, masked: &[usize]) -> Result<Self> {
        let mut m = BinaryMask::zeros(grid_h, grid_w);
        for &i in masked {
            if i >= m.cells.len() {
                return Err(Error::contract(format!(
                    "mask index {i} out of grid {grid_h}x{grid_w}"
                )));
            }
            m.cells[i] = true;
        }
        m.gamma_target = m.realized_fraction();
        Ok(m)
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn is_masked(&self, idx: usize) -> bool {
        self.cells[idx]
    }

    pub fn masked_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.cells.len()).filter(|&i| self.cells[i]).collect()
    }

    /// Fraction of cells actually masked (can overshoot `gamma_target` by at
    /// most the final sampled block).
    pub fn realized_fraction(&self) -> f64 {
        self.masked_count() as f64 / self.cells.len() as f64
    }
}

/// Permutation over patch indices; identity outside the masked set.
#[derive(Clone, Debug, PartialEq)]
pub struct PermutationMap {
    forward: Vec<usize>,
}

impl PermutationMap {
    pub fn identity(n: usize) -> Self {
        PermutationMap {
            forward: (0..n).collect(),
        }
    }

    pub fn from_forward(forward: Vec<usize>) -> Result<Self> {
        let n = forward.len();
        let mut seen = vec![false; n];
        for &t in &forward {
            if t >= n || seen[t] {
                return Err(Error::contract("not a permutation"));
            }
            seen[t] = true;
        }
        Ok(PermutationMap { forward })
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// Destination of patch `i`.
    pub fn dest(&self, i: usize) -> usize {
        self.forward[i]
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(i, &t)| i == t)
    }

    pub fn inverse(&self) -> PermutationMap {
        let mut inv = vec![0; self.forward.len()];
        for (i, &t) in self.forward.iter().enumerate() {
            inv[t] = i;
        }
        PermutationMap { forward: inv }
    }

    /// `self` then `other`.
    pub fn compose(&self, other: &PermutationMap) -> PermutationMap {
        PermutationMap {
            forward: self.forward.iter().map(|&t| other.forward[t]).collect(),
        }
    }

    /// Moves row `i` of `patches` to row `dest(i)` of the output.
    pub fn apply_to_patches(&self, patches: &PatchSequence) -> PatchSequence {
        assert_eq!(self.forward.len(), patches.n, "permutation length mismatch");
        let mut out = vec![0.0; patches.data.len()];
        let w = patches.width;
        for (i, &t) in self.forward.iter().enumerate() {
            out[t * w..(t + 1) * w].copy_from_slice(patches.row(i));
        }
        PatchSequence {
            n: patches.n,
            width: w,
            data: out,
        }
    }
}

/// Splits an image into flattened patches: row k covers the patch at grid
/// position (k div (W/P), k mod (W/P)), channel-last within the patch.
pub fn patchify(img: &ImageTensor, patch: usize) -> Result<PatchSequence> {
    if patch == 0 || img.h % patch != 0 || img.w % patch != 0 {
        return Err(Error::dimension(
            "patchify",
            &[img.h, img.w, img.c],
            &[patch],
        ));
    }
    let (gh, gw) = (img.h / patch, img.w / patch);
    let width = patch * patch * img.c;
    let n = gh * gw;
    let mut data = vec![0.0; n * width];
    for gi in 0..gh {
        for gj in 0..gw {
            let k = gi * gw + gj;
            let out = &mut data[k * width..(k + 1) * width];
            for pi in 0..patch {
                for pj in 0..patch {
                    for ch in 0..img.c {
                        out[(pi * patch + pj) * img.c + ch] =
                            img.get(gi * patch + pi, gj * patch + pj, ch);
                    }
                }
            }
        }
    }
    Ok(PatchSequence { n, width, data })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(
    patches: &PatchSequence,
    h: usize,
    w: usize,
    c: usize,
    patch: usize,
) -> Result<ImageTensor> {
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::dimension("unpatchify", &[h, w, c], &[patch]));
    }
    let (gh, gw) = (h / patch, w / patch);
    let width = patch * patch * c;
    if patches.n != gh * gw || patches.width != width {
        return Err(Error::dimension(
            "unpatchify",
            &[patches.n, patches.width],
            &[gh * gw, width],
        ));
    }
    let mut img = ImageTensor::zeros(h, w, c);
    for gi in 0..gh {
        for gj in 0..gw {
            let row = patches.row(gi * gw + gj);
            for pi in 0..patch {
                for pj in 0..patch {
                    for ch in 0..c {
                        img.set(
                            gi * patch + pi,
                            gj * patch + pj,
                            ch,
                            row[(pi * patch + pj) * c + ch],
                        );
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Aspect-ratio range of sampled blocks.
const ASPECT_LO: f64 = 0.3;

/// Grows a mask by sampling rectangular blocks (area in
/// `[min_block_area, remaining]`, aspect ratio in [0.3, 1/0.3], uniform
/// placement) until at least `gamma * N` cells are set. The final block is
/// kept whole, so the realized fraction can overshoot by at most that block.
pub fn blockwise_mask(
    grid_h: usize,
    grid_w: usize,
    gamma: f64,
    min_block_area: usize,
    rng: &mut SeededRng,
) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::contract(format!("gamma {gamma} outside [0, 1]")));
    }
    let n = grid_h * grid_w;
    let mut mask = BinaryMask::zeros(grid_h, grid_w);
    mask.gamma_target = gamma;
    if n == 0 {
        return Ok(mask);
    }
    let target = gamma * n as f64;
    let min_block = min_block_area.clamp(1, n);
    let mut count = 0usize;
    while (count as f64) < target {
        let remaining = target - count as f64;
        let hi = (remaining.ceil() as usize).max(min_block);
        let area = rng.int_in(min_block, hi) as f64;
        let aspect = rng.uniform_in(ASPECT_LO.ln(), (1.0 / ASPECT_LO).ln()).exp();
        let bh = ((area * aspect).sqrt().round() as usize).clamp(1, grid_h);
        let bw = ((area / aspect).sqrt().round() as usize).clamp(1, grid_w);
        let top = rng.below(grid_h - bh + 1);
        let left = rng.below(grid_w - bw + 1);
        for i in top..top + bh {
            for j in left..left + bw {
                let idx = i * grid_w + j;
                if !mask.cells[idx] {
                    mask.cells[idx] = true;
                    count += 1;
                }
            }
        }
    }
    Ok(mask)
}

/// Uniformly shuffles the masked rows of `patches` (unmasked rows stay put).
/// Returns the shuffled sequence and the permutation that produced it:
/// output row i is input row `perm.inverse().dest(i)`.
pub fn jigsaw_shuffle(
    patches: &PatchSequence,
    mask: &BinaryMask,
    rng: &mut SeededRng,
) -> Result<(PatchSequence, PermutationMap)> {
    if mask.n_cells() != patches.n {
        return Err(Error::dimension(
            "jigsaw_shuffle",
            &[patches.n],
            &[mask.grid_h, mask.grid_w],
        ));
    }
    let masked = mask.masked_indices();
    let mut dests = masked.clone();
    rng.shuffle(&mut dests);
    let mut forward: Vec<usize> = (0..patches.n).collect();
    for (src, dst) in masked.iter().zip(&dests) {
        forward[*src] = *dst;
    }
    let perm = PermutationMap { forward };
    Ok((perm.apply_to_patches(patches), perm))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counting_image(h: usize, w: usize, c: usize) -> ImageTensor {
        let pixels = (0..h * w * c).map(|i| i as f64).collect();
        ImageTensor::new(h, w, c, pixels).unwrap()
    }

    #[test]
    fn patchify_single_patch() {
        let img = counting_image(2, 2, 1);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.n, 1);
        assert_eq!(p.row(0), &[0.0, 1.0, 2.0, 3.0]);
    }

    /// Index-arithmetic oracle: with pixel value i*W+j, row 0 of a P=2
    /// patchify of a 4x4 image must hold the top-left 2x2 block.
    #[test]
    fn patchify_row_layout() {
        let img = counting_image(4, 4, 1);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.n, 4);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(2), &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let img = counting_image(5, 4, 1);
        assert!(patchify(&img, 2).is_err());
    }

    #[test]
    fn round_trip_is_exact() {
        let img = counting_image(8, 12, 3);
        let p = patchify(&img, 4).unwrap();
        let back = unpatchify(&p, 8, 12, 3, 4).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn gamma_zero_is_all_clear() {
        let mut rng = SeededRng::new(1);
        let m = blockwise_mask(8, 8, 0.0, 2, &mut rng).unwrap();
        assert_eq!(m.masked_count(), 0);
    }

    #[test]
    fn gamma_one_fills_the_grid() {
        for seed in 0..20 {
            let mut rng = SeededRng::new(seed);
            let m = blockwise_mask(8, 8, 1.0, 2, &mut rng).unwrap();
            assert_eq!(m.masked_count(), 64);
        }
    }

    #[test]
    fn gamma_out_of_range_rejected() {
        let mut rng = SeededRng::new(1);
        assert!(blockwise_mask(8, 8, 1.5, 2, &mut rng).is_err());
        assert!(blockwise_mask(8, 8, -0.1, 2, &mut rng).is_err());
    }

    /// Monte-Carlo oracle over seeds: the mean realized fraction sits in
    /// [gamma, gamma + min_block/N + 0.03] and never undershoots.
    #[test]
    fn mask_fraction_statistics() {
        let (gh, gw, n) = (14, 14, 196.0);
        let min_block = 4;
        let gamma = 0.15;
        let mut sum = 0.0;
        for seed in 0..1000 {
            let mut rng = SeededRng::new(seed);
            let m = blockwise_mask(gh, gw, gamma, min_block, &mut rng).unwrap();
            let frac = m.realized_fraction();
            assert!(frac >= gamma, "undershoot at seed {seed}: {frac}");
            sum += frac;
        }
        let mean = sum / 1000.0;
        assert!(mean >= gamma);
        assert!(mean <= gamma + min_block as f64 / n + 0.03, "mean {mean}");
    }

    #[test]
    fn shuffle_with_empty_mask_is_identity() {
        let img = counting_image(8, 8, 1);
        let p = patchify(&img, 2).unwrap();
        let mask = BinaryMask::zeros(4, 4);
        let mut rng = SeededRng::new(3);
        let (shuffled, perm) = jigsaw_shuffle(&p, &mask, &mut rng).unwrap();
        assert!(perm.is_identity());
        assert_eq!(shuffled, p);
    }

    #[test]
    fn shuffle_with_single_masked_cell_is_identity() {
        let img = counting_image(8, 8, 1);
        let p = patchify(&img, 2).unwrap();
        let mask = BinaryMask::from_indices(4, 4, &[5]).unwrap();
        let mut rng = SeededRng::new(3);
        let (shuffled, perm) = jigsaw_shuffle(&p, &mask, &mut rng).unwrap();
        assert!(perm.is_identity());
        assert_eq!(shuffled, p);
    }

    #[test]
    fn shuffle_fixes_unmasked_rows_and_permutes_masked() {
        let img = counting_image(8, 8, 1);
        let p = patchify(&img, 2).unwrap();
        let masked = [1usize, 4, 7, 11, 13];
        let mask = BinaryMask::from_indices(4, 4, &masked).unwrap();
        let mut rng = SeededRng::new(9);
        let (shuffled, perm) = jigsaw_shuffle(&p, &mask, &mut rng).unwrap();
        for i in 0..16 {
            if !mask.is_masked(i) {
                assert_eq!(perm.dest(i), i);
                assert_eq!(shuffled.row(i), p.row(i));
            } else {
                assert!(masked.contains(&perm.dest(i)));
            }
        }
        // inverse composes to identity
        assert!(perm.compose(&perm.inverse()).is_identity());
        // shuffled row i is input row inv(i)
        let inv = perm.inverse();
        for i in 0..16 {
            assert_eq!(shuffled.row(i), p.row(inv.dest(i)));
        }
    }

    /// Each of the 24 permutations of a 4-element masked set should appear
    /// with frequency 1/24 within a 3-sigma binomial band over 10^4 seeds.
    #[test]
    fn shuffle_is_uniform_over_permutations() {
        let img = counting_image(8, 8, 1);
        let p = patchify(&img, 2).unwrap();
        let masked = [2usize, 3, 8, 9];
        let mask = BinaryMask::from_indices(4, 4, &masked).unwrap();
        let trials = 10_000;
        let mut counts = std::collections::HashMap::new();
        for seed in 0..trials {
            let mut rng = SeededRng::new(seed);
            let (_, perm) = jigsaw_shuffle(&p, &mask, &mut rng).unwrap();
            let key: Vec<usize> = masked.iter().map(|&i| perm.dest(i)).collect();
            *counts.entry(key).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 24);
        let pexp = 1.0 / 24.0;
        let sigma = (trials as f64 * pexp * (1.0 - pexp)).sqrt();
        for (_, &c) in counts.iter() {
            let dev = (c as f64 - trials as f64 * pexp).abs();
            assert!(dev <= 3.0 * sigma, "count {c} deviates beyond 3 sigma");
        }
    }

    /// Consecutive iterations with stepping streams draw fresh permutations.
    #[test]
    fn stepping_streams_redraw_permutations() {
        let img = counting_image(8, 8, 1);
        let p = patchify(&img, 2).unwrap();
        let mask = BinaryMask::from_indices(4, 4, &[0, 1, 2, 3, 4, 5]).unwrap();
        let root = SeededRng::new(77);
        let mut identical_pairs = 0;
        let mut prev: Option<PermutationMap> = None;
        for iter in 0..200u64 {
            let mut rng = root.derive2(1, iter);
            let (_, perm) = jigsaw_shuffle(&p, &mask, &mut rng).unwrap();
            if let Some(pv) = &prev {
                if pv == &perm {
                    identical_pairs += 1;
                }
            }
            prev = Some(perm);
        }
        // P(identical adjacent) = 1/720; seeing 4+ in 199 pairs is wildly off
        assert!(identical_pairs < 4);
    }

    #[test]
    fn masked_fraction_never_undershoots_small_gammas() {
        for &gamma in &[0.03, 0.15, 0.27] {
            for seed in 0..200 {
                let mut rng = SeededRng::new(seed);
                let m = blockwise_mask(14, 14, gamma, 4, &mut rng).unwrap();
                assert!(m.realized_fraction() >= gamma);
            }
        }
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn patchify_round_trip(
            gh in 1usize..5,
            gw in 1usize..5,
            patch in 1usize..5,
            c in 1usize..4,
            seed in any::<u64>(),
        ) {
            let (h, w) = (gh * patch, gw * patch);
            let mut rng = SeededRng::new(seed);
            let pixels = (0..h * w * c).map(|_| rng.uniform()).collect();
            let img = ImageTensor::new(h, w, c, pixels).unwrap();
            let back = unpatchify(&patchify(&img, patch).unwrap(), h, w, c, patch).unwrap();
            prop_assert_eq!(back, img);
        }

        #[test]
        fn jigsaw_preserves_row_multiset(seed in any::<u64>(), gamma in 0.0f64..1.0) {
            let mut rng = SeededRng::new(seed);
            let pixels = (0..12 * 12).map(|_| rng.uniform()).collect();
            let img = ImageTensor::new(12, 12, 1, pixels).unwrap();
            let p = patchify(&img, 3).unwrap();
            let mask = blockwise_mask(4, 4, gamma, 2, &mut rng).unwrap();
            let (shuffled, perm) = jigsaw_shuffle(&p, &mask, &mut rng).unwrap();

            let mut a: Vec<Vec<u64>> = (0..p.n)
                .map(|k| p.row(k).iter().map(|x| x.to_bits()).collect())
                .collect();
            let mut b: Vec<Vec<u64>> = (0..p.n)
                .map(|k| shuffled.row(k).iter().map(|x| x.to_bits()).collect())
                .collect();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
            prop_assert!(perm.compose(&perm.inverse()).is_identity());
        }
    }
}
