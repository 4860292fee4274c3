//! Block geometry and mask reduction.
//!
//! A convolution with kernel `k` and stride `s` is tiled overlap-save style:
//! input blocks of size `b` are read every `b - (k - s)` pixels, so adjacent
//! blocks share a `k - s` halo, while each block's `(b - k) / s + 1` output
//! pixels are written to disjoint, abutting regions.
//!
//! Block indices are grid coordinates. The input window of block `(by, bx)`
//! starts at `grid_origin + (by, bx) * in_stride`; its output write region
//! starts at `(by, bx) * out_block`.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{ConvParams, Padding};
use crate::error::{Error, Result};
use crate::norm::PoolMode;

/// Per-batch binary computation mask shared across channels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    n: usize,
    h: usize,
    w: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(n: usize, h: usize, w: usize, bits: Vec<u8>) -> Result<Self> {
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::config(format!("mask dims must be positive, got {n}x{h}x{w}")));
        }
        if bits.len() != n * h * w {
            return Err(Error::shape("mask length", n * h * w, bits.len()));
        }
        if let Some(pos) = bits.iter().position(|&b| b > 1) {
            return Err(Error::config(format!(
                "mask value {} at position {pos} is not binary",
                bits[pos]
            )));
        }
        Ok(Self { n, h, w, bits })
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            h,
            w,
            bits: vec![0; n * h * w],
        }
    }

    pub fn ones(n: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            h,
            w,
            bits: vec![1; n * h * w],
        }
    }

    pub fn from_fn(n: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(n * h * w);
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    bits.push(f(i, y, x) as u8);
                }
            }
        }
        Self { n, h, w, bits }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, i: usize, y: usize, x: usize) -> bool {
        self.bits[(i * self.h + y) * self.w + x] != 0
    }

    pub fn set(&mut self, i: usize, y: usize, x: usize, on: bool) {
        self.bits[(i * self.h + y) * self.w + x] = on as u8;
    }

    pub fn active_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    /// Fraction of inactive pixels.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.active_count() as f64 / self.bits.len() as f64
    }
}

/// Tiling geometry for one convolution over one input extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockSpec {
    pub input_hw: (usize, usize),
    pub output_hw: (usize, usize),
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub block: (usize, usize),
    pub overlap: (usize, usize),
    pub in_stride: (usize, usize),
    pub out_block: (usize, usize),
    pub grid_origin: (isize, isize),
    pub grid: (usize, usize),
}

/// Derives the block geometry for `conv` applied to an `input_hw` extent
/// using input blocks of size `block`.
pub fn compute_block_spec(
    input_hw: (usize, usize),
    conv: &ConvParams,
    block: (usize, usize),
) -> Result<BlockSpec> {
    conv.validate()?;
    let (kh, kw) = conv.kernel;
    let (sh, sw) = conv.stride;
    let (bh, bw) = block;
    if bh < kh || bw < kw {
        return Err(Error::config(format!(
            "block {bh}x{bw} smaller than kernel {kh}x{kw}"
        )));
    }
    if (bh - kh) % sh != 0 || (bw - kw) % sw != 0 {
        return Err(Error::config(format!(
            "block {bh}x{bw} minus kernel {kh}x{kw} is not a multiple of stride {sh}x{sw}; \
             output blocks would not abut"
        )));
    }
    let overlap = (kh - sh, kw - sw);
    let in_stride = (bh - overlap.0, bw - overlap.1);
    let out_block = ((bh - kh) / sh + 1, (bw - kw) / sw + 1);
    let output_hw = conv.output_hw(input_hw.0, input_hw.1)?;
    let (ph, pw) = conv.pad_before();
    let spec = BlockSpec {
        input_hw,
        output_hw,
        kernel: conv.kernel,
        stride: conv.stride,
        block,
        overlap,
        in_stride,
        out_block,
        grid_origin: (-(ph as isize), -(pw as isize)),
        grid: (
            output_hw.0.div_ceil(out_block.0),
            output_hw.1.div_ceil(out_block.1),
        ),
    };
    spec.check_exact()?;
    Ok(spec)
}

impl BlockSpec {
    /// Integer check that output blocks partition the output extent and that
    /// consecutive input windows advance by exactly one output block.
    pub fn check_exact(&self) -> Result<()> {
        for axis in 0..2 {
            let pick = |p: (usize, usize)| if axis == 0 { p.0 } else { p.1 };
            let (ob, st, s, g, out) = (
                pick(self.out_block),
                pick(self.in_stride),
                pick(self.stride),
                pick(self.grid),
                pick(self.output_hw),
            );
            if ob * s != st {
                return Err(Error::GeometryMismatch(format!(
                    "axis {axis}: in_stride {st} != out_block {ob} * stride {s}"
                )));
            }
            if g * ob < out || (g > 0 && (g - 1) * ob >= out) {
                return Err(Error::GeometryMismatch(format!(
                    "axis {axis}: grid {g} of out_block {ob} does not tile output extent {out}"
                )));
            }
        }
        Ok(())
    }

    pub fn block_count(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Top-left input pixel of block `(by, bx)`'s window (may be negative).
    #[inline]
    pub fn window_origin(&self, by: usize, bx: usize) -> (isize, isize) {
        (
            self.grid_origin.0 + (by * self.in_stride.0) as isize,
            self.grid_origin.1 + (bx * self.in_stride.1) as isize,
        )
    }

    /// Input window of block `(by, bx)`, clipped to the input extent.
    pub fn input_window(&self, by: usize, bx: usize) -> (Range<usize>, Range<usize>) {
        let (y0, x0) = self.window_origin(by, bx);
        (
            clip(y0, self.block.0, self.input_hw.0),
            clip(x0, self.block.1, self.input_hw.1),
        )
    }

    /// Output rows/columns written by block `(by, bx)`, clipped to the output.
    pub fn write_region(&self, by: usize, bx: usize) -> (Range<usize>, Range<usize>) {
        let y0 = by * self.out_block.0;
        let x0 = bx * self.out_block.1;
        (
            y0.min(self.output_hw.0)..(y0 + self.out_block.0).min(self.output_hw.0),
            x0.min(self.output_hw.1)..(x0 + self.out_block.1).min(self.output_hw.1),
        )
    }

    /// Offset of the owned input region inside each window, per axis.
    fn owned_offset(&self) -> (usize, usize) {
        (
            (self.kernel.0 / 2).min(self.overlap.0),
            (self.kernel.1 / 2).min(self.overlap.1),
        )
    }

    /// The `in_stride`-sized slice of block `(by, bx)`'s input window that the
    /// block is responsible for. Owned regions partition the input plane and
    /// each lies inside its own window.
    pub fn owned_input_region(&self, by: usize, bx: usize) -> (Range<usize>, Range<usize>) {
        let (y0, x0) = self.window_origin(by, bx);
        let (ay, ax) = self.owned_offset();
        (
            clip(y0 + ay as isize, self.in_stride.0, self.input_hw.0),
            clip(x0 + ax as isize, self.in_stride.1, self.input_hw.1),
        )
    }

    /// Block owning input pixel `(y, x)`, if any block does.
    pub fn owner_of(&self, y: usize, x: usize) -> Option<(usize, usize)> {
        let (ay, ax) = self.owned_offset();
        let ry = y as isize - self.grid_origin.0 - ay as isize;
        let rx = x as isize - self.grid_origin.1 - ax as isize;
        if ry < 0 || rx < 0 {
            return None;
        }
        let by = ry as usize / self.in_stride.0;
        let bx = rx as usize / self.in_stride.1;
        (by < self.grid.0 && bx < self.grid.1).then_some((by, bx))
    }
}

fn clip(start: isize, len: usize, extent: usize) -> Range<usize> {
    let lo = start.max(0) as usize;
    let hi = (start + len as isize).clamp(0, extent as isize) as usize;
    lo.min(hi)..hi
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockIndex {
    pub n: usize,
    pub by: usize,
    pub bx: usize,
}

/// Active blocks, unique and in ascending `(n, by, bx)` order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct BlockIndexList {
    entries: Vec<BlockIndex>,
}

impl BlockIndexList {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Sorts and deduplicates `entries`, then checks them against the grid.
    pub fn new(mut entries: Vec<BlockIndex>, spec: &BlockSpec, batch: usize) -> Result<Self> {
        entries.sort_unstable();
        entries.dedup();
        let list = Self { entries };
        list.check_bounds(spec, batch)?;
        Ok(list)
    }

    /// Every block of the grid for every batch element.
    pub fn full(spec: &BlockSpec, batch: usize) -> Self {
        let mut entries = Vec::with_capacity(batch * spec.block_count());
        for n in 0..batch {
            for by in 0..spec.grid.0 {
                for bx in 0..spec.grid.1 {
                    entries.push(BlockIndex { n, by, bx });
                }
            }
        }
        Self { entries }
    }

    pub fn check_bounds(&self, spec: &BlockSpec, batch: usize) -> Result<()> {
        for e in &self.entries {
            if e.n >= batch || e.by >= spec.grid.0 || e.bx >= spec.grid.1 {
                return Err(Error::IndexOutOfGrid {
                    n: e.n,
                    by: e.by,
                    bx: e.bx,
                    gy: spec.grid.0,
                    gx: spec.grid.1,
                    batch,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BlockIndex] {
        &self.entries
    }

    pub fn iter(&self) -> std::slice::Iter<'_, BlockIndex> {
        self.entries.iter()
    }

    pub fn contains(&self, idx: BlockIndex) -> bool {
        self.entries.binary_search(&idx).is_ok()
    }

    /// Flattened `[B, 3]` view.
    pub fn to_triples(&self) -> Vec<[usize; 3]> {
        self.entries.iter().map(|e| [e.n, e.by, e.bx]).collect()
    }
}

/// Default average-pool threshold: one active pixel per block window, which
/// makes `Avg` agree with `Max`.
pub fn default_threshold(spec: &BlockSpec) -> f64 {
    1.0 / (spec.block.0 * spec.block.1) as f64
}

/// Reduces a pixel mask to the list of active blocks.
///
/// Pools each block's input window (zero outside the mask) and thresholds:
/// `Max` keeps a block if any pixel is set, `Avg` if the window mean reaches
/// `threshold`. Windows are counted in O(1) from a per-image summed-area
/// table, so pooling and index emission happen in one pass per block row.
pub fn reduce_mask(
    m: &BinaryMask,
    spec: &BlockSpec,
    pool: PoolMode,
    threshold: f64,
) -> Result<BlockIndexList> {
    if (m.h, m.w) != spec.input_hw {
        return Err(Error::GeometryMismatch(format!(
            "mask is {}x{} but block spec expects {}x{}",
            m.h, m.w, spec.input_hw.0, spec.input_hw.1
        )));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::config(format!("threshold {threshold} outside (0, 1]")));
    }
    let w = m.w;
    let area = (spec.block.0 * spec.block.1) as f64;
    let sats: Vec<Vec<u32>> = (0..m.n).map(|i| summed_area(m, i)).collect();
    let (gy, gx) = spec.grid;
    let rows: Vec<Vec<BlockIndex>> = (0..m.n * gy)
        .into_par_iter()
        .map(|row| {
            let (n, by) = (row / gy, row % gy);
            let sat = &sats[n];
            (0..gx)
                .filter_map(|bx| {
                    let (ys, xs) = spec.input_window(by, bx);
                    let count = window_count(sat, w, ys, xs);
                    let on = match pool {
                        PoolMode::Max => count > 0,
                        PoolMode::Avg => count as f64 >= threshold * area - 1e-9,
                    };
                    on.then_some(BlockIndex { n, by, bx })
                })
                .collect()
        })
        .collect();
    Ok(BlockIndexList {
        entries: rows.into_iter().flatten().collect(),
    })
}

fn summed_area(m: &BinaryMask, i: usize) -> Vec<u32> {
    let (h, w) = (m.h, m.w);
    let mut sat = vec![0u32; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0u32;
        for x in 0..w {
            row += m.get(i, y, x) as u32;
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    sat
}

fn window_count(sat: &[u32], w: usize, ys: Range<usize>, xs: Range<usize>) -> u32 {
    if ys.is_empty() || xs.is_empty() {
        return 0;
    }
    let s = w + 1;
    sat[ys.end * s + xs.end] + sat[ys.start * s + xs.start]
        - sat[ys.start * s + xs.end]
        - sat[ys.end * s + xs.start]
}

/// Max-pools a mask with window = stride = `factor`. Partial edge windows are
/// kept, so the result is `ceil(h / factor) x ceil(w / factor)`.
pub fn downsample_mask(m: &BinaryMask, factor: usize) -> Result<BinaryMask> {
    if factor == 0 {
        return Err(Error::config("downsample factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(m.clone());
    }
    let (oh, ow) = (m.h.div_ceil(factor), m.w.div_ceil(factor));
    let mut out = BinaryMask::zeros(m.n, oh, ow);
    for i in 0..m.n {
        for y in 0..m.h {
            for x in 0..m.w {
                if m.get(i, y, x) {
                    out.set(i, y / factor, x / factor, true);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub active_pixels: usize,
    /// Active pixels inside an active block's owned region.
    pub covered_pixels: usize,
    /// Active pixels with no output location (valid-padding borders).
    pub outside_domain: usize,
    pub block_count: usize,
    /// Output pixels written by the active blocks.
    pub write_area: usize,
    /// Gathered input pixels, halo included.
    pub block_area: usize,
}

impl CoverageReport {
    pub fn covered_fraction(&self) -> f64 {
        let eligible = self.active_pixels - self.outside_domain;
        if eligible == 0 {
            1.0
        } else {
            self.covered_pixels as f64 / eligible as f64
        }
    }
}

/// Checks that every active pixel is owned by an active block and that the
/// active blocks' output write regions are pairwise disjoint.
pub fn coverage_check(m: &BinaryMask, spec: &BlockSpec, idx: &BlockIndexList) -> Result<CoverageReport> {
    if (m.h, m.w) != spec.input_hw {
        return Err(Error::GeometryMismatch(format!(
            "mask is {}x{} but block spec expects {}x{}",
            m.h, m.w, spec.input_hw.0, spec.input_hw.1
        )));
    }
    idx.check_bounds(spec, m.n)?;
    let (oh, ow) = spec.output_hw;
    let mut writer: Vec<Option<BlockIndex>> = vec![None; m.n * oh * ow];
    let mut write_area = 0;
    for &b in idx.iter() {
        let (ys, xs) = spec.write_region(b.by, b.bx);
        for y in ys {
            for x in xs.clone() {
                let slot = &mut writer[(b.n * oh + y) * ow + x];
                if let Some(prev) = slot {
                    return Err(Error::Coverage(format!(
                        "blocks {prev:?} and {b:?} both write output pixel ({}, {y}, {x})",
                        b.n
                    )));
                }
                *slot = Some(b);
                write_area += 1;
            }
        }
    }
    let mut report = CoverageReport {
        active_pixels: 0,
        covered_pixels: 0,
        outside_domain: 0,
        block_count: idx.len(),
        write_area,
        block_area: idx.len() * spec.block.0 * spec.block.1,
    };
    for i in 0..m.n {
        for y in 0..m.h {
            for x in 0..m.w {
                if !m.get(i, y, x) {
                    continue;
                }
                report.active_pixels += 1;
                match spec.owner_of(y, x) {
                    None => report.outside_domain += 1,
                    Some((by, bx)) => {
                        if idx.contains(BlockIndex { n: i, by, bx }) {
                            report.covered_pixels += 1;
                        } else {
                            return Err(Error::Coverage(format!(
                                "active pixel ({i}, {y}, {x}) is not covered; owner block ({by}, {bx}) is inactive"
                            )));
                        }
                    }
                }
            }
        }
    }
    Ok(report)
}

/// Convenience for the common `Max` reduction with a stride-1 same-padded
/// kernel of the given size.
pub fn same_spec(input_hw: (usize, usize), kernel: usize, block: (usize, usize)) -> Result<BlockSpec> {
    let conv = ConvParams::new((kernel, kernel), (1, 1), Padding::Same, 1)?;
    compute_block_spec(input_hw, &conv, block)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn conv(k: usize, s: usize, padding: Padding) -> ConvParams {
        ConvParams::new((k, k), (s, s), padding, 1).unwrap()
    }

    #[test]
    fn toy_example_five_three_two() {
        let spec = compute_block_spec((9, 9), &conv(3, 2, Padding::Valid), (5, 5)).unwrap();
        assert_eq!(spec.overlap, (1, 1));
        assert_eq!(spec.in_stride, (4, 4));
        assert_eq!(spec.out_block, (2, 2));
    }

    #[test]
    fn stride_one_block_five() {
        let spec = compute_block_spec((9, 9), &conv(3, 1, Padding::Valid), (5, 5)).unwrap();
        assert_eq!(spec.overlap, (2, 2));
        assert_eq!(spec.in_stride, (3, 3));
        assert_eq!(spec.out_block, (3, 3));
    }

    #[test]
    fn minimal_block() {
        let spec = compute_block_spec((6, 6), &conv(3, 1, Padding::Same), (3, 3)).unwrap();
        assert_eq!(spec.out_block, (1, 1));
        assert_eq!(spec.in_stride, (1, 1));
        assert_eq!(spec.grid, (6, 6));
        assert_eq!(spec.grid_origin, (-1, -1));
    }

    #[test]
    fn rejects_block_smaller_than_kernel() {
        assert!(compute_block_spec((9, 9), &conv(3, 1, Padding::Valid), (2, 5)).is_err());
    }

    #[test]
    fn rejects_misaligned_stride() {
        assert!(compute_block_spec((9, 9), &conv(3, 2, Padding::Valid), (6, 6)).is_err());
    }

    #[test]
    fn empty_mask_reduces_to_nothing() {
        let spec = same_spec((8, 8), 1, (4, 4)).unwrap();
        let idx = reduce_mask(&BinaryMask::zeros(1, 8, 8), &spec, PoolMode::Max, 1.0).unwrap();
        assert!(idx.is_empty());
    }

    #[test]
    fn full_mask_gives_full_grid() {
        let spec = same_spec((8, 8), 1, (4, 4)).unwrap();
        let idx = reduce_mask(&BinaryMask::ones(1, 8, 8), &spec, PoolMode::Max, 1.0).unwrap();
        assert_eq!(idx.to_triples(), vec![[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1]]);
    }

    #[test]
    fn single_pixel_selects_one_block() {
        let spec = same_spec((8, 8), 1, (4, 4)).unwrap();
        let mut m = BinaryMask::zeros(1, 8, 8);
        m.set(0, 5, 5, true);
        let idx = reduce_mask(&m, &spec, PoolMode::Max, 1.0).unwrap();
        assert_eq!(idx.to_triples(), vec![[0, 1, 1]]);
    }

    #[test]
    fn avg_threshold() {
        let spec = same_spec((8, 8), 1, (4, 4)).unwrap();
        let mut m = BinaryMask::zeros(1, 8, 8);
        for y in 0..2 {
            for x in 0..4 {
                m.set(0, y, x, true);
            }
        }
        m.set(0, 6, 6, true);
        let half = reduce_mask(&m, &spec, PoolMode::Avg, 0.5).unwrap();
        assert_eq!(half.to_triples(), vec![[0, 0, 0]]);
        let any = reduce_mask(&m, &spec, PoolMode::Avg, default_threshold(&spec)).unwrap();
        let max = reduce_mask(&m, &spec, PoolMode::Max, 1.0).unwrap();
        assert_eq!(any, max);
        assert!(reduce_mask(&m, &spec, PoolMode::Avg, 0.0).is_err());
    }

    #[test]
    fn reduce_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..60 {
            let (h, w) = (rng.gen_range(3..20), rng.gen_range(3..20));
            let k = [1, 3, 5][rng.gen_range(0..3)];
            let b = rng.gen_range(k..k + 6);
            let padding = if rng.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
            if padding == Padding::Valid && (h < k || w < k) {
                continue;
            }
            let spec = compute_block_spec((h, w), &conv(k, 1, padding), (b, b)).unwrap();
            let p = rng.gen_range(0.0..0.3);
            let m = BinaryMask::from_fn(2, h, w, |_, _, _| rng.gen_bool(p));
            let idx = reduce_mask(&m, &spec, PoolMode::Max, 1.0).unwrap();
            let mut brute = Vec::new();
            for n in 0..2 {
                for by in 0..spec.grid.0 {
                    for bx in 0..spec.grid.1 {
                        let (y0, x0) = spec.window_origin(by, bx);
                        let mut hit = false;
                        for dy in 0..b as isize {
                            for dx in 0..b as isize {
                                let (y, x) = (y0 + dy, x0 + dx);
                                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                                    hit |= m.get(n, y as usize, x as usize);
                                }
                            }
                        }
                        if hit {
                            brute.push([n, by, bx]);
                        }
                    }
                }
            }
            assert_eq!(idx.to_triples(), brute);
        }
    }

    #[test]
    fn downsample_identity_and_any() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = BinaryMask::from_fn(1, 16, 16, |_, _, _| rng.gen_bool(0.05));
        assert_eq!(downsample_mask(&m, 1).unwrap(), m);
        let tiny = BinaryMask::new(1, 2, 2, vec![1, 0, 0, 0]).unwrap();
        assert_eq!(downsample_mask(&tiny, 2).unwrap().bits(), &[1]);
        let d = downsample_mask(&m, 4).unwrap();
        assert_eq!(d.dims(), (1, 4, 4));
        for cy in 0..4 {
            for cx in 0..4 {
                let any = (0..4).any(|dy| (0..4).any(|dx| m.get(0, cy * 4 + dy, cx * 4 + dx)));
                assert_eq!(d.get(0, cy, cx), any);
            }
        }
        let odd = downsample_mask(&BinaryMask::ones(1, 5, 7), 2).unwrap();
        assert_eq!(odd.dims(), (1, 3, 4));
        assert!(downsample_mask(&m, 0).is_err());
    }

    #[test]
    fn coverage_full_and_empty() {
        let spec = same_spec((12, 12), 3, (6, 6)).unwrap();
        let full = BinaryMask::ones(1, 12, 12);
        let idx = reduce_mask(&full, &spec, PoolMode::Max, 1.0).unwrap();
        let r = coverage_check(&full, &spec, &idx).unwrap();
        assert_eq!(r.covered_fraction(), 1.0);
        assert_eq!(r.write_area, 144);
        let empty = BinaryMask::zeros(1, 12, 12);
        let idx = reduce_mask(&empty, &spec, PoolMode::Max, 1.0).unwrap();
        let r = coverage_check(&empty, &spec, &idx).unwrap();
        assert_eq!(r.block_area, 0);
    }

    #[test]
    fn coverage_reports_uncovered_pixel() {
        let spec = same_spec((8, 8), 1, (4, 4)).unwrap();
        let m = BinaryMask::ones(1, 8, 8);
        let idx = BlockIndexList::new(vec![BlockIndex { n: 0, by: 0, bx: 0 }], &spec, 1).unwrap();
        let err = coverage_check(&m, &spec, &idx).unwrap_err();
        assert!(err.to_string().contains("(0, 0, 4)"), "{err}");
    }

    #[test]
    fn index_list_rejects_out_of_grid() {
        let spec = same_spec((8, 8), 1, (4, 4)).unwrap();
        let bad = BlockIndexList::new(vec![BlockIndex { n: 0, by: 2, bx: 0 }], &spec, 1);
        assert!(matches!(bad, Err(Error::IndexOutOfGrid { .. })));
    }

    #[test]
    fn owned_regions_partition_and_sit_inside_windows() {
        for (k, s, b, padding) in [
            (3, 1, 5, Padding::Same),
            (3, 2, 5, Padding::Valid),
            (2, 2, 4, Padding::Same),
            (5, 1, 9, Padding::Valid),
            (1, 1, 4, Padding::Valid),
        ] {
            let (h, w) = (17, 13);
            let spec = compute_block_spec((h, w), &conv(k, s, padding), (b, b)).unwrap();
            let mut count = vec![0u8; h * w];
            for by in 0..spec.grid.0 {
                for bx in 0..spec.grid.1 {
                    let (ys, xs) = spec.owned_input_region(by, bx);
                    let (wy, wx) = spec.input_window(by, bx);
                    assert!(ys.is_empty() || (wy.start <= ys.start && ys.end <= wy.end));
                    assert!(xs.is_empty() || (wx.start <= xs.start && xs.end <= wx.end));
                    for y in ys {
                        for x in xs.clone() {
                            count[y * w + x] += 1;
                            assert_eq!(spec.owner_of(y, x), Some((by, bx)));
                        }
                    }
                }
            }
            assert!(count.iter().all(|&c| c <= 1));
        }
    }
}
