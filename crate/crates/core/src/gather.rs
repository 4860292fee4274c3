//! Block gather and scatter between dense tensors and stacked block tensors.
//!
//! `gather` reads each active block's (overlapping) input window, zero-filling
//! reads outside the tensor. `scatter` writes each block's output to its
//! disjoint write region, clipped to the destination. Both accept either
//! memory layout on either side; the fused transpose variants are the
//! mixed-layout cases.

use rayon::prelude::*;

use crate::error::{ensure_dim, Error, Result};
use crate::tensor::{Dims4, Element, Layout, Tensor4D};
use crate::tiling::{BlockIndexList, BlockSpec};

/// Active blocks stacked along the batch axis, `(B, h, w, c)`, together with
/// the geometry and indices they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct GatheredBlocks<T = f32> {
    tensor: Tensor4D<T>,
    spec: BlockSpec,
    indices: BlockIndexList,
}

impl<T: Element> GatheredBlocks<T> {
    /// Wraps a block tensor with the geometry it was gathered with. The block spatial extent must
    /// be either `spec.block` or `spec.out_block`.
    pub fn new(tensor: Tensor4D<T>, spec: BlockSpec, indices: BlockIndexList) -> Result<Self> {
        let d = tensor.dims();
        ensure_dim("block count", indices.len(), d.n)?;
        if (d.h, d.w) != spec.block && (d.h, d.w) != spec.out_block {
            return Err(Error::GeometryMismatch(format!(
                "block tensor is {}x{}, spec has input block {:?} and output block {:?}",
                d.h, d.w, spec.block, spec.out_block
            )));
        }
        Ok(Self {
            tensor,
            spec,
            indices,
        })
    }

    /// Same provenance, new contents (e.g. after a per-block convolution).
    pub fn with_tensor(&self, tensor: Tensor4D<T>) -> Result<Self> {
        Self::new(tensor, self.spec, self.indices.clone())
    }

    pub fn tensor(&self) -> &Tensor4D<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor4D<T> {
        self.tensor
    }

    pub fn spec(&self) -> &BlockSpec {
        &self.spec
    }

    pub fn indices(&self) -> &BlockIndexList {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn transpose_layout(&self) -> Self {
        Self {
            tensor: self.tensor.transpose_layout(),
            spec: self.spec,
            indices: self.indices.clone(),
        }
    }
}

fn check_source<T: Element>(x: &Tensor4D<T>, idx: &BlockIndexList, spec: &BlockSpec) -> Result<()> {
    let d = x.dims();
    ensure_dim("input h", spec.input_hw.0, d.h)?;
    ensure_dim("input w", spec.input_hw.1, d.w)?;
    idx.check_bounds(spec, d.n)
}

/// Copies windows of `src` into a `(B, bh, bw, c)` tensor in `out_layout`.
/// Window `j` starts at `origin(j)`; reads outside `src` produce zero.
fn gather_windows<T: Element>(
    src: &Tensor4D<T>,
    idx: &BlockIndexList,
    (bh, bw): (usize, usize),
    origin: impl Fn(usize, usize) -> (isize, isize) + Sync,
    out_layout: Layout,
) -> Tensor4D<T> {
    let d = src.dims();
    let c = d.c;
    let od = Dims4::new(idx.len(), bh, bw, c);
    let mut out = Tensor4D::zeros(od, out_layout);
    let per_block = bh * bw * c;
    if per_block == 0 || idx.is_empty() {
        return out;
    }
    let entries = idx.entries();
    let sdata = src.data();
    out.data_mut()
        .par_chunks_mut(per_block)
        .zip(entries.par_iter())
        .for_each(|(blk, e)| {
            let (y0, x0) = origin(e.by, e.bx);
            let xlo = x0.max(0) as usize;
            let xhi = (x0 + bw as isize).clamp(0, d.w as isize) as usize;
            for r in 0..bh {
                let iy = y0 + r as isize;
                if iy < 0 || iy as usize >= d.h || xlo >= xhi {
                    continue;
                }
                let iy = iy as usize;
                let c0 = (xlo as isize - x0) as usize;
                match (src.layout(), out_layout) {
                    (Layout::ChannelsLast, Layout::ChannelsLast) => {
                        let s = ((e.n * d.h + iy) * d.w + xlo) * c;
                        let len = (xhi - xlo) * c;
                        let o = (r * bw + c0) * c;
                        blk[o..o + len].copy_from_slice(&sdata[s..s + len]);
                    }
                    (sl, ol) => {
                        for (j, ix) in (xlo..xhi).enumerate() {
                            for k in 0..c {
                                let s = match sl {
                                    Layout::ChannelsLast => ((e.n * d.h + iy) * d.w + ix) * c + k,
                                    Layout::ChannelsFirst => ((e.n * c + k) * d.h + iy) * d.w + ix,
                                };
                                let o = match ol {
                                    Layout::ChannelsLast => (r * bw + c0 + j) * c + k,
                                    Layout::ChannelsFirst => (k * bh + r) * bw + c0 + j,
                                };
                                blk[o] = sdata[s];
                            }
                        }
                    }
                }
            }
        });
    out
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum WriteMode {
    Overwrite,
    Accumulate,
}

/// Writes block `j` of `blocks` at `origin(j)` into `dst`, clipped to `dst`.
/// Blocks are visited in index order, which fixes the accumulation order when
/// windows overlap.
fn write_windows<T: Element>(
    blocks: &Tensor4D<T>,
    idx: &BlockIndexList,
    order: impl Iterator<Item = usize>,
    origin: impl Fn(usize, usize) -> (isize, isize),
    dst: &mut Tensor4D<T>,
    mode: WriteMode,
) {
    let bd = blocks.dims();
    let d = dst.dims();
    let (bh, bw, c) = (bd.h, bd.w, bd.c);
    let (bl, dl) = (blocks.layout(), dst.layout());
    let entries = idx.entries();
    let bdata = blocks.data();
    let ddata = dst.data_mut();
    for j in order {
        let e = entries[j];
        let (y0, x0) = origin(e.by, e.bx);
        let xlo = x0.max(0) as usize;
        let xhi = (x0 + bw as isize).clamp(0, d.w as isize) as usize;
        if xlo >= xhi {
            continue;
        }
        let c0 = (xlo as isize - x0) as usize;
        for r in 0..bh {
            let oy = y0 + r as isize;
            if oy < 0 || oy as usize >= d.h {
                continue;
            }
            let oy = oy as usize;
            if bl == Layout::ChannelsLast && dl == Layout::ChannelsLast {
                let s = ((j * bh + r) * bw + c0) * c;
                let o = ((e.n * d.h + oy) * d.w + xlo) * c;
                let len = (xhi - xlo) * c;
                let (src, out) = (&bdata[s..s + len], &mut ddata[o..o + len]);
                match mode {
                    WriteMode::Overwrite => out.copy_from_slice(src),
                    WriteMode::Accumulate => {
                        for (a, &b) in out.iter_mut().zip(src) {
                            *a = *a + b;
                        }
                    }
                }
            } else {
                for (jx, ox) in (xlo..xhi).enumerate() {
                    for k in 0..c {
                        let s = match bl {
                            Layout::ChannelsLast => ((j * bh + r) * bw + c0 + jx) * c + k,
                            Layout::ChannelsFirst => ((j * c + k) * bh + r) * bw + c0 + jx,
                        };
                        let o = match dl {
                            Layout::ChannelsLast => ((e.n * d.h + oy) * d.w + ox) * c + k,
                            Layout::ChannelsFirst => ((e.n * c + k) * d.h + oy) * d.w + ox,
                        };
                        ddata[o] = match mode {
                            WriteMode::Overwrite => bdata[s],
                            WriteMode::Accumulate => ddata[o] + bdata[s],
                        };
                    }
                }
            }
        }
    }
}

/// Gathers the input window of every active block. The result keeps `x`'s
/// layout.
pub fn gather<T: Element>(
    x: &Tensor4D<T>,
    idx: &BlockIndexList,
    spec: &BlockSpec,
) -> Result<GatheredBlocks<T>> {
    check_source(x, idx, spec)?;
    let t = gather_windows(x, idx, spec.block, |by, bx| spec.window_origin(by, bx), x.layout());
    GatheredBlocks::new(t, *spec, idx.clone())
}

/// [`gather`] producing blocks in the opposite layout of `x`, in one pass.
pub fn gather_transpose<T: Element>(
    x: &Tensor4D<T>,
    idx: &BlockIndexList,
    spec: &BlockSpec,
) -> Result<GatheredBlocks<T>> {
    check_source(x, idx, spec)?;
    let t = gather_windows(
        x,
        idx,
        spec.block,
        |by, bx| spec.window_origin(by, bx),
        x.layout().flipped(),
    );
    GatheredBlocks::new(t, *spec, idx.clone())
}

fn check_scatter<T: Element>(
    b: &GatheredBlocks<T>,
    out_spec: &BlockSpec,
    dst: &Tensor4D<T>,
) -> Result<()> {
    if b.spec != *out_spec {
        return Err(Error::GeometryMismatch(
            "blocks were gathered with a different block spec".into(),
        ));
    }
    let bd = b.tensor.dims();
    if (bd.h, bd.w) != out_spec.out_block {
        return Err(Error::GeometryMismatch(format!(
            "scatter needs {:?} output blocks, got {}x{}",
            out_spec.out_block, bd.h, bd.w
        )));
    }
    let d = dst.dims();
    ensure_dim("destination h", out_spec.output_hw.0, d.h)?;
    ensure_dim("destination w", out_spec.output_hw.1, d.w)?;
    ensure_dim("destination c", bd.c, d.c)?;
    b.indices.check_bounds(out_spec, d.n)
}

fn write_origin(spec: &BlockSpec) -> impl Fn(usize, usize) -> (isize, isize) + '_ {
    move |by, bx| {
        (
            (by * spec.out_block.0) as isize,
            (bx * spec.out_block.1) as isize,
        )
    }
}

/// Writes each block to its output region of `dst`; elements outside every
/// write region keep their previous value.
pub fn scatter<T: Element>(
    b: &GatheredBlocks<T>,
    out_spec: &BlockSpec,
    mut dst: Tensor4D<T>,
) -> Result<Tensor4D<T>> {
    check_scatter(b, out_spec, &dst)?;
    if b.tensor.layout() != dst.layout() {
        return Err(Error::config(
            "scatter needs matching layouts; use scatter_transpose",
        ));
    }
    write_windows(
        &b.tensor,
        &b.indices,
        0..b.len(),
        write_origin(out_spec),
        &mut dst,
        WriteMode::Overwrite,
    );
    Ok(dst)
}

/// [`scatter`] that adds into `dst` instead of overwriting.
pub fn scatter_add<T: Element>(
    b: &GatheredBlocks<T>,
    out_spec: &BlockSpec,
    mut dst: Tensor4D<T>,
) -> Result<Tensor4D<T>> {
    check_scatter(b, out_spec, &dst)?;
    if b.tensor.layout() != dst.layout() {
        return Err(Error::config("scatter_add needs matching layouts"));
    }
    write_windows(
        &b.tensor,
        &b.indices,
        0..b.len(),
        write_origin(out_spec),
        &mut dst,
        WriteMode::Accumulate,
    );
    Ok(dst)
}

/// [`scatter`] from blocks in the opposite layout of `dst`, in one pass.
pub fn scatter_transpose<T: Element>(
    b: &GatheredBlocks<T>,
    out_spec: &BlockSpec,
    mut dst: Tensor4D<T>,
) -> Result<Tensor4D<T>> {
    check_scatter(b, out_spec, &dst)?;
    if b.tensor.layout() == dst.layout() {
        return Err(Error::config(
            "scatter_transpose needs blocks in the opposite layout of the destination",
        ));
    }
    write_windows(
        &b.tensor,
        &b.indices,
        0..b.len(),
        write_origin(out_spec),
        &mut dst,
        WriteMode::Overwrite,
    );
    Ok(dst)
}

/// Adjoint of [`gather`]: adds every block gradient back onto its input
/// window of a zero tensor of `dst_dims`. Overlapping halos accumulate, in
/// ascending block order.
pub fn gather_grad<T: Element>(
    g_out: &GatheredBlocks<T>,
    spec: &BlockSpec,
    dst_dims: Dims4,
) -> Result<Tensor4D<T>> {
    gather_grad_ordered(g_out, spec, dst_dims, 0..g_out.len())
}

fn gather_grad_ordered<T: Element>(
    g_out: &GatheredBlocks<T>,
    spec: &BlockSpec,
    dst_dims: Dims4,
    order: impl Iterator<Item = usize>,
) -> Result<Tensor4D<T>> {
    if g_out.spec != *spec {
        return Err(Error::GeometryMismatch(
            "block gradient carries a different block spec".into(),
        ));
    }
    let bd = g_out.tensor.dims();
    if (bd.h, bd.w) != spec.block {
        return Err(Error::GeometryMismatch(format!(
            "gather gradient needs {:?} blocks, got {}x{}",
            spec.block, bd.h, bd.w
        )));
    }
    ensure_dim("gradient h", spec.input_hw.0, dst_dims.h)?;
    ensure_dim("gradient w", spec.input_hw.1, dst_dims.w)?;
    ensure_dim("gradient c", bd.c, dst_dims.c)?;
    g_out.indices.check_bounds(spec, dst_dims.n)?;
    let mut dst = Tensor4D::zeros(dst_dims, g_out.tensor.layout());
    write_windows(
        &g_out.tensor,
        &g_out.indices,
        order,
        |by, bx| spec.window_origin(by, bx),
        &mut dst,
        WriteMode::Accumulate,
    );
    Ok(dst)
}

/// Adjoint of [`scatter`] with respect to the blocks: reads the dense
/// gradient over every block's output write region (zero past the edge).
pub fn scatter_grad<T: Element>(
    g_out: &Tensor4D<T>,
    idx: &BlockIndexList,
    out_spec: &BlockSpec,
) -> Result<GatheredBlocks<T>> {
    let d = g_out.dims();
    ensure_dim("gradient h", out_spec.output_hw.0, d.h)?;
    ensure_dim("gradient w", out_spec.output_hw.1, d.w)?;
    idx.check_bounds(out_spec, d.n)?;
    let t = gather_windows(
        g_out,
        idx,
        out_spec.out_block,
        |by, bx| {
            (
                (by * out_spec.out_block.0) as isize,
                (bx * out_spec.out_block.1) as isize,
            )
        },
        g_out.layout(),
    );
    GatheredBlocks::new(t, *out_spec, idx.clone())
}

/// Number of times each destination pixel is written by a scatter over
/// `idx`; entries are `(n, y, x)` row-major.
pub fn write_count_map(idx: &BlockIndexList, spec: &BlockSpec, batch: usize) -> Vec<u32> {
    let (oh, ow) = spec.output_hw;
    let mut counts = vec![0u32; batch * oh * ow];
    for e in idx.iter() {
        let (ys, xs) = spec.write_region(e.by, e.bx);
        for y in ys {
            for x in xs.clone() {
                counts[(e.n * oh + y) * ow + x] += 1;
            }
        }
    }
    counts
}
