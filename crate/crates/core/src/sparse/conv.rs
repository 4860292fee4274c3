use crate::conv::{conv2d_backward_filter, conv2d_backward_input, conv2d_direct, ConvParams, FilterBank, Padding};
use crate::error::Result;
use crate::gather::{gather, gather_grad, scatter, scatter_grad};
use crate::norm::PoolMode;
use crate::tensor::{Dims4, Element, Tensor4D};
use crate::tiling::{compute_block_spec, reduce_mask, BinaryMask, BlockIndexList, BlockSpec};

use super::check_mask;

fn block_params(p: &ConvParams) -> ConvParams {
    ConvParams {
        padding: Padding::Valid,
        ..*p
    }
}

fn plan<T: Element>(
    x: &Tensor4D<T>,
    m: &BinaryMask,
    p: &ConvParams,
    block: (usize, usize),
) -> Result<(BlockSpec, BlockIndexList)> {
    check_mask(x, m)?;
    let d = x.dims();
    let spec = compute_block_spec((d.h, d.w), p, block)?;
    let idx = reduce_mask(m, &spec, PoolMode::Max, 1.0)?;
    Ok((spec, idx))
}

/// Sparse convolution into a zero-initialized destination.
///
/// Inside every active block's write region the result equals
/// [`conv2d_direct`] on the whole tensor; elsewhere it is zero.
pub fn sparse_conv2d<T: Element>(
    x: &Tensor4D<T>,
    m: &BinaryMask,
    f: &FilterBank<T>,
    p: &ConvParams,
    block: (usize, usize),
) -> Result<Tensor4D<T>> {
    let d = x.dims();
    let (oh, ow) = p.output_hw(d.h, d.w)?;
    let dst = Tensor4D::zeros(Dims4::new(d.n, oh, ow, f.c_out), x.layout());
    sparse_conv2d_into(x, m, f, p, block, dst)
}

/// [`sparse_conv2d`] writing into a caller-provided destination; elements
/// outside active write regions keep their values.
pub fn sparse_conv2d_into<T: Element>(
    x: &Tensor4D<T>,
    m: &BinaryMask,
    f: &FilterBank<T>,
    p: &ConvParams,
    block: (usize, usize),
    dst: Tensor4D<T>,
) -> Result<Tensor4D<T>> {
    let (spec, idx) = plan(x, m, p, block)?;
    sparse_conv2d_indexed(x, &idx, &spec, f, p, dst)
}

/// Gather, per-block valid convolution, scatter, for a precomputed index list.
pub fn sparse_conv2d_indexed<T: Element>(
    x: &Tensor4D<T>,
    idx: &BlockIndexList,
    spec: &BlockSpec,
    f: &FilterBank<T>,
    p: &ConvParams,
    dst: Tensor4D<T>,
) -> Result<Tensor4D<T>> {
    let blocks = gather(x, idx, spec)?;
    let y = conv2d_direct(blocks.tensor(), f, &block_params(p))?;
    scatter(&blocks.with_tensor(y)?, spec, dst)
}

#[derive(Debug, Clone)]
pub struct SparseConvGrads<T = f32> {
    /// Channels-last input gradient.
    pub dx: Tensor4D<T>,
    pub df: FilterBank<T>,
}

/// Input and filter gradients of [`sparse_conv2d`] for upstream gradient
/// `g_out`. Gradient outside active write regions does not propagate.
pub fn sparse_conv2d_backward<T: Element>(
    x: &Tensor4D<T>,
    m: &BinaryMask,
    f: &FilterBank<T>,
    p: &ConvParams,
    block: (usize, usize),
    g_out: &Tensor4D<T>,
) -> Result<SparseConvGrads<T>> {
    let (spec, idx) = plan(x, m, p, block)?;
    let bp = block_params(p);
    let blocks = gather(x, &idx, &spec)?;
    let g_blocks = scatter_grad(g_out, &idx, &spec)?;
    let bd = blocks.tensor().dims();
    let df = conv2d_backward_filter(blocks.tensor(), g_blocks.tensor(), f, &bp)?;
    let dxb = conv2d_backward_input(g_blocks.tensor(), f, &bp, bd)?;
    let d = x.dims();
    let dx = gather_grad(
        &blocks.with_tensor(dxb)?,
        &spec,
        Dims4::new(d.n, d.h, d.w, d.c),
    )?;
    Ok(SparseConvGrads { dx, df })
}
