//! Composite layers that run on gathered blocks.

mod bn;
mod conv;
mod residual;
mod stage;

pub use bn::sparse_batch_norm;
pub use conv::{
    sparse_conv2d, sparse_conv2d_backward, sparse_conv2d_indexed, sparse_conv2d_into, SparseConvGrads,
};
pub use residual::{
    dense_residual_unit, residual_block_spec, sparse_residual_unit, sparse_residual_unit_backward,
    sparse_residual_unit_indexed, sparse_residual_unit_with_halo, ResidualGrads, ResidualUnitParams,
};
pub use stage::{Backbone, Projection, SparseStage, StageConfig, StageRun};

use crate::error::{ensure_dim, Result};
use crate::tensor::{Element, Tensor4D};
use crate::tiling::BinaryMask;

pub(crate) fn check_mask<T: Element>(x: &Tensor4D<T>, m: &BinaryMask) -> Result<()> {
    let d = x.dims();
    let (n, h, w) = m.dims();
    ensure_dim("mask n", d.n, n)?;
    ensure_dim("mask h", d.h, h)?;
    ensure_dim("mask w", d.w, w)
}
