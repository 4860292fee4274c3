//! Block-sparse convolution on dense tensors.
//!
//! A binary mask is reduced to a list of active tiles; the tiles are gathered
//! into a dense stack, processed by ordinary dense kernels and scattered back.

pub mod conv;
pub mod error;
pub mod gather;
pub mod io;
pub mod norm;
pub mod perf;
pub mod sparse;
pub mod tensor;
pub mod tiling;
pub mod verify;
pub mod weights;
pub mod winograd;

pub use conv::{conv2d_backward_filter, conv2d_backward_input, conv2d_direct, ConvParams, FilterBank, Padding};
pub use error::{Error, Result};
pub use gather::{
    gather, gather_grad, gather_transpose, scatter, scatter_add, scatter_grad, scatter_transpose,
    GatheredBlocks,
};
pub use norm::{batch_norm, pool2d, relu, BatchStats, BnMode, BnParams, PoolMode};
pub use tensor::{max_rel_error, transpose_layout, Dims4, Element, Layout, Tensor4D};
pub use tiling::{
    compute_block_spec, coverage_check, default_threshold, downsample_mask, reduce_mask, BinaryMask,
    BlockIndex, BlockIndexList, BlockSpec, CoverageReport,
};
pub use winograd::conv2d_winograd;
pub use sparse::{
    dense_residual_unit, sparse_batch_norm, sparse_conv2d, sparse_conv2d_backward, sparse_residual_unit,
    sparse_residual_unit_backward, Backbone, ResidualUnitParams, SparseStage, StageConfig,
};
