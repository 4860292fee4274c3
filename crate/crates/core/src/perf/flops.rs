//! Multiply-add accounting. One multiply-add counts as two FLOPs; bias, BN
//! and ReLU are not counted.

use serde::{Deserialize, Serialize};

use crate::conv::ConvParams;
use crate::error::{Error, Result};
use crate::tiling::{BlockIndexList, BlockSpec};

/// Upper bound on the speedup from skipping a `sparsity` fraction of work.
pub fn theoretical_speedup(sparsity: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::config(format!("sparsity {sparsity} outside [0, 1)")));
    }
    Ok(1.0 / (1.0 - sparsity))
}

#[inline]
pub fn conv_flops(out_pixels: u64, kernel: (usize, usize), c_in: usize, c_out: usize) -> u64 {
    2 * out_pixels * (kernel.0 * kernel.1 * c_in * c_out) as u64
}

/// FLOPs of a dense convolution over an `n x h x w x c_in` input.
pub fn flops_dense(n: usize, input_hw: (usize, usize), conv: &ConvParams, c_in: usize) -> Result<u64> {
    let (oh, ow) = conv.output_hw(input_hw.0, input_hw.1)?;
    Ok(conv_flops((n * oh * ow) as u64, conv.kernel, c_in, conv.filters))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub dense_flops: u64,
    pub sparse_flops: u64,
    pub block_count: usize,
    pub per_block_flops: u64,
    /// Gathered input area over the input area each block advances by; 1
    /// without overlap.
    pub overlap_overhead_ratio: f64,
}

impl FlopReport {
    /// `dense / sparse`; infinite when nothing runs.
    pub fn speedup(&self) -> f64 {
        self.dense_flops as f64 / self.sparse_flops as f64
    }
}

/// FLOPs of the block-sparse form of `conv` over `idx`, next to the dense
/// count for a batch of `batch`.
pub fn flops_sparse(
    spec: &BlockSpec,
    idx: &BlockIndexList,
    conv: &ConvParams,
    c_in: usize,
    batch: usize,
) -> Result<FlopReport> {
    if spec.kernel != conv.kernel || spec.stride != conv.stride {
        return Err(Error::GeometryMismatch(format!(
            "spec was built for kernel {:?} stride {:?}, conv has {:?} {:?}",
            spec.kernel, spec.stride, conv.kernel, conv.stride
        )));
    }
    let (ob_h, ob_w) = spec.out_block;
    let per_block = conv_flops((ob_h * ob_w) as u64, conv.kernel, c_in, conv.filters);
    let dense = flops_dense(batch, spec.input_hw, conv, c_in)?;
    Ok(FlopReport {
        dense_flops: dense,
        sparse_flops: per_block * idx.len() as u64,
        block_count: idx.len(),
        per_block_flops: per_block,
        overlap_overhead_ratio: (spec.block.0 * spec.block.1) as f64
            / (spec.in_stride.0 * spec.in_stride.1) as f64,
    })
}

/// Dense bottleneck unit: 1x1 (c->m), same-padded 3x3 (m->m), 1x1 (m->c).
pub fn residual_unit_flops_dense(n: usize, hw: (usize, usize), c: usize, m: usize) -> u64 {
    let px = (n * hw.0 * hw.1) as u64;
    conv_flops(px, (1, 1), c, m) + conv_flops(px, (3, 3), m, m) + conv_flops(px, (1, 1), m, c)
}

/// Block form of the unit as executed: the first 1x1 runs on the whole
/// gathered block, the 3x3 on the block minus one pixel per side (or the
/// whole block without a halo), the last 1x1 on the output tile.
pub fn residual_unit_flops_sparse(spec: &BlockSpec, blocks: usize, c: usize, m: usize) -> u64 {
    let (gh, gw) = spec.block;
    let (oh, ow) = spec.out_block;
    let mid = if spec.overlap.0 == 0 { (gh, gw) } else { (gh - 2, gw - 2) };
    let per = conv_flops((gh * gw) as u64, (1, 1), c, m)
        + conv_flops((mid.0 * mid.1) as u64, (3, 3), m, m)
        + conv_flops((oh * ow) as u64, (1, 1), m, c);
    per * blocks as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::Padding;
    use crate::tiling::{compute_block_spec, same_spec};

    #[test]
    fn theoretical_values() {
        assert!((theoretical_speedup(0.9).unwrap() - 10.0).abs() < 1e-9);
        assert!((theoretical_speedup(0.75).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(theoretical_speedup(0.0).unwrap(), 1.0);
        assert!(theoretical_speedup(1.0).is_err());
        assert!(theoretical_speedup(-0.1).is_err());
    }

    #[test]
    fn exact_tiling_without_overlap_costs_the_same() {
        let conv = ConvParams::square(1, Padding::Valid, 8).unwrap();
        let spec = compute_block_spec((16, 24), &conv, (4, 8)).unwrap();
        let r = flops_sparse(&spec, &BlockIndexList::full(&spec, 2), &conv, 3, 2).unwrap();
        assert_eq!(r.sparse_flops, r.dense_flops);
        assert_eq!(r.overlap_overhead_ratio, 1.0);
        let r = flops_sparse(&spec, &BlockIndexList::empty(), &conv, 3, 2).unwrap();
        assert_eq!(r.sparse_flops, 0);
        assert_eq!(r.speedup(), f64::INFINITY);
    }

    #[test]
    fn ledger_identity() {
        let conv = ConvParams::square(3, Padding::Same, 4).unwrap();
        let spec = same_spec((20, 20), 3, (8, 8)).unwrap();
        let idx = BlockIndexList::full(&spec, 1);
        let r = flops_sparse(&spec, &idx, &conv, 2, 1).unwrap();
        assert_eq!(r.sparse_flops, r.per_block_flops * r.block_count as u64);
        assert_eq!(r.per_block_flops, 2 * 36 * 9 * 2 * 4);
        assert!(r.overlap_overhead_ratio >= 1.0);
    }

    #[test]
    fn residual_dense_count() {
        assert_eq!(residual_unit_flops_dense(1, (2, 3), 4, 2), 2 * 6 * (8 + 36 + 8));
    }
}
