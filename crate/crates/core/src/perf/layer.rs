//! One benchmarkable layer: a single convolution or a residual unit over a
//! fixed input and mask, runnable dense or block-sparse.

use rand::Rng;

use crate::conv::{conv2d_direct, ConvParams, FilterBank, Padding};
use crate::error::{Error, Result};
use crate::norm::PoolMode;
use crate::sparse::{
    dense_residual_unit, residual_block_spec, sparse_conv2d, sparse_residual_unit, ResidualUnitParams,
};
use crate::tensor::Tensor4D;
use crate::tiling::{compute_block_spec, reduce_mask, BinaryMask};

use super::autotune::{autotune_block_size, AutotuneResult};
use super::bench::{benchmark_layer, BenchProtocol, BenchResult, Clock};
use super::flops::{flops_dense, flops_sparse, residual_unit_flops_dense, residual_unit_flops_sparse};
use super::report::BenchRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Same-padded, stride-1 `kernel x kernel` convolution.
    Conv { kernel: usize, filters: usize },
    /// Bottleneck unit with `mid` inner channels.
    Residual { mid: usize },
}

enum Weights {
    Conv(FilterBank<f32>, ConvParams),
    Residual(ResidualUnitParams<f32>),
}

pub struct LayerBench {
    pub kind: LayerKind,
    pub x: Tensor4D<f32>,
    pub mask: BinaryMask,
    weights: Weights,
}

impl LayerBench {
    pub fn new<R: Rng + ?Sized>(kind: LayerKind, x: Tensor4D<f32>, mask: BinaryMask, rng: &mut R) -> Result<Self> {
        crate::sparse::check_mask(&x, &mask)?;
        let c = x.dims().c;
        let weights = match kind {
            LayerKind::Conv { kernel, filters } => {
                let p = ConvParams::square(kernel, Padding::Same, filters)?;
                let scale = 1.0 / ((kernel * kernel * c) as f64).sqrt();
                Weights::Conv(FilterBank::random((kernel, kernel, c, filters), rng, scale, true), p)
            }
            LayerKind::Residual { mid } => {
                if mid == 0 {
                    return Err(Error::config("residual mid channels must be positive"));
                }
                Weights::Residual(ResidualUnitParams::random(c, mid, true, rng))
            }
        };
        Ok(Self { kind, x, mask, weights })
    }

    pub fn label(&self) -> String {
        let d = self.x.dims();
        match self.kind {
            LayerKind::Conv { kernel, filters } => format!("conv{kernel}x{kernel} {d} -> {filters}"),
            LayerKind::Residual { mid } => format!("residual {d} mid {mid}"),
        }
    }

    pub fn sparsity(&self) -> f64 {
        self.mask.sparsity()
    }

    pub fn run_dense(&self) -> Result<Tensor4D<f32>> {
        match &self.weights {
            Weights::Conv(f, p) => conv2d_direct(&self.x, f, p),
            Weights::Residual(u) => dense_residual_unit(&self.x, u),
        }
    }

    pub fn run_sparse(&self, block: (usize, usize)) -> Result<Tensor4D<f32>> {
        match &self.weights {
            Weights::Conv(f, p) => sparse_conv2d(&self.x, &self.mask, f, p, block),
            Weights::Residual(u) => sparse_residual_unit(&self.x, &self.mask, u, block),
        }
    }

    /// `(dense, sparse)` FLOPs with gathered blocks of size `block`.
    pub fn flops(&self, block: (usize, usize)) -> Result<(u64, u64)> {
        let d = self.x.dims();
        match &self.weights {
            Weights::Conv(_, p) => {
                let spec = compute_block_spec((d.h, d.w), p, block)?;
                let idx = reduce_mask(&self.mask, &spec, PoolMode::Max, 1.0)?;
                let r = flops_sparse(&spec, &idx, p, d.c, d.n)?;
                Ok((r.dense_flops, r.sparse_flops))
            }
            Weights::Residual(u) => {
                let spec = residual_block_spec((d.h, d.w), block, 1)?;
                let idx = reduce_mask(&self.mask, &spec, PoolMode::Max, 1.0)?;
                let (c, m) = (u.channels(), u.mid_channels());
                Ok((
                    residual_unit_flops_dense(d.n, (d.h, d.w), c, m),
                    residual_unit_flops_sparse(&spec, idx.len(), c, m),
                ))
            }
        }
    }

    pub fn dense_flops(&self) -> Result<u64> {
        let d = self.x.dims();
        match &self.weights {
            Weights::Conv(_, p) => flops_dense(d.n, (d.h, d.w), p, d.c),
            Weights::Residual(u) => Ok(residual_unit_flops_dense(d.n, (d.h, d.w), u.channels(), u.mid_channels())),
        }
    }

    pub fn bench_dense(&self, protocol: BenchProtocol, clock: &mut dyn Clock) -> Result<BenchResult> {
        self.run_dense()?;
        let mut op = || {
            std::hint::black_box(self.run_dense().ok());
        };
        Ok(benchmark_layer(format!("dense {}", self.label()), (0, 0), self.sparsity(), protocol, clock, &mut op))
    }

    pub fn bench_sparse(&self, block: (usize, usize), protocol: BenchProtocol, clock: &mut dyn Clock) -> Result<BenchResult> {
        self.run_sparse(block)?;
        let mut op = || {
            std::hint::black_box(self.run_sparse(block).ok());
        };
        Ok(benchmark_layer(self.label(), block, self.sparsity(), protocol, clock, &mut op))
    }

    /// CSV row pairing a sparse measurement with the dense baseline.
    pub fn row(&self, dense: &BenchResult, sparse: &BenchResult) -> Result<BenchRow> {
        let (fd, fs) = self.flops(sparse.block)?;
        Ok(BenchRow {
            config: self.label(),
            sparsity: self.sparsity(),
            block_h: sparse.block.0,
            block_w: sparse.block.1,
            mean_ns: sparse.mean_ns,
            std_ns: sparse.std_ns,
            min_ns: sparse.min_ns,
            flops_dense: fd,
            flops_sparse: fs,
            speedup: dense.mean_ns / sparse.mean_ns,
        })
    }

    /// Block-size search over `candidates` timing the full sparse path,
    /// mask reduction included.
    pub fn autotune(
        &self,
        candidates: &[(usize, usize)],
        protocol: BenchProtocol,
        clock: &mut dyn Clock,
    ) -> Result<AutotuneResult> {
        autotune_block_size(&self.label(), self.sparsity(), candidates, protocol, clock, |block| {
            self.flops(block)?;
            Ok(move || {
                std::hint::black_box(self.run_sparse(block).ok());
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perf::bench::ScriptedClock;
    use crate::perf::synth_mask_topleft;
    use crate::tensor::Dims4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sweep_skips_blocks_smaller_than_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let x = Tensor4D::random(Dims4::new(1, 20, 20, 2), &mut rng, -1.0, 1.0);
        let mask = synth_mask_topleft(1, 20, 20, 0.75).unwrap();
        let layer = LayerBench::new(LayerKind::Conv { kernel: 5, filters: 2 }, x, mask, &mut rng).unwrap();
        let p = BenchProtocol { warmup: 0, timed: 1 };
        let r = layer
            .autotune(&[(4, 4), (8, 8), (12, 12)], p, &mut ScriptedClock::new(|k| [9, 3][k]))
            .unwrap();
        assert_eq!(r.skipped.len(), 1);
        assert_eq!(r.chosen, (12, 12));
    }

    #[test]
    fn dense_and_sparse_flops_agree_on_full_mask_without_halo_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let x = Tensor4D::random(Dims4::new(1, 12, 12, 2), &mut rng, -1.0, 1.0);
        let layer =
            LayerBench::new(LayerKind::Conv { kernel: 3, filters: 4 }, x, BinaryMask::ones(1, 12, 12), &mut rng).unwrap();
        let (d, s) = layer.flops((8, 8)).unwrap();
        assert_eq!(d, s);
    }
}
