//! Stages of residual units sharing one mask, and a small multi-stage
//! backbone built from them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{conv2d_direct, ConvParams, FilterBank, Padding};
use crate::error::{Error, Result};
use crate::norm::{batch_norm, relu, BnMode, BnParams, PoolMode};
use crate::perf::flops::{residual_unit_flops_dense, residual_unit_flops_sparse};
use crate::tensor::{Element, Tensor4D};
use crate::tiling::{downsample_mask, reduce_mask, BinaryMask};

use super::check_mask;
use super::residual::{dense_residual_unit, residual_block_spec, sparse_residual_unit_indexed, ResidualUnitParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub units: usize,
    /// (in, mid, out). A stage whose `in` differs from `out`, or that
    /// downsamples, starts with a dense projection.
    pub channels: (usize, usize, usize),
    /// Gathered block size of every unit in the stage.
    pub block: (usize, usize),
    /// Mask downsampling factor relative to the base mask.
    pub mask_scale: usize,
    /// Stride-2 projection at the start of the stage.
    pub downsample: bool,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let (i, m, o) = self.channels;
        if i == 0 || m == 0 || o == 0 {
            return Err(Error::config("stage channels must be positive"));
        }
        if self.block.0 < 3 || self.block.1 < 3 {
            return Err(Error::config(format!(
                "stage block {:?} smaller than the 3x3 receptive field of a unit",
                self.block
            )));
        }
        if self.mask_scale == 0 {
            return Err(Error::config("mask scale must be at least 1"));
        }
        Ok(())
    }

    pub fn needs_projection(&self) -> bool {
        self.downsample || self.channels.0 != self.channels.2
    }
}

/// Dense 3x3 convolution, inference BN, ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection<T = f32> {
    pub conv: FilterBank<T>,
    pub params: ConvParams,
    pub bn: BnParams<T>,
}

impl<T: Element> Projection<T> {
    pub fn random<R: Rng + ?Sized>(c_in: usize, c_out: usize, stride: usize, rng: &mut R) -> Result<Self> {
        let params = ConvParams::new((3, 3), (stride, stride), Padding::Same, c_out)?;
        Ok(Self {
            conv: FilterBank::random((3, 3, c_in, c_out), rng, 1.0 / (9.0 * c_in as f64).sqrt(), true),
            params,
            bn: BnParams::random(c_out, rng),
        })
    }

    pub fn run(&self, x: &Tensor4D<T>) -> Result<Tensor4D<T>> {
        let y = conv2d_direct(x, &self.conv, &self.params)?;
        let (y, _) = batch_norm(&y, &self.bn, BnMode::Inference)?;
        Ok(relu(&y))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseStage<T = f32> {
    pub config: StageConfig,
    pub projection: Option<Projection<T>>,
    pub units: Vec<ResidualUnitParams<T>>,
}

/// Output of one stage with the FLOP ledger of its residual units.
#[derive(Debug, Clone)]
pub struct StageRun<T = f32> {
    pub output: Tensor4D<T>,
    /// Active blocks per unit (0 for a dense run).
    pub active_blocks: usize,
    pub flops_dense: u64,
    pub flops_units: u64,
}

impl<T> StageRun<T> {
    /// Dense over executed FLOPs of the stage's units.
    pub fn flop_speedup(&self) -> f64 {
        self.flops_dense as f64 / self.flops_units as f64
    }
}

impl<T: Element> SparseStage<T> {
    /// Random parameters for `cfg` (pre-activation units).
    pub fn build<R: Rng + ?Sized>(cfg: StageConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (i, m, o) = cfg.channels;
        let projection = if cfg.needs_projection() {
            Some(Projection::random(i, o, if cfg.downsample { 2 } else { 1 }, rng)?)
        } else {
            None
        };
        let units = (0..cfg.units)
            .map(|_| ResidualUnitParams::random(o, m, true, rng))
            .collect();
        Ok(Self {
            config: cfg,
            projection,
            units,
        })
    }

    fn project(&self, x: &Tensor4D<T>) -> Result<Tensor4D<T>> {
        match &self.projection {
            Some(p) => p.run(x),
            None => Ok(x.clone()),
        }
    }

    fn dense_unit_flops(&self, x: &Tensor4D<T>) -> u64 {
        let d = x.dims();
        self.units
            .iter()
            .map(|u| residual_unit_flops_dense(d.n, (d.h, d.w), u.channels(), u.mid_channels()))
            .sum()
    }

    /// Runs the stage with every unit on the blocks selected by
    /// `base_mask` downsampled to the stage's resolution.
    pub fn run_sparse(&self, x: &Tensor4D<T>, base_mask: &BinaryMask) -> Result<StageRun<T>> {
        let mut cur = self.project(x)?;
        let mask = downsample_mask(base_mask, self.config.mask_scale)?;
        check_mask(&cur, &mask)?;
        let d = cur.dims();
        let spec = residual_block_spec((d.h, d.w), self.config.block, 1)?;
        let idx = reduce_mask(&mask, &spec, PoolMode::Max, 1.0)?;
        let flops_dense = self.dense_unit_flops(&cur);
        let mut flops_units = 0;
        for u in &self.units {
            cur = sparse_residual_unit_indexed(&cur, &idx, &spec, u)?;
            flops_units += residual_unit_flops_sparse(&spec, idx.len(), u.channels(), u.mid_channels());
        }
        Ok(StageRun {
            output: cur,
            active_blocks: idx.len(),
            flops_dense,
            flops_units,
        })
    }

    pub fn run_dense(&self, x: &Tensor4D<T>) -> Result<StageRun<T>> {
        let mut cur = self.project(x)?;
        let flops = self.dense_unit_flops(&cur);
        for u in &self.units {
            cur = dense_residual_unit(&cur, u)?;
        }
        Ok(StageRun {
            output: cur,
            active_blocks: 0,
            flops_dense: flops,
            flops_units: flops,
        })
    }
}

/// Dense stem followed by sparse stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T = f32> {
    pub stem: Vec<Projection<T>>,
    pub stages: Vec<SparseStage<T>>,
}

impl<T: Element> Backbone<T> {
    /// Four stages of `[1, 2, 2, 1]` units with `[24, 48, 64, 96]` channels,
    /// each after the first halving the resolution.
    pub fn demo_configs() -> Vec<StageConfig> {
        let widths = [24, 48, 64, 96];
        let units = [1, 2, 2, 1];
        let blocks = [16, 12, 8, 6];
        (0..4)
            .map(|s| StageConfig {
                units: units[s],
                channels: (if s == 0 { widths[0] } else { widths[s - 1] }, widths[s] / 4, widths[s]),
                block: (blocks[s], blocks[s]),
                mask_scale: 1 << s,
                downsample: s > 0,
            })
            .collect()
    }

    /// Random backbone: two dense 3x3 stem layers from `c_in` to the first
    /// stage's input width, then `configs`.
    pub fn build<R: Rng + ?Sized>(c_in: usize, configs: &[StageConfig], rng: &mut R) -> Result<Self> {
        let first = configs
            .first()
            .ok_or_else(|| Error::config("backbone needs at least one stage"))?;
        let w = first.channels.0;
        let stem = vec![Projection::random(c_in, w, 1, rng)?, Projection::random(w, w, 1, rng)?];
        let stages = configs
            .iter()
            .map(|&cfg| SparseStage::build(cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { stem, stages })
    }

    pub fn run_stem(&self, x: &Tensor4D<T>) -> Result<Tensor4D<T>> {
        let mut cur = x.clone();
        for p in &self.stem {
            cur = p.run(&cur)?;
        }
        Ok(cur)
    }

    pub fn run_sparse(&self, x: &Tensor4D<T>, base_mask: &BinaryMask) -> Result<Vec<StageRun<T>>> {
        check_mask(x, base_mask)?;
        let mut cur = self.run_stem(x)?;
        let mut runs = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let r = s.run_sparse(&cur, base_mask)?;
            cur = r.output.clone();
            runs.push(r);
        }
        Ok(runs)
    }

    pub fn run_dense(&self, x: &Tensor4D<T>) -> Result<Vec<StageRun<T>>> {
        let mut cur = self.run_stem(x)?;
        let mut runs = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let r = s.run_dense(&cur)?;
            cur = r.output.clone();
            runs.push(r);
        }
        Ok(runs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::sparse_residual_unit;
    use crate::tensor::{max_rel_error, Dims4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(units: usize, c: usize) -> StageConfig {
        StageConfig {
            units,
            channels: (c, 2, c),
            block: (6, 6),
            mask_scale: 1,
            downsample: false,
        }
    }

    #[test]
    fn one_unit_stage_is_the_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let stage = SparseStage::<f32>::build(cfg(1, 3), &mut rng).unwrap();
        assert!(stage.projection.is_none());
        let x = Tensor4D::random(Dims4::new(1, 12, 10, 3), &mut rng, -1.0, 1.0);
        let m = BinaryMask::from_fn(1, 12, 10, |_, y, x| y + x < 6);
        let a = stage.run_sparse(&x, &m).unwrap().output;
        let b = sparse_residual_unit(&x, &m, &stage.units[0], (6, 6)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_mask_two_units_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let stage = SparseStage::<f32>::build(cfg(2, 4), &mut rng).unwrap();
        let x = Tensor4D::random(Dims4::new(2, 9, 14, 4), &mut rng, -1.0, 1.0);
        let m = BinaryMask::ones(2, 9, 14);
        let a = stage.run_sparse(&x, &m).unwrap();
        let b = stage.run_dense(&x).unwrap();
        assert!(max_rel_error(a.output.data(), b.output.data()) <= 1e-4);
        assert!(a.flops_units >= b.flops_units);
    }

    #[test]
    fn mask_pyramid_follows_stride_two_stages() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let configs: Vec<StageConfig> = Backbone::<f32>::demo_configs()
            .into_iter()
            .map(|mut c| {
                c.channels = (4, 2, 4);
                c
            })
            .collect();
        let net = Backbone::<f32>::build(2, &configs, &mut rng).unwrap();
        let x = Tensor4D::random(Dims4::new(1, 25, 44, 2), &mut rng, -1.0, 1.0);
        let m = BinaryMask::ones(1, 25, 44);
        let runs = net.run_sparse(&x, &m).unwrap();
        let hw: Vec<_> = runs.iter().map(|r| (r.output.dims().h, r.output.dims().w)).collect();
        assert_eq!(hw, vec![(25, 44), (13, 22), (7, 11), (4, 6)]);
        for (s, &(h, w)) in hw.iter().enumerate() {
            let (_, mh, mw) = downsample_mask(&m, 1 << s).unwrap().dims();
            assert_eq!((mh, mw), (h, w));
        }
    }

    #[test]
    fn rejects_tiny_block() {
        let mut c = cfg(1, 2);
        c.block = (2, 2);
        assert!(c.validate().is_err());
    }
}
