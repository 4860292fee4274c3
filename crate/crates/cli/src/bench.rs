//! `bench` and `sweep`: one layer timed dense and block-sparse.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sbconv::perf::{
    default_candidates, format_table, synth_mask_blobs, synth_mask_topleft, write_csv, BenchProtocol, BenchRow,
    LayerBench, LayerKind, MonotonicClock,
};
use sbconv::{BinaryMask, Dims4, Tensor4D};

use crate::opts::{parse_candidate, parse_dims4, parse_hw, parse_sparsity, MaskKind};
use crate::{CmdResult, Failure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Layer {
    Conv,
    Residual,
}

#[derive(Args)]
pub struct LayerArgs {
    #[arg(long, value_enum, default_value_t = Layer::Residual)]
    layer: Layer,
    /// Input tensor (SBT4); random from `--seed` when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Random input extent as `n,h,w,c`.
    #[arg(long, value_parser = parse_dims4, default_value = "1,400,704,32")]
    dims: (usize, usize, usize, usize),
    /// Mask (SBMK); synthesized per `--sparsity` when absent.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MaskKind::Topleft)]
    mask_kind: MaskKind,
    /// Comma-separated sparsities of the synthesized masks.
    #[arg(long, value_parser = parse_sparsity, value_delimiter = ',', default_value = "0.9")]
    sparsity: Vec<f64>,
    /// Convolution kernel extent (conv layer).
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    /// Output channels (conv layer); defaults to the input channels.
    #[arg(long)]
    filters: Option<usize>,
    /// Bottleneck channels (residual layer); defaults to half the input channels.
    #[arg(long)]
    mid: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Timed iterations.
    #[arg(long, default_value_t = 15)]
    iters: usize,
    #[arg(long, default_value_t = 15)]
    warmup: usize,
    /// CSV destination.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct BenchArgs {
    #[command(flatten)]
    layer: LayerArgs,
    /// Gathered block size as `h,w`.
    #[arg(long, value_parser = parse_hw, default_value = "24,24")]
    block: (usize, usize),
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    layer: LayerArgs,
    /// Block sizes, e.g. `8,16,24x32`; defaults to {8,16,24,32,48,64} squared.
    #[arg(long, value_parser = parse_candidate, value_delimiter = ',')]
    candidates: Option<Vec<(usize, usize)>>,
}

impl LayerArgs {
    fn protocol(&self) -> Result<BenchProtocol, Failure> {
        if self.iters == 0 {
            return Err(Failure::Usage("--iters must be at least 1".into()));
        }
        Ok(BenchProtocol {
            warmup: self.warmup,
            timed: self.iters,
        })
    }

    /// One layer per requested mask, all sharing input and weights.
    fn layers(&self) -> Result<Vec<LayerBench>, Failure> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let x: Tensor4D<f32> = match &self.input {
            Some(p) => sbconv::io::read_tensor(p)?,
            None => {
                let (n, h, w, c) = self.dims;
                Tensor4D::random(Dims4::new(n, h, w, c), &mut rng, -1.0, 1.0)
            }
        };
        let d = x.dims();
        let kind = match self.layer {
            Layer::Conv => LayerKind::Conv {
                kernel: self.kernel,
                filters: self.filters.unwrap_or(d.c),
            },
            Layer::Residual => LayerKind::Residual {
                mid: self.mid.unwrap_or((d.c / 2).max(1)),
            },
        };
        let masks: Vec<BinaryMask> = match &self.mask {
            Some(p) => vec![sbconv::io::read_mask(p)?],
            None => self
                .sparsity
                .iter()
                .map(|&s| match self.mask_kind {
                    MaskKind::Topleft => synth_mask_topleft(d.n, d.h, d.w, s),
                    MaskKind::Blob => synth_mask_blobs(d.n, d.h, d.w, s, self.seed).map(|b| b.mask),
                })
                .collect::<sbconv::Result<_>>()?,
        };
        let weight_seed = self.seed.wrapping_add(1);
        masks
            .into_iter()
            .map(|m| {
                let mut wrng = ChaCha8Rng::seed_from_u64(weight_seed);
                LayerBench::new(kind, x.clone(), m, &mut wrng).map_err(Failure::from)
            })
            .collect()
    }

    fn emit(&self, rows: &[BenchRow]) -> CmdResult {
        print!("{}", format_table(rows));
        if let Some(p) = &self.out {
            let f = std::fs::File::create(p)?;
            write_csv(std::io::BufWriter::new(f), rows)?;
        }
        Ok(())
    }
}

pub fn cmd_bench(a: BenchArgs) -> CmdResult {
    let protocol = a.layer.protocol()?;
    let layers = a.layer.layers()?;
    let mut clock = MonotonicClock;
    let dense = layers[0].bench_dense(protocol, &mut clock)?;
    println!("{}: dense mean {:.3} ms", layers[0].label(), dense.mean_ns / 1e6);
    let mut rows = Vec::new();
    for l in &layers {
        let sparse = l.bench_sparse(a.block, protocol, &mut clock)?;
        rows.push(l.row(&dense, &sparse)?);
    }
    a.layer.emit(&rows)
}

pub fn cmd_sweep(a: SweepArgs) -> CmdResult {
    let protocol = a.layer.protocol()?;
    let layers = a.layer.layers()?;
    let candidates = a.candidates.clone().unwrap_or_else(default_candidates);
    let mut clock = MonotonicClock;
    let dense = layers[0].bench_dense(protocol, &mut clock)?;
    println!("{}: dense mean {:.3} ms", layers[0].label(), dense.mean_ns / 1e6);
    let mut rows = Vec::new();
    for l in &layers {
        let tuned = l.autotune(&candidates, protocol, &mut clock)?;
        for (block, why) in &tuned.skipped {
            println!("skipped {}x{}: {why}", block.0, block.1);
        }
        println!(
            "sparsity {:.3}: chosen block {}x{}",
            l.sparsity(),
            tuned.chosen.0,
            tuned.chosen.1
        );
        for r in &tuned.table {
            rows.push(l.row(&dense, r)?);
        }
    }
    a.layer.emit(&rows)
}
