//! `demo`: the four-stage backbone, stage by stage, dense against sparse.

use std::path::PathBuf;

use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sbconv::perf::{benchmark_layer, format_table, synth_mask_blobs, write_csv, BenchProtocol, BenchRow, MonotonicClock};
use sbconv::tiling::downsample_mask;
use sbconv::weights::WeightStore;
use sbconv::{max_rel_error, Backbone, BinaryMask, Dims4, Tensor4D};

use crate::{CmdResult, Failure};

const INPUT: (usize, usize, usize, usize) = (1, 100, 176, 8);
const CHECK_TOL: f64 = 1e-4;

#[derive(Args)]
pub struct DemoArgs {
    /// Input tensor (SBT4); random 1x100x176xC from `--seed` when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Base mask (SBMK); a blob mask at `--sparsity` when absent.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = 0.9)]
    sparsity: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Weight directory with a manifest; random weights when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Write the weights used to this directory.
    #[arg(long)]
    save_weights: Option<PathBuf>,
    /// Also compare every stage output under a full mask against the dense
    /// backbone.
    #[arg(long)]
    check: bool,
    #[arg(long, default_value_t = 3)]
    iters: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// CSV destination for the stage rows.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn check_full_mask(bb: &Backbone<f32>, x: &Tensor4D<f32>) -> Result<Vec<f64>, Failure> {
    let d = x.dims();
    let sparse = bb.run_sparse(x, &BinaryMask::ones(d.n, d.h, d.w))?;
    let dense = bb.run_dense(x)?;
    Ok(sparse
        .iter()
        .zip(&dense)
        .map(|(s, e)| max_rel_error(s.output.data(), e.output.data()))
        .collect())
}

pub fn cmd_demo(a: DemoArgs) -> CmdResult {
    if a.iters == 0 {
        return Err(Failure::Usage("--iters must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (bb, c_in) = match &a.weights {
        Some(dir) => Backbone::<f32>::from_weights(&WeightStore::load(dir)?)?,
        None => (Backbone::build(INPUT.3, &Backbone::<f32>::demo_configs(), &mut rng)?, INPUT.3),
    };
    if let Some(dir) = &a.save_weights {
        bb.to_weights(c_in).save(dir)?;
    }
    let x: Tensor4D<f32> = match &a.input {
        Some(p) => sbconv::io::read_tensor(p)?,
        None => Tensor4D::random(Dims4::new(INPUT.0, INPUT.1, INPUT.2, c_in), &mut rng, -1.0, 1.0),
    };
    let d = x.dims();
    if d.c != c_in {
        return Err(Failure::Usage(format!("input c is {} but the backbone expects {c_in}", d.c)));
    }
    let mask = match &a.mask {
        Some(p) => sbconv::io::read_mask(p)?,
        None => synth_mask_blobs(d.n, d.h, d.w, a.sparsity, a.seed)?.mask,
    };

    let mut failed = Vec::new();
    if a.check {
        println!("{:<8} {:>12} {:>10}", "stage", "max_rel_err", "status");
        for (s, err) in check_full_mask(&bb, &x)?.into_iter().enumerate() {
            let ok = err <= CHECK_TOL;
            println!("{:<8} {:>12.3e} {:>10}", s, err, if ok { "PASS" } else { "FAIL" });
            if !ok {
                failed.push(format!("stage {s} error {err:.3e} > {CHECK_TOL:e}"));
            }
        }
    }

    // Inputs of every stage along each path.
    let sparse_runs = bb.run_sparse(&x, &mask)?;
    let stem = bb.run_stem(&x)?;
    let mut dense_in = vec![stem.clone()];
    for st in &bb.stages {
        let next = st.run_dense(dense_in.last().expect("nonempty"))?.output;
        dense_in.push(next);
    }
    let mut sparse_in = vec![stem];
    sparse_in.extend(sparse_runs.iter().map(|r| r.output.clone()));

    let protocol = BenchProtocol {
        warmup: a.warmup,
        timed: a.iters,
    };
    let mut clock = MonotonicClock;
    let mut rows = Vec::new();
    for (s, st) in bb.stages.iter().enumerate() {
        let run = &sparse_runs[s];
        let od = run.output.dims();
        let stage_mask = downsample_mask(&mask, st.config.mask_scale)?;
        let label = format!("stage{s} {}x{}x{}", od.h, od.w, od.c);
        let dense = benchmark_layer(label.clone(), (0, 0), 0.0, protocol, &mut clock, &mut || {
            std::hint::black_box(st.run_dense(&dense_in[s]).ok());
        });
        let sparse = benchmark_layer(label.clone(), st.config.block, 0.0, protocol, &mut clock, &mut || {
            std::hint::black_box(st.run_sparse(&sparse_in[s], &mask).ok());
        });
        rows.push(BenchRow {
            config: label,
            sparsity: stage_mask.sparsity(),
            block_h: st.config.block.0,
            block_w: st.config.block.1,
            mean_ns: sparse.mean_ns,
            std_ns: sparse.std_ns,
            min_ns: sparse.min_ns,
            flops_dense: run.flops_dense,
            flops_sparse: run.flops_units,
            speedup: dense.mean_ns / sparse.mean_ns,
        });
    }
    println!("base mask sparsity {:.4}", mask.sparsity());
    print!("{}", format_table(&rows));
    if let Some(p) = &a.out {
        write_csv(std::io::BufWriter::new(std::fs::File::create(p)?), &rows)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failed.join("; ")))
    }
}
