//! `sbconv`: verification, benchmarks, mask generation and a demo backbone.
//!
//! Exit status: 0 success, 1 a check failed, 2 usage or I/O error.

mod bench;
mod demo;
mod opts;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sbconv::perf::{synth_mask_blobs, synth_mask_topleft};
use sbconv::verify::{run_verify, VerifyOptions};

use opts::{parse_dims3, MaskKind};

#[derive(Parser)]
#[command(name = "sbconv", version, about = "Tiled block-sparse convolution on the CPU")]
struct Cli {
    /// Worker threads for the kernels (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the invariant suite on seeded random configurations.
    Verify(VerifyArgs),
    /// Time one layer dense and sparse.
    Bench(bench::BenchArgs),
    /// Time every candidate block size and pick the fastest.
    Sweep(bench::SweepArgs),
    /// Write a synthetic mask as an SBMK file.
    Maskgen(MaskgenArgs),
    /// Run the four-stage demo backbone.
    Demo(demo::DemoArgs),
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Halo of the residual-unit check. Anything but 1 is wrong on purpose.
    #[arg(long, default_value_t = 1)]
    halo: usize,
    /// Multiplies the number of random cases per check.
    #[arg(long, default_value_t = 1)]
    scale: usize,
    /// Also write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MaskgenArgs {
    #[arg(long, value_enum, default_value_t = MaskKind::Topleft)]
    kind: MaskKind,
    /// Mask extent as `n,h,w`.
    #[arg(long, value_parser = parse_dims3)]
    dims: (usize, usize, usize),
    #[arg(long)]
    sparsity: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

pub enum Failure {
    /// A verification or comparison did not hold.
    Check(String),
    /// Bad arguments, files or geometry.
    Usage(String),
}

impl From<sbconv::Error> for Failure {
    fn from(e: sbconv::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

pub type CmdResult = Result<(), Failure>;

fn cmd_verify(a: VerifyArgs) -> CmdResult {
    let report = run_verify(&VerifyOptions {
        seed: a.seed,
        halo: a.halo,
        scale: a.scale,
    });
    print!("{}", report.table());
    if let Some(path) = a.out {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Usage(e.to_string()))?;
        std::fs::write(path, json)?;
    }
    match report.first_failure() {
        None => Ok(()),
        Some(c) => Err(Failure::Check(format!(
            "{} failed: {}",
            c.name,
            c.failure.as_deref().unwrap_or("tolerance exceeded")
        ))),
    }
}

fn cmd_maskgen(a: MaskgenArgs) -> CmdResult {
    let (n, h, w) = a.dims;
    let mask = match a.kind {
        MaskKind::Topleft => synth_mask_topleft(n, h, w, a.sparsity)?,
        MaskKind::Blob => synth_mask_blobs(n, h, w, a.sparsity, a.seed)?.mask,
    };
    sbconv::io::write_mask(&a.out, &mask)?;
    println!(
        "wrote {} ({n}x{h}x{w}, {} active, sparsity {:.4})",
        a.out.display(),
        mask.active_count(),
        mask.sparsity()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    let res = match cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => bench::cmd_bench(a),
        Command::Sweep(a) => bench::cmd_sweep(a),
        Command::Maskgen(a) => cmd_maskgen(a),
        Command::Demo(a) => demo::cmd_demo(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
