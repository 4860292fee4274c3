//! FLOP accounting, synthetic masks, timing and block-size search.

pub mod autotune;
pub mod bench;
pub mod flops;
pub mod layer;
pub mod masks;
pub mod report;

pub use autotune::{autotune_block_size, default_candidates, AutotuneResult};
pub use bench::{benchmark_layer, BenchProtocol, BenchResult, Clock, MonotonicClock, ScriptedClock};
pub use flops::{flops_dense, flops_sparse, theoretical_speedup, FlopReport};
pub use layer::{LayerBench, LayerKind};
pub use masks::{synth_mask_blobs, synth_mask_topleft, BlobMask};
pub use report::{format_table, read_csv, write_csv, BenchRow, CSV_HEADER};
