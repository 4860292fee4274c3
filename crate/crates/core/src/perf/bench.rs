//! Warm-up then timed repetitions around one operation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

/// Times one call of `op`, in nanoseconds.
pub trait Clock {
    fn time(&mut self, op: &mut dyn FnMut()) -> u64;
}

/// Wall-clock timing on the monotonic clock.
#[derive(Debug, Default, Clone, Copy)]
pub struct MonotonicClock;

impl Clock for MonotonicClock {
    fn time(&mut self, op: &mut dyn FnMut()) -> u64 {
        let t = Instant::now();
        op();
        t.elapsed().as_nanos() as u64
    }
}

/// Runs `op` and reports `f(k)` for the `k`-th timed call. For tests of code
/// that consumes timings.
pub struct ScriptedClock<F> {
    calls: usize,
    f: F,
}

impl<F: FnMut(usize) -> u64> ScriptedClock<F> {
    pub fn new(f: F) -> Self {
        Self { calls: 0, f }
    }
}

impl<F: FnMut(usize) -> u64> Clock for ScriptedClock<F> {
    fn time(&mut self, op: &mut dyn FnMut()) -> u64 {
        op();
        let k = self.calls;
        self.calls += 1;
        (self.f)(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchProtocol {
    pub warmup: usize,
    pub timed: usize,
}

impl Default for BenchProtocol {
    fn default() -> Self {
        Self { warmup: 15, timed: 15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub config: String,
    pub block: (usize, usize),
    pub sparsity: f64,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub mean_ns: f64,
    /// Population standard deviation of the timed samples.
    pub std_ns: f64,
    pub min_ns: u64,
    /// Worker threads available to the kernels during the run.
    pub threads: usize,
}

/// Runs `op` `protocol.warmup` times untimed, then `protocol.timed` times
/// under `clock`.
pub fn benchmark_layer(
    config: impl Into<String>,
    block: (usize, usize),
    sparsity: f64,
    protocol: BenchProtocol,
    clock: &mut dyn Clock,
    op: &mut dyn FnMut(),
) -> BenchResult {
    for _ in 0..protocol.warmup {
        op();
    }
    let samples: Vec<u64> = (0..protocol.timed).map(|_| clock.time(op)).collect();
    let n = samples.len().max(1) as f64;
    let mean = samples.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = samples.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    BenchResult {
        config: config.into(),
        block,
        sparsity,
        warmup_iters: protocol.warmup,
        timed_iters: protocol.timed,
        mean_ns: mean,
        std_ns: var.sqrt(),
        min_ns: samples.iter().copied().min().unwrap_or(0),
        threads: rayon::current_num_threads(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_counts_calls() {
        let mut calls = 0;
        let r = benchmark_layer(
            "count",
            (1, 1),
            0.0,
            BenchProtocol { warmup: 3, timed: 4 },
            &mut ScriptedClock::new(|k| 10 * (k as u64 + 1)),
            &mut || calls += 1,
        );
        assert_eq!(calls, 7);
        assert_eq!(r.mean_ns, 25.0);
        assert_eq!(r.min_ns, 10);
        assert!((r.std_ns - 125f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn default_protocol() {
        let p = BenchProtocol::default();
        assert_eq!((p.warmup, p.timed), (15, 15));
    }
}
