//! Empirical block-size search.

use crate::error::{Error, Result};

use super::bench::{benchmark_layer, BenchProtocol, BenchResult, Clock};

/// Square blocks 8, 16, 24, 32, 48 and 64.
pub fn default_candidates() -> Vec<(usize, usize)> {
    [8, 16, 24, 32, 48, 64].iter().map(|&b| (b, b)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutotuneResult {
    pub chosen: (usize, usize),
    /// One row per candidate that could run, in candidate order.
    pub table: Vec<BenchResult>,
    /// Candidates rejected during preparation, with the reason.
    pub skipped: Vec<((usize, usize), String)>,
}

impl AutotuneResult {
    pub fn chosen_result(&self) -> &BenchResult {
        self.table.iter().find(|r| r.block == self.chosen).unwrap()
    }
}

/// Benchmarks every candidate under the same protocol and returns the one
/// with the lowest mean time; ties go to the smaller block area, then to the
/// earlier candidate.
///
/// `prepare` builds the operation for one block size, doing any per-size
/// setup outside the timed region. Candidates it rejects are skipped.
pub fn autotune_block_size<P, F>(
    config: &str,
    sparsity: f64,
    candidates: &[(usize, usize)],
    protocol: BenchProtocol,
    clock: &mut dyn Clock,
    mut prepare: F,
) -> Result<AutotuneResult>
where
    P: FnMut(),
    F: FnMut((usize, usize)) -> Result<P>,
{
    if candidates.is_empty() {
        return Err(Error::config("no block-size candidates"));
    }
    let mut table = Vec::new();
    let mut skipped = Vec::new();
    for &block in candidates {
        match prepare(block) {
            Ok(mut op) => {
                table.push(benchmark_layer(config, block, sparsity, protocol, clock, &mut op));
            }
            Err(e) => skipped.push((block, e.to_string())),
        }
    }
    let best = table
        .iter()
        .min_by(|a, b| {
            a.mean_ns
                .total_cmp(&b.mean_ns)
                .then((a.block.0 * a.block.1).cmp(&(b.block.0 * b.block.1)))
        })
        .ok_or_else(|| {
            Error::config(format!(
                "all {} candidates are invalid; first: {}",
                candidates.len(),
                skipped.first().map(|s| s.1.as_str()).unwrap_or("")
            ))
        })?;
    Ok(AutotuneResult {
        chosen: best.block,
        table: table.clone(),
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perf::bench::ScriptedClock;

    const P: BenchProtocol = BenchProtocol { warmup: 1, timed: 2 };

    #[test]
    fn single_candidate_wins() {
        let mut clock = ScriptedClock::new(|_| 5);
        let r = autotune_block_size("x", 0.5, &[(8, 8)], P, &mut clock, |_| Ok(|| ())).unwrap();
        assert_eq!(r.chosen, (8, 8));
        assert_eq!(r.chosen_result().mean_ns, 5.0);
    }

    #[test]
    fn argmin_under_scripted_timer() {
        let times = [30u64, 10, 20, 10];
        let cands = [(8, 8), (24, 24), (16, 16), (12, 12)];
        let mut clock = ScriptedClock::new(move |k| times[k / 2]);
        let r = autotune_block_size("x", 0.9, &cands, P, &mut clock, |_| Ok(|| ())).unwrap();
        // (24,24) and (12,12) tie; smaller area wins.
        assert_eq!(r.chosen, (12, 12));
        assert_eq!(r.table.len(), 4);
        let min = r.table.iter().map(|t| t.mean_ns).fold(f64::INFINITY, f64::min);
        assert_eq!(r.chosen_result().mean_ns, min);
    }

    #[test]
    fn invalid_candidates_skipped_or_rejected() {
        let mut clock = ScriptedClock::new(|_| 1);
        let prep = |b: (usize, usize)| {
            if b.0 < 10 {
                Err(Error::config("too small"))
            } else {
                Ok(|| ())
            }
        };
        let r = autotune_block_size("x", 0.0, &[(4, 4), (12, 12)], P, &mut clock, prep).unwrap();
        assert_eq!(r.chosen, (12, 12));
        assert_eq!(r.skipped.len(), 1);
        assert!(autotune_block_size("x", 0.0, &[(4, 4)], P, &mut clock, prep).is_err());
        assert!(autotune_block_size("x", 0.0, &[], P, &mut clock, prep).is_err());
    }
}
