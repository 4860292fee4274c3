//! Benchmark CSV and table output.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One CSV row. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub config: String,
    pub sparsity: f64,
    pub block_h: usize,
    pub block_w: usize,
    pub mean_ns: f64,
    pub std_ns: f64,
    pub min_ns: u64,
    pub flops_dense: u64,
    pub flops_sparse: u64,
    pub speedup: f64,
}

pub const CSV_HEADER: &str =
    "config,sparsity,block_h,block_w,mean_ns,std_ns,min_ns,flops_dense,flops_sparse,speedup";

pub fn write_csv<W: Write>(out: W, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

/// Fixed-width table for terminals.
pub fn format_table(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:<24} {:>8} {:>9} {:>12} {:>10} {:>12} {:>8}\n",
        "config", "sparsity", "block", "mean_ms", "std_ms", "flop_ratio", "speedup"
    );
    for r in rows {
        let ratio = r.flops_dense as f64 / r.flops_sparse as f64;
        s.push_str(&format!(
            "{:<24} {:>8.3} {:>9} {:>12.3} {:>10.3} {:>12.2} {:>8.2}\n",
            r.config,
            r.sparsity,
            format!("{}x{}", r.block_h, r.block_w),
            r.mean_ns / 1e6,
            r.std_ns / 1e6,
            ratio,
            r.speedup
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let rows = vec![
            BenchRow {
                config: "conv3x3 1x400x704x32".into(),
                sparsity: 0.9,
                block_h: 16,
                block_w: 16,
                mean_ns: 1234567.0 / 3.0,
                std_ns: 0.1 + 0.2,
                min_ns: 400000,
                flops_dense: 5_190_451_200,
                flops_sparse: 576_716_800,
                speedup: 7.123456789012345,
            },
            BenchRow {
                config: "with,comma".into(),
                sparsity: 0.0,
                block_h: 8,
                block_w: 12,
                mean_ns: 1e-300,
                std_ns: 0.0,
                min_ns: 0,
                flops_dense: 0,
                flops_sparse: 0,
                speedup: f64::INFINITY,
            },
        ];
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(read_csv(&buf[..]).unwrap(), rows);
        assert!(format_table(&rows).contains("16x16"));
    }
}
