use std::path::Path;
use std::process::{Command, Output};

use sbconv::perf::read_csv;

fn sbconv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbconv")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn maskgen_topleft_quarter_has_sixteen_ones() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.sbmk");
    let o = sbconv(&["maskgen", "--kind", "topleft", "--dims", "1,8,8", "--sparsity", "0.75", "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let bytes = std::fs::read(&out).unwrap();
    assert_eq!(bytes[17..].iter().filter(|&&b| b == 1).count(), 16);
    assert_eq!(sbconv::io::read_mask(&out).unwrap().active_count(), 16);
}

#[test]
fn maskgen_blob_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.sbmk"), dir.path().join("b.sbmk"));
    for p in [&a, &b] {
        let o = sbconv(&["maskgen", "--kind", "blob", "--dims", "2,20,30", "--sparsity", "0.8", "--seed", "3", "--out", path(p)]);
        assert!(o.status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn verify_passes_and_is_deterministic() {
    let a = sbconv(&["verify", "--seed", "7"]);
    let b = sbconv(&["verify", "--seed", "7"]);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn verify_with_missing_halo_fails_on_residual_equivalence() {
    let o = sbconv(&["verify", "--halo", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("residual_unit_dense_equiv"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = sbconv(&["verify", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    let o = sbconv(&["bench", "--block", "8"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn truncated_mask_reports_byte_offset() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.sbmk");
    std::fs::write(&bad, b"SBMK\x01\x00").unwrap();
    let o = sbconv(&["bench", "--dims", "1,8,8,2", "--mask", path(&bad), "--iters", "1", "--warmup", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("byte 6"), "{err}");
}

#[test]
fn mask_dimension_mismatch_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.sbmk");
    sbconv(&["maskgen", "--dims", "1,8,8", "--sparsity", "0.5", "--out", path(&m)]);
    let o = sbconv(&["bench", "--dims", "1,8,9,2", "--mask", path(&m), "--iters", "1", "--warmup", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mask w"));
}

#[test]
fn bench_csv_round_trips_and_zero_sparsity_is_near_parity() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv");
    let o = sbconv(&[
        "bench", "--dims", "1,48,48,8", "--sparsity", "0,0.9", "--iters", "5", "--warmup", "2", "--out", path(&csv),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("config,sparsity,block_h,block_w,mean_ns,std_ns,min_ns,flops_dense,flops_sparse,speedup\n"));
    let rows = read_csv(text.as_bytes()).unwrap();
    assert_eq!(rows.len(), 2);
    let mut again = Vec::new();
    sbconv::perf::write_csv(&mut again, &rows).unwrap();
    assert_eq!(String::from_utf8(again).unwrap(), text);
    // No work is skipped at sparsity 0; the sparse path pays only the halo.
    let s0 = rows[0].speedup;
    assert!(s0 > 0.25 && s0 < 4.0, "speedup at sparsity 0: {s0}");
    assert!(rows[0].flops_sparse >= rows[0].flops_dense);
}

#[test]
fn sweep_writes_one_row_per_valid_candidate() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("s.csv");
    let o = sbconv(&[
        "sweep", "--layer", "conv", "--dims", "1,32,32,4", "--candidates", "2,8,16x8", "--iters", "2", "--warmup", "0",
        "--out", path(&csv),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(std::fs::File::open(&csv).unwrap()).unwrap();
    let blocks: Vec<_> = rows.iter().map(|r| (r.block_h, r.block_w)).collect();
    assert_eq!(blocks, vec![(8, 8), (16, 8)]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("skipped 2x2"));
}

#[test]
fn demo_weights_round_trip_through_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w");
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let o = sbconv(&["demo", "--iters", "1", "--warmup", "0", "--save-weights", path(&w), "--out", path(&a)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(w.join("manifest.json").exists());
    let o = sbconv(&["demo", "--iters", "1", "--warmup", "0", "--weights", path(&w), "--out", path(&b)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let flops = |p: &Path| -> Vec<(u64, u64)> {
        read_csv(std::fs::File::open(p).unwrap()).unwrap().iter().map(|r| (r.flops_dense, r.flops_sparse)).collect()
    };
    assert_eq!(flops(&a), flops(&b));
}
