//! Seeded self-check suite comparing every sparse path with its dense
//! reference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::conv::{conv2d_direct, ConvParams, FilterBank, Padding};
use crate::error::Result;
use crate::gather::{gather, gather_grad, gather_transpose, scatter, scatter_grad, scatter_transpose, write_count_map};
use crate::norm::PoolMode;
use crate::perf::synth_mask_blobs;
use crate::sparse::{
    dense_residual_unit, residual_block_spec, sparse_conv2d, sparse_conv2d_backward, sparse_residual_unit_with_halo,
    ResidualUnitParams,
};
use crate::tensor::{Dims4, Layout, Tensor4D};
use crate::tiling::{compute_block_spec, coverage_check, reduce_mask, BinaryMask, BlockIndexList, BlockSpec};
use crate::winograd::conv2d_winograd;

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Halo of the residual-unit check; 1 is the correct value.
    pub halo: usize,
    /// Multiplies the number of random cases per check.
    pub scale: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            halo: 1,
            scale: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    /// First failing case, if any.
    pub failure: Option<String>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckOutcome::passed)
    }

    pub fn first_failure(&self) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| !c.passed())
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<28} {:>6} {:>12} {:>10}  status\n", "check", "cases", "max_error", "tolerance");
        for c in &self.checks {
            s.push_str(&format!(
                "{:<28} {:>6} {:>12.3e} {:>10.0e}  {}\n",
                c.name,
                c.cases,
                c.max_error,
                c.tolerance,
                if c.passed() { "ok" } else { "FAIL" }
            ));
        }
        s
    }
}

struct Tracker {
    name: &'static str,
    cases: usize,
    max_error: f64,
    tolerance: f64,
    failure: Option<String>,
}

impl Tracker {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            cases: 0,
            max_error: 0.0,
            tolerance,
            failure: None,
        }
    }

    fn record(&mut self, err: f64, describe: impl FnOnce() -> String) {
        self.cases += 1;
        if err > self.max_error || err.is_nan() {
            self.max_error = err;
        }
        if self.failure.is_none() && !(err <= self.tolerance) {
            self.failure = Some(format!("{} (error {err:.3e})", describe()));
        }
    }

    fn error(&mut self, what: String) {
        self.cases += 1;
        if self.failure.is_none() {
            self.failure = Some(what);
        }
    }

    fn finish(self) -> CheckOutcome {
        CheckOutcome {
            name: self.name,
            cases: self.cases,
            max_error: self.max_error,
            tolerance: self.tolerance,
            failure: self.failure,
        }
    }
}

/// Largest `|a - e| / max(|e|, 1)` over pixels whose entry in `on` is set.
fn masked_error(a: &Tensor4D<f32>, e: &Tensor4D<f32>, on: &[u32]) -> f64 {
    let d = e.dims();
    let mut worst = 0.0f64;
    for i in 0..d.n {
        for y in 0..d.h {
            for x in 0..d.w {
                if on[(i * d.h + y) * d.w + x] == 0 {
                    continue;
                }
                for k in 0..d.c {
                    let (av, ev) = (a.get(i, y, x, k) as f64, e.get(i, y, x, k) as f64);
                    worst = worst.max((av - ev).abs() / ev.abs().max(1.0));
                }
            }
        }
    }
    worst
}

/// Random mask: full, empty, one pixel or blobs at 25-90% sparsity.
pub fn random_mask<R: Rng>(rng: &mut R, n: usize, h: usize, w: usize) -> (BinaryMask, String) {
    match rng.gen_range(0..4) {
        0 => (BinaryMask::ones(n, h, w), "full".into()),
        1 => (BinaryMask::zeros(n, h, w), "empty".into()),
        2 => {
            let (py, px) = (rng.gen_range(0..h), rng.gen_range(0..w));
            let pi = rng.gen_range(0..n);
            (
                BinaryMask::from_fn(n, h, w, |i, y, x| (i, y, x) == (pi, py, px)),
                format!("pixel ({pi}, {py}, {px})"),
            )
        }
        _ => {
            let s = rng.gen_range(0.25..0.9);
            let m = synth_mask_blobs(n, h, w, s, rng.gen()).expect("valid sparsity").mask;
            (m, format!("blob {s:.2}"))
        }
    }
}

/// Random convolution setup with a block size that tiles it exactly.
pub struct ConvCase {
    pub x: Tensor4D<f32>,
    pub f: FilterBank<f32>,
    pub p: ConvParams,
    pub block: (usize, usize),
    pub mask: BinaryMask,
    pub label: String,
}

pub fn random_conv_case<R: Rng>(rng: &mut R, max_hw: usize, max_c: usize) -> ConvCase {
    let k = [1, 3, 3, 5][rng.gen_range(0..4)];
    let s = if k > 1 && rng.gen_bool(0.3) { 2 } else { 1 };
    let padding = if rng.gen_bool(0.6) { Padding::Same } else { Padding::Valid };
    let n = rng.gen_range(1..=2);
    let h = rng.gen_range(k.max(4)..=max_hw);
    let w = rng.gen_range(k.max(4)..=max_hw);
    let c = rng.gen_range(1..=max_c);
    let co = rng.gen_range(1..=max_c);
    let pick = |rng: &mut R| loop {
        let b = rng.gen_range(4..=16);
        if b >= k && (b - k) % s == 0 {
            return b;
        }
    };
    let block = (pick(rng), pick(rng));
    let x = Tensor4D::random(Dims4::new(n, h, w, c), rng, -1.0, 1.0);
    let f = FilterBank::random((k, k, c, co), rng, 1.0 / ((k * k * c) as f64).sqrt(), true);
    let p = ConvParams::new((k, k), (s, s), padding, co).expect("valid params");
    let (mask, mask_label) = random_mask(rng, n, h, w);
    let label = format!("x {n}x{h}x{w}x{c}, k {k} s {s} {padding:?}, {co} filters, block {block:?}, mask {mask_label}");
    ConvCase {
        x,
        f,
        p,
        block,
        mask,
        label,
    }
}

fn check_conv_equivalence(rng: &mut ChaCha8Rng, cases: usize) -> CheckOutcome {
    let mut t = Tracker::new("sparse_conv_dense_equiv", 1e-5);
    for _ in 0..cases {
        let cc = random_conv_case(rng, 24, 4);
        let run = || -> Result<f64> {
            let d = cc.x.dims();
            let spec = compute_block_spec((d.h, d.w), &cc.p, cc.block)?;
            let idx = reduce_mask(&cc.mask, &spec, PoolMode::Max, 1.0)?;
            let a = sparse_conv2d(&cc.x, &cc.mask, &cc.f, &cc.p, cc.block)?;
            let e = conv2d_direct(&cc.x, &cc.f, &cc.p)?;
            Ok(masked_error(&a, &e, &write_count_map(&idx, &spec, d.n)))
        };
        match run() {
            Ok(err) => t.record(err, || cc.label.clone()),
            Err(e) => t.error(format!("{}: {e}", cc.label)),
        }
    }
    t.finish()
}

fn check_residual_equivalence(rng: &mut ChaCha8Rng, cases: usize, halo: usize) -> CheckOutcome {
    let mut t = Tracker::new("residual_unit_dense_equiv", 1e-4);
    for _ in 0..cases {
        let (n, h, w) = (rng.gen_range(1..=2), rng.gen_range(3..=24), rng.gen_range(3..=24));
        let (c, m) = (rng.gen_range(1..=6), rng.gen_range(1..=4));
        let b = rng.gen_range(4..=12);
        let pre = rng.gen_bool(0.5);
        let x = Tensor4D::<f32>::random(Dims4::new(n, h, w, c), rng, -1.0, 1.0);
        let u = ResidualUnitParams::random(c, m, pre, rng);
        let (mask, ml) = random_mask(rng, n, h, w);
        let label = format!("x {n}x{h}x{w}x{c}, mid {m}, block {b}, halo {halo}, pre {pre}, mask {ml}");
        let run = || -> Result<f64> {
            let spec = residual_block_spec((h, w), (b, b), 1)?;
            let idx = reduce_mask(&mask, &spec, PoolMode::Max, 1.0)?;
            let a = sparse_residual_unit_with_halo(&x, &mask, &u, (b, b), halo)?;
            let e = dense_residual_unit(&x, &u)?;
            Ok(masked_error(&a, &e, &write_count_map(&idx, &spec, n)))
        };
        match run() {
            Ok(err) => t.record(err, || label),
            Err(e) => t.error(format!("{label}: {e}")),
        }
    }
    t.finish()
}

fn random_spec(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Option<BlockSpec> {
    let k = rng.gen_range(1..=5);
    let s = rng.gen_range(1..=k.min(3));
    let padding = if rng.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
    let conv = ConvParams::new((k, k), (s, s), padding, 1).ok()?;
    let b = k + s * rng.gen_range(0..=6);
    compute_block_spec((h, w), &conv, (b, b)).ok()
}

fn check_coverage(rng: &mut ChaCha8Rng, cases: usize) -> CheckOutcome {
    let mut t = Tracker::new("tiling_coverage", 0.0);
    let mut done = 0;
    while done < cases {
        let (n, h, w) = (rng.gen_range(1..=2), rng.gen_range(5..=32), rng.gen_range(5..=32));
        let Some(spec) = random_spec(rng, h, w) else { continue };
        done += 1;
        let (mask, ml) = random_mask(rng, n, h, w);
        let res = reduce_mask(&mask, &spec, PoolMode::Max, 1.0).and_then(|idx| coverage_check(&mask, &spec, &idx));
        match res {
            Ok(_) => t.record(0.0, String::new),
            Err(e) => t.error(format!("{h}x{w} block {:?} mask {ml}: {e}", spec.block)),
        }
    }
    t.finish()
}

fn int_tensor(rng: &mut ChaCha8Rng, d: Dims4) -> Tensor4D<f64> {
    Tensor4D::from_fn(d, |_, _, _, _| rng.gen_range(-8i32..=8) as f64)
}

fn check_adjoints(rng: &mut ChaCha8Rng, cases: usize) -> CheckOutcome {
    let mut t = Tracker::new("gather_scatter_adjoint", 0.0);
    let mut done = 0;
    while done < cases {
        let (n, h, w, c) = (rng.gen_range(1..=2), rng.gen_range(5..=20), rng.gen_range(5..=20), rng.gen_range(1..=3));
        let Some(spec) = random_spec(rng, h, w) else { continue };
        done += 1;
        let idx = BlockIndexList::full(&spec, n);
        let x = int_tensor(rng, Dims4::new(n, h, w, c));
        let res = (|| -> Result<f64> {
            let gx = gather(&x, &idx, &spec)?;
            let g = int_tensor(rng, gx.tensor().dims());
            let lhs = gx.tensor().dot(&g)?;
            let rhs = x.dot(&gather_grad(&gx.with_tensor(g)?, &spec, x.dims())?)?;
            let (oh, ow) = spec.output_hw;
            let yb = int_tensor(rng, Dims4::new(idx.len(), spec.out_block.0, spec.out_block.1, c));
            let yb = gx.with_tensor(yb)?;
            let gy = int_tensor(rng, Dims4::new(n, oh, ow, c));
            let s = scatter(&yb, &spec, Tensor4D::zeros(gy.dims(), Layout::ChannelsLast))?;
            let lhs2 = s.dot(&gy)?;
            let rhs2 = yb.tensor().dot(scatter_grad(&gy, &idx, &spec)?.tensor())?;
            Ok((lhs - rhs).abs().max((lhs2 - rhs2).abs()))
        })();
        match res {
            Ok(err) => t.record(err, || format!("{n}x{h}x{w}x{c} block {:?}", spec.block)),
            Err(e) => t.error(e.to_string()),
        }
    }
    t.finish()
}

fn check_winograd(rng: &mut ChaCha8Rng, cases: usize) -> CheckOutcome {
    let mut t = Tracker::new("winograd_vs_direct", 1e-4);
    for _ in 0..cases {
        let (n, h, w) = (rng.gen_range(1..=2), rng.gen_range(3..=20), rng.gen_range(3..=20));
        let (c, co) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let padding = if rng.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
        let x = Tensor4D::<f32>::random(Dims4::new(n, h, w, c), rng, -1.0, 1.0);
        let with_bias = rng.gen_bool(0.5);
        let f = FilterBank::random((3, 3, c, co), rng, 1.0 / (9.0 * c as f64).sqrt(), with_bias);
        let p = ConvParams::square(3, padding, co).expect("valid");
        let res = conv2d_winograd(&x, &f, &p)
            .and_then(|a| conv2d_direct(&x, &f, &p).map(|e| crate::tensor::max_rel_error(a.data(), e.data())));
        match res {
            Ok(err) => t.record(err, || format!("{n}x{h}x{w}x{c} -> {co} {padding:?}")),
            Err(e) => t.error(e.to_string()),
        }
    }
    t.finish()
}

fn check_fused(rng: &mut ChaCha8Rng, cases: usize) -> CheckOutcome {
    let mut t = Tracker::new("fused_transpose", 0.0);
    let mut done = 0;
    while done < cases {
        let (n, h, w, c) = (rng.gen_range(1..=2), rng.gen_range(5..=20), rng.gen_range(5..=20), rng.gen_range(1..=4));
        let Some(spec) = random_spec(rng, h, w) else { continue };
        done += 1;
        let x = Tensor4D::<f32>::random(Dims4::new(n, h, w, c), rng, -1.0, 1.0);
        let (mask, _) = random_mask(rng, n, h, w);
        let res = (|| -> Result<bool> {
            let idx = reduce_mask(&mask, &spec, PoolMode::Max, 1.0)?;
            let fused = gather_transpose(&x, &idx, &spec)?;
            let composed = gather(&x, &idx, &spec)?.transpose_layout();
            let (oh, ow) = spec.output_hw;
            let yb = Tensor4D::<f32>::random(Dims4::new(idx.len(), spec.out_block.0, spec.out_block.1, c), rng, -1.0, 1.0);
            let yb = fused.with_tensor(yb.transpose_layout())?;
            let dst = Tensor4D::<f32>::random(Dims4::new(n, oh, ow, c), rng, -1.0, 1.0);
            let a = scatter_transpose(&yb, &spec, dst.clone())?;
            let b = scatter(&yb.transpose_layout(), &spec, dst)?;
            Ok(fused == composed && a == b)
        })();
        match res {
            Ok(true) => t.record(0.0, String::new),
            Ok(false) => t.record(1.0, || format!("{n}x{h}x{w}x{c} block {:?}", spec.block)),
            Err(e) => t.error(e.to_string()),
        }
    }
    t.finish()
}

/// Central-difference derivative of `f` along `dir`-th coordinate of `v`.
fn central_diff(v: &mut [f64], i: usize, eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = v[i];
    v[i] = orig + eps;
    let up = f(v);
    v[i] = orig - eps;
    let down = f(v);
    v[i] = orig;
    (up - down) / (2.0 * eps)
}

fn rel(a: f64, e: f64) -> f64 {
    (a - e).abs() / e.abs().max(1.0)
}

fn check_gradients(rng: &mut ChaCha8Rng, cases: usize) -> CheckOutcome {
    const EPS: f64 = 1e-6;
    let mut t = Tracker::new("finite_difference_grads", 1e-5);
    for case in 0..cases {
        let (h, w, c, co) = (rng.gen_range(4..=7), rng.gen_range(4..=7), rng.gen_range(1..=2), rng.gen_range(1..=2));
        let x = Tensor4D::<f64>::random(Dims4::new(1, h, w, c), rng, -1.0, 1.0);
        let mask = BinaryMask::from_fn(1, h, w, |_, y, xx| y < h / 2 && xx >= w / 3);
        let res = (|| -> Result<f64> {
            if case % 2 == 0 {
                let f = FilterBank::<f64>::random((3, 3, c, co), rng, 0.5, true);
                let p = ConvParams::square(3, Padding::Same, co)?;
                let r = Tensor4D::<f64>::random(Dims4::new(1, h, w, co), rng, -1.0, 1.0);
                let grads = sparse_conv2d_backward(&x, &mask, &f, &p, (4, 4), &r)?;
                let loss = |xv: &[f64], fv: &[f64]| {
                    let xt = Tensor4D::from_vec(x.dims(), Layout::ChannelsLast, xv.to_vec()).unwrap();
                    let mut ft = f.clone();
                    ft.weights = fv.to_vec();
                    sparse_conv2d(&xt, &mask, &ft, &p, (4, 4)).unwrap().dot(&r).unwrap()
                };
                let mut worst = 0.0f64;
                let mut xv = x.data().to_vec();
                for i in 0..xv.len() {
                    let fd = central_diff(&mut xv, i, EPS, |v| loss(v, &f.weights));
                    worst = worst.max(rel(grads.dx.data()[i], fd));
                }
                let mut fv = f.weights.clone();
                for i in 0..fv.len() {
                    let fd = central_diff(&mut fv, i, EPS, |v| loss(x.data(), v));
                    worst = worst.max(rel(grads.df.weights[i], fd));
                }
                Ok(worst)
            } else {
                let u = ResidualUnitParams::<f64>::random(c, co, rng.gen_bool(0.5), rng);
                let r = Tensor4D::<f64>::random(x.dims(), rng, -1.0, 1.0);
                let grads = crate::sparse::sparse_residual_unit_backward(&x, &mask, &u, (5, 5), &r)?;
                let loss = |xv: &[f64], uu: &ResidualUnitParams<f64>| {
                    let xt = Tensor4D::from_vec(x.dims(), Layout::ChannelsLast, xv.to_vec()).unwrap();
                    crate::sparse::sparse_residual_unit(&xt, &mask, uu, (5, 5)).unwrap().dot(&r).unwrap()
                };
                let mut worst = 0.0f64;
                let mut xv = x.data().to_vec();
                for i in 0..xv.len() {
                    let fd = central_diff(&mut xv, i, EPS, |v| loss(v, &u));
                    worst = worst.max(rel(grads.dx.data()[i], fd));
                }
                let mut uu = u.clone();
                let mut wv = u.conv2.weights.clone();
                for i in 0..wv.len() {
                    let fd = central_diff(&mut wv, i, EPS, |v| {
                        uu.conv2.weights = v.to_vec();
                        loss(x.data(), &uu)
                    });
                    worst = worst.max(rel(grads.dconv2.weights[i], fd));
                }
                Ok(worst)
            }
        })();
        match res {
            Ok(err) => t.record(err, || format!("case {case}: 1x{h}x{w}x{c} -> {co}")),
            Err(e) => t.error(e.to_string()),
        }
    }
    t.finish()
}

/// Runs the suite. Identical options give identical reports.
pub fn run_verify(opts: &VerifyOptions) -> VerifyReport {
    let s = opts.scale.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let checks = vec![
        check_conv_equivalence(&mut rng, 40 * s),
        check_residual_equivalence(&mut rng, 20 * s, opts.halo),
        check_coverage(&mut rng, 50 * s),
        check_adjoints(&mut rng, 30 * s),
        check_winograd(&mut rng, 20 * s),
        check_fused(&mut rng, 20 * s),
        check_gradients(&mut rng, 4 * s),
    ];
    VerifyReport {
        seed: opts.seed,
        checks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes_and_is_deterministic() {
        let opts = VerifyOptions { seed: 7, ..Default::default() };
        let a = run_verify(&opts);
        assert!(a.passed(), "{}", a.table());
        let b = run_verify(&opts);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_halo_fails_residual_equivalence() {
        let r = run_verify(&VerifyOptions { seed: 1, halo: 0, scale: 1 });
        let first = r.first_failure().expect("halo 0 must fail");
        assert_eq!(first.name, "residual_unit_dense_equiv");
    }
}
