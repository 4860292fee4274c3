use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sbconv::io::{decode_mask, decode_tensor, encode_mask, encode_tensor};
use sbconv::{
    compute_block_spec, default_threshold, gather, gather_grad, reduce_mask, scatter, sparse_conv2d, BinaryMask,
    BlockIndexList, BlockSpec, ConvParams, Dims4, FilterBank, Layout, Padding, PoolMode, Tensor4D,
};

fn geometry() -> impl Strategy<Value = (usize, usize, BlockSpec)> {
    (1usize..=5, 1usize..=3, any::<bool>(), 0usize..=5, 0usize..=5, 5usize..=40, 5usize..=40)
        .prop_filter_map("stride above kernel", |(k, s, same, mh, mw, h, w)| {
            if s > k {
                return None;
            }
            let pad = if same { Padding::Same } else { Padding::Valid };
            let p = ConvParams::new((k, k), (s, s), pad, 1).ok()?;
            let spec = compute_block_spec((h, w), &p, (k + s * mh, k + s * mw)).ok()?;
            Some((h, w, spec))
        })
}

fn mask_bits(n: usize, h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
    (prop::collection::vec(0u8..10, n * h * w)).prop_map(move |v| {
        BinaryMask::new(n, h, w, v.into_iter().map(|b| u8::from(b == 0)).collect()).unwrap()
    })
}

fn geometry_and_mask() -> impl Strategy<Value = (BlockSpec, BinaryMask)> {
    geometry().prop_flat_map(|(h, w, spec)| (Just(spec), mask_bits(1, h, w)))
}

fn int_tensor(d: Dims4, seed: u64) -> Tensor4D<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4D::from_fn(d, |_, _, _, _| rng.gen_range(-9i32..=9) as f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn output_blocks_partition_the_output((_, _, spec) in geometry()) {
        prop_assert_eq!(spec.in_stride.0, spec.out_block.0 * spec.stride.0);
        prop_assert_eq!(spec.in_stride.1, spec.out_block.1 * spec.stride.1);
        prop_assert_eq!(spec.block.0, (spec.out_block.0 - 1) * spec.stride.0 + spec.kernel.0);
        let (oh, ow) = spec.output_hw;
        let mut hits = vec![0u32; oh * ow];
        for by in 0..spec.grid.0 {
            for bx in 0..spec.grid.1 {
                let (ys, xs) = spec.write_region(by, bx);
                for y in ys {
                    for x in xs.clone() {
                        hits[y * ow + x] += 1;
                    }
                }
            }
        }
        prop_assert!(hits.iter().all(|&h| h == 1));
    }

    #[test]
    fn more_active_pixels_never_drop_blocks((spec, m) in geometry_and_mask(), extra in any::<u64>()) {
        let (_, h, w) = m.dims();
        let mut grown = m.clone();
        let mut s = extra;
        for _ in 0..4 {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            grown.set(0, (s >> 33) as usize % h, (s >> 17) as usize % w, true);
        }
        let a = reduce_mask(&m, &spec, PoolMode::Max, 1.0).unwrap();
        let b = reduce_mask(&grown, &spec, PoolMode::Max, 1.0).unwrap();
        prop_assert!(a.iter().all(|&i| b.contains(i)));
    }

    #[test]
    fn avg_at_default_threshold_equals_max((spec, m) in geometry_and_mask()) {
        let a = reduce_mask(&m, &spec, PoolMode::Max, 1.0).unwrap();
        let b = reduce_mask(&m, &spec, PoolMode::Avg, default_threshold(&spec)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn gather_adjoint_is_exact((spec, m) in geometry_and_mask(), c in 1usize..4, seed in any::<u64>()) {
        let (n, h, w) = m.dims();
        let idx = reduce_mask(&m, &spec, PoolMode::Max, 1.0).unwrap();
        let x = int_tensor(Dims4::new(n, h, w, c), seed);
        let gx = gather(&x, &idx, &spec).unwrap();
        let g = int_tensor(gx.tensor().dims(), seed ^ 1);
        let lhs = gx.tensor().dot(&g).unwrap();
        let rhs = x.dot(&gather_grad(&gx.with_tensor(g).unwrap(), &spec, x.dims()).unwrap()).unwrap();
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn scatter_preserves_unwritten_destination((spec, m) in geometry_and_mask(), seed in any::<u64>()) {
        let (n, _, _) = m.dims();
        let idx = reduce_mask(&m, &spec, PoolMode::Max, 1.0).unwrap();
        let (oh, ow) = spec.output_hw;
        let dst = int_tensor(Dims4::new(n, oh, ow, 2), seed);
        let yb = int_tensor(Dims4::new(idx.len(), spec.out_block.0, spec.out_block.1, 2), seed ^ 2);
        let gb = gather(&int_tensor(Dims4::new(n, spec.input_hw.0, spec.input_hw.1, 2), 0), &idx, &spec).unwrap();
        let out = scatter(&gb.with_tensor(yb).unwrap(), &spec, dst.clone()).unwrap();
        let full = BlockIndexList::full(&spec, n);
        for b in full.iter().filter(|b| !idx.contains(**b)) {
            let (ys, xs) = spec.write_region(b.by, b.bx);
            for y in ys {
                for x in xs.clone() {
                    for k in 0..2 {
                        prop_assert_eq!(out.get(b.n, y, x, k), dst.get(b.n, y, x, k));
                    }
                }
            }
        }
    }

    #[test]
    fn sparse_conv_is_layout_invariant_and_deterministic(
        (spec, m) in geometry_and_mask(), seed in any::<u64>(), same in any::<bool>()
    ) {
        let (n, h, w) = m.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor4D::<f32>::random(Dims4::new(n, h, w, 3), &mut rng, -1.0, 1.0);
        let (k, s) = (spec.kernel.0, spec.stride.0);
        let f = FilterBank::<f32>::random((k, k, 3, 2), &mut rng, 0.4, true);
        let p = ConvParams::new((k, k), (s, s), if same { Padding::Same } else { Padding::Valid }, 2).unwrap();
        let Ok(a) = sparse_conv2d(&x, &m, &f, &p, spec.block) else { return Ok(()) };
        let b = sparse_conv2d(&x.transpose_layout(), &m, &f, &p, spec.block).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = one.install(|| sparse_conv2d(&x, &m, &f, &p, spec.block).unwrap());
        let d = a.dims();
        for i in 0..d.n {
            for y in 0..d.h {
                for xx in 0..d.w {
                    for k in 0..d.c {
                        prop_assert_eq!(a.get(i, y, xx, k).to_bits(), b.get(i, y, xx, k).to_bits());
                    }
                }
            }
        }
        prop_assert_eq!(a, c);
    }

    #[test]
    fn tensor_codec_round_trips(n in 1usize..3, h in 1usize..9, w in 1usize..9, c in 1usize..5, cf in any::<bool>(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Tensor4D::<f32>::random(Dims4::new(n, h, w, c), &mut rng, -3.0, 3.0);
        if cf {
            x = x.transpose_layout();
        }
        let back: Tensor4D<f32> = decode_tensor(&encode_tensor(&x).unwrap()).unwrap();
        prop_assert_eq!(back.layout(), if cf { Layout::ChannelsFirst } else { Layout::ChannelsLast });
        prop_assert_eq!(back, x);
    }

    #[test]
    fn mask_codec_round_trips(m in (1usize..3, 1usize..12, 1usize..12).prop_flat_map(|(n, h, w)| mask_bits(n, h, w))) {
        prop_assert_eq!(decode_mask(&encode_mask(&m).unwrap()).unwrap(), m);
    }
}
