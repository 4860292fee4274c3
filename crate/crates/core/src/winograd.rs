//! Winograd F(2x2, 3x3) convolution.
//!
//! Only 3x3 kernels with unit stride are accepted. Everything else is an
//! [`Error::Unsupported`]; choosing an algorithm is the caller's job.
//! Odd output extents are handled by computing a padded last tile row/column
//! and cropping.

use rayon::prelude::*;

use crate::conv::{ConvParams, FilterBank};
use crate::error::{Error, Result};
use crate::tensor::{Dims4, Element, Layout, Tensor4D};

/// `G g G^T` for one 3x3 filter slice (row-major), giving a 4x4 tile.
fn transform_filter<T: Element>(g: &[T; 9]) -> [T; 16] {
    let half = T::narrow(0.5);
    let mut tmp = [T::zero(); 12];
    for j in 0..3 {
        let (g0, g1, g2) = (g[j], g[3 + j], g[6 + j]);
        tmp[j] = g0;
        tmp[3 + j] = (g0 + g1 + g2) * half;
        tmp[6 + j] = (g0 - g1 + g2) * half;
        tmp[9 + j] = g2;
    }
    let mut u = [T::zero(); 16];
    for i in 0..4 {
        let (t0, t1, t2) = (tmp[i * 3], tmp[i * 3 + 1], tmp[i * 3 + 2]);
        u[i * 4] = t0;
        u[i * 4 + 1] = (t0 + t1 + t2) * half;
        u[i * 4 + 2] = (t0 - t1 + t2) * half;
        u[i * 4 + 3] = t2;
    }
    u
}

/// `B^T d B` for one 4x4 input tile.
#[inline]
fn transform_input<T: Element>(d: &[T; 16]) -> [T; 16] {
    let mut tmp = [T::zero(); 16];
    for j in 0..4 {
        let (d0, d1, d2, d3) = (d[j], d[4 + j], d[8 + j], d[12 + j]);
        tmp[j] = d0 - d2;
        tmp[4 + j] = d1 + d2;
        tmp[8 + j] = d2 - d1;
        tmp[12 + j] = d1 - d3;
    }
    let mut v = [T::zero(); 16];
    for i in 0..4 {
        let (t0, t1, t2, t3) = (tmp[i * 4], tmp[i * 4 + 1], tmp[i * 4 + 2], tmp[i * 4 + 3]);
        v[i * 4] = t0 - t2;
        v[i * 4 + 1] = t1 + t2;
        v[i * 4 + 2] = t2 - t1;
        v[i * 4 + 3] = t1 - t3;
    }
    v
}

/// `A^T m A`, 4x4 -> 2x2.
#[inline]
fn transform_output<T: Element>(m: &[T; 16]) -> [T; 4] {
    let mut tmp = [T::zero(); 8];
    for j in 0..4 {
        let (m0, m1, m2, m3) = (m[j], m[4 + j], m[8 + j], m[12 + j]);
        tmp[j] = m0 + m1 + m2;
        tmp[4 + j] = m1 - m2 - m3;
    }
    let mut out = [T::zero(); 4];
    for i in 0..2 {
        let (t0, t1, t2, t3) = (tmp[i * 4], tmp[i * 4 + 1], tmp[i * 4 + 2], tmp[i * 4 + 3]);
        out[i * 2] = t0 + t1 + t2;
        out[i * 2 + 1] = t1 - t2 - t3;
    }
    out
}

pub fn conv2d_winograd<T: Element>(
    x: &Tensor4D<T>,
    f: &FilterBank<T>,
    p: &ConvParams,
) -> Result<Tensor4D<T>> {
    if p.kernel != (3, 3) || p.stride != (1, 1) {
        return Err(Error::Unsupported(format!(
            "winograd F(2x2,3x3) needs a 3x3 kernel with stride 1, got kernel {:?} stride {:?}",
            p.kernel, p.stride
        )));
    }
    let d = x.dims();
    f.check_against(p, d.c)?;
    let (oh, ow) = p.output_hw(d.h, d.w)?;
    let (ph, pw) = p.pad_before();
    let (ci_n, co) = (f.c_in, f.c_out);

    // u[pos][ci][co]
    let mut u = vec![T::zero(); 16 * ci_n * co];
    for ci in 0..ci_n {
        for o in 0..co {
            let mut g = [T::zero(); 9];
            for ky in 0..3 {
                for kx in 0..3 {
                    g[ky * 3 + kx] = f.weights[f.index(ky, kx, ci, o)];
                }
            }
            for (pos, v) in transform_filter(&g).into_iter().enumerate() {
                u[(pos * ci_n + ci) * co + o] = v;
            }
        }
    }

    let xl = x.to_layout(Layout::ChannelsLast);
    let xs = xl.data();
    let (th, tw) = (oh.div_ceil(2), ow.div_ceil(2));
    let (ph2, pw2) = (th * 2, tw * 2);
    let mut padded = vec![T::zero(); d.n * ph2 * pw2 * co];
    if !padded.is_empty() {
        padded
            .par_chunks_mut(2 * pw2 * co)
            .enumerate()
            .for_each(|(row, out)| {
                let (i, ty) = (row / th, row % th);
                let mut v = vec![T::zero(); 16 * ci_n];
                let mut m = vec![T::zero(); 16 * co];
                for tx in 0..tw {
                    let y0 = (ty * 2) as isize - ph as isize;
                    let x0 = (tx * 2) as isize - pw as isize;
                    for ci in 0..ci_n {
                        let mut tile = [T::zero(); 16];
                        for r in 0..4 {
                            let iy = y0 + r as isize;
                            if iy < 0 || iy as usize >= d.h {
                                continue;
                            }
                            for c in 0..4 {
                                let ix = x0 + c as isize;
                                if ix < 0 || ix as usize >= d.w {
                                    continue;
                                }
                                tile[r * 4 + c] =
                                    xs[((i * d.h + iy as usize) * d.w + ix as usize) * ci_n + ci];
                            }
                        }
                        for (pos, val) in transform_input(&tile).into_iter().enumerate() {
                            v[pos * ci_n + ci] = val;
                        }
                    }
                    for pos in 0..16 {
                        let mrow = &mut m[pos * co..(pos + 1) * co];
                        mrow.fill(T::zero());
                        let urow = &u[pos * ci_n * co..(pos + 1) * ci_n * co];
                        for (ci, ucol) in urow.chunks_exact(co).enumerate() {
                            let a = v[pos * ci_n + ci];
                            for (o, &b) in mrow.iter_mut().zip(ucol) {
                                *o = *o + a * b;
                            }
                        }
                    }
                    for o in 0..co {
                        let mut tile = [T::zero(); 16];
                        for pos in 0..16 {
                            tile[pos] = m[pos * co + o];
                        }
                        let y = transform_output(&tile);
                        let b = f.bias.as_ref().map_or(T::zero(), |b| b[o]);
                        for r in 0..2 {
                            for c in 0..2 {
                                out[(r * pw2 + tx * 2 + c) * co + o] = y[r * 2 + c] + b;
                            }
                        }
                    }
                }
            });
    }

    let mut out = Vec::with_capacity(d.n * oh * ow * co);
    for i in 0..d.n {
        for y in 0..oh {
            let start = ((i * ph2 + y) * pw2) * co;
            out.extend_from_slice(&padded[start..start + ow * co]);
        }
    }
    let out = Tensor4D::from_vec(Dims4::new(d.n, oh, ow, co), Layout::ChannelsLast, out)?;
    Ok(match x.layout() {
        Layout::ChannelsLast => out,
        Layout::ChannelsFirst => out.transpose_layout(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{conv2d_direct, Padding};
    use crate::tensor::max_rel_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn center_tap_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor4D::<f32>::random(Dims4::new(1, 7, 9, 1), &mut rng, -1.0, 1.0);
        let mut f = FilterBank::<f32>::zeros(3, 3, 1, 1);
        f.weights[4] = 1.0;
        let p = ConvParams::square(3, Padding::Valid, 1).unwrap();
        let y = conv2d_winograd(&x, &f, &p).unwrap();
        assert_eq!(y.dims(), Dims4::new(1, 5, 7, 1));
        for yy in 0..5 {
            for xx in 0..7 {
                let e = x.get(0, yy + 1, xx + 1, 0);
                assert!((y.get(0, yy, xx, 0) - e).abs() <= 1e-5 * e.abs().max(1.0));
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor4D::<f32>::zeros(Dims4::new(2, 6, 5, 3), Layout::ChannelsLast);
        let f = FilterBank::random((3, 3, 3, 2), &mut rng, 1.0, false);
        let p = ConvParams::square(3, Padding::Same, 2).unwrap();
        let y = conv2d_winograd(&x, &f, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_direct_on_random_16x16() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor4D::<f32>::random(Dims4::new(1, 16, 16, 8), &mut rng, -1.0, 1.0);
        let f = FilterBank::random((3, 3, 8, 8), &mut rng, 0.5, true);
        for padding in [Padding::Valid, Padding::Same] {
            let p = ConvParams::square(3, padding, 8).unwrap();
            let a = conv2d_winograd(&x, &f, &p).unwrap();
            let b = conv2d_direct(&x, &f, &p).unwrap();
            assert!(max_rel_error(a.data(), b.data()) <= 1e-4);
        }
    }

    #[test]
    fn rejects_other_kernels() {
        let x = Tensor4D::<f32>::zeros(Dims4::new(1, 6, 6, 1), Layout::ChannelsLast);
        let f = FilterBank::<f32>::zeros(5, 5, 1, 1);
        let p = ConvParams::square(5, Padding::Valid, 1).unwrap();
        assert!(matches!(
            conv2d_winograd(&x, &f, &p),
            Err(Error::Unsupported(_))
        ));
        let f = FilterBank::<f32>::zeros(3, 3, 1, 1);
        let p = ConvParams::new((3, 3), (2, 2), Padding::Valid, 1).unwrap();
        assert!(matches!(
            conv2d_winograd(&x, &f, &p),
            Err(Error::Unsupported(_))
        ));
    }
}
