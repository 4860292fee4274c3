//! Direct 2-d convolution over channels-last tensors, plus its adjoints.
//!
//! This is both the per-block compute engine of the sparse path and the dense
//! reference it is checked against. Every output element accumulates
//! `bias, then taps in (ky, kx, ci) order`, so results do not depend on the
//! degree of parallelism.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::tensor::{Dims4, Element, Layout, Tensor4D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Valid,
    /// Zero padding of `floor(k / 2)` before each spatial axis; the output
    /// extent is `ceil(extent / stride)`.
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvParams {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
    pub filters: usize,
}

impl ConvParams {
    pub fn new(
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        filters: usize,
    ) -> Result<Self> {
        let p = Self {
            kernel,
            stride,
            padding,
            filters,
        };
        p.validate()?;
        Ok(p)
    }

    /// Square kernel, stride 1.
    pub fn square(k: usize, padding: Padding, filters: usize) -> Result<Self> {
        Self::new((k, k), (1, 1), padding, filters)
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        if kh == 0 || kw == 0 {
            return Err(Error::config("kernel extent must be at least 1"));
        }
        if sh == 0 || sw == 0 {
            return Err(Error::config("stride must be at least 1"));
        }
        if sh > kh || sw > kw {
            return Err(Error::config(format!(
                "stride {sh}x{sw} exceeds kernel {kh}x{kw}; block tiling would leave gaps"
            )));
        }
        if self.filters == 0 {
            return Err(Error::config("filter count must be at least 1"));
        }
        Ok(())
    }

    /// Zero rows/columns virtually inserted before the input.
    pub fn pad_before(&self) -> (usize, usize) {
        match self.padding {
            Padding::Valid => (0, 0),
            Padding::Same => (self.kernel.0 / 2, self.kernel.1 / 2),
        }
    }

    /// Output spatial extent for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            output_extent(h, self.kernel.0, self.stride.0, self.padding, "h")?,
            output_extent(w, self.kernel.1, self.stride.1, self.padding, "w")?,
        ))
    }
}

pub(crate) fn output_extent(
    extent: usize,
    k: usize,
    s: usize,
    padding: Padding,
    axis: &str,
) -> Result<usize> {
    match padding {
        Padding::Valid => {
            if extent < k {
                return Err(Error::shape(
                    format!("input {axis} (must be >= kernel)"),
                    k,
                    extent,
                ));
            }
            Ok((extent - k) / s + 1)
        }
        Padding::Same => Ok(extent.div_ceil(s)),
    }
}

/// Convolution weights laid out `(kh, kw, c_in, c_out)` with optional bias.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank<T = f32> {
    pub kh: usize,
    pub kw: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub weights: Vec<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Element> FilterBank<T> {
    pub fn new(
        (kh, kw, c_in, c_out): (usize, usize, usize, usize),
        weights: Vec<T>,
        bias: Option<Vec<T>>,
    ) -> Result<Self> {
        ensure_dim("filter weight count", kh * kw * c_in * c_out, weights.len())?;
        if let Some(b) = &bias {
            ensure_dim("bias length", c_out, b.len())?;
        }
        Ok(Self {
            kh,
            kw,
            c_in,
            c_out,
            weights,
            bias,
        })
    }

    pub fn zeros(kh: usize, kw: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            kh,
            kw,
            c_in,
            c_out,
            weights: vec![T::zero(); kh * kw * c_in * c_out],
            bias: None,
        }
    }

    /// Uniform random weights in `[-scale, scale)`, optionally with bias.
    pub fn random<R: rand::Rng + ?Sized>(
        shape: (usize, usize, usize, usize),
        rng: &mut R,
        scale: f64,
        with_bias: bool,
    ) -> Self {
        let (kh, kw, c_in, c_out) = shape;
        let weights = (0..kh * kw * c_in * c_out)
            .map(|_| T::narrow(rng.gen_range(-scale..scale)))
            .collect();
        let bias = with_bias.then(|| {
            (0..c_out)
                .map(|_| T::narrow(rng.gen_range(-scale..scale)))
                .collect()
        });
        Self {
            kh,
            kw,
            c_in,
            c_out,
            weights,
            bias,
        }
    }

    #[inline]
    pub fn index(&self, ky: usize, kx: usize, ci: usize, co: usize) -> usize {
        ((ky * self.kw + kx) * self.c_in + ci) * self.c_out + co
    }

    pub fn cast<U: Element>(&self) -> FilterBank<U> {
        FilterBank {
            kh: self.kh,
            kw: self.kw,
            c_in: self.c_in,
            c_out: self.c_out,
            weights: self.weights.iter().map(|v| U::narrow(v.widen())).collect(),
            bias: self
                .bias
                .as_ref()
                .map(|b| b.iter().map(|v| U::narrow(v.widen())).collect()),
        }
    }

    pub(crate) fn check_against(&self, p: &ConvParams, c_in: usize) -> Result<()> {
        p.validate()?;
        ensure_dim("filter kh", p.kernel.0, self.kh)?;
        ensure_dim("filter kw", p.kernel.1, self.kw)?;
        ensure_dim("filter count", p.filters, self.c_out)?;
        ensure_dim("input channels", self.c_in, c_in)?;
        Ok(())
    }
}

/// Dense direct convolution. The result has the same layout as `x`.
pub fn conv2d_direct<T: Element>(
    x: &Tensor4D<T>,
    f: &FilterBank<T>,
    p: &ConvParams,
) -> Result<Tensor4D<T>> {
    let d = x.dims();
    f.check_against(p, d.c)?;
    let (oh, ow) = p.output_hw(d.h, d.w)?;
    let xl = x.to_layout(Layout::ChannelsLast);
    let out = conv_nhwc(xl.data(), d, f, p.stride, p.pad_before(), (oh, ow));
    let out = Tensor4D::from_vec(Dims4::new(d.n, oh, ow, f.c_out), Layout::ChannelsLast, out)?;
    Ok(match x.layout() {
        Layout::ChannelsLast => out,
        Layout::ChannelsFirst => out.transpose_layout(),
    })
}

/// Channels-last kernel shared by the dense and block-sparse paths.
pub(crate) fn conv_nhwc<T: Element>(
    x: &[T],
    d: Dims4,
    f: &FilterBank<T>,
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let co = f.c_out;
    let ci_n = f.c_in;
    let mut out = vec![T::zero(); d.n * oh * ow * co];
    if out.is_empty() {
        return out;
    }
    out.par_chunks_mut(ow * co)
        .enumerate()
        .for_each(|(row, out_row)| {
            let (i, oy) = (row / oh, row % oh);
            for ox in 0..ow {
                let acc = &mut out_row[ox * co..(ox + 1) * co];
                if let Some(b) = &f.bias {
                    acc.copy_from_slice(b);
                }
                for ky in 0..f.kh {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    for kx in 0..f.kw {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        if ix < 0 || ix as usize >= d.w {
                            continue;
                        }
                        let xo = ((i * d.h + iy as usize) * d.w + ix as usize) * ci_n;
                        let xs = &x[xo..xo + ci_n];
                        let wo = (ky * f.kw + kx) * ci_n * co;
                        let taps = &f.weights[wo..wo + ci_n * co];
                        for (&a, wrow) in xs.iter().zip(taps.chunks_exact(co)) {
                            for (o, &wv) in acc.iter_mut().zip(wrow) {
                                *o = *o + a * wv;
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Gradient of [`conv2d_direct`] with respect to its input. `g_out` and the
/// result are channels-last.
pub fn conv2d_backward_input<T: Element>(
    g_out: &Tensor4D<T>,
    f: &FilterBank<T>,
    p: &ConvParams,
    input_dims: Dims4,
) -> Result<Tensor4D<T>> {
    f.check_against(p, input_dims.c)?;
    let (oh, ow) = p.output_hw(input_dims.h, input_dims.w)?;
    let gd = g_out.dims();
    ensure_dim("gradient n", input_dims.n, gd.n)?;
    ensure_dim("gradient h", oh, gd.h)?;
    ensure_dim("gradient w", ow, gd.w)?;
    ensure_dim("gradient c", f.c_out, gd.c)?;
    let g = g_out.to_layout(Layout::ChannelsLast);
    let g = g.data();
    let d = input_dims;
    let (sh, sw) = p.stride;
    let (ph, pw) = p.pad_before();
    let (ci_n, co) = (f.c_in, f.c_out);
    let mut dx = vec![T::zero(); d.len()];
    let image = d.h * d.w * d.c;
    if image == 0 {
        return Tensor4D::from_vec(d, Layout::ChannelsLast, dx);
    }
    dx.par_chunks_mut(image).enumerate().for_each(|(i, dxi)| {
        for oy in 0..oh {
            for ox in 0..ow {
                let go = ((i * oh + oy) * ow + ox) * co;
                let gv = &g[go..go + co];
                for ky in 0..f.kh {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    for kx in 0..f.kw {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        if ix < 0 || ix as usize >= d.w {
                            continue;
                        }
                        let xo = (iy as usize * d.w + ix as usize) * ci_n;
                        for ci in 0..ci_n {
                            let wrow = &f.weights[f.index(ky, kx, ci, 0)..][..co];
                            let mut s = T::zero();
                            for (&a, &b) in gv.iter().zip(wrow) {
                                s = s + a * b;
                            }
                            dxi[xo + ci] = dxi[xo + ci] + s;
                        }
                    }
                }
            }
        }
    });
    Tensor4D::from_vec(d, Layout::ChannelsLast, dx)
}

/// Gradients of [`conv2d_direct`] with respect to the weights and bias.
/// The returned bank has a bias iff `f` has one.
pub fn conv2d_backward_filter<T: Element>(
    x: &Tensor4D<T>,
    g_out: &Tensor4D<T>,
    f: &FilterBank<T>,
    p: &ConvParams,
) -> Result<FilterBank<T>> {
    let d = x.dims();
    f.check_against(p, d.c)?;
    let (oh, ow) = p.output_hw(d.h, d.w)?;
    let gd = g_out.dims();
    ensure_dim("gradient n", d.n, gd.n)?;
    ensure_dim("gradient h", oh, gd.h)?;
    ensure_dim("gradient w", ow, gd.w)?;
    ensure_dim("gradient c", f.c_out, gd.c)?;
    let xl = x.to_layout(Layout::ChannelsLast);
    let gl = g_out.to_layout(Layout::ChannelsLast);
    let (xs, g) = (xl.data(), gl.data());
    let (sh, sw) = p.stride;
    let (ph, pw) = p.pad_before();
    let (ci_n, co) = (f.c_in, f.c_out);

    let mut dw = FilterBank::zeros(f.kh, f.kw, ci_n, co);
    // One (ky, kx) slice per task keeps the reduction order fixed.
    dw.weights
        .par_chunks_mut(ci_n * co)
        .enumerate()
        .for_each(|(tap, slice)| {
            let (ky, kx) = (tap / f.kw, tap % f.kw);
            for i in 0..d.n {
                for oy in 0..oh {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        if ix < 0 || ix as usize >= d.w {
                            continue;
                        }
                        let xo = ((i * d.h + iy as usize) * d.w + ix as usize) * ci_n;
                        let go = ((i * oh + oy) * ow + ox) * co;
                        let gv = &g[go..go + co];
                        for ci in 0..ci_n {
                            let a = xs[xo + ci];
                            for (o, &b) in slice[ci * co..(ci + 1) * co].iter_mut().zip(gv) {
                                *o = *o + a * b;
                            }
                        }
                    }
                }
            }
        });
    if f.bias.is_some() {
        let mut db = vec![T::zero(); co];
        for pix in g.chunks_exact(co) {
            for (o, &v) in db.iter_mut().zip(pix) {
                *o = *o + v;
            }
        }
        dw.bias = Some(db);
    }
    Ok(dw)
}
