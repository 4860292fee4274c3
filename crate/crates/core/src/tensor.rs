//! Dense 4-d activation tensors.
//!
//! A [`Tensor4D`] stores `n * h * w * c` elements contiguously in either
//! channels-last (NHWC) or channels-first (NCHW) order. Kernels in this crate
//! compute in channels-last; channels-first exists for the fused transpose
//! paths and for interop.

use std::fmt::Debug;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating point element type. Inference runs in `f32`; `f64` exists for
/// gradient checks.
pub trait Element: Float + Default + Debug + Send + Sync + 'static {
    /// Type code used by the SBT4 file format.
    const DTYPE: u8;

    fn narrow(v: f64) -> Self;
    fn widen(self) -> f64;
}

impl Element for f32 {
    const DTYPE: u8 = 0;

    #[inline]
    fn narrow(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const DTYPE: u8 = 1;

    #[inline]
    fn narrow(v: f64) -> Self {
        v
    }

    #[inline]
    fn widen(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims4 {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Dims4 {
    pub const fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self { n, h, w, c }
    }

    pub const fn len(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Dims4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.h, self.w, self.c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Layout {
    /// NHWC
    #[default]
    ChannelsLast,
    /// NCHW
    ChannelsFirst,
}

impl Layout {
    pub fn flipped(self) -> Self {
        match self {
            Layout::ChannelsLast => Layout::ChannelsFirst,
            Layout::ChannelsFirst => Layout::ChannelsLast,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4D<T = f32> {
    dims: Dims4,
    layout: Layout,
    data: Vec<T>,
}

impl<T: Element> Tensor4D<T> {
    pub fn zeros(dims: Dims4, layout: Layout) -> Self {
        Self {
            dims,
            layout,
            data: vec![T::zero(); dims.len()],
        }
    }

    pub fn filled(dims: Dims4, layout: Layout, value: T) -> Self {
        Self {
            dims,
            layout,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_vec(dims: Dims4, layout: Layout, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::shape("data length", dims.len(), data.len()));
        }
        Ok(Self { dims, layout, data })
    }

    /// Channels-last tensor whose element `(i, y, x, k)` is `f(i, y, x, k)`.
    pub fn from_fn(dims: Dims4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for i in 0..dims.n {
            for y in 0..dims.h {
                for x in 0..dims.w {
                    for k in 0..dims.c {
                        data.push(f(i, y, x, k));
                    }
                }
            }
        }
        Self {
            dims,
            layout: Layout::ChannelsLast,
            data,
        }
    }

    /// Channels-last tensor with elements drawn uniformly from `[lo, hi)`.
    pub fn random<R: Rng + ?Sized>(dims: Dims4, rng: &mut R, lo: f64, hi: f64) -> Self {
        let data = (0..dims.len())
            .map(|_| T::narrow(rng.gen_range(lo..hi)))
            .collect();
        Self {
            dims,
            layout: Layout::ChannelsLast,
            data,
        }
    }

    #[inline]
    pub fn dims(&self) -> Dims4 {
        self.dims
    }

    #[inline]
    pub fn layout(&self) -> Layout {
        self.layout
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Flat offset of logical element `(i, y, x, k)` under this tensor's layout.
    #[inline]
    pub fn offset(&self, i: usize, y: usize, x: usize, k: usize) -> usize {
        let d = self.dims;
        match self.layout {
            Layout::ChannelsLast => ((i * d.h + y) * d.w + x) * d.c + k,
            Layout::ChannelsFirst => ((i * d.c + k) * d.h + y) * d.w + x,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, y: usize, x: usize, k: usize) -> T {
        self.data[self.offset(i, y, x, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, y: usize, x: usize, k: usize, v: T) {
        let o = self.offset(i, y, x, k);
        self.data[o] = v;
    }

    /// Reads with signed spatial coordinates; anything outside the tensor is zero.
    #[inline]
    pub fn get_or_zero(&self, i: usize, y: isize, x: isize, k: usize) -> T {
        if y < 0 || x < 0 || y as usize >= self.dims.h || x as usize >= self.dims.w {
            T::zero()
        } else {
            self.get(i, y as usize, x as usize, k)
        }
    }

    /// Same logical contents in the opposite memory layout.
    pub fn transpose_layout(&self) -> Self {
        let d = self.dims;
        let target = self.layout.flipped();
        let mut out = Self::zeros(d, target);
        let (hw, c) = (d.h * d.w, d.c);
        // Both layouts share the batch-major outer stride, so transpose each
        // image as an (hw x c) <-> (c x hw) matrix.
        for i in 0..d.n {
            let base = i * hw * c;
            let src = &self.data[base..base + hw * c];
            let dst = &mut out.data[base..base + hw * c];
            match self.layout {
                Layout::ChannelsLast => {
                    for p in 0..hw {
                        for k in 0..c {
                            dst[k * hw + p] = src[p * c + k];
                        }
                    }
                }
                Layout::ChannelsFirst => {
                    for k in 0..c {
                        for p in 0..hw {
                            dst[p * c + k] = src[k * hw + p];
                        }
                    }
                }
            }
        }
        out
    }

    /// Converts to `layout`, cloning only when a transpose is needed.
    pub fn to_layout(&self, layout: Layout) -> std::borrow::Cow<'_, Self> {
        if self.layout == layout {
            std::borrow::Cow::Borrowed(self)
        } else {
            std::borrow::Cow::Owned(self.transpose_layout())
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            layout: self.layout,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor4D<U> {
        Tensor4D {
            dims: self.dims,
            layout: self.layout,
            data: self.data.iter().map(|&v| U::narrow(v.widen())).collect(),
        }
    }

    /// Elementwise sum of two tensors with equal dims and layout.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.ensure_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self {
            dims: self.dims,
            layout: self.layout,
            data,
        })
    }

    /// Inner product over all elements, accumulated in `f64`.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a.widen() * b.widen())
            .sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.widen()).sum()
    }

    pub(crate) fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        let (a, b) = (self.dims, other.dims);
        crate::error::ensure_dim("n", a.n, b.n)?;
        crate::error::ensure_dim("h", a.h, b.h)?;
        crate::error::ensure_dim("w", a.w, b.w)?;
        crate::error::ensure_dim("c", a.c, b.c)?;
        if self.layout != other.layout {
            return Err(Error::config("tensors have different layouts"));
        }
        Ok(())
    }
}

/// Free-function form of [`Tensor4D::transpose_layout`].
pub fn transpose_layout<T: Element>(x: &Tensor4D<T>) -> Tensor4D<T> {
    x.transpose_layout()
}

/// Largest elementwise error of `actual` against `expected`, measured
/// relative to `max(|expected|, 1)`. Values near zero are therefore held to
/// an absolute bound of the same size.
pub fn max_rel_error<T: Element>(actual: &[T], expected: &[T]) -> f64 {
    assert_eq!(actual.len(), expected.len(), "length mismatch");
    actual
        .iter()
        .zip(expected)
        .map(|(&a, &e)| {
            let (a, e) = (a.widen(), e.widen());
            (a - e).abs() / e.abs().max(1.0)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn double_transpose_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor4D::<f32>::random(Dims4::new(2, 3, 5, 4), &mut rng, -1.0, 1.0);
        let back = x.transpose_layout().transpose_layout();
        assert_eq!(back, x);
    }

    #[test]
    fn element_reads_same_in_both_layouts() {
        let x = Tensor4D::<f32>::from_fn(Dims4::new(1, 3, 4, 5), |i, y, x, k| {
            (1000 * i + 100 * y + 10 * x + k) as f32
        });
        let t = x.transpose_layout();
        assert_eq!(t.layout(), Layout::ChannelsFirst);
        assert_eq!(x.get(0, 1, 2, 3), 123.0);
        assert_eq!(t.get(0, 1, 2, 3), 123.0);
    }

    #[test]
    fn exhaustive_index_sweep_after_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = Dims4::new(2, 5, 3, 7);
        let x = Tensor4D::<f64>::random(d, &mut rng, -5.0, 5.0);
        let t = x.transpose_layout();
        for i in 0..d.n {
            for y in 0..d.h {
                for xx in 0..d.w {
                    for k in 0..d.c {
                        assert_eq!(x.get(i, y, xx, k), t.get(i, y, xx, k));
                    }
                }
            }
        }
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        let err = Tensor4D::<f32>::from_vec(Dims4::new(1, 2, 2, 1), Layout::ChannelsLast, vec![0.0; 3])
            .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn get_or_zero_outside_bounds() {
        let x = Tensor4D::<f32>::filled(Dims4::new(1, 2, 2, 1), Layout::ChannelsLast, 3.0);
        assert_eq!(x.get_or_zero(0, -1, 0, 0), 0.0);
        assert_eq!(x.get_or_zero(0, 1, 2, 0), 0.0);
        assert_eq!(x.get_or_zero(0, 1, 1, 0), 3.0);
    }
}
