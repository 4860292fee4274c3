//! Bottleneck residual unit (1x1, 3x3, 1x1 with BN and ReLU) sharing one
//! gather and one scatter-add.
//!
//! Blocks are gathered with a halo of `h` pixels per side around an `inner`
//! output tile. Pointwise layers run on the whole gathered block; the 3x3
//! convolution is valid, shrinking the block by one pixel per side, and the
//! remaining `h - 1` pixels are cropped. Gathered positions outside the image
//! are zeroed right before the 3x3 convolution, which is where the dense unit
//! sees its zero padding. With `h = 0` the 3x3 convolution is same-padded
//! inside each block, which is only correct in the block interior.

use rand::Rng;

use crate::conv::{conv2d_backward_filter, conv2d_backward_input, conv2d_direct, ConvParams, FilterBank, Padding};
use crate::error::{ensure_dim, Error, Result};
use crate::gather::{gather, gather_grad, scatter_add, scatter_grad, GatheredBlocks};
use crate::norm::{apply_affine, relu, relu_backward, BnParams, PoolMode};
use crate::tensor::{Dims4, Element, Layout, Tensor4D};
use crate::tiling::{compute_block_spec, reduce_mask, BinaryMask, BlockIndexList, BlockSpec};

use super::check_mask;

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualUnitParams<T = f32> {
    /// 1x1, c -> m.
    pub conv1: FilterBank<T>,
    /// 3x3, m -> m.
    pub conv2: FilterBank<T>,
    /// 1x1, m -> c.
    pub conv3: FilterBank<T>,
    pub bn1: BnParams<T>,
    pub bn2: BnParams<T>,
    pub bn3: BnParams<T>,
    /// `true`: BN, ReLU before each convolution (`bn1` has `c` channels).
    /// `false`: BN after each convolution, ReLU after the first two
    /// (`bn3` has `c` channels).
    pub pre_activation: bool,
}

impl<T: Element> ResidualUnitParams<T> {
    pub fn channels(&self) -> usize {
        self.conv1.c_in
    }

    pub fn mid_channels(&self) -> usize {
        self.conv1.c_out
    }

    pub fn validate(&self) -> Result<()> {
        let (c, m) = (self.channels(), self.mid_channels());
        let shapes = [
            ("conv1", &self.conv1, (1, 1, c, m)),
            ("conv2", &self.conv2, (3, 3, m, m)),
            ("conv3", &self.conv3, (1, 1, m, c)),
        ];
        for (name, f, want) in shapes {
            let got = (f.kh, f.kw, f.c_in, f.c_out);
            if got != want {
                return Err(Error::config(format!(
                    "{name} has shape {got:?}, residual unit needs {want:?}"
                )));
            }
        }
        let bn_c = if self.pre_activation { [c, m, m] } else { [m, m, c] };
        for (name, bn, want) in [("bn1", &self.bn1, bn_c[0]), ("bn2", &self.bn2, bn_c[1]), ("bn3", &self.bn3, bn_c[2])] {
            bn.validate()?;
            ensure_dim(name, want, bn.channels())?;
        }
        Ok(())
    }

    /// Random weights scaled for roughly unit-variance activations.
    pub fn random<R: Rng + ?Sized>(c: usize, m: usize, pre_activation: bool, rng: &mut R) -> Self {
        let conv1 = FilterBank::random((1, 1, c, m), rng, 1.0 / (c as f64).sqrt(), true);
        let conv2 = FilterBank::random((3, 3, m, m), rng, 1.0 / (9.0 * m as f64).sqrt(), true);
        let conv3 = FilterBank::random((1, 1, m, c), rng, 1.0 / (m as f64).sqrt(), true);
        let bn_c = if pre_activation { [c, m, m] } else { [m, m, c] };
        Self {
            conv1,
            conv2,
            conv3,
            bn1: BnParams::random(bn_c[0], rng),
            bn2: BnParams::random(bn_c[1], rng),
            bn3: BnParams::random(bn_c[2], rng),
            pre_activation,
        }
    }

    pub fn cast<U: Element>(&self) -> ResidualUnitParams<U> {
        ResidualUnitParams {
            conv1: self.conv1.cast(),
            conv2: self.conv2.cast(),
            conv3: self.conv3.cast(),
            bn1: self.bn1.cast(),
            bn2: self.bn2.cast(),
            bn3: self.bn3.cast(),
            pre_activation: self.pre_activation,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Which {
    Conv1,
    Conv2,
    Conv3,
}

enum Step<'a, T> {
    Bn(&'a BnParams<T>),
    Relu,
    Conv(&'a FilterBank<T>, ConvParams, Which),
    /// Zero positions whose image coordinates fall outside the image.
    Border,
    /// Drop `n` pixels on each side.
    Crop(usize),
}

/// Where each gathered block sits in the image, for [`Step::Border`].
struct Placement<'a> {
    spec: &'a BlockSpec,
    idx: &'a BlockIndexList,
}

fn unit_steps<T: Element>(u: &ResidualUnitParams<T>, mid: Padding, halo: Option<usize>) -> Vec<Step<'_, T>> {
    let c1 = ConvParams::new((1, 1), (1, 1), Padding::Valid, u.conv1.c_out).unwrap();
    let c2 = ConvParams::new((3, 3), (1, 1), mid, u.conv2.c_out).unwrap();
    let c3 = ConvParams::new((1, 1), (1, 1), Padding::Valid, u.conv3.c_out).unwrap();
    let mut steps = Vec::with_capacity(12);
    let border = |steps: &mut Vec<Step<'_, T>>| {
        if halo.is_some() {
            steps.push(Step::Border);
        }
    };
    let crop = |steps: &mut Vec<Step<'_, T>>| {
        if let Some(h) = halo {
            if h > 1 {
                steps.push(Step::Crop(h - 1));
            }
        }
    };
    if u.pre_activation {
        steps.extend([Step::Bn(&u.bn1), Step::Relu, Step::Conv(&u.conv1, c1, Which::Conv1)]);
        steps.extend([Step::Bn(&u.bn2), Step::Relu]);
        border(&mut steps);
        steps.push(Step::Conv(&u.conv2, c2, Which::Conv2));
        crop(&mut steps);
        steps.extend([Step::Bn(&u.bn3), Step::Relu, Step::Conv(&u.conv3, c3, Which::Conv3)]);
    } else {
        steps.extend([Step::Conv(&u.conv1, c1, Which::Conv1), Step::Bn(&u.bn1), Step::Relu]);
        border(&mut steps);
        steps.push(Step::Conv(&u.conv2, c2, Which::Conv2));
        crop(&mut steps);
        steps.extend([Step::Bn(&u.bn2), Step::Relu]);
        steps.extend([Step::Conv(&u.conv3, c3, Which::Conv3), Step::Bn(&u.bn3)]);
    }
    steps
}

fn zero_border<T: Element>(t: &mut Tensor4D<T>, place: &Placement<'_>) {
    let d = t.dims();
    let (ih, iw) = place.spec.input_hw;
    let c = d.c;
    let data = t.data_mut();
    for (j, e) in place.idx.iter().enumerate() {
        let (y0, x0) = place.spec.window_origin(e.by, e.bx);
        for r in 0..d.h {
            let iy = y0 + r as isize;
            let row_out = iy < 0 || iy as usize >= ih;
            for q in 0..d.w {
                let ix = x0 + q as isize;
                if row_out || ix < 0 || ix as usize >= iw {
                    let o = ((j * d.h + r) * d.w + q) * c;
                    data[o..o + c].fill(T::zero());
                }
            }
        }
    }
}

fn crop<T: Element>(t: &Tensor4D<T>, n: usize) -> Result<Tensor4D<T>> {
    let d = t.dims();
    let (h, w) = (d.h - 2 * n, d.w - 2 * n);
    let mut out = Vec::with_capacity(d.n * h * w * d.c);
    for i in 0..d.n {
        for y in 0..h {
            let s = ((i * d.h + y + n) * d.w + n) * d.c;
            out.extend_from_slice(&t.data()[s..s + w * d.c]);
        }
    }
    Tensor4D::from_vec(Dims4::new(d.n, h, w, d.c), Layout::ChannelsLast, out)
}

fn uncrop<T: Element>(g: &Tensor4D<T>, n: usize) -> Tensor4D<T> {
    let d = g.dims();
    let (h, w) = (d.h + 2 * n, d.w + 2 * n);
    let mut out = Tensor4D::zeros(Dims4::new(d.n, h, w, d.c), Layout::ChannelsLast);
    let od = out.data_mut();
    for i in 0..d.n {
        for y in 0..d.h {
            let s = ((i * d.h + y) * d.w) * d.c;
            let o = ((i * h + y + n) * w + n) * d.c;
            od[o..o + d.w * d.c].copy_from_slice(&g.data()[s..s + d.w * d.c]);
        }
    }
    out
}

/// Runs `steps` on a channels-last tensor. With `trace`, the input of every
/// step is kept for the backward pass.
fn run_steps<T: Element>(
    x: Tensor4D<T>,
    steps: &[Step<'_, T>],
    place: Option<&Placement<'_>>,
    mut trace: Option<&mut Vec<Tensor4D<T>>>,
) -> Result<Tensor4D<T>> {
    let mut cur = x;
    for step in steps {
        if let Some(t) = trace.as_deref_mut() {
            t.push(cur.clone());
        }
        cur = match step {
            Step::Bn(bn) => {
                ensure_dim("bn channels", bn.channels(), cur.dims().c)?;
                let (scale, shift) = bn.inference_affine();
                apply_affine(&cur, &scale, &shift)
            }
            Step::Relu => relu(&cur),
            Step::Conv(f, p, _) => conv2d_direct(&cur, f, p)?,
            Step::Border => {
                if let Some(place) = place {
                    zero_border(&mut cur, place);
                }
                cur
            }
            Step::Crop(n) => crop(&cur, *n)?,
        };
    }
    Ok(cur)
}

#[derive(Debug, Clone)]
pub struct ResidualGrads<T = f32> {
    /// Channels-last input gradient, shortcut included.
    pub dx: Tensor4D<T>,
    pub dconv1: FilterBank<T>,
    pub dconv2: FilterBank<T>,
    pub dconv3: FilterBank<T>,
}

fn backprop_steps<T: Element>(
    steps: &[Step<'_, T>],
    trace: &[Tensor4D<T>],
    place: Option<&Placement<'_>>,
    g: Tensor4D<T>,
) -> Result<(Tensor4D<T>, [Option<FilterBank<T>>; 3])> {
    let mut g = g;
    let mut grads: [Option<FilterBank<T>>; 3] = [None, None, None];
    for (step, input) in steps.iter().zip(trace).rev() {
        g = match step {
            Step::Bn(bn) => {
                let (scale, _) = bn.inference_affine();
                apply_affine(&g, &scale, &vec![T::zero(); scale.len()])
            }
            Step::Relu => relu_backward(input, &g)?,
            Step::Conv(f, p, which) => {
                let df = conv2d_backward_filter(input, &g, f, p)?;
                grads[*which as usize] = Some(df);
                conv2d_backward_input(&g, f, p, input.dims())?
            }
            Step::Border => {
                if let Some(place) = place {
                    zero_border(&mut g, place);
                }
                g
            }
            Step::Crop(n) => uncrop(&g, *n),
        };
    }
    Ok((g, grads))
}

/// Dense reference: `x + F(x)` with a same-padded 3x3 convolution, inference
/// BN. The result has `x`'s layout.
pub fn dense_residual_unit<T: Element>(x: &Tensor4D<T>, u: &ResidualUnitParams<T>) -> Result<Tensor4D<T>> {
    u.validate()?;
    ensure_dim("input channels", u.channels(), x.dims().c)?;
    let xl = x.to_layout(Layout::ChannelsLast).into_owned();
    let steps = unit_steps(u, Padding::Same, None);
    let r = run_steps(xl.clone(), &steps, None, None)?;
    let y = xl.add(&r)?;
    Ok(match x.layout() {
        Layout::ChannelsLast => y,
        Layout::ChannelsFirst => y.transpose_layout(),
    })
}

/// Block geometry for a unit whose output tiles are `block - 2` pixels,
/// gathered with `halo` pixels per side.
pub fn residual_block_spec(input_hw: (usize, usize), block: (usize, usize), halo: usize) -> Result<BlockSpec> {
    if block.0 < 3 || block.1 < 3 {
        return Err(Error::config(format!(
            "block {}x{} too small for a 3x3 unit with a 1 pixel halo",
            block.0, block.1
        )));
    }
    let inner = (block.0 - 2, block.1 - 2);
    let k = 2 * halo + 1;
    let conv = ConvParams::new((k, k), (1, 1), Padding::Same, 1)?;
    compute_block_spec(input_hw, &conv, (inner.0 + 2 * halo, inner.1 + 2 * halo))
}

/// Sparse residual unit with the minimal halo of one pixel. `block` is the
/// gathered block size; each block writes a `block - 2` tile.
pub fn sparse_residual_unit<T: Element>(
    x: &Tensor4D<T>,
    m: &BinaryMask,
    u: &ResidualUnitParams<T>,
    block: (usize, usize),
) -> Result<Tensor4D<T>> {
    sparse_residual_unit_with_halo(x, m, u, block, 1)
}

/// [`sparse_residual_unit`] with an explicit halo. Halos of one or more give
/// identical results; a halo of zero is wrong at tile borders.
pub fn sparse_residual_unit_with_halo<T: Element>(
    x: &Tensor4D<T>,
    m: &BinaryMask,
    u: &ResidualUnitParams<T>,
    block: (usize, usize),
    halo: usize,
) -> Result<Tensor4D<T>> {
    check_mask(x, m)?;
    let d = x.dims();
    // Active tiles do not depend on the halo: the grid is the same for every
    // halo, so reduce against the minimal one.
    let spec = residual_block_spec((d.h, d.w), block, halo)?;
    let idx = reduce_mask(m, &residual_block_spec((d.h, d.w), block, 1)?, PoolMode::Max, 1.0)?;
    sparse_residual_unit_indexed(x, &idx, &spec, u)
}

/// Forward pass for a precomputed tiling. The halo is read off `spec`.
pub fn sparse_residual_unit_indexed<T: Element>(
    x: &Tensor4D<T>,
    idx: &BlockIndexList,
    spec: &BlockSpec,
    u: &ResidualUnitParams<T>,
) -> Result<Tensor4D<T>> {
    u.validate()?;
    ensure_dim("input channels", u.channels(), x.dims().c)?;
    let halo = spec.overlap.0 / 2;
    let xl = x.to_layout(Layout::ChannelsLast).into_owned();
    let blocks = gather(&xl, idx, spec)?;
    let place = Placement { spec, idx };
    let mid = if halo == 0 { Padding::Same } else { Padding::Valid };
    let steps = unit_steps(u, mid, Some(halo));
    let r = run_steps(blocks.tensor().clone(), &steps, Some(&place), None)?;
    let y = scatter_add(&blocks.with_tensor(r)?, spec, xl)?;
    Ok(match x.layout() {
        Layout::ChannelsLast => y,
        Layout::ChannelsFirst => y.transpose_layout(),
    })
}

/// Input and convolution-weight gradients of [`sparse_residual_unit`].
pub fn sparse_residual_unit_backward<T: Element>(
    x: &Tensor4D<T>,
    m: &BinaryMask,
    u: &ResidualUnitParams<T>,
    block: (usize, usize),
    g_out: &Tensor4D<T>,
) -> Result<ResidualGrads<T>> {
    check_mask(x, m)?;
    u.validate()?;
    let d = x.dims();
    let spec = residual_block_spec((d.h, d.w), block, 1)?;
    let idx = reduce_mask(m, &spec, PoolMode::Max, 1.0)?;
    let xl = x.to_layout(Layout::ChannelsLast).into_owned();
    let gl = g_out.to_layout(Layout::ChannelsLast).into_owned();
    let blocks = gather(&xl, &idx, &spec)?;
    let place = Placement { spec: &spec, idx: &idx };
    let steps = unit_steps(u, Padding::Valid, Some(1));
    let mut trace = Vec::with_capacity(steps.len());
    run_steps(blocks.tensor().clone(), &steps, Some(&place), Some(&mut trace))?;
    let g_blocks = scatter_grad(&gl, &idx, &spec)?;
    let (g_in, grads) = backprop_steps(&steps, &trace, Some(&place), g_blocks.into_tensor())?;
    let through: GatheredBlocks<T> = blocks.with_tensor(g_in)?;
    let dx = gather_grad(&through, &spec, d)?.add(&gl)?;
    let [d1, d2, d3] = grads;
    let zero_like = |f: &FilterBank<T>| {
        let mut z = FilterBank::zeros(f.kh, f.kw, f.c_in, f.c_out);
        z.bias = f.bias.as_ref().map(|b| vec![T::zero(); b.len()]);
        z
    };
    Ok(ResidualGrads {
        dx,
        dconv1: d1.unwrap_or_else(|| zero_like(&u.conv1)),
        dconv2: d2.unwrap_or_else(|| zero_like(&u.conv2)),
        dconv3: d3.unwrap_or_else(|| zero_like(&u.conv3)),
    })
}
