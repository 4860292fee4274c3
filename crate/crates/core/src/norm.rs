//! Batch normalization, ReLU and pooling.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::tensor::{Dims4, Element, Layout, Tensor4D};

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: T,
}

impl<T: Element> BnParams<T> {
    pub fn new(
        gamma: Vec<T>,
        beta: Vec<T>,
        running_mean: Vec<T>,
        running_var: Vec<T>,
        epsilon: T,
    ) -> Result<Self> {
        let p = Self {
            gamma,
            beta,
            running_mean,
            running_var,
            epsilon,
        };
        p.validate()?;
        Ok(p)
    }

    /// gamma 1, beta 0, mean 0, var 1.
    pub fn identity(channels: usize, epsilon: T) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon,
        }
    }

    pub fn random<R: rand::Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let mut draw = |lo: f64, hi: f64| -> Vec<T> {
            (0..channels)
                .map(|_| T::narrow(rng.gen_range(lo..hi)))
                .collect()
        };
        Self {
            gamma: draw(0.5, 1.5),
            beta: draw(-0.5, 0.5),
            running_mean: draw(-0.5, 0.5),
            running_var: draw(0.5, 2.0),
            epsilon: T::narrow(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        ensure_dim("bn beta length", c, self.beta.len())?;
        ensure_dim("bn running_mean length", c, self.running_mean.len())?;
        ensure_dim("bn running_var length", c, self.running_var.len())?;
        if self.running_var.iter().any(|v| !(*v >= T::zero())) {
            return Err(Error::config("bn running_var must be non-negative"));
        }
        if !(self.epsilon >= T::zero()) {
            return Err(Error::config("bn epsilon must be non-negative"));
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> BnParams<U> {
        let c = |v: &[T]| v.iter().map(|x| U::narrow(x.widen())).collect();
        BnParams {
            gamma: c(&self.gamma),
            beta: c(&self.beta),
            running_mean: c(&self.running_mean),
            running_var: c(&self.running_var),
            epsilon: U::narrow(self.epsilon.widen()),
        }
    }

    /// Per-channel `(scale, shift)` of the inference-mode affine map.
    pub fn inference_affine(&self) -> (Vec<T>, Vec<T>) {
        affine(&self.gamma, &self.beta, &self.running_mean, &self.running_var, self.epsilon)
    }
}

fn affine<T: Element>(gamma: &[T], beta: &[T], mean: &[T], var: &[T], eps: T) -> (Vec<T>, Vec<T>) {
    let scale: Vec<T> = gamma
        .iter()
        .zip(var)
        .map(|(&g, &v)| g / (v + eps).sqrt())
        .collect();
    let shift = beta
        .iter()
        .zip(mean)
        .zip(&scale)
        .map(|((&b, &m), &s)| b - m * s)
        .collect();
    (scale, shift)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum BnMode {
    #[default]
    Inference,
    TrainStats,
}

/// Per-channel statistics of a TrainStats pass. `var` is the biased variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

#[inline]
fn channel_index(d: Dims4, layout: Layout, flat: usize) -> usize {
    match layout {
        Layout::ChannelsLast => flat % d.c,
        Layout::ChannelsFirst => (flat / (d.h * d.w)) % d.c,
    }
}

/// Applies `y = x * scale[c] + shift[c]` in whatever layout `x` uses.
pub(crate) fn apply_affine<T: Element>(x: &Tensor4D<T>, scale: &[T], shift: &[T]) -> Tensor4D<T> {
    let (d, layout) = (x.dims(), x.layout());
    let mut out = x.clone();
    match layout {
        Layout::ChannelsLast => {
            for px in out.data_mut().chunks_exact_mut(d.c.max(1)) {
                for ((v, &s), &b) in px.iter_mut().zip(scale).zip(shift) {
                    *v = *v * s + b;
                }
            }
        }
        Layout::ChannelsFirst => {
            for (flat, v) in out.data_mut().iter_mut().enumerate() {
                let k = channel_index(d, layout, flat);
                *v = *v * scale[k] + shift[k];
            }
        }
    }
    out
}

/// Order-independent per-channel mean and biased variance of `values`.
///
/// Each channel is summed in ascending value order, so any permutation of
/// the same multiset of positions yields bit-identical statistics.
pub(crate) fn channel_stats<T: Element>(
    channels: usize,
    values: impl Iterator<Item = (usize, T)>,
) -> BatchStats<T> {
    let mut per: Vec<Vec<T>> = vec![Vec::new(); channels];
    for (k, v) in values {
        per[k].push(v);
    }
    let count = per.first().map_or(0, Vec::len);
    let mut mean = Vec::with_capacity(channels);
    let mut var = Vec::with_capacity(channels);
    for vals in per.iter_mut() {
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let n = vals.len().max(1) as f64;
        let m = vals.iter().map(|v| v.widen()).sum::<f64>() / n;
        let s = vals
            .iter()
            .map(|v| {
                let d = v.widen() - m;
                d * d
            })
            .sum::<f64>()
            / n;
        mean.push(T::narrow(m));
        var.push(T::narrow(s));
    }
    BatchStats { mean, var, count }
}

/// Batch normalization. In [`BnMode::TrainStats`] the statistics over all
/// `n * h * w` positions are used for normalization and returned.
pub fn batch_norm<T: Element>(
    x: &Tensor4D<T>,
    bn: &BnParams<T>,
    mode: BnMode,
) -> Result<(Tensor4D<T>, Option<BatchStats<T>>)> {
    bn.validate()?;
    let d = x.dims();
    ensure_dim("bn channels", bn.channels(), d.c)?;
    match mode {
        BnMode::Inference => {
            let (scale, shift) = bn.inference_affine();
            Ok((apply_affine(x, &scale, &shift), None))
        }
        BnMode::TrainStats => {
            if d.n * d.h * d.w == 0 {
                return Err(Error::EmptyBlocks);
            }
            let layout = x.layout();
            let stats = channel_stats(
                d.c,
                x.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| (channel_index(d, layout, i), v)),
            );
            let (scale, shift) = affine(&bn.gamma, &bn.beta, &stats.mean, &stats.var, bn.epsilon);
            Ok((apply_affine(x, &scale, &shift), Some(stats)))
        }
    }
}

pub fn relu<T: Element>(x: &Tensor4D<T>) -> Tensor4D<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `g` where the pre-activation was positive.
pub fn relu_backward<T: Element>(pre: &Tensor4D<T>, g: &Tensor4D<T>) -> Result<Tensor4D<T>> {
    pre.ensure_same_shape(g)?;
    let mut out = g.clone();
    for (o, &p) in out.data_mut().iter_mut().zip(pre.data()) {
        if p <= T::zero() {
            *o = T::zero();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
}

/// Pooling over full windows only (valid semantics).
pub fn pool2d<T: Element>(
    x: &Tensor4D<T>,
    window: (usize, usize),
    stride: (usize, usize),
    mode: PoolMode,
) -> Result<Tensor4D<T>> {
    let d = x.dims();
    let (wh, ww) = window;
    let (sh, sw) = stride;
    if wh == 0 || ww == 0 || sh == 0 || sw == 0 {
        return Err(Error::config("pool window and stride must be positive"));
    }
    if wh > d.h || ww > d.w {
        return Err(Error::config(format!(
            "pool window {wh}x{ww} larger than input {}x{}",
            d.h, d.w
        )));
    }
    let (oh, ow) = ((d.h - wh) / sh + 1, (d.w - ww) / sw + 1);
    let area = T::narrow((wh * ww) as f64);
    let mut out = Tensor4D::zeros(Dims4::new(d.n, oh, ow, d.c), x.layout());
    for i in 0..d.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for k in 0..d.c {
                    let mut acc = match mode {
                        PoolMode::Max => T::neg_infinity(),
                        PoolMode::Avg => T::zero(),
                    };
                    for y in oy * sh..oy * sh + wh {
                        for xx in ox * sw..ox * sw + ww {
                            let v = x.get(i, y, xx, k);
                            acc = match mode {
                                PoolMode::Max => acc.max(v),
                                PoolMode::Avg => acc + v,
                            };
                        }
                    }
                    if mode == PoolMode::Avg {
                        acc = acc / area;
                    }
                    out.set(i, oy, ox, k, acc);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_by_two() -> Tensor4D<f32> {
        Tensor4D::from_vec(
            Dims4::new(1, 2, 2, 1),
            Layout::ChannelsLast,
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap()
    }

    #[test]
    fn identity_bn_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor4D::<f32>::random(Dims4::new(2, 3, 3, 4), &mut rng, -3.0, 3.0);
        let bn = BnParams::identity(4, 0.0);
        let (y, stats) = batch_norm(&x, &bn, BnMode::Inference).unwrap();
        assert!(stats.is_none());
        assert_eq!(y, x);
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor4D::<f32>::from_fn(Dims4::new(2, 3, 4, 3), |_, _, _, k| k as f32 * 2.5 + 1.0);
        let bn = BnParams::identity(3, 1e-5);
        let (y, stats) = batch_norm(&x, &bn, BnMode::TrainStats).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-6));
        let stats = stats.unwrap();
        assert_eq!(stats.var, vec![0.0; 3]);
        assert_eq!(stats.count, 24);
    }

    #[test]
    fn train_stats_output_has_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = Dims4::new(2, 6, 5, 3);
        let x = Tensor4D::<f32>::random(d, &mut rng, -4.0, 7.0);
        let bn = BnParams::identity(3, 1e-5);
        let (y, _) = batch_norm(&x, &bn, BnMode::TrainStats).unwrap();
        // Independent recomputation of the output statistics.
        for k in 0..3 {
            let vals: Vec<f64> = (0..d.n * d.h * d.w).map(|p| y.data()[p * 3 + k] as f64).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-4, "mean {m}");
            assert!((v - 1.0).abs() < 1e-4, "var {v}");
        }
    }

    #[test]
    fn train_stats_match_across_layouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor4D::<f32>::random(Dims4::new(1, 4, 4, 2), &mut rng, -1.0, 1.0);
        let bn = BnParams::random(2, &mut rng);
        let (a, sa) = batch_norm(&x, &bn, BnMode::TrainStats).unwrap();
        let (b, sb) = batch_norm(&x.transpose_layout(), &bn, BnMode::TrainStats).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(a, b.transpose_layout());
    }

    #[test]
    fn bn_channel_mismatch() {
        let x = Tensor4D::<f32>::zeros(Dims4::new(1, 2, 2, 3), Layout::ChannelsLast);
        let bn = BnParams::identity(2, 1e-5);
        assert!(batch_norm(&x, &bn, BnMode::Inference).is_err());
    }

    #[test]
    fn negative_variance_rejected() {
        assert!(BnParams::new(vec![1.0f32], vec![0.0], vec![0.0], vec![-1.0], 1e-5).is_err());
    }

    #[test]
    fn relu_of_negatives_is_zero() {
        let x = Tensor4D::<f32>::filled(Dims4::new(1, 3, 3, 2), Layout::ChannelsLast, -0.5);
        assert!(relu(&x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn max_and_avg_pool() {
        let x = two_by_two();
        let m = pool2d(&x, (2, 2), (2, 2), PoolMode::Max).unwrap();
        assert_eq!(m.data(), &[4.0]);
        let a = pool2d(&x, (2, 2), (2, 2), PoolMode::Avg).unwrap();
        assert_eq!(a.data(), &[2.5]);
    }

    #[test]
    fn pool_window_larger_than_input() {
        assert!(pool2d(&two_by_two(), (3, 3), (1, 1), PoolMode::Max).is_err());
    }
}
