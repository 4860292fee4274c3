//! Synthetic computation masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tiling::BinaryMask;

fn check_sparsity(s: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::config(format!("sparsity {s} outside [0, 1]")));
    }
    Ok(())
}

/// Active top-left rectangle covering `round((1 - sparsity) * h * w)` pixels
/// with the frame's aspect ratio, in every batch element.
pub fn synth_mask_topleft(n: usize, h: usize, w: usize, sparsity: f64) -> Result<BinaryMask> {
    check_sparsity(sparsity)?;
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::config("mask dims must be positive"));
    }
    let target = ((1.0 - sparsity) * (h * w) as f64).round();
    let (ah, aw) = if target <= 0.0 {
        (0, 0)
    } else {
        let ah = ((h as f64) * (1.0 - sparsity).sqrt()).round().clamp(1.0, h as f64) as usize;
        let aw = (target / ah as f64).round().clamp(1.0, w as f64) as usize;
        (ah, aw)
    };
    Ok(BinaryMask::from_fn(n, h, w, |_, y, x| y < ah && x < aw))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobMask {
    pub mask: BinaryMask,
    pub achieved_sparsity: f64,
}

const DISKS: usize = 12;

/// Union of seeded disks, grown together until the active fraction is as
/// close to `1 - target_sparsity` as pixel granularity allows.
///
/// Each pixel gets the smallest `distance / radius` over the disks; the mask
/// keeps the pixels at or below the value that admits the target count, which
/// is the same as scaling every radius by one common factor.
pub fn synth_mask_blobs(n: usize, h: usize, w: usize, target_sparsity: f64, seed: u64) -> Result<BlobMask> {
    check_sparsity(target_sparsity)?;
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::config("mask dims must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = h * w;
    let target = (((1.0 - target_sparsity) * hw as f64).round() as usize).min(hw);
    let mut bits = vec![0u8; n * hw];
    for img in bits.chunks_exact_mut(hw) {
        let disks: Vec<(f32, f32, f32)> = (0..DISKS)
            .map(|_| {
                let cy = rng.gen_range(0.0..h as f32);
                let cx = rng.gen_range(0.0..w as f32);
                let r = rng.gen_range(0.5f32..1.5);
                (cy, cx, r)
            })
            .collect();
        if target == 0 {
            continue;
        }
        let mut score = Vec::with_capacity(hw);
        for y in 0..h {
            for x in 0..w {
                let s = disks
                    .iter()
                    .map(|&(cy, cx, r)| {
                        let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
                        (dy * dy + dx * dx).sqrt() / r
                    })
                    .fold(f32::INFINITY, f32::min);
                score.push(s);
            }
        }
        let mut sorted = score.clone();
        let (_, &mut cut, _) = sorted.select_nth_unstable_by(target - 1, f32::total_cmp);
        for (b, &s) in img.iter_mut().zip(&score) {
            *b = (s <= cut) as u8;
        }
    }
    let mask = BinaryMask::new(n, h, w, bits)?;
    let achieved_sparsity = mask.sparsity();
    Ok(BlobMask {
        mask,
        achieved_sparsity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topleft_quarter() {
        let m = synth_mask_topleft(1, 8, 8, 0.75).unwrap();
        assert_eq!(m.active_count(), 16);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(m.get(0, y, x), y < 4 && x < 4);
            }
        }
        assert_eq!(synth_mask_topleft(2, 8, 8, 1.0).unwrap().active_count(), 0);
        assert_eq!(synth_mask_topleft(1, 5, 7, 0.0).unwrap().active_count(), 35);
    }

    #[test]
    fn topleft_large_frame() {
        let (h, w) = (400, 704);
        let m = synth_mask_topleft(1, h, w, 0.9).unwrap();
        let active = 1.0 - m.sparsity();
        assert!((active - 0.1).abs() <= 0.005, "{active}");
        let tol = h.max(w) as f64 / (h * w) as f64;
        assert!((m.sparsity() - 0.9).abs() <= tol);
    }

    #[test]
    fn blobs_deterministic_and_on_target() {
        let a = synth_mask_blobs(1, 64, 96, 0.8, 5).unwrap();
        let b = synth_mask_blobs(1, 64, 96, 0.8, 5).unwrap();
        assert_eq!(a, b);
        assert!((a.achieved_sparsity - 0.8).abs() <= 0.02);
        let c = synth_mask_blobs(1, 64, 96, 0.8, 6).unwrap();
        assert_ne!(a.mask, c.mask);
        assert_eq!(synth_mask_blobs(2, 10, 10, 1.0, 1).unwrap().mask.active_count(), 0);
        assert_eq!(synth_mask_blobs(1, 10, 10, 0.0, 1).unwrap().mask.active_count(), 100);
    }

    #[test]
    fn rejects_bad_sparsity() {
        assert!(synth_mask_topleft(1, 4, 4, 1.5).is_err());
        assert!(synth_mask_blobs(1, 4, 4, -0.1, 0).is_err());
    }
}
