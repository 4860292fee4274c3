use crate::error::{Error, Result};
use crate::gather::GatheredBlocks;
use crate::norm::{batch_norm, BatchStats, BnMode, BnParams};
use crate::tensor::Element;

/// Batch norm over gathered blocks only. In `TrainStats` mode the statistics
/// cover the `B * bh * bw` gathered positions, halos included.
pub fn sparse_batch_norm<T: Element>(
    b: &GatheredBlocks<T>,
    bn: &BnParams<T>,
    mode: BnMode,
) -> Result<(GatheredBlocks<T>, Option<BatchStats<T>>)> {
    if mode == BnMode::TrainStats && b.is_empty() {
        return Err(Error::EmptyBlocks);
    }
    let (y, stats) = batch_norm(b.tensor(), bn, mode)?;
    Ok((b.with_tensor(y)?, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gather::gather;
    use crate::tensor::{Dims4, Layout, Tensor4D};
    use crate::tiling::{same_spec, BlockIndexList};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_blocks_rejected_in_train_mode() {
        let spec = same_spec((4, 4), 1, (2, 2)).unwrap();
        let x = Tensor4D::<f32>::zeros(Dims4::new(1, 4, 4, 2), Layout::ChannelsLast);
        let b = gather(&x, &BlockIndexList::empty(), &spec).unwrap();
        let bn = BnParams::identity(2, 1e-5);
        assert!(matches!(
            sparse_batch_norm(&b, &bn, BnMode::TrainStats),
            Err(Error::EmptyBlocks)
        ));
        assert!(sparse_batch_norm(&b, &bn, BnMode::Inference).is_ok());
    }

    #[test]
    fn full_tiling_without_overlap_matches_dense_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor4D::<f32>::random(Dims4::new(2, 8, 12, 3), &mut rng, -1.0, 3.0);
        let spec = same_spec((8, 12), 1, (4, 4)).unwrap();
        let b = gather(&x, &BlockIndexList::full(&spec, 2), &spec).unwrap();
        let bn = BnParams::random(3, &mut rng);
        let (_, sparse) = sparse_batch_norm(&b, &bn, BnMode::TrainStats).unwrap();
        let (_, dense) = batch_norm(&x, &bn, BnMode::TrainStats).unwrap();
        assert_eq!(sparse, dense);
    }

    #[test]
    fn constant_blocks_normalize_to_zero() {
        let spec = same_spec((4, 4), 1, (2, 2)).unwrap();
        let x = Tensor4D::<f32>::filled(Dims4::new(1, 4, 4, 2), Layout::ChannelsLast, 3.0);
        let b = gather(&x, &BlockIndexList::full(&spec, 1), &spec).unwrap();
        let (y, _) = sparse_batch_norm(&b, &BnParams::identity(2, 1e-5), BnMode::TrainStats).unwrap();
        assert!(y.tensor().data().iter().all(|v| v.abs() < 1e-6));
    }
}
