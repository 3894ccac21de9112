use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Index partition of one epoch. With `shuffle`, the permutation depends only on
/// `(seed, epoch)`; the final short batch is kept.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, shuffle: bool, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(Error::Argument("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Batches of references into `dataset` for one epoch.
pub fn batch_iterator<'a, T>(
    dataset: &'a [T],
    batch_size: usize,
    seed: u64,
    shuffle: bool,
    epoch: u64,
) -> Result<impl Iterator<Item = Vec<&'a T>> + 'a> {
    let batches = epoch_batches(dataset.len(), batch_size, seed, shuffle, epoch)?;
    Ok(batches.into_iter().map(move |b| b.into_iter().map(|i| &dataset[i]).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn batch_of_seventy_two() {
        let data: Vec<u32> = (0..72).collect();
        let batches: Vec<_> = batch_iterator(&data, 72, 0, true, 0).unwrap().collect();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].len(), 72);
    }

    #[test]
    fn short_final_batch_is_emitted() {
        let sizes: Vec<_> = epoch_batches(10, 4, 1, false, 0).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, [4, 4, 2]);
    }

    #[test]
    fn same_seed_same_order_and_epochs_differ() {
        let a = epoch_batches(50, 7, 42, true, 3).unwrap();
        assert_eq!(a, epoch_batches(50, 7, 42, true, 3).unwrap());
        assert_ne!(a, epoch_batches(50, 7, 42, true, 4).unwrap());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let data: Vec<u8> = Vec::new();
        assert!(batch_iterator(&data, 4, 0, true, 0).is_err());
        assert!(epoch_batches(3, 0, 0, true, 0).is_err());
    }

    proptest! {
        #[test]
        fn every_element_once_per_epoch(len in 1usize..200, bs in 1usize..50, seed in any::<u64>(), epoch in 0u64..5, shuffle in any::<bool>()) {
            let mut seen: Vec<usize> = epoch_batches(len, bs, seed, shuffle, epoch).unwrap().concat();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..len).collect::<Vec<_>>());
        }
    }
}
