//! Seeded 80/10/10 splitting of user-item pairs.

use super::{CorpusError, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

/// Split interaction indices `0..count` into 80% train / 10% val / 10% test.
/// Deterministic given the seed; each id list is sorted ascending.
pub fn split(count: usize, seed: u64) -> Result<SplitManifest> {
    if count < 10 {
        return Err(CorpusError::TooFewInteractions(count));
    }
    let mut ids: Vec<u32> = (0..count as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let n_val = count / 10;
    let n_test = count / 10;
    let n_train = count - n_val - n_test;

    let mut train = ids[..n_train].to_vec();
    let mut val = ids[n_train..n_train + n_val].to_vec();
    let mut test = ids[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitManifest {
        seed,
        train,
        val,
        test,
    })
}
