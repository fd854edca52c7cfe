use rand::seq::SliceRandom;

use crate::tensor::{OptimizerKind, Rng};

/// Epoch count, learning rate and batching for one training stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl TrainSettings {
    pub fn new(epochs: usize, lr: f64) -> Self {
        Self { epochs, lr, batch_size: 64, optimizer: OptimizerKind::Adam }
    }
}

/// Shuffled index batches covering `0..n`.
pub(crate) fn minibatches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
