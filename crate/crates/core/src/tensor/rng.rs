//! Deterministic random streams.
//!
//! Every random draw in the simulator comes from a [`Rng`] built by
//! [`seeded_rng`]. The generator is ChaCha with 8 rounds: the 64-bit seed is
//! expanded to a 256-bit key with `rand_core`'s `seed_from_u64`, and the
//! 64-bit `stream_id` selects the ChaCha stream (nonce). ChaCha is
//! counter-based, so sequences are identical across platforms and
//! different stream ids never overlap.
//!
//! Normal variates use `rand_distr::StandardNormal` (ziggurat), which is also
//! platform independent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64, stream_id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Purposes that get their own stream family. The discriminant occupies the
/// top byte of the stream id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    Data = 1,
    Partition = 2,
    Mask = 3,
    Init = 4,
    Stage1 = 5,
    Stage2 = 6,
    Stage3 = 7,
    Eval = 8,
    Judge = 9,
    Test = 10,
}

/// Stream id for `(purpose, round, client)`; round and client each get 24 bits.
pub fn stream_id(purpose: Purpose, round: u64, client: u64) -> u64 {
    ((purpose as u64) << 56) | ((round & 0xff_ffff) << 24) | (client & 0xff_ffff)
}

pub fn stream(seed: u64, purpose: Purpose, round: u64, client: u64) -> Rng {
    seeded_rng(seed, stream_id(purpose, round, client))
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| standard_normal(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn same_seed_and_stream_repeat() {
        let mut a = seeded_rng(7, 0);
        let mut b = seeded_rng(7, 0);
        for _ in 0..1000 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }

    #[test]
    fn streams_differ() {
        let mut a = seeded_rng(7, 0);
        let mut b = seeded_rng(7, 1);
        assert_ne!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn first_draws_are_pinned() {
        // Cross-platform contract: these values must never change.
        let mut r = seeded_rng(7, 0);
        let first: Vec<u64> = (0..2).map(|_| r.random::<u64>()).collect();
        let mut again = seeded_rng(7, 0);
        assert_eq!(first, vec![again.random::<u64>(), again.random::<u64>()]);
        assert_eq!(first, PINNED_7_0.to_vec());
    }

    const PINNED_7_0: [u64; 2] = [2910824217569608635, 3098856782162503994];

    #[test]
    fn normal_moments() {
        let mut r = seeded_rng(3, 9);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x = standard_normal(&mut r);
            s += x;
            s2 += x * x;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn stream_ids_are_disjoint_across_purposes() {
        assert_ne!(stream_id(Purpose::Stage1, 1, 0), stream_id(Purpose::Stage2, 1, 0));
        assert_ne!(stream_id(Purpose::Stage1, 1, 0), stream_id(Purpose::Stage1, 0, 1));
    }
}
