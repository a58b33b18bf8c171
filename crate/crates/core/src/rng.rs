//! Deterministic RNG streams derived from structured seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a sequence of keys into one seed.
pub fn derive_seed(keys: &[u64]) -> u64 {
    keys.iter().fold(0x5eed_u64, |acc, &k| splitmix(acc ^ splitmix(k)))
}

pub fn stream(keys: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(keys))
}

pub fn gaussian(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gaussian_vec(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * gaussian(rng)).collect()
}

/// String tags hashed into seed keys (domain kinds, stage names, ...).
pub fn tag(s: &str) -> u64 {
    let mut h = crate::params::Fnv::new();
    h.bytes(s.as_bytes());
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(&[1, 2, 3]).random();
        let b: u64 = stream(&[1, 2, 3]).random();
        let c: u64 = stream(&[1, 2, 4]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
    }
}
