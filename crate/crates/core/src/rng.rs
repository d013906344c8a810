//! Seed derivation. Every random stream in a run is derived from one root
//! seed plus a label, so modules never share or reorder each other's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a textual label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = mix(seed.wrapping_add(GOLDEN));
    for b in label.bytes() {
        h = mix(h ^ u64::from(b)).wrapping_add(GOLDEN);
    }
    h
}

/// Derive a child seed from a parent seed and an integer index.
pub fn derive_index(seed: u64, index: u64) -> u64 {
    mix(seed ^ mix(index.wrapping_add(GOLDEN)))
}

pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_give_distinct_streams() {
        assert_ne!(derive_seed(7, "corpus"), derive_seed(7, "trainer"));
        assert_eq!(derive_seed(7, "corpus"), derive_seed(7, "corpus"));
        assert_ne!(derive_index(7, 0), derive_index(7, 1));
    }
}
