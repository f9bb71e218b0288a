//! Labelled seed splitting.
//!
//! Every random stream in a run is derived from one global seed and a
//! textual label, so sub-experiments can be re-run independently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Child seed for `label` under `seed` (FNV-1a of the label mixed with the parent).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(seed ^ splitmix(h))
}

pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_and_parents_separate_streams() {
        assert_eq!(derive_seed(1, "client/0"), derive_seed(1, "client/0"));
        assert_ne!(derive_seed(1, "client/0"), derive_seed(1, "client/1"));
        assert_ne!(derive_seed(1, "client/0"), derive_seed(2, "client/0"));
    }
}
