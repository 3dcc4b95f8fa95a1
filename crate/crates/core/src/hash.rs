//! Counter-based keyed hashing for reproducible signs and seeded entries.

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
pub fn hash3(seed: u64, a: u64, b: u64) -> u64 {
    mix64(mix64(mix64(seed) ^ a) ^ b.rotate_left(29))
}

/// Maps a hash to `[-1, 1)`.
#[inline]
pub fn unit_symmetric(h: u64) -> f64 {
    ((h >> 11) as f64) * (2.0 / (1u64 << 53) as f64) - 1.0
}

/// Rademacher sign keyed by `(seed, sample, iota, component)`.
#[inline]
pub fn sign(seed: u64, sample: u64, iota: u64, component: u64) -> f64 {
    if hash3(seed, sample, (iota << 1) | component) >> 63 == 0 {
        1.0
    } else {
        -1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_range() {
        for k in 0..10_000u64 {
            let u = unit_symmetric(hash3(7, k, k * 3));
            assert!((-1.0..1.0).contains(&u));
        }
        assert_eq!(unit_symmetric(0), -1.0);
    }

    #[test]
    fn signs_balanced() {
        let plus = (0..20_000u64).filter(|k| sign(1, *k, 5, 0) > 0.0).count();
        assert!((9_500..10_500).contains(&plus), "{plus}");
    }
}
