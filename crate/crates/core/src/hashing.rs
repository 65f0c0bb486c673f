//! Seeded, platform-stable 64-bit hashing for feature hashing and per-item seeds.
//!
//! `std`'s `DefaultHasher` is not guaranteed stable across releases, and every
//! artifact derived from these hashes (index files, router models) must be
//! reproducible byte-for-byte.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over `bytes`, keyed by `seed`, with a splitmix64 finalizer so the
/// high bits (used for signs) are well mixed.
pub(crate) fn hash64(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET ^ splitmix64(seed);
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(h)
}

/// Maps a hash to a bucket in `0..dim` and a sign in `{-1, +1}`.
pub(crate) fn bucket_and_sign(h: u64, dim: usize) -> (usize, f64) {
    let bucket = (h % dim as u64) as usize;
    let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
    (bucket, sign)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_changes_hash() {
        assert_ne!(hash64(1, b"abc"), hash64(2, b"abc"));
        assert_eq!(hash64(1, b"abc"), hash64(1, b"abc"));
    }

    #[test]
    fn frozen_values() {
        // Guards against accidental algorithm changes that would invalidate
        // previously written index and model files. Values computed with an
        // independent Python transcription of the same hash.
        assert_eq!(hash64(0, b""), 0x5b21_f68f_fa77_f14c);
        assert_eq!(hash64(7, b"who"), 0xc7da_95e3_7d9c_a94c);
        assert_eq!(hash64(42, b"the quick brown fox"), 0xb988_e859_ef6d_6ab6);
    }
}
