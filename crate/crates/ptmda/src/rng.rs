//! Deterministic RNG streams keyed by (seed, purpose string).
//!
//! Every random decision in the crate draws from a stream derived from the
//! run seed and a stable textual key (usually embedding a domain name). This
//! keeps runs reproducible bit for bit and makes results independent of the
//! order in which domains are listed: a domain's stream depends on its name,
//! not its position.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// FNV-1a over the key bytes. Stable across platforms and releases, unlike
/// `std::hash`, so stream identities never drift.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Derives the 64-bit seed for a (seed, key) stream.
pub fn stream_seed(seed: u64, key: &str) -> u64 {
    // Multiply the run seed by a large odd constant before mixing so that
    // nearby seeds do not produce related streams under the same key.
    seed.wrapping_mul(0x9e3779b97f4a7c15) ^ fnv1a(key.as_bytes())
}

/// A ChaCha8 stream for the given (seed, key) pair.
pub fn stream(seed: u64, key: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, key))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_key_same_stream() {
        let mut a = stream(7, "s1/batch/rot30");
        let mut b = stream(7, "s1/batch/rot30");
        for _ in 0..16 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }

    #[test]
    fn distinct_keys_distinct_streams() {
        let mut a = stream(7, "s1/batch/rot30");
        let mut b = stream(7, "s1/batch/rot60");
        let draws_a: Vec<u64> = (0..8).map(|_| a.random()).collect();
        let draws_b: Vec<u64> = (0..8).map(|_| b.random()).collect();
        assert_ne!(draws_a, draws_b);
    }

    #[test]
    fn distinct_seeds_distinct_streams() {
        let mut a = stream(1, "init/g");
        let mut b = stream(2, "init/g");
        assert_ne!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn stream_seed_is_frozen() {
        // Checkpointed runs depend on these exact values; a change here is a
        // breaking change to reproducibility.
        assert_eq!(stream_seed(0, ""), fnv1a(b""));
        assert_eq!(stream_seed(42, "phi"), stream_seed(42, "phi"));
        assert_ne!(stream_seed(42, "phi"), stream_seed(43, "phi"));
    }
}
