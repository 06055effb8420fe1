//! Seeded 64-bit hashing shared by every component that needs reproducible
//! pseudo-randomness: filter slot placement, fingerprints, and the
//! counter-based mask sampler.

use serde::{Deserialize, Serialize};

/// Seed of the hash family. Two parties holding the same seed compute the
/// same hashes, which is what lets the server re-create the client's filter
/// slots and the clients re-create the server's sampled mask.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub struct HashSeed(pub u64);

impl HashSeed {
    pub const fn new(value: u64) -> Self {
        Self(value)
    }

    pub const fn value(self) -> u64 {
        self.0
    }

    /// Seed for a distinct use of the same base seed. Roles are fixed
    /// constants so that, e.g., fingerprint bits and slot bits never share
    /// a stream.
    pub const fn with_role(self, role: u64) -> Self {
        Self(self.0 ^ role)
    }

    /// Child seed indexed by a counter (client id, round, attempt...).
    pub fn child(self, index: u64) -> Self {
        Self(hash64(index, self))
    }
}

impl From<u64> for HashSeed {
    fn from(value: u64) -> Self {
        Self(value)
    }
}

pub mod role {
    pub const FINGERPRINT: u64 = 0x5bd1_e995_f00d_0001;
    pub const LOCATION: u64 = 0xc2b2_ae3d_27d4_eb4f;
    pub const RESEED: u64 = 0x1656_67b1_9e37_79f9;
    pub const MASK: u64 = 0x27bb_2ee6_87b0_b0fd;
    pub const CLIENT: u64 = 0x94d0_49bb_1331_11eb;
    pub const SELECT: u64 = 0xbf58_476d_1ce4_e5b9;
    pub const EVAL: u64 = 0x9e37_79b9_7f4a_7c15;
    pub const FILTER: u64 = 0xd6e8_feb8_6659_fd93;
    pub const BATCH: u64 = 0x2545_f491_4f6c_dd1d;
    pub const DATA: u64 = 0x8cb9_2ba7_2f3d_8dd7;
}

/// MurmurHash3 64-bit finalizer.
#[inline]
pub const fn fmix64(mut h: u64) -> u64 {
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^= h >> 33;
    h
}

/// Seeded 64-bit hash. For a fixed seed this is a bijection on keys, and for
/// a fixed key it is a bijection on seeds, so distinct seeds never collide on
/// the same key.
#[inline]
pub const fn hash64(key: u64, seed: HashSeed) -> u64 {
    fmix64(key.wrapping_add(fmix64(seed.0 ^ 0x9e37_79b9_7f4a_7c15)))
}

/// `floor(a * b / 2^64)`: maps a uniform 64-bit hash onto `[0, b)`.
#[inline]
pub const fn mulhi(a: u64, b: u64) -> u64 {
    ((a as u128 * b as u128) >> 64) as u64
}

/// Uniform double in `[0, 1)` from the top 53 bits of a hash.
#[inline]
pub fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
