//! Static approximate-membership filters over 64-bit keys.
//!
//! Two layouts share one peeling constructor:
//!
//! * **Binary fuse** (arity 3 or 4): the fingerprint array is split into
//!   power-of-two segments; a key picks a start segment and then one slot in
//!   each of the `arity` consecutive segments.
//! * **XOR** (arity 3): three equal blocks, one slot per block.
//!
//! A key is a member iff the XOR of its slots equals its fingerprint. Every
//! inserted key is a member; a non-member passes with probability close to
//! `2^-bits_per_entry`.

pub mod hash;
mod wire;

pub use hash::{hash64, HashSeed};
pub use wire::{FILTER_HEADER_LEN, FILTER_MAGIC, FILTER_VERSION};

use hash::{mulhi, role};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of seeds tried before construction gives up.
pub const MAX_CONSTRUCTION_ATTEMPTS: u32 = 100;

const MIN_SEGMENT_LENGTH: u32 = 4;
const MAX_SEGMENT_LENGTH: u32 = 1 << 18;
const XOR_OVERHEAD: f64 = 1.23;
const XOR_SLACK: f64 = 32.0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FilterError {
    #[error("invalid filter parameters: {0}")]
    InvalidParams(String),
    #[error("input contains duplicate keys")]
    DuplicateKeys,
    #[error("filter construction failed after {attempts} attempts")]
    ConstructionFailed { attempts: u32 },
    #[error("malformed filter header: {0}")]
    MalformedHeader(String),
    #[error("unsupported filter format version {found}")]
    VersionMismatch { found: u8 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FilterLayout {
    #[default]
    BinaryFuse,
    Xor,
}

impl FilterLayout {
    pub(crate) fn tag(self) -> u8 {
        match self {
            FilterLayout::BinaryFuse => 0,
            FilterLayout::Xor => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(FilterLayout::BinaryFuse),
            1 => Some(FilterLayout::Xor),
            _ => None,
        }
    }
}

/// What a caller chooses; [`FilterParams`] adds the sizing derived from the
/// key count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    #[serde(default)]
    pub layout: FilterLayout,
    pub arity: u8,
    pub bits_per_entry: u8,
}

impl Default for FilterConfig {
    /// 4-wise binary fuse with 8-bit fingerprints.
    fn default() -> Self {
        Self {
            layout: FilterLayout::BinaryFuse,
            arity: 4,
            bits_per_entry: 8,
        }
    }
}

impl FilterConfig {
    pub fn binary_fuse(arity: u8, bits_per_entry: u8) -> Self {
        Self {
            layout: FilterLayout::BinaryFuse,
            arity,
            bits_per_entry,
        }
    }

    pub fn xor(bits_per_entry: u8) -> Self {
        Self {
            layout: FilterLayout::Xor,
            arity: 3,
            bits_per_entry,
        }
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        if !matches!(self.bits_per_entry, 8 | 16 | 32) {
            return Err(FilterError::InvalidParams(format!(
                "bits_per_entry must be 8, 16 or 32, got {}",
                self.bits_per_entry
            )));
        }
        match (self.layout, self.arity) {
            (FilterLayout::BinaryFuse, 3 | 4) | (FilterLayout::Xor, 3) => Ok(()),
            (layout, arity) => Err(FilterError::InvalidParams(format!(
                "arity {arity} is not supported by the {layout:?} layout"
            ))),
        }
    }
}

/// Complete description of a filter's hashing and array geometry.
///
/// For the binary fuse layout `segment_count` counts every segment in the
/// array, so a key's start segment ranges over
/// `segment_count - arity + 1` values. For the XOR layout the segments are
/// the three blocks and `segment_length` is the block length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterParams {
    pub layout: FilterLayout,
    pub arity: u8,
    pub bits_per_entry: u8,
    pub segment_length: u32,
    pub segment_count: u32,
    pub array_length: u32,
    pub seed: HashSeed,
    pub key_count: u32,
}

impl FilterParams {
    /// Derives the array geometry for `key_count` keys.
    pub fn for_keys(
        config: FilterConfig,
        key_count: usize,
        seed: HashSeed,
    ) -> Result<Self, FilterError> {
        config.validate()?;
        let key_count_u32 = u32::try_from(key_count)
            .map_err(|_| FilterError::InvalidParams(format!("too many keys: {key_count}")))?;
        let (segment_length, segment_count) = match config.layout {
            FilterLayout::BinaryFuse => fuse_geometry(config.arity as u32, key_count),
            FilterLayout::Xor => {
                let capacity = (XOR_SLACK + XOR_OVERHEAD * key_count as f64).ceil() as u64;
                let block = capacity.div_ceil(3).max(1);
                (block as u32, 3)
            }
        };
        let array_length = segment_length
            .checked_mul(segment_count)
            .ok_or_else(|| FilterError::InvalidParams("array length overflows u32".into()))?;
        Ok(Self {
            layout: config.layout,
            arity: config.arity,
            bits_per_entry: config.bits_per_entry,
            segment_length,
            segment_count,
            array_length,
            seed,
            key_count: key_count_u32,
        })
    }

    pub fn config(&self) -> FilterConfig {
        FilterConfig {
            layout: self.layout,
            arity: self.arity,
            bits_per_entry: self.bits_per_entry,
        }
    }

    /// Size of the packed fingerprint array in bytes.
    pub fn payload_len(&self) -> usize {
        self.array_length as usize * self.bits_per_entry as usize / 8
    }

    /// Checks the structural invariants a deserialized header must satisfy.
    pub fn check(&self) -> Result<(), FilterError> {
        self.config()
            .validate()
            .map_err(|e| FilterError::MalformedHeader(e.to_string()))?;
        let malformed = |msg: &str| Err(FilterError::MalformedHeader(msg.to_string()));
        if self.segment_length == 0 {
            return malformed("zero segment length");
        }
        if self.segment_length as u64 * self.segment_count as u64 != self.array_length as u64 {
            return malformed("array length is not segment_length * segment_count");
        }
        match self.layout {
            FilterLayout::BinaryFuse => {
                if !self.segment_length.is_power_of_two() {
                    return malformed("segment length is not a power of two");
                }
                if self.segment_count < self.arity as u32 {
                    return malformed("fewer segments than the arity");
                }
            }
            FilterLayout::Xor => {
                if self.segment_count != 3 {
                    return malformed("xor layout needs exactly three blocks");
                }
            }
        }
        Ok(())
    }

    fn fingerprint_mask(&self) -> u64 {
        (1u64 << self.bits_per_entry) - 1
    }

    /// Slots for a key, written into `out[..arity]`.
    #[inline]
    fn slots(&self, key: u64, out: &mut [u32; 4]) {
        let h = hash64(key, self.seed.with_role(role::LOCATION));
        match self.layout {
            FilterLayout::BinaryFuse => {
                let len = self.segment_length as u64;
                let mask = len - 1;
                let starts = (self.segment_count - self.arity as u32 + 1) as u64;
                let first = mulhi(h, starts * len);
                out[0] = first as u32;
                // Offsets for the later windows come from an independent
                // re-mix so they do not reuse the bits `mulhi` consumed.
                let offsets = hash::fmix64(h ^ 0x94d0_49bb_1331_11eb);
                for j in 1..self.arity as usize {
                    let shift = 21 * (j - 1);
                    let off = (offsets >> shift) & mask;
                    out[j] = ((first + j as u64 * len) ^ off) as u32;
                }
            }
            FilterLayout::Xor => {
                let block = self.segment_length as u64;
                for (j, slot) in out.iter_mut().take(3).enumerate() {
                    let r = h.rotate_left(21 * j as u32);
                    *slot = (j as u64 * block + mulhi(r, block)) as u32;
                }
            }
        }
    }
}

/// Segment length and total segment count for a binary fuse filter, following
/// the sizing heuristics published with binary fuse filters.
fn fuse_geometry(arity: u32, n: usize) -> (u32, u32) {
    if n < 2 * arity as usize {
        // Degenerate single-start layout: every key uses the same `arity`
        // segments.
        let len = ((2 * n).max(MIN_SEGMENT_LENGTH as usize)).next_power_of_two() as u32;
        return (len, arity);
    }
    let nf = n as f64;
    let (log_len, factor) = if arity == 3 {
        (
            nf.ln() / 3.33f64.ln() + 2.25,
            (0.875 + 0.25 * 1.0e6f64.ln() / nf.ln()).max(1.125),
        )
    } else {
        (
            nf.ln() / 2.91f64.ln() - 0.5,
            (0.77 + 0.305 * 6.0e5f64.ln() / nf.ln()).max(1.075),
        )
    };
    let segment_length = (1u64 << log_len.floor().max(0.0) as u32)
        .clamp(MIN_SEGMENT_LENGTH as u64, MAX_SEGMENT_LENGTH as u64);
    let capacity = (nf * factor).round() as u64;
    let segments = capacity.div_ceil(segment_length).max(arity as u64);
    (segment_length as u32, segments as u32)
}

/// Fingerprint of `key`: a seeded hash truncated to `bits_per_entry` bits,
/// with 0 remapped to 1 so an untouched (zero) array never matches.
#[inline]
pub fn fingerprint(key: u64, params: &FilterParams) -> u32 {
    let h = hash64(key, params.seed.with_role(role::FINGERPRINT));
    let f = (h & params.fingerprint_mask()) as u32;
    if f == 0 {
        1
    } else {
        f
    }
}

/// The `arity` array positions a key maps to.
pub fn locations(key: u64, params: &FilterParams) -> Vec<u32> {
    let mut out = [0u32; 4];
    params.slots(key, &mut out);
    out[..params.arity as usize].to_vec()
}

/// Fingerprint array with entries of exactly `bits_per_entry` bits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Fingerprints {
    Bits8(Vec<u8>),
    Bits16(Vec<u16>),
    Bits32(Vec<u32>),
}

impl Fingerprints {
    fn zeroed(bits_per_entry: u8, len: usize) -> Self {
        match bits_per_entry {
            8 => Fingerprints::Bits8(vec![0; len]),
            16 => Fingerprints::Bits16(vec![0; len]),
            _ => Fingerprints::Bits32(vec![0; len]),
        }
    }

    #[inline]
    pub fn get(&self, i: usize) -> u32 {
        match self {
            Fingerprints::Bits8(v) => v[i] as u32,
            Fingerprints::Bits16(v) => v[i] as u32,
            Fingerprints::Bits32(v) => v[i],
        }
    }

    #[inline]
    fn set(&mut self, i: usize, value: u32) {
        match self {
            Fingerprints::Bits8(v) => v[i] = value as u8,
            Fingerprints::Bits16(v) => v[i] = value as u16,
            Fingerprints::Bits32(v) => v[i] = value,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Fingerprints::Bits8(v) => v.len(),
            Fingerprints::Bits16(v) => v.len(),
            Fingerprints::Bits32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bits_per_entry(&self) -> u8 {
        match self {
            Fingerprints::Bits8(_) => 8,
            Fingerprints::Bits16(_) => 16,
            Fingerprints::Bits32(_) => 32,
        }
    }

    /// Entries packed little-endian.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            Fingerprints::Bits8(v) => v.clone(),
            Fingerprints::Bits16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Fingerprints::Bits32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    /// Inverse of [`Fingerprints::to_le_bytes`]; `bytes.len()` must be a
    /// multiple of the entry width.
    pub fn from_le_bytes(bits_per_entry: u8, bytes: &[u8]) -> Option<Self> {
        let width = bits_per_entry as usize / 8;
        if width == 0 || !bytes.len().is_multiple_of(width) {
            return None;
        }
        Some(match bits_per_entry {
            8 => Fingerprints::Bits8(bytes.to_vec()),
            16 => Fingerprints::Bits16(
                bytes
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            32 => Fingerprints::Bits32(
                bytes
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            _ => return None,
        })
    }
}

/// An immutable, constructed filter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FuseFilter {
    params: FilterParams,
    fingerprints: Fingerprints,
}

impl FuseFilter {
    /// Builds a binary fuse filter over distinct keys.
    pub fn build(
        keys: &[u64],
        bits_per_entry: u8,
        arity: u8,
        seed: HashSeed,
    ) -> Result<Self, FilterError> {
        Self::build_with(keys, FilterConfig::binary_fuse(arity, bits_per_entry), seed)
    }

    /// Builds a classic 3-wise XOR filter over distinct keys.
    pub fn build_xor(
        keys: &[u64],
        bits_per_entry: u8,
        seed: HashSeed,
    ) -> Result<Self, FilterError> {
        Self::build_with(keys, FilterConfig::xor(bits_per_entry), seed)
    }

    /// Peeling construction. On a failed peel the seed is re-derived and the
    /// whole construction restarts, up to [`MAX_CONSTRUCTION_ATTEMPTS`] times.
    pub fn build_with(
        keys: &[u64],
        config: FilterConfig,
        seed: HashSeed,
    ) -> Result<Self, FilterError> {
        let mut sorted = keys.to_vec();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(FilterError::DuplicateKeys);
        }
        drop(sorted);

        let mut params = FilterParams::for_keys(config, keys.len(), seed)?;
        let len = params.array_length as usize;
        let arity = params.arity as usize;
        let mut counts = vec![0u32; len];
        let mut xors = vec![0u64; len];
        let mut queue: Vec<u32> = Vec::with_capacity(len);
        let mut order: Vec<(u64, u32)> = Vec::with_capacity(keys.len());
        let mut slots = [0u32; 4];

        for attempt in 0..MAX_CONSTRUCTION_ATTEMPTS {
            params.seed = if attempt == 0 {
                seed
            } else {
                seed.with_role(role::RESEED).child(attempt as u64)
            };
            counts.iter_mut().for_each(|c| *c = 0);
            xors.iter_mut().for_each(|x| *x = 0);
            queue.clear();
            order.clear();

            for &key in keys {
                params.slots(key, &mut slots);
                for &s in &slots[..arity] {
                    counts[s as usize] += 1;
                    xors[s as usize] ^= key;
                }
            }
            queue.extend((0..len as u32).filter(|&i| counts[i as usize] == 1));

            while let Some(i) = queue.pop() {
                if counts[i as usize] != 1 {
                    continue;
                }
                let key = xors[i as usize];
                order.push((key, i));
                params.slots(key, &mut slots);
                for &s in &slots[..arity] {
                    let s = s as usize;
                    counts[s] -= 1;
                    xors[s] ^= key;
                    if counts[s] == 1 {
                        queue.push(s as u32);
                    }
                }
            }

            if order.len() == keys.len() {
                let mut fingerprints = Fingerprints::zeroed(params.bits_per_entry, len);
                for &(key, i) in order.iter().rev() {
                    params.slots(key, &mut slots);
                    let mut acc = fingerprint(key, &params);
                    for &s in &slots[..arity] {
                        acc ^= fingerprints.get(s as usize);
                    }
                    // Slot `i` is still zero here, so `acc` already excludes it.
                    fingerprints.set(i as usize, acc);
                }
                if attempt > 0 {
                    log::debug!(
                        "filter over {} keys built after {} reseeds",
                        keys.len(),
                        attempt
                    );
                }
                return Ok(Self {
                    params,
                    fingerprints,
                });
            }
        }
        Err(FilterError::ConstructionFailed {
            attempts: MAX_CONSTRUCTION_ATTEMPTS,
        })
    }

    /// Reassembles a filter from its parts, e.g. after transport.
    pub fn from_parts(
        params: FilterParams,
        fingerprints: Fingerprints,
    ) -> Result<Self, FilterError> {
        params.check()?;
        if fingerprints.bits_per_entry() != params.bits_per_entry {
            return Err(FilterError::MalformedHeader(
                "fingerprint width differs from header".into(),
            ));
        }
        if fingerprints.len() != params.array_length as usize {
            return Err(FilterError::TruncatedPayload {
                expected: params.payload_len(),
                found: fingerprints.len() * params.bits_per_entry as usize / 8,
            });
        }
        Ok(Self {
            params,
            fingerprints,
        })
    }

    #[inline]
    pub fn contains(&self, key: u64) -> bool {
        let mut slots = [0u32; 4];
        self.params.slots(key, &mut slots);
        let mut acc = fingerprint(key, &self.params);
        for &s in &slots[..self.params.arity as usize] {
            acc ^= self.fingerprints.get(s as usize);
        }
        acc == 0
    }

    pub fn params(&self) -> &FilterParams {
        &self.params
    }

    pub fn fingerprints(&self) -> &Fingerprints {
        &self.fingerprints
    }

    /// Total array bits divided by the number of inserted keys.
    pub fn bits_per_key(&self) -> f64 {
        let bits = self.params.array_length as f64 * self.params.bits_per_entry as f64;
        bits / self.params.key_count.max(1) as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        wire::serialize(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FilterError> {
        wire::deserialize(bytes)
    }
}

/// Free-function form of [`FuseFilter::build`].
pub fn build_filter(
    keys: &[u64],
    bits_per_entry: u8,
    arity: u8,
    seed: HashSeed,
) -> Result<FuseFilter, FilterError> {
    FuseFilter::build(keys, bits_per_entry, arity, seed)
}

pub fn build_xor_filter(
    keys: &[u64],
    bits_per_entry: u8,
    seed: HashSeed,
) -> Result<FuseFilter, FilterError> {
    FuseFilter::build_xor(keys, bits_per_entry, seed)
}

pub fn contains(filter: &FuseFilter, key: u64) -> bool {
    filter.contains(key)
}

pub fn serialize_filter(filter: &FuseFilter) -> Vec<u8> {
    filter.to_bytes()
}

pub fn deserialize_filter(bytes: &[u8]) -> Result<FuseFilter, FilterError> {
    FuseFilter::from_bytes(bytes)
}

pub(crate) use wire::{read_header_body, write_header_body, HEADER_BODY_LEN};

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(n: usize, seed: u64) -> Vec<u64> {
        (0..n as u64).map(|i| hash64(i, HashSeed(seed))).collect()
    }

    #[test]
    fn fingerprint_range_8bit() {
        let p = FilterParams::for_keys(FilterConfig::default(), 100, HashSeed(1)).unwrap();
        for k in 0..10_000u64 {
            let f = fingerprint(k, &p);
            assert!((1..=255).contains(&f));
        }
    }

    #[test]
    fn four_wise_locations_are_in_consecutive_segments() {
        let p = FilterParams::for_keys(FilterConfig::default(), 50_000, HashSeed(9)).unwrap();
        for k in 0..5_000u64 {
            let locs = locations(k, &p);
            assert_eq!(locs.len(), 4);
            let segs: Vec<u32> = locs.iter().map(|l| l / p.segment_length).collect();
            for j in 1..4 {
                assert_eq!(segs[j], segs[0] + j as u32);
            }
            assert!(locs.iter().all(|&l| l < p.array_length));
        }
    }

    #[test]
    fn xor_locations_one_per_block() {
        let p = FilterParams::for_keys(FilterConfig::xor(8), 1000, HashSeed(3)).unwrap();
        for k in 0..1000u64 {
            let locs = locations(k, &p);
            for (j, l) in locs.iter().enumerate() {
                assert_eq!(*l / p.segment_length, j as u32);
            }
        }
    }

    #[test]
    fn tiny_sets_use_single_start_layout() {
        for n in 0..8 {
            let p = FilterParams::for_keys(FilterConfig::default(), n, HashSeed(0)).unwrap();
            assert_eq!(p.segment_count, 4);
            let f = FuseFilter::build(&keys(n, 5), 8, 4, HashSeed(11)).unwrap();
            for k in keys(n, 5) {
                assert!(f.contains(k));
            }
        }
    }

    #[test]
    fn empty_filter_rejects_everything() {
        let f = FuseFilter::build(&[], 8, 4, HashSeed(2)).unwrap();
        // All slots are zero and fingerprints are never zero.
        assert!((0..100_000u64).all(|k| !f.contains(k)));
    }

    #[test]
    fn duplicate_keys_rejected() {
        assert_eq!(
            FuseFilter::build(&[1, 2, 1], 8, 4, HashSeed(0)).unwrap_err(),
            FilterError::DuplicateKeys
        );
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(matches!(
            FuseFilter::build(&[1], 12, 4, HashSeed(0)),
            Err(FilterError::InvalidParams(_))
        ));
        assert!(matches!(
            FuseFilter::build(&[1], 8, 5, HashSeed(0)),
            Err(FilterError::InvalidParams(_))
        ));
        assert!(FilterConfig {
            layout: FilterLayout::Xor,
            arity: 4,
            bits_per_entry: 8
        }
        .validate()
        .is_err());
    }

    #[test]
    fn arity_three_fuse_works() {
        let ks = keys(20_000, 8);
        let f = FuseFilter::build(&ks, 16, 3, HashSeed(4)).unwrap();
        assert!(ks.iter().all(|&k| f.contains(k)));
    }

    #[test]
    fn sizing_grows_with_keys() {
        let small = FilterParams::for_keys(FilterConfig::default(), 1_000, HashSeed(0)).unwrap();
        let large = FilterParams::for_keys(FilterConfig::default(), 100_000, HashSeed(0)).unwrap();
        assert!(large.array_length > small.array_length);
        assert!(large.array_length as f64 >= 1.075 * 100_000.0);
    }
}
