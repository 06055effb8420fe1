//! Byte layout of a serialized filter (all integers little-endian):
//!
//! ```text
//! magic "DMF1" | version u8 | arity u8 | bits_per_entry u8 | layout u8
//! | seed u64 | key_count u32 | array_length u32 | segment_length u32
//! | segment_count u32 | fingerprints (array_length * bits_per_entry / 8)
//! ```
//!
//! The layout byte occupies the slot reserved for future use: 0 is binary
//! fuse, 1 is XOR.

use super::{FilterError, FilterLayout, FilterParams, Fingerprints, FuseFilter, HashSeed};

pub const FILTER_MAGIC: &[u8; 4] = b"DMF1";
pub const FILTER_VERSION: u8 = 1;
/// Header length without the magic; this is the part embedded in updates.
pub(crate) const HEADER_BODY_LEN: usize = 28;
pub const FILTER_HEADER_LEN: usize = 4 + HEADER_BODY_LEN;

pub(crate) fn write_header_body(p: &FilterParams, out: &mut Vec<u8>) {
    out.push(FILTER_VERSION);
    out.push(p.arity);
    out.push(p.bits_per_entry);
    out.push(p.layout.tag());
    out.extend_from_slice(&p.seed.value().to_le_bytes());
    out.extend_from_slice(&p.key_count.to_le_bytes());
    out.extend_from_slice(&p.array_length.to_le_bytes());
    out.extend_from_slice(&p.segment_length.to_le_bytes());
    out.extend_from_slice(&p.segment_count.to_le_bytes());
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

/// Parses and validates a header body (no magic).
pub(crate) fn read_header_body(b: &[u8]) -> Result<FilterParams, FilterError> {
    if b.len() < HEADER_BODY_LEN {
        return Err(FilterError::MalformedHeader(format!(
            "header needs {HEADER_BODY_LEN} bytes, found {}",
            b.len()
        )));
    }
    if b[0] != FILTER_VERSION {
        return Err(FilterError::VersionMismatch { found: b[0] });
    }
    let layout = FilterLayout::from_tag(b[3])
        .ok_or_else(|| FilterError::MalformedHeader(format!("unknown layout tag {}", b[3])))?;
    let params = FilterParams {
        layout,
        arity: b[1],
        bits_per_entry: b[2],
        seed: HashSeed(u64::from_le_bytes(b[4..12].try_into().unwrap())),
        key_count: u32_at(b, 12),
        array_length: u32_at(b, 16),
        segment_length: u32_at(b, 20),
        segment_count: u32_at(b, 24),
    };
    params.check()?;
    Ok(params)
}

pub(crate) fn serialize(filter: &FuseFilter) -> Vec<u8> {
    let mut out = Vec::with_capacity(FILTER_HEADER_LEN + filter.params.payload_len());
    out.extend_from_slice(FILTER_MAGIC);
    write_header_body(&filter.params, &mut out);
    out.extend_from_slice(&filter.fingerprints.to_le_bytes());
    out
}

pub(crate) fn deserialize(bytes: &[u8]) -> Result<FuseFilter, FilterError> {
    if bytes.len() < 4 || &bytes[..4] != FILTER_MAGIC {
        return Err(FilterError::MalformedHeader("bad magic".into()));
    }
    let params = read_header_body(&bytes[4..])?;
    let payload = &bytes[FILTER_HEADER_LEN..];
    let expected = params.payload_len();
    if payload.len() < expected {
        return Err(FilterError::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(FilterError::MalformedHeader(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    let fingerprints = Fingerprints::from_le_bytes(params.bits_per_entry, payload)
        .ok_or_else(|| FilterError::MalformedHeader("payload width".into()))?;
    FuseFilter::from_parts(params, fingerprints)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FuseFilter {
        let keys: Vec<u64> = (0..500).map(|i| i * 7 + 3).collect();
        FuseFilter::build(&keys, 16, 4, HashSeed(77)).unwrap()
    }

    #[test]
    fn roundtrip() {
        let f = sample();
        let bytes = f.to_bytes();
        assert_eq!(bytes.len(), FILTER_HEADER_LEN + f.params().payload_len());
        assert_eq!(FuseFilter::from_bytes(&bytes).unwrap(), f);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            FuseFilter::from_bytes(&bytes),
            Err(FilterError::MalformedHeader(_))
        ));
    }

    #[test]
    fn wrong_version() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert_eq!(
            FuseFilter::from_bytes(&bytes).unwrap_err(),
            FilterError::VersionMismatch { found: 9 }
        );
    }

    #[test]
    fn truncated_by_one_byte() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            FuseFilter::from_bytes(&bytes[..bytes.len() - 1]),
            Err(FilterError::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn inconsistent_geometry() {
        let mut bytes = sample().to_bytes();
        // Bump array_length so it no longer equals segment_length * segment_count.
        bytes[20] ^= 1;
        assert!(matches!(
            FuseFilter::from_bytes(&bytes),
            Err(FilterError::MalformedHeader(_))
        ));
    }

    #[test]
    fn short_header() {
        assert!(matches!(
            FuseFilter::from_bytes(b"DMF1\x01\x04"),
            Err(FilterError::MalformedHeader(_))
        ));
    }
}
