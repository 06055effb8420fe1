//! Client-to-server containers.
//!
//! Filter update (little-endian):
//!
//! ```text
//! "DMU1" | version u8 | round u32 | d u64 | filter header body (28 bytes)
//! | compressed_len u32 | raw DEFLATE stream of the fingerprint bytes
//! ```
//!
//! Dense update, the 1 bit-per-parameter reference:
//!
//! ```text
//! "DMD1" | version u8 | round u32 | d u64 | ceil(d/8) mask bytes, LSB first
//! ```

use std::io::{Read, Write};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;

use super::delta::DeltaSet;
use super::mask::BinaryMask;
use super::CodecError;
use crate::filters::{
    self, FilterConfig, FilterError, FilterParams, Fingerprints, FuseFilter, HashSeed,
};

pub const UPDATE_MAGIC: &[u8; 4] = b"DMU1";
pub const DENSE_MAGIC: &[u8; 4] = b"DMD1";
pub const UPDATE_VERSION: u8 = 1;
/// Bytes in front of the DEFLATE stream.
pub const UPDATE_HEADER_LEN: usize = 4 + 1 + 4 + 8 + filters::HEADER_BODY_LEN + 4;
pub const DENSE_HEADER_LEN: usize = 4 + 1 + 4 + 8;

/// One client's compressed mask delta.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedUpdate {
    pub round: u32,
    pub d: u64,
    pub params: FilterParams,
    /// DEFLATE-compressed fingerprint bytes.
    pub payload: Vec<u8>,
}

impl EncodedUpdate {
    pub fn encoded_len(&self) -> usize {
        UPDATE_HEADER_LEN + self.payload.len()
    }

    pub fn encoded_bits(&self) -> u64 {
        8 * self.encoded_len() as u64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(UPDATE_MAGIC);
        out.push(UPDATE_VERSION);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.d.to_le_bytes());
        filters::write_header_body(&self.params, &mut out);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < UPDATE_HEADER_LEN {
            return Err(CodecError::MalformedHeader(format!(
                "update needs at least {UPDATE_HEADER_LEN} bytes, found {}",
                bytes.len()
            )));
        }
        if &bytes[..4] != UPDATE_MAGIC {
            return Err(CodecError::MalformedHeader("bad magic".into()));
        }
        if bytes[4] != UPDATE_VERSION {
            return Err(CodecError::VersionMismatch { found: bytes[4] });
        }
        let round = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
        let d = u64::from_le_bytes(bytes[9..17].try_into().unwrap());
        let params = filters::read_header_body(&bytes[17..17 + filters::HEADER_BODY_LEN])
            .map_err(CodecError::from)?;
        let at = 17 + filters::HEADER_BODY_LEN;
        let compressed_len = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let payload = &bytes[UPDATE_HEADER_LEN..];
        if payload.len() < compressed_len {
            return Err(CodecError::TruncatedPayload {
                expected: compressed_len,
                found: payload.len(),
            });
        }
        if payload.len() > compressed_len {
            return Err(CodecError::MalformedHeader(format!(
                "{} trailing bytes after payload",
                payload.len() - compressed_len
            )));
        }
        Ok(Self {
            round,
            d,
            params,
            payload: payload.to_vec(),
        })
    }

    /// Inflates the payload back into the fingerprint array.
    pub fn fingerprint_bytes(&self) -> Result<Vec<u8>, CodecError> {
        let expected = self.params.payload_len();
        // The header is untrusted, so its size claim only caps the read.
        let mut out = Vec::with_capacity(expected.min(1 << 20));
        // Reading one byte past `expected` is enough to detect oversized streams.
        DeflateDecoder::new(self.payload.as_slice())
            .take(expected as u64 + 1)
            .read_to_end(&mut out)
            .map_err(|e| CodecError::DecompressFailure(e.to_string()))?;
        if out.len() < expected {
            return Err(CodecError::TruncatedPayload {
                expected,
                found: out.len(),
            });
        }
        if out.len() > expected {
            return Err(CodecError::DecompressFailure(
                "stream inflates past the fingerprint array".into(),
            ));
        }
        Ok(out)
    }

    pub fn filter(&self) -> Result<FuseFilter, CodecError> {
        let bytes = self.fingerprint_bytes()?;
        let fps = Fingerprints::from_le_bytes(self.params.bits_per_entry, &bytes)
            .ok_or_else(|| CodecError::MalformedHeader("payload width".into()))?;
        FuseFilter::from_parts(self.params, fps).map_err(CodecError::from)
    }
}

fn deflate(bytes: &[u8]) -> Vec<u8> {
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::best());
    enc.write_all(bytes).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail")
}

/// Builds a filter over the delta positions and wraps its DEFLATE-compressed
/// fingerprints with a header.
pub fn encode_update(
    delta: &DeltaSet,
    d: u64,
    round: u32,
    config: FilterConfig,
    seed: HashSeed,
) -> Result<EncodedUpdate, CodecError> {
    if let Some(&bad) = delta.indices().iter().find(|&&i| i as u64 >= d) {
        return Err(CodecError::IndexOutOfRange {
            index: bad as u64,
            d,
        });
    }
    let keys: Vec<u64> = delta.indices().iter().map(|&i| i as u64).collect();
    let filter = FuseFilter::build_with(&keys, config, seed)?;
    let payload = deflate(&filter.fingerprints().to_le_bytes());
    Ok(EncodedUpdate {
        round,
        d,
        params: *filter.params(),
        payload,
    })
}

/// Membership sweep over `[0, d)`. The result is a superset of the encoded
/// positions; each other position appears with probability about
/// `2^-bits_per_entry`.
pub fn decode_update(update: &EncodedUpdate) -> Result<Vec<u32>, CodecError> {
    if update.d == 0 {
        return Err(CodecError::MalformedHeader("d is zero".into()));
    }
    if update.d > u32::MAX as u64 + 1 {
        return Err(CodecError::MalformedHeader(format!(
            "d = {} exceeds 32-bit indexing",
            update.d
        )));
    }
    let filter = update.filter()?;
    Ok((0..update.d)
        .filter(|&i| filter.contains(i))
        .map(|i| i as u32)
        .collect())
}

/// Total encoded bits divided by the parameter count.
pub fn bits_per_parameter(encoded_bytes: usize, d: u64) -> f64 {
    8.0 * encoded_bytes as f64 / d as f64
}

/// A full binary mask sent as raw bits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseUpdate {
    pub round: u32,
    pub mask: BinaryMask,
}

impl DenseUpdate {
    pub fn encoded_len(&self) -> usize {
        DENSE_HEADER_LEN + self.mask.len().div_ceil(8)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(DENSE_MAGIC);
        out.push(UPDATE_VERSION);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&(self.mask.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.mask.to_packed_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < DENSE_HEADER_LEN || &bytes[..4] != DENSE_MAGIC {
            return Err(CodecError::MalformedHeader("not a dense update".into()));
        }
        if bytes[4] != UPDATE_VERSION {
            return Err(CodecError::VersionMismatch { found: bytes[4] });
        }
        let round = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
        let d = u64::from_le_bytes(bytes[9..17].try_into().unwrap()) as usize;
        let body = &bytes[DENSE_HEADER_LEN..];
        let expected = d.div_ceil(8);
        if body.len() < expected {
            return Err(CodecError::TruncatedPayload {
                expected,
                found: body.len(),
            });
        }
        let mask = BinaryMask::from_packed_bytes(body, d)
            .ok_or_else(|| CodecError::MalformedHeader("dense payload length or padding".into()))?;
        Ok(Self { round, mask })
    }
}

impl From<FilterError> for CodecError {
    fn from(e: FilterError) -> Self {
        match e {
            FilterError::MalformedHeader(m) => CodecError::MalformedHeader(m),
            FilterError::TruncatedPayload { expected, found } => {
                CodecError::TruncatedPayload { expected, found }
            }
            FilterError::VersionMismatch { found } => CodecError::VersionMismatch { found },
            other => CodecError::Filter(other),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(indices: &[u32]) -> DeltaSet {
        DeltaSet::from_indices(indices).unwrap()
    }

    #[test]
    fn small_exact_roundtrip_at_32_bits() {
        let u = encode_update(
            &set(&[0, 3]),
            4,
            1,
            FilterConfig::binary_fuse(4, 32),
            HashSeed(1),
        )
        .unwrap();
        assert_eq!(decode_update(&u).unwrap(), vec![0, 3]);
        let parsed = EncodedUpdate::from_bytes(&u.to_bytes()).unwrap();
        assert_eq!(parsed, u);
        assert_eq!(u.to_bytes().len(), u.encoded_len());
    }

    #[test]
    fn empty_delta_decodes_to_nothing() {
        let u = encode_update(
            &DeltaSet::default(),
            1000,
            0,
            FilterConfig::default(),
            HashSeed(2),
        )
        .unwrap();
        assert!(decode_update(&u).unwrap().is_empty());
    }

    #[test]
    fn out_of_range_index() {
        assert!(matches!(
            encode_update(&set(&[10]), 10, 0, FilterConfig::default(), HashSeed(0)),
            Err(CodecError::IndexOutOfRange { index: 10, d: 10 })
        ));
    }

    #[test]
    fn header_errors() {
        let u = encode_update(
            &set(&[1, 2, 3]),
            100,
            0,
            FilterConfig::default(),
            HashSeed(0),
        )
        .unwrap();
        let bytes = u.to_bytes();
        let mut bad = bytes.clone();
        bad[1] = b'Z';
        assert!(matches!(
            EncodedUpdate::from_bytes(&bad),
            Err(CodecError::MalformedHeader(_))
        ));
        assert!(matches!(
            EncodedUpdate::from_bytes(&bytes[..bytes.len() - 1]),
            Err(CodecError::TruncatedPayload { .. })
        ));
        assert!(matches!(
            EncodedUpdate::from_bytes(&bytes[..10]),
            Err(CodecError::MalformedHeader(_))
        ));
        let mut zero_d = u.clone();
        zero_d.d = 0;
        assert!(decode_update(&zero_d).is_err());
    }

    #[test]
    fn garbage_payload_is_an_error() {
        let mut u = encode_update(
            &set(&[1, 2, 3]),
            100,
            0,
            FilterConfig::default(),
            HashSeed(0),
        )
        .unwrap();
        u.payload = vec![0xff; 40];
        assert!(decode_update(&u).is_err());
    }

    #[test]
    fn bpp_arithmetic() {
        assert!((bits_per_parameter(1250, 100_000) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn dense_update_is_one_bit_per_parameter_plus_header() {
        let d = 8000;
        let mask = BinaryMask::from_bools(&(0..d).map(|i| i % 3 == 0).collect::<Vec<_>>());
        let u = DenseUpdate { round: 4, mask };
        let bytes = u.to_bytes();
        assert_eq!(bytes.len(), u.encoded_len());
        let bpp = bits_per_parameter(bytes.len(), d as u64);
        assert!((bpp - (1.0 + 8.0 * DENSE_HEADER_LEN as f64 / d as f64)).abs() < 1e-12);
        assert_eq!(DenseUpdate::from_bytes(&bytes).unwrap(), u);
        assert!(DenseUpdate::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
