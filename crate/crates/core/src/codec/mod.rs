//! From a trained probability mask to bytes on the wire and back.
//!
//! Client side: sample the shared server mask, sample the client's own mask,
//! take the positions where they differ, keep the top-κ by Bernoulli KL,
//! insert those positions into a filter and DEFLATE the fingerprints.
//! Server side: inflate, sweep every position through the filter, flip the
//! shared server mask at the hits.

mod delta;
mod image;
mod mask;
mod update;

pub use delta::{
    delta_indices, kl_bernoulli, rank_topk, reconstruct_mask, retained_count, DeltaSet,
};
pub use image::{export_png, image_dimensions, import_png, PAYLOAD_LEN_KEY};
pub use mask::{logit, sample_mask, sigmoid, BinaryMask, ProbabilityMask, EPSILON, SCORE_LIMIT};
pub use update::{
    bits_per_parameter, decode_update, encode_update, DenseUpdate, EncodedUpdate, DENSE_HEADER_LEN,
    DENSE_MAGIC, UPDATE_HEADER_LEN, UPDATE_MAGIC, UPDATE_VERSION,
};

use thiserror::Error;

use crate::filters::FilterError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("index {index} out of range for d = {d}")]
    IndexOutOfRange { index: u64, d: u64 },
    #[error("kappa must lie in (0, 1], got {0}")]
    InvalidKappa(f64),
    #[error("duplicate index in delta set")]
    DuplicateIndex,
    #[error("malformed update header: {0}")]
    MalformedHeader(String),
    #[error("unsupported update format version {found}")]
    VersionMismatch { found: u8 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("payload does not inflate: {0}")]
    DecompressFailure(String),
    #[error("png: {0}")]
    Png(String),
    #[error(transparent)]
    Filter(FilterError),
}

impl CodecError {
    pub fn is_construction_failure(&self) -> bool {
        matches!(
            self,
            CodecError::Filter(FilterError::ConstructionFailed { .. })
        )
    }
}
