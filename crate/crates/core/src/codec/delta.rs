use super::mask::{BinaryMask, EPSILON};
use super::CodecError;

/// Positions retained for transmission together with the KL weight that
/// ranked them. Indices are strictly increasing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DeltaSet {
    indices: Vec<u32>,
    kl_weights: Vec<f64>,
}

impl DeltaSet {
    /// Pairs are sorted by index; duplicate indices are rejected.
    pub fn new(mut pairs: Vec<(u32, f64)>) -> Option<Self> {
        pairs.sort_by_key(|p| p.0);
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) || pairs.iter().any(|p| p.1.is_nan() || p.1 < 0.0) {
            return None;
        }
        let (indices, kl_weights) = pairs.into_iter().unzip();
        Some(Self {
            indices,
            kl_weights,
        })
    }

    /// Every index with zero weight (no ranking information).
    pub fn from_indices(indices: &[u32]) -> Option<Self> {
        Self::new(indices.iter().map(|&i| (i, 0.0)).collect())
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn kl_weights(&self) -> &[f64] {
        &self.kl_weights
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// `{ i : server_i != client_i }`, ascending.
pub fn delta_indices(server: &BinaryMask, client: &BinaryMask) -> Result<Vec<u32>, CodecError> {
    let diff = server.xor(client).ok_or(CodecError::LengthMismatch {
        expected: server.len(),
        found: client.len(),
    })?;
    Ok(diff.iter_ones().map(|i| i as u32).collect())
}

/// `KL(Bern(p) || Bern(q))` with both arguments clamped to
/// `[EPSILON, 1 - EPSILON]`.
pub fn kl_bernoulli(p: f64, q: f64) -> f64 {
    let p = p.clamp(EPSILON, 1.0 - EPSILON);
    let q = q.clamp(EPSILON, 1.0 - EPSILON);
    let kl = p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln();
    kl.max(0.0)
}

/// Number of entries kept out of `n` for fraction `kappa`: `ceil(kappa * n)`.
pub fn retained_count(kappa: f64, n: usize) -> usize {
    // The slack keeps e.g. 0.7 * 10 = 7.000000000000001 from rounding up.
    (((kappa * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Keeps the `ceil(kappa * |delta|)` positions with the largest
/// `KL(θ_client_i || θ_server_i)`, ties broken by ascending index.
pub fn rank_topk(
    delta: &[u32],
    theta_client: &[f64],
    theta_server: &[f64],
    kappa: f64,
) -> Result<DeltaSet, CodecError> {
    if !(kappa > 0.0 && kappa <= 1.0) {
        return Err(CodecError::InvalidKappa(kappa));
    }
    if theta_client.len() != theta_server.len() {
        return Err(CodecError::LengthMismatch {
            expected: theta_server.len(),
            found: theta_client.len(),
        });
    }
    let d = theta_client.len();
    let mut scored = Vec::with_capacity(delta.len());
    for &i in delta {
        if i as usize >= d {
            return Err(CodecError::IndexOutOfRange {
                index: i as u64,
                d: d as u64,
            });
        }
        let kl = kl_bernoulli(theta_client[i as usize], theta_server[i as usize]);
        scored.push((i, kl));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(retained_count(kappa, delta.len()));
    DeltaSet::new(scored).ok_or(CodecError::DuplicateIndex)
}

/// Inverts the listed bits of `server`.
pub fn reconstruct_mask(server: &BinaryMask, flips: &[u32]) -> Result<BinaryMask, CodecError> {
    let mut out = server.clone();
    for &i in flips {
        if i as usize >= out.len() {
            return Err(CodecError::IndexOutOfRange {
                index: i as u64,
                d: out.len() as u64,
            });
        }
        out.flip(i as usize);
    }
    Ok(out)
}
