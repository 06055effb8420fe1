//! Server-side Beta-posterior aggregation of reconstructed client masks.
//!
//! Each weight carries a `Beta(α, β)` posterior. A round adds the number of
//! clients that kept the weight to `α` and the number that dropped it to
//! `β`; the global keep probability is the posterior mode
//! `(α - 1) / (α + β - 2)`. Every `round(1/ρ)` rounds both parameters reset
//! to `λ₀` so stale evidence from clients that have since moved on does not
//! pile up.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::codec::BinaryMask;
use crate::filters::HashSeed;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DMG1";
pub const CHECKPOINT_VERSION: u8 = 1;
const CHECKPOINT_HEADER_LEN: usize = 4 + 1 + 8 + 8 + 8 + 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregationError {
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("no client masks to aggregate")]
    EmptyClientSet,
    #[error("participation rate must lie in (0, 1], got {0}")]
    InvalidParticipation(f64),
    #[error("lambda0 must be positive and finite, got {0}")]
    InvalidPrior(f64),
    #[error("trial count must be at least 1")]
    NoTrials,
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("unsupported checkpoint version {found}")]
    VersionMismatch { found: u8 },
    #[error("truncated checkpoint: expected {expected} bytes, found {found}")]
    TruncatedCheckpoint { expected: usize, found: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct BetaPrior {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub lambda0: f64,
}

impl BetaPrior {
    pub fn new(d: usize, lambda0: f64) -> Result<Self, AggregationError> {
        if !(lambda0.is_finite() && lambda0 > 0.0) {
            return Err(AggregationError::InvalidPrior(lambda0));
        }
        Ok(Self {
            alpha: vec![lambda0; d],
            beta: vec![lambda0; d],
            lambda0,
        })
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn reset(&mut self) {
        self.alpha.iter_mut().for_each(|a| *a = self.lambda0);
        self.beta.iter_mut().for_each(|b| *b = self.lambda0);
    }
}

/// Rounds between prior resets: `1/ρ` rounded half-to-even, at least 1.
pub fn reset_period(rho: f64) -> u64 {
    ((1.0 / rho).round_ties_even() as u64).max(1)
}

fn check_rho(rho: f64) -> Result<(), AggregationError> {
    if rho.is_finite() && rho > 0.0 && rho <= 1.0 {
        Ok(())
    } else {
        Err(AggregationError::InvalidParticipation(rho))
    }
}

/// Resets the prior to `λ₀` when `t` is a multiple of the reset period.
/// Returns whether it fired.
pub fn maybe_reset(prior: &mut BetaPrior, t: u64, rho: f64) -> Result<bool, AggregationError> {
    check_rho(rho)?;
    if t.is_multiple_of(reset_period(rho)) {
        prior.reset();
        Ok(true)
    } else {
        Ok(false)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalState {
    /// Global keep probabilities. Stored directly rather than as scores
    /// because the posterior mode reaches exactly 0 and 1.
    pub theta: Vec<f64>,
    pub prior: BetaPrior,
    /// Number of aggregations performed so far.
    pub round: u64,
    pub rho: f64,
}

impl GlobalState {
    pub fn new(d: usize, theta0: f64, lambda0: f64, rho: f64) -> Result<Self, AggregationError> {
        check_rho(rho)?;
        Ok(Self {
            theta: vec![theta0.clamp(0.0, 1.0); d],
            prior: BetaPrior::new(d, lambda0)?,
            round: 0,
            rho,
        })
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.len();
        let mut out = Vec::with_capacity(CHECKPOINT_HEADER_LEN + 24 * d);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(d as u64).to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.rho.to_le_bytes());
        out.extend_from_slice(&self.prior.lambda0.to_le_bytes());
        for v in self
            .prior
            .alpha
            .iter()
            .chain(&self.prior.beta)
            .chain(&self.theta)
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AggregationError> {
        if bytes.len() < CHECKPOINT_HEADER_LEN {
            return Err(AggregationError::TruncatedCheckpoint {
                expected: CHECKPOINT_HEADER_LEN,
                found: bytes.len(),
            });
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(AggregationError::MalformedCheckpoint("bad magic".into()));
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(AggregationError::VersionMismatch { found: bytes[4] });
        }
        let u64_at = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        let d = u64_at(5);
        let round = u64_at(13);
        let rho = f64::from_bits(u64_at(21));
        let lambda0 = f64::from_bits(u64_at(29));
        let expected = usize::try_from(d)
            .ok()
            .and_then(|d| d.checked_mul(24))
            .and_then(|n| n.checked_add(CHECKPOINT_HEADER_LEN))
            .ok_or_else(|| AggregationError::MalformedCheckpoint(format!("d = {d} too large")))?;
        if bytes.len() < expected {
            return Err(AggregationError::TruncatedCheckpoint {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(AggregationError::MalformedCheckpoint(format!(
                "{} trailing bytes",
                bytes.len() - expected
            )));
        }
        let d = d as usize;
        let floats: Vec<f64> = bytes[CHECKPOINT_HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut state = GlobalState::new(0, 0.5, lambda0, rho)?;
        state.prior.alpha = floats[..d].to_vec();
        state.prior.beta = floats[d..2 * d].to_vec();
        state.theta = floats[2 * d..].to_vec();
        state.round = round;
        if state.theta.iter().any(|t| !(0.0..=1.0).contains(t))
            || state
                .prior
                .alpha
                .iter()
                .chain(&state.prior.beta)
                .any(|v| !(v.is_finite() && *v > 0.0))
        {
            return Err(AggregationError::MalformedCheckpoint(
                "values out of range".into(),
            ));
        }
        Ok(state)
    }
}

/// Per-coordinate count of ones across the masks.
fn column_sums(masks: &[BinaryMask], d: usize) -> Result<Vec<u32>, AggregationError> {
    if masks.is_empty() {
        return Err(AggregationError::EmptyClientSet);
    }
    let mut sums = vec![0u32; d];
    for m in masks {
        if m.len() != d {
            return Err(AggregationError::LengthMismatch {
                expected: d,
                found: m.len(),
            });
        }
        for i in m.iter_ones() {
            sums[i] += 1;
        }
    }
    Ok(sums)
}

/// One aggregation round: advance the round counter, reset the prior if
/// due, add the client counts and recompute the posterior mode.
pub fn bayes_agg(masks: &[BinaryMask], state: &mut GlobalState) -> Result<(), AggregationError> {
    let d = state.len();
    let sums = column_sums(masks, d)?;
    let k = masks.len() as f64;
    state.round += 1;
    maybe_reset(&mut state.prior, state.round, state.rho)?;
    let prior = &mut state.prior;
    for (i, &s) in sums.iter().enumerate() {
        let s = s as f64;
        prior.alpha[i] += s;
        prior.beta[i] += k - s;
        let denom = prior.alpha[i] + prior.beta[i] - 2.0;
        state.theta[i] = if denom > 0.0 {
            ((prior.alpha[i] - 1.0) / denom).clamp(0.0, 1.0)
        } else {
            0.5
        };
    }
    Ok(())
}

/// Element-wise mean of the masks.
pub fn estimate_mean(masks: &[BinaryMask]) -> Result<Vec<f64>, AggregationError> {
    let d = masks
        .first()
        .map(|m| m.len())
        .ok_or(AggregationError::EmptyClientSet)?;
    let k = masks.len() as f64;
    Ok(column_sums(masks, d)?
        .into_iter()
        .map(|s| s as f64 / k)
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorBoundReport {
    pub d: usize,
    pub clients: usize,
    pub trials: usize,
    /// Mean over trials of `‖θ̄ - (1/K) Σ m'_k‖²`.
    pub empirical: f64,
    /// `d / 4K`.
    pub bound: f64,
    /// `bound · (1 + 3 / sqrt(trials))`, the pass threshold.
    pub threshold: f64,
    pub passed: bool,
}

const TRIALS_PER_CHUNK: usize = 32;

/// `p · 2^64` as an integer threshold, so `draw < threshold` has probability
/// `p` for a uniform 64-bit draw (exactly 0 for `p = 0`, always for `p = 1`).
fn threshold(p: f64) -> Option<u64> {
    if p >= 1.0 {
        None
    } else {
        Some((p.max(0.0) * 18_446_744_073_709_551_616.0) as u64)
    }
}

#[inline]
fn bernoulli(rng: &mut ChaCha8Rng, t: Option<u64>) -> bool {
    match t {
        None => true,
        Some(0) => false,
        Some(t) => rng.next_u64() < t,
    }
}

/// Monte Carlo check of the mean-estimation error bound: samples
/// `m_k ~ Bern(θ_k)`, optionally flips each bit with probability
/// `2^-flip_bpe`, and compares the mean squared error of the client average
/// against `d / 4K`.
pub fn verify_error_bound(
    theta: &[Vec<f64>],
    trials: usize,
    flip_bpe: Option<u32>,
    seed: HashSeed,
) -> Result<ErrorBoundReport, AggregationError> {
    if trials == 0 {
        return Err(AggregationError::NoTrials);
    }
    let k = theta.len();
    let d = theta
        .first()
        .map(Vec::len)
        .ok_or(AggregationError::EmptyClientSet)?;
    if let Some(row) = theta.iter().find(|r| r.len() != d) {
        return Err(AggregationError::LengthMismatch {
            expected: d,
            found: row.len(),
        });
    }
    let mean: Vec<f64> = (0..d)
        .map(|i| theta.iter().map(|r| r[i]).sum::<f64>() / k as f64)
        .collect();
    let keep: Vec<Vec<Option<u64>>> = theta
        .iter()
        .map(|r| r.iter().map(|&p| threshold(p)).collect())
        .collect();
    let flip = flip_bpe.map(|b| threshold(0.5f64.powi(b as i32)));

    let chunks = trials.div_ceil(TRIALS_PER_CHUNK);
    let partial: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.child(c as u64).value());
            let n = TRIALS_PER_CHUNK.min(trials - c * TRIALS_PER_CHUNK);
            let mut sums = vec![0u32; d];
            let mut total = 0.0;
            for _ in 0..n {
                sums.iter_mut().for_each(|s| *s = 0);
                for row in &keep {
                    for (s, &t) in sums.iter_mut().zip(row) {
                        let mut bit = bernoulli(&mut rng, t);
                        if let Some(f) = flip {
                            bit ^= bernoulli(&mut rng, f);
                        }
                        *s += bit as u32;
                    }
                }
                total += sums
                    .iter()
                    .zip(&mean)
                    .map(|(&s, &m)| (m - s as f64 / k as f64).powi(2))
                    .sum::<f64>();
            }
            total
        })
        .collect();
    let empirical = partial.iter().sum::<f64>() / trials as f64;
    let bound = d as f64 / (4.0 * k as f64);
    let threshold = bound * (1.0 + 3.0 / (trials as f64).sqrt());
    Ok(ErrorBoundReport {
        d,
        clients: k,
        trials,
        empirical,
        bound,
        threshold,
        passed: empirical <= threshold,
    })
}
