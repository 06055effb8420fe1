use crate::filters::hash::{hash64, role, unit_interval};
use crate::filters::HashSeed;

/// Probabilities are clamped to `[EPSILON, 1 - EPSILON]` before taking logs
/// or logits.
pub const EPSILON: f64 = 1e-6;

/// Scores are kept inside `±SCORE_LIMIT` so `sigmoid` never rounds to exactly
/// 0 or 1 in `f64`.
pub const SCORE_LIMIT: f64 = 30.0;

/// Fixed-length bit vector `m ∈ {0,1}^d`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    words: Vec<u64>,
    len: usize,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "BinaryMask(len={}, ones={})",
            self.len,
            self.count_ones()
        )
    }
}

impl BinaryMask {
    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn ones(len: usize) -> Self {
        let mut m = Self {
            words: vec![u64::MAX; len.div_ceil(64)],
            len,
        };
        m.clear_tail();
        m
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut m = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b {
                m.set(i, true);
            }
        }
        m
    }

    fn clear_tail(&mut self) {
        let rem = self.len % 64;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        assert!(
            i < self.len,
            "bit {i} out of range for mask of length {}",
            self.len
        );
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        assert!(
            i < self.len,
            "bit {i} out of range for mask of length {}",
            self.len
        );
        let bit = 1u64 << (i % 64);
        if value {
            self.words[i / 64] |= bit;
        } else {
            self.words[i / 64] &= !bit;
        }
    }

    #[inline]
    pub fn flip(&mut self, i: usize) {
        assert!(
            i < self.len,
            "bit {i} out of range for mask of length {}",
            self.len
        );
        self.words[i / 64] ^= 1u64 << (i % 64);
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Positions of set bits, ascending.
    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let tz = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * 64 + tz)
            })
        })
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len).map(|i| self.get(i)).collect()
    }

    /// Bitwise XOR; lengths must match.
    pub fn xor(&self, other: &BinaryMask) -> Option<BinaryMask> {
        if self.len != other.len {
            return None;
        }
        Some(BinaryMask {
            words: self
                .words
                .iter()
                .zip(&other.words)
                .map(|(a, b)| a ^ b)
                .collect(),
            len: self.len,
        })
    }

    /// Packs bits LSB-first into `ceil(len / 8)` bytes.
    pub fn to_packed_bytes(&self) -> Vec<u8> {
        let n = self.len.div_ceil(8);
        self.words
            .iter()
            .flat_map(|w| w.to_le_bytes())
            .take(n)
            .collect()
    }

    pub fn from_packed_bytes(bytes: &[u8], len: usize) -> Option<Self> {
        if bytes.len() != len.div_ceil(8) {
            return None;
        }
        let mut words = vec![0u64; len.div_ceil(64)];
        for (i, &b) in bytes.iter().enumerate() {
            words[i / 8] |= (b as u64) << (8 * (i % 8));
        }
        let mut m = Self { words, len };
        let before = m.words.clone();
        m.clear_tail();
        // Stray bits past `len` mean the payload was not produced by us.
        (m.words == before).then_some(m)
    }

    /// Multiplies `values` element-wise by the mask.
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| if self.get(i) { v } else { 0.0 })
            .collect()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(EPSILON, 1.0 - EPSILON);
    (p / (1.0 - p)).ln()
}

/// Unbounded scores `s` with probabilities `θ = sigmoid(s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMask {
    scores: Vec<f64>,
}

impl ProbabilityMask {
    /// Scores are clamped to `±SCORE_LIMIT`; non-finite scores saturate.
    pub fn from_scores(mut scores: Vec<f64>) -> Self {
        for s in &mut scores {
            *s = if s.is_nan() {
                0.0
            } else {
                s.clamp(-SCORE_LIMIT, SCORE_LIMIT)
            };
        }
        Self { scores }
    }

    /// Probabilities are clamped to `[EPSILON, 1 - EPSILON]` first.
    pub fn from_probabilities(theta: &[f64]) -> Self {
        Self {
            scores: theta.iter().map(|&p| logit(p)).collect(),
        }
    }

    pub fn uniform(len: usize, theta: f64) -> Self {
        Self::from_probabilities(&vec![theta; len])
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn scores_mut(&mut self) -> &mut [f64] {
        &mut self.scores
    }

    pub fn clamp_scores(&mut self) {
        for s in &mut self.scores {
            *s = s.clamp(-SCORE_LIMIT, SCORE_LIMIT);
        }
    }

    pub fn probability(&self, i: usize) -> f64 {
        sigmoid(self.scores[i])
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.scores.iter().map(|&s| sigmoid(s)).collect()
    }
}

/// Draws `m_i ~ Bernoulli(θ_i)` from a counter-based generator keyed by
/// `(seed, round, i)`, so any party holding the seed draws the same mask.
/// `θ_i = 0` never sets a bit and `θ_i = 1` always does.
pub fn sample_mask(theta: &[f64], seed: HashSeed, round: u64) -> BinaryMask {
    let stream = seed.with_role(role::MASK).child(round);
    let mut m = BinaryMask::zeros(theta.len());
    for (i, &p) in theta.iter().enumerate() {
        if unit_interval(hash64(i as u64, stream)) < p {
            m.set(i, true);
        }
    }
    m
}
