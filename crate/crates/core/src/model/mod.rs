//! Toy frozen network used in place of a pretrained backbone.
//!
//! Dense layers with `tanh` activations followed by a linear head. The
//! weights of the maskable layers are concatenated, layer by layer in
//! row-major order, into one parameter vector of length `d`; a binary mask of
//! that length gates them (`m ⊙ w_init`). Weights are never modified after
//! [`init_model`], only the head changes during the linear probe.

mod data;
mod train;

pub use data::{generate_dataset, ClientDataset, Dataset, DatasetKind, DatasetSpec};
pub use train::{
    client_update, evaluate, linear_probe, straight_through_gradient, AdamState, MaskedModelState,
    TrainConfig,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::BinaryMask;
use crate::filters::hash::{fmix64, role};
use crate::filters::HashSeed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_dim: 10,
            hidden: vec![64, 64],
            classes: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub maskable: bool,
}

impl DenseLayer {
    fn kaiming_uniform(
        inputs: usize,
        outputs: usize,
        maskable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // U(-b, b) with b = sqrt(6 / fan_in) has standard deviation sqrt(2 / fan_in).
        let bound = (6.0 / inputs as f64).sqrt();
        let bias_bound = 1.0 / (inputs as f64).sqrt();
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
            bias: (0..outputs)
                .map(|_| rng.random_range(-bias_bound..bias_bound))
                .collect(),
            maskable,
        }
    }

    /// `out = W x + b`.
    #[inline]
    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        affine(&self.weights, &self.bias, x, out);
    }
}

/// `out = W x + b` for a row-major `W` with `b.len()` rows.
#[inline]
fn affine(weights: &[f64], bias: &[f64], x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    for (row, b) in weights.chunks_exact(x.len()).zip(bias) {
        let mut acc = *b;
        for (w, xi) in row.iter().zip(x) {
            acc += w * xi;
        }
        out.push(acc);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenModel {
    pub spec: ModelSpec,
    /// Hidden layers, each followed by `tanh`.
    pub layers: Vec<DenseLayer>,
    pub head: DenseLayer,
}

/// Builds the frozen network. Same `(spec, seed)` gives identical weights.
pub fn init_model(spec: &ModelSpec, seed: HashSeed) -> Result<FrozenModel, ModelError> {
    if spec.classes < 2 {
        return Err(ModelError::InvalidSpec(format!(
            "need at least 2 classes, got {}",
            spec.classes
        )));
    }
    if spec.input_dim == 0 || spec.hidden.contains(&0) {
        return Err(ModelError::InvalidSpec(
            "layer sizes must be positive".into(),
        ));
    }
    if spec.hidden.is_empty() {
        return Err(ModelError::InvalidSpec(
            "at least one hidden (maskable) layer is required".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fmix64(seed.value() ^ 0x6d6f_6465_6c00_0000));
    let mut layers = Vec::with_capacity(spec.hidden.len());
    let mut fan_in = spec.input_dim;
    for &width in &spec.hidden {
        layers.push(DenseLayer::kaiming_uniform(fan_in, width, true, &mut rng));
        fan_in = width;
    }
    let head = DenseLayer::kaiming_uniform(fan_in, spec.classes, false, &mut rng);
    Ok(FrozenModel {
        spec: spec.clone(),
        layers,
        head,
    })
}

/// Per-example outputs of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub losses: Vec<f64>,
    pub logits: Vec<Vec<f64>>,
}

impl FrozenModel {
    /// Number of maskable parameters `d`.
    pub fn maskable_len(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.maskable)
            .map(|l| l.weights.len())
            .sum()
    }

    pub fn classes(&self) -> usize {
        self.head.outputs
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    /// Offset of each hidden layer's weights in the mask, `None` if frozen
    /// without a mask.
    pub(crate) fn mask_offsets(&self) -> Vec<Option<usize>> {
        let mut at = 0;
        self.layers
            .iter()
            .map(|l| {
                if l.maskable {
                    let o = at;
                    at += l.weights.len();
                    Some(o)
                } else {
                    None
                }
            })
            .collect()
    }

    /// Concatenated maskable weights, in mask order.
    pub fn maskable_weights(&self) -> Vec<f64> {
        self.layers
            .iter()
            .filter(|l| l.maskable)
            .flat_map(|l| l.weights.iter().copied())
            .collect()
    }

    /// Digest of every backbone weight and bias, for frozenness checks.
    pub fn backbone_digest(&self) -> u64 {
        let mut h = 0u64;
        for l in &self.layers {
            for v in l.weights.iter().chain(&l.bias) {
                h = fmix64(h ^ v.to_bits()).wrapping_add(role::DATA);
            }
        }
        h
    }

    /// Hidden-layer weights with the mask applied (`m ⊙ w_init`); the
    /// stored weights unchanged when `mask` is `None`.
    pub(crate) fn effective_weights(&self, mask: Option<&BinaryMask>) -> Vec<Vec<f64>> {
        let offsets = self.mask_offsets();
        self.layers
            .iter()
            .zip(offsets)
            .map(|(layer, off)| match (mask, off) {
                (Some(m), Some(o)) => layer
                    .weights
                    .iter()
                    .enumerate()
                    .map(|(k, &w)| if m.get(o + k) { w } else { 0.0 })
                    .collect(),
                _ => layer.weights.clone(),
            })
            .collect()
    }

    /// Hidden activations for one example under `weights` (from
    /// [`Self::effective_weights`]); `trace` receives the input of every
    /// layer plus the final features when given.
    pub(crate) fn features(
        &self,
        weights: &[Vec<f64>],
        x: &[f64],
        mut trace: Option<&mut Vec<Vec<f64>>>,
    ) -> Vec<f64> {
        let mut a = x.to_vec();
        let mut z = Vec::new();
        for (layer, w) in self.layers.iter().zip(weights) {
            affine(w, &layer.bias, &a, &mut z);
            let next: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
            if let Some(t) = trace.as_deref_mut() {
                t.push(std::mem::replace(&mut a, next));
            } else {
                a = next;
            }
        }
        if let Some(t) = trace {
            t.push(a.clone());
        }
        a
    }

    pub(crate) fn logits_with(&self, weights: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        let f = self.features(weights, x, None);
        let mut out = Vec::new();
        self.head.affine(&f, &mut out);
        out
    }

    /// Logits for one example, with `mask` applied when given.
    pub fn logits(&self, x: &[f64], mask: Option<&BinaryMask>) -> Vec<f64> {
        self.logits_with(&self.effective_weights(mask), x)
    }

    fn check_mask(&self, mask: &BinaryMask) -> Result<(), ModelError> {
        if mask.len() != self.maskable_len() {
            return Err(ModelError::ShapeMismatch {
                expected: self.maskable_len(),
                found: mask.len(),
            });
        }
        Ok(())
    }

    fn check_data(&self, data: &Dataset) -> Result<(), ModelError> {
        if data.dim() != self.input_dim() {
            return Err(ModelError::ShapeMismatch {
                expected: self.input_dim(),
                found: data.dim(),
            });
        }
        Ok(())
    }

    /// Forward pass with `m ⊙ w_init` on the maskable layers; loss is
    /// per-example cross-entropy.
    pub fn masked_forward(
        &self,
        mask: &BinaryMask,
        batch: &Dataset,
    ) -> Result<ForwardOutput, ModelError> {
        self.check_mask(mask)?;
        self.forward_with(Some(mask), batch)
    }

    /// Unmasked forward pass (every weight kept).
    pub fn forward(&self, batch: &Dataset) -> Result<ForwardOutput, ModelError> {
        self.forward_with(None, batch)
    }

    fn forward_with(
        &self,
        mask: Option<&BinaryMask>,
        batch: &Dataset,
    ) -> Result<ForwardOutput, ModelError> {
        self.check_data(batch)?;
        let mut losses = Vec::with_capacity(batch.len());
        let mut logits = Vec::with_capacity(batch.len());
        let weights = self.effective_weights(mask);
        for i in 0..batch.len() {
            let z = self.logits_with(&weights, batch.features(i));
            losses.push(cross_entropy(&z, batch.label(i) as usize));
            logits.push(z);
        }
        Ok(ForwardOutput { losses, logits })
    }
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

pub(crate) fn cross_entropy(z: &[f64], label: usize) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - z[label]
}

/// Index of the largest logit, lowest index on ties.
pub(crate) fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (FrozenModel, Dataset) {
        let spec = ModelSpec {
            input_dim: 4,
            hidden: vec![8, 6],
            classes: 3,
        };
        let model = init_model(&spec, HashSeed(1)).unwrap();
        let data = generate_dataset(&DatasetSpec {
            dim: 4,
            classes: 3,
            samples: 30,
            ..DatasetSpec::default()
        })
        .unwrap();
        (model, data)
    }

    #[test]
    fn deterministic_init() {
        let spec = ModelSpec::default();
        assert_eq!(
            init_model(&spec, HashSeed(4)).unwrap(),
            init_model(&spec, HashSeed(4)).unwrap()
        );
        assert_ne!(
            init_model(&spec, HashSeed(4)).unwrap(),
            init_model(&spec, HashSeed(5)).unwrap()
        );
    }

    #[test]
    fn kaiming_std() {
        let spec = ModelSpec {
            input_dim: 100,
            hidden: vec![200],
            classes: 2,
        };
        let m = init_model(&spec, HashSeed(9)).unwrap();
        let w = &m.layers[0].weights;
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let target = (2.0f64 / 100.0).sqrt();
        assert!((std / target - 1.0).abs() < 0.1, "std {std} vs {target}");
    }

    #[test]
    fn invalid_specs() {
        let bad = |spec: ModelSpec| {
            matches!(
                init_model(&spec, HashSeed(0)),
                Err(ModelError::InvalidSpec(_))
            )
        };
        assert!(bad(ModelSpec {
            classes: 0,
            ..ModelSpec::default()
        }));
        assert!(bad(ModelSpec {
            hidden: vec![4, 0],
            ..ModelSpec::default()
        }));
        assert!(bad(ModelSpec {
            hidden: vec![],
            ..ModelSpec::default()
        }));
    }

    #[test]
    fn ones_mask_matches_unmasked_bit_for_bit() {
        let (model, data) = toy();
        let ones = BinaryMask::ones(model.maskable_len());
        let a = model.masked_forward(&ones, &data).unwrap();
        let b = model.forward(&data).unwrap();
        for (x, y) in a.logits.iter().flatten().zip(b.logits.iter().flatten()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn zeros_mask_gives_bias_only_features() {
        let (model, data) = toy();
        let zeros = BinaryMask::zeros(model.maskable_len());
        let w = model.effective_weights(Some(&zeros));
        let f = model.features(&w, data.features(0), None);
        let expected1: Vec<f64> = model.layers[0].bias.iter().map(|b| b.tanh()).collect();
        let expected2: Vec<f64> = model.layers[1].bias.iter().map(|b| b.tanh()).collect();
        assert_eq!(f, expected2);
        let mut trace = Vec::new();
        model.features(&w, data.features(3), Some(&mut trace));
        assert_eq!(trace[1], expected1);
        // Output no longer depends on the input.
        let out = model.masked_forward(&zeros, &data).unwrap();
        assert!(out.logits.iter().all(|z| z == &out.logits[0]));
    }

    #[test]
    fn cross_entropy_properties() {
        assert!((cross_entropy(&[0.0; 5], 2) - 5f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&[10.0, -3.0], 0) >= 0.0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn wrong_mask_length() {
        let (model, data) = toy();
        assert!(matches!(
            model.masked_forward(&BinaryMask::ones(3), &data),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }
}
