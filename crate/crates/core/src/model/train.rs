use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, cross_entropy, softmax, Dataset, DenseLayer, FrozenModel, ModelError};
use crate::codec::{sample_mask, BinaryMask, ProbabilityMask};
use crate::filters::hash::role;
use crate::filters::HashSeed;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 0.1,
            batch_size: 64,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 {
            return Err(ModelError::InvalidSpec(
                "batch_size must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(ModelError::InvalidSpec(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Adam moments for one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Scores plus optimizer state for one client's local training.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedModelState {
    pub scores: ProbabilityMask,
    pub optimizer: AdamState,
}

impl MaskedModelState {
    pub fn new(scores: ProbabilityMask) -> Self {
        let d = scores.len();
        Self {
            scores,
            optimizer: AdamState::new(d),
        }
    }
}

/// Straight-through gradient of the mean batch loss with respect to the
/// scores: `dL/ds_i = dL/dm_i · θ_i (1 - θ_i)`, with `dL/dm_i` taken at the
/// sampled mask. Returns the mean loss alongside.
pub fn straight_through_gradient(
    model: &FrozenModel,
    theta: &ProbabilityMask,
    mask: &BinaryMask,
    data: &Dataset,
    batch: &[usize],
) -> Result<(f64, Vec<f64>), ModelError> {
    if theta.len() != model.maskable_len() {
        return Err(ModelError::ShapeMismatch {
            expected: model.maskable_len(),
            found: theta.len(),
        });
    }
    let (loss, mut grad) = mask_gradient(model, mask, data, batch)?;
    for (i, g) in grad.iter_mut().enumerate() {
        let p = theta.probability(i);
        *g *= p * (1.0 - p);
    }
    Ok((loss, grad))
}

/// Mean loss and `dL/dm` over the examples at `batch`.
fn mask_gradient(
    model: &FrozenModel,
    mask: &BinaryMask,
    data: &Dataset,
    batch: &[usize],
) -> Result<(f64, Vec<f64>), ModelError> {
    model.check_mask(mask)?;
    model.check_data(data)?;
    let offsets = model.mask_offsets();
    let weights = model.effective_weights(Some(mask));
    let mut grad_w = vec![0.0; model.maskable_len()];
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut total = 0.0;
    let mut trace = Vec::with_capacity(model.layers.len() + 1);
    for &i in batch {
        trace.clear();
        let feats = model.features(&weights, data.features(i), Some(&mut trace));
        let mut logits = Vec::new();
        model.head.affine(&feats, &mut logits);
        let label = data.label(i) as usize;
        total += cross_entropy(&logits, label);

        let mut delta = softmax(&logits);
        delta[label] -= 1.0;
        for v in &mut delta {
            *v *= scale;
        }
        let mut g_a = transpose_mul(&model.head.weights, &delta, feats.len());
        for l in (0..model.layers.len()).rev() {
            let layer = &model.layers[l];
            let out = &trace[l + 1];
            let input = &trace[l];
            let dz: Vec<f64> = g_a
                .iter()
                .zip(out)
                .map(|(g, a)| g * (1.0 - a * a))
                .collect();
            if let Some(off) = offsets[l] {
                for (o, dzo) in dz.iter().enumerate() {
                    let base = off + o * layer.inputs;
                    for (k, x) in input.iter().enumerate() {
                        grad_w[base + k] += dzo * x;
                    }
                }
            }
            if l > 0 {
                g_a = transpose_mul(&weights[l], &dz, layer.inputs);
            }
        }
    }
    // Chain from the effective weight m_i w_i to the mask bit.
    for (g, w) in grad_w.iter_mut().zip(model.maskable_weights()) {
        *g *= w;
    }
    Ok((total * scale, grad_w))
}

/// `W^T v` for a row-major `W` with `inputs` columns.
fn transpose_mul(weights: &[f64], v: &[f64], inputs: usize) -> Vec<f64> {
    let mut out = vec![0.0; inputs];
    for (row, vo) in weights.chunks_exact(inputs).zip(v) {
        for (acc, w) in out.iter_mut().zip(row) {
            *acc += w * vo;
        }
    }
    out
}

/// Mini-batch order for one epoch.
fn epoch_order(n: usize, seed: HashSeed, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.with_role(role::BATCH).child(epoch).value());
    order.shuffle(&mut rng);
    order
}

/// Local mask training: starting from the global scores, runs `epochs`
/// passes of mini-batch Adam on the straight-through gradient, resampling
/// the mask for every batch.
pub fn client_update(
    theta_global: &ProbabilityMask,
    model: &FrozenModel,
    data: &Dataset,
    config: &TrainConfig,
    seed: HashSeed,
) -> Result<ProbabilityMask, ModelError> {
    config.validate()?;
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut state = MaskedModelState::new(theta_global.clone());
    let mask_seed = seed.with_role(role::MASK);
    for epoch in 0..config.epochs {
        let order = epoch_order(data.len(), seed, epoch as u64);
        for batch in order.chunks(config.batch_size) {
            let theta = state.scores.probabilities();
            let mask = sample_mask(&theta, mask_seed, state.optimizer.step);
            let (_, grad) = straight_through_gradient(model, &state.scores, &mask, data, batch)?;
            state
                .optimizer
                .update(state.scores.scores_mut(), &grad, config.lr);
            state.scores.clamp_scores();
        }
    }
    Ok(state.scores)
}

/// Trains a copy of the head on frozen, unmasked features with mini-batch
/// Adam. The backbone is not touched.
pub fn linear_probe(
    model: &FrozenModel,
    data: &Dataset,
    config: &TrainConfig,
    seed: HashSeed,
) -> Result<DenseLayer, ModelError> {
    config.validate()?;
    model.check_data(data)?;
    let mut head = model.head.clone();
    if config.epochs == 0 || data.is_empty() {
        return Ok(head);
    }
    let weights = model.effective_weights(None);
    let feats: Vec<Vec<f64>> = (0..data.len())
        .map(|i| model.features(&weights, data.features(i), None))
        .collect();
    let width = head.inputs;
    let mut params: Vec<f64> = head.weights.iter().chain(&head.bias).copied().collect();
    let mut adam = AdamState::new(params.len());
    let mut grad = vec![0.0; params.len()];
    let mut logits = Vec::new();
    for epoch in 0..config.epochs {
        let order = epoch_order(data.len(), seed, epoch as u64);
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                head.affine(&feats[i], &mut logits);
                let mut delta = softmax(&logits);
                delta[data.label(i) as usize] -= 1.0;
                for (o, d) in delta.iter().enumerate() {
                    let d = d * scale;
                    for (k, f) in feats[i].iter().enumerate() {
                        grad[o * width + k] += d * f;
                    }
                    grad[head.weights.len() + o] += d;
                }
            }
            adam.update(&mut params, &grad, config.lr);
            let (w, b) = params.split_at(head.weights.len());
            head.weights.copy_from_slice(w);
            head.bias.copy_from_slice(b);
        }
    }
    Ok(head)
}

/// Fraction of examples whose argmax logit (lowest index on ties) matches
/// the label.
pub fn evaluate(model: &FrozenModel, mask: &BinaryMask, data: &Dataset) -> Result<f64, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    model.check_mask(mask)?;
    model.check_data(data)?;
    let weights = model.effective_weights(Some(mask));
    let correct = (0..data.len())
        .filter(|&i| {
            argmax(&model.logits_with(&weights, data.features(i))) == data.label(i) as usize
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_dataset, init_model, DatasetSpec, ModelSpec};

    fn setup() -> (FrozenModel, Dataset) {
        let spec = ModelSpec {
            input_dim: 4,
            hidden: vec![6, 5],
            classes: 3,
        };
        let data = generate_dataset(&DatasetSpec {
            dim: 4,
            classes: 3,
            samples: 40,
            ..DatasetSpec::default()
        })
        .unwrap();
        (init_model(&spec, HashSeed(2)).unwrap(), data)
    }

    #[test]
    fn mask_gradient_matches_finite_differences_of_relaxed_mask() {
        // Treat m as continuous: perturb one weight's effective scale.
        let (model, data) = setup();
        let d = model.maskable_len();
        let mask = sample_mask(&vec![0.7; d], HashSeed(3), 0);
        let batch: Vec<usize> = (0..data.len()).collect();
        let (_, grad) = mask_gradient(&model, &mask, &data, &batch).unwrap();
        let loss_with = |k: usize, scale: f64| {
            let mut m2 = model.clone();
            let mut at = 0;
            for layer in &mut m2.layers {
                if k >= at && k < at + layer.weights.len() {
                    layer.weights[k - at] *= scale;
                }
                at += layer.weights.len();
            }
            let out = m2.masked_forward(&mask, &data).unwrap();
            out.losses.iter().sum::<f64>() / data.len() as f64
        };
        for k in mask.iter_ones().step_by(7).take(8) {
            // For m_k = 1, dL/dm_k = dL/dw_eff · w = d/dε L(w (1 + ε)).
            let h = 1e-5;
            let fd = (loss_with(k, 1.0 + h) - loss_with(k, 1.0 - h)) / (2.0 * h);
            assert!(
                (fd - grad[k]).abs() < 1e-6 + 1e-4 * fd.abs(),
                "k={k}: fd {fd} vs {}",
                grad[k]
            );
        }
    }

    #[test]
    fn zero_learning_rate_keeps_theta() {
        let (model, data) = setup();
        let theta = ProbabilityMask::uniform(model.maskable_len(), 0.3);
        let config = TrainConfig {
            lr: 0.0,
            epochs: 2,
            batch_size: 8,
        };
        let out = client_update(&theta, &model, &data, &config, HashSeed(1)).unwrap();
        assert_eq!(out, theta);
    }

    #[test]
    fn client_update_is_reproducible() {
        let (model, data) = setup();
        let theta = ProbabilityMask::uniform(model.maskable_len(), 0.5);
        let config = TrainConfig::default();
        let a = client_update(&theta, &model, &data, &config, HashSeed(7)).unwrap();
        let b = client_update(&theta, &model, &data, &config, HashSeed(7)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, theta);
    }

    #[test]
    fn probe_with_zero_epochs_is_identity() {
        let (model, data) = setup();
        let config = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert_eq!(
            linear_probe(&model, &data, &config, HashSeed(0)).unwrap(),
            model.head
        );
    }

    #[test]
    fn empty_test_set() {
        let (model, _) = setup();
        let empty = Dataset::new(vec![], 4, vec![], 3).unwrap();
        assert_eq!(
            evaluate(&model, &BinaryMask::ones(model.maskable_len()), &empty),
            Err(ModelError::EmptyDataset)
        );
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = AdamState::new(2);
        let mut p = vec![0.0, 0.0];
        adam.update(&mut p, &[3.0, -0.5], 0.1);
        assert!((p[0] + 0.1).abs() < 1e-6);
        assert!((p[1] - 0.1).abs() < 1e-6);
    }
}
