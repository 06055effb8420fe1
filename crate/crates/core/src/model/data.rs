use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::filters::hash::{fmix64, role};

/// Row-major feature matrix with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<u32>,
    classes: usize,
}

/// One client's shard.
pub type ClientDataset = Dataset;

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<u32>,
        classes: usize,
    ) -> Result<Self, ModelError> {
        if dim == 0 {
            return Err(ModelError::InvalidDataset(
                "feature dimension must be positive".into(),
            ));
        }
        if features.len() != labels.len() * dim {
            return Err(ModelError::ShapeMismatch {
                expected: labels.len() * dim,
                found: features.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(ModelError::InvalidDataset(format!(
                "label {bad} not below class count {classes}"
            )));
        }
        Ok(Self {
            features,
            dim,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.features(i));
        }
        Dataset {
            features,
            dim: self.dim,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// CSV with columns `x0..x{dim-1},label`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.dim).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.features(i).iter().map(|v| v.to_string()).collect();
            row.push(self.labels[i].to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Gaussian blobs on a circle in the first two coordinates, labels
    /// alternating around it; with two blobs per class this is the XOR
    /// layout.
    #[default]
    Blobs,
    /// Concentric rings in the first two coordinates, one per class.
    Rings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub classes: usize,
    pub dim: usize,
    pub samples: usize,
    /// Standard deviation of the isotropic Gaussian noise.
    pub noise: f64,
    pub blobs_per_class: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Blobs,
            classes: 2,
            dim: 10,
            samples: 2000,
            noise: 0.5,
            blobs_per_class: 2,
            seed: 0,
        }
    }
}

/// Draws a synthetic dataset. Labels cycle through the classes so every
/// class gets `samples / classes` examples (±1).
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset, ModelError> {
    if spec.classes < 2 {
        return Err(ModelError::InvalidDataset(format!(
            "need at least 2 classes, got {}",
            spec.classes
        )));
    }
    if spec.dim < 2 {
        return Err(ModelError::InvalidDataset(
            "dimension must be at least 2".into(),
        ));
    }
    if spec.blobs_per_class == 0 {
        return Err(ModelError::InvalidDataset(
            "blobs_per_class must be positive".into(),
        ));
    }
    if !(spec.noise.is_finite() && spec.noise >= 0.0) {
        return Err(ModelError::InvalidDataset(format!(
            "noise must be finite and non-negative, got {}",
            spec.noise
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fmix64(spec.seed ^ role::DATA));
    let mut features = Vec::with_capacity(spec.samples * spec.dim);
    let mut labels = Vec::with_capacity(spec.samples);
    let blobs = spec.classes * spec.blobs_per_class;
    for i in 0..spec.samples {
        let label = i % spec.classes;
        let (cx, cy) = match spec.kind {
            DatasetKind::Blobs => {
                let blob = rng.random_range(0..spec.blobs_per_class) * spec.classes + label;
                let angle = 2.0 * PI * blob as f64 / blobs as f64;
                (angle.cos(), angle.sin())
            }
            DatasetKind::Rings => {
                let angle = rng.random_range(0.0..2.0 * PI);
                let r = (label + 1) as f64 / spec.classes as f64;
                (r * angle.cos(), r * angle.sin())
            }
        };
        for j in 0..spec.dim {
            let centre = match j {
                0 => cx,
                1 => cy,
                _ => 0.0,
            };
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(centre + spec.noise * z);
        }
        labels.push(label as u32);
    }
    Dataset::new(features, spec.dim, labels, spec.classes)
}
