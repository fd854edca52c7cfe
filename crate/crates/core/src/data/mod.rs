//! Multimodal examples, synthetic generation, Non-IID partitioning,
//! modality masking and the text feature-file format.

mod features;
mod mask;
mod partition;
mod synth;

pub use features::{load_features, parse_features, render_features, save_features, FeatureHeader};
pub use mask::{bernoulli_mask, expected_missing_rate};
pub use partition::{dirichlet_partition, PartitionOptions};
pub use synth::{generate_dataset, nearest_prototype_accuracy, DatasetSpec, SyntheticDataset};

use crate::error::{Error, Result};

/// One labelled sample with a feature vector for every modality and a
/// presence mask. Masking flips presence bits only; feature values of missing
/// modalities are kept so that clean copies can be recovered.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalExample {
    pub label: usize,
    pub features: Vec<Vec<f64>>,
    pub present: Vec<bool>,
}

impl MultimodalExample {
    pub fn num_modalities(&self) -> usize {
        self.features.len()
    }

    pub fn is_present(&self, m: usize) -> bool {
        self.present[m]
    }

    pub fn present_modalities(&self) -> impl Iterator<Item = usize> + '_ {
        self.present.iter().enumerate().filter(|(_, p)| **p).map(|(m, _)| m)
    }

    pub fn all_present(&self) -> bool {
        self.present.iter().all(|&p| p)
    }

    /// Checks dimensions, finiteness, label range and the at-least-one-present rule.
    pub fn validate(&self, num_classes: usize, dims: &[usize]) -> std::result::Result<(), String> {
        if self.label >= num_classes {
            return Err(format!("label {} out of range for {num_classes} classes", self.label));
        }
        if self.features.len() != dims.len() || self.present.len() != dims.len() {
            return Err(format!("expected {} modalities, got {}", dims.len(), self.features.len()));
        }
        for (m, (f, &d)) in self.features.iter().zip(dims).enumerate() {
            if f.len() != d {
                return Err(format!("modality {m} has {} values, expected {d}", f.len()));
            }
            if let Some(j) = f.iter().position(|v| !v.is_finite()) {
                return Err(format!("modality {m} value {j} is not finite"));
            }
        }
        if !self.present.iter().any(|&p| p) {
            return Err("no modality present".into());
        }
        Ok(())
    }
}

/// A client's private examples.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub examples: Vec<MultimodalExample>,
    pub label_histogram: Vec<usize>,
}

impl ClientDataset {
    pub fn new(client_id: usize, examples: Vec<MultimodalExample>, num_classes: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::InvalidArgument(format!("client {client_id} has no examples")));
        }
        let label_histogram = histogram(&examples, num_classes);
        Ok(Self { client_id, examples, label_histogram })
    }

    /// Modalities present in at least one example.
    pub fn observed_modalities(&self) -> Vec<bool> {
        let m = self.examples[0].num_modalities();
        (0..m).map(|k| self.examples.iter().any(|e| e.present[k])).collect()
    }
}

pub fn histogram(examples: &[MultimodalExample], num_classes: usize) -> Vec<usize> {
    let mut h = vec![0; num_classes];
    for e in examples {
        h[e.label] += 1;
    }
    h
}
