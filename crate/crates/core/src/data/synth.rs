use crate::error::{Error, Result};
use crate::tensor::rng::{normal_vec, stream, Purpose};

use super::MultimodalExample;

/// Parameters of the synthetic multimodal generator.
///
/// Every modality of a sample shares the class label (shared content); each
/// modality adds its own low-rank style variation and isotropic noise
/// (modality-specific content).
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub modality_dims: Vec<usize>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise_scale: f64,
    pub style_scale: f64,
    /// Number of style directions per modality.
    pub style_rank: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            modality_dims: vec![16, 16],
            train_per_class: 100,
            test_per_class: 100,
            noise_scale: 0.1,
            style_scale: 0.5,
            style_rank: 2,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.num_classes < 2 {
            errs.push(format!("num_classes = {} (must be >= 2)", self.num_classes));
        }
        if self.modality_dims.len() < 2 {
            errs.push(format!("modality_dims has {} entries (need >= 2 modalities)", self.modality_dims.len()));
        }
        if let Some(d) = self.modality_dims.iter().find(|&&d| d < 2) {
            errs.push(format!("modality_dims contains {d} (every dim must be >= 2)"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            errs.push(format!("noise_scale = {} (must be finite and >= 0)", self.noise_scale));
        }
        if !(self.style_scale >= 0.0 && self.style_scale.is_finite()) {
            errs.push(format!("style_scale = {} (must be finite and >= 0)", self.style_scale));
        }
        if self.train_per_class == 0 {
            errs.push("train_per_class = 0 (must be >= 1)".into());
        }
        errs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: DatasetSpec,
    /// `prototypes[class][modality]`
    pub prototypes: Vec<Vec<Vec<f64>>>,
    pub train: Vec<MultimodalExample>,
    pub test: Vec<MultimodalExample>,
}

/// Generates class-balanced train and test splits with every modality present.
///
/// Prototype coordinates are standard normal, style directions are standard
/// normal scaled by `1/sqrt(d)`, so a unit style coefficient moves a sample by
/// roughly unit norm.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<SyntheticDataset> {
    let errs = spec.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let mut rng = stream(spec.seed, Purpose::Data, 0, 0);
    let prototypes: Vec<Vec<Vec<f64>>> = (0..spec.num_classes)
        .map(|_| spec.modality_dims.iter().map(|&d| normal_vec(&mut rng, d)).collect())
        .collect();
    let styles: Vec<Vec<Vec<f64>>> = spec
        .modality_dims
        .iter()
        .map(|&d| {
            let s = 1.0 / (d as f64).sqrt();
            (0..spec.style_rank).map(|_| normal_vec(&mut rng, d).into_iter().map(|v| v * s).collect()).collect()
        })
        .collect();

    let sample = |rng: &mut crate::tensor::Rng, label: usize| {
        let features = spec
            .modality_dims
            .iter()
            .enumerate()
            .map(|(m, &d)| {
                let coef = normal_vec(rng, spec.style_rank);
                let noise = normal_vec(rng, d);
                (0..d)
                    .map(|j| {
                        let style: f64 = coef.iter().zip(&styles[m]).map(|(c, dir)| c * dir[j]).sum();
                        prototypes[label][m][j] + spec.style_scale * style + spec.noise_scale * noise[j]
                    })
                    .collect()
            })
            .collect();
        MultimodalExample { label, features, present: vec![true; spec.modality_dims.len()] }
    };

    let mut train_rng = stream(spec.seed, Purpose::Data, 1, 0);
    let mut test_rng = stream(spec.seed, Purpose::Data, 2, 0);
    let mut train = Vec::with_capacity(spec.num_classes * spec.train_per_class);
    let mut test = Vec::with_capacity(spec.num_classes * spec.test_per_class);
    // Interleave classes so any prefix is roughly balanced.
    for i in 0..spec.train_per_class.max(spec.test_per_class) {
        for c in 0..spec.num_classes {
            if i < spec.train_per_class {
                train.push(sample(&mut train_rng, c));
            }
            if i < spec.test_per_class {
                test.push(sample(&mut test_rng, c));
            }
        }
    }
    Ok(SyntheticDataset { spec: spec.clone(), prototypes, train, test })
}

/// Accuracy of assigning each example's modality `m` to the nearest class
/// prototype (squared Euclidean distance, ties to the lower class).
pub fn nearest_prototype_accuracy(ds: &SyntheticDataset, examples: &[MultimodalExample], m: usize) -> f64 {
    let correct = examples
        .iter()
        .filter(|e| {
            let dist = |c: usize| -> f64 {
                e.features[m].iter().zip(&ds.prototypes[c][m]).map(|(a, b)| (a - b) * (a - b)).sum()
            };
            let best = (1..ds.spec.num_classes).fold(0, |b, c| if dist(c) < dist(b) { c } else { b });
            best == e.label
        })
        .count();
    correct as f64 / examples.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_is_perfectly_separable() {
        let spec = DatasetSpec { noise_scale: 0.0, style_scale: 0.0, ..Default::default() };
        let ds = generate_dataset(&spec).unwrap();
        for m in 0..2 {
            assert_eq!(nearest_prototype_accuracy(&ds, &ds.train, m), 1.0);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = DatasetSpec { seed: 5, ..Default::default() };
        assert_eq!(generate_dataset(&spec).unwrap(), generate_dataset(&spec).unwrap());
        let other = DatasetSpec { seed: 6, ..Default::default() };
        assert_ne!(generate_dataset(&spec).unwrap().train, generate_dataset(&other).unwrap().train);
    }

    #[test]
    fn low_noise_nearest_prototype() {
        let spec = DatasetSpec {
            noise_scale: 0.1,
            style_scale: 0.0,
            train_per_class: 250,
            test_per_class: 0,
            seed: 1,
            ..Default::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        assert_eq!(ds.train.len(), 1000);
        for m in 0..2 {
            assert!(nearest_prototype_accuracy(&ds, &ds.train, m) >= 0.99);
        }
    }

    #[test]
    fn balanced_and_valid() {
        let ds = generate_dataset(&DatasetSpec::default()).unwrap();
        let h = super::super::histogram(&ds.train, 4);
        assert_eq!(h, vec![100; 4]);
        for e in ds.train.iter().chain(&ds.test) {
            e.validate(4, &[16, 16]).unwrap();
        }
    }

    #[test]
    fn invalid_spec_lists_every_problem() {
        let spec = DatasetSpec { num_classes: 1, modality_dims: vec![1], noise_scale: -1.0, ..Default::default() };
        match generate_dataset(&spec) {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 4, "{errs:?}"),
            other => panic!("{other:?}"),
        }
    }
}
