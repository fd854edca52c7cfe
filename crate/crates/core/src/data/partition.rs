use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::tensor::rng::{stream, Purpose};

use super::{ClientDataset, MultimodalExample};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartitionOptions {
    pub num_clients: usize,
    pub alpha: f64,
    pub min_per_client: usize,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for PartitionOptions {
    fn default() -> Self {
        Self { num_clients: 8, alpha: 0.1, min_per_client: 8, max_retries: 100, seed: 0 }
    }
}

/// Class-conditional Dirichlet split.
///
/// For every class the examples are shuffled and cut according to a fresh
/// `Dirichlet(alpha * 1_K)` draw of client proportions. If some client ends
/// up with fewer than `min_per_client` examples, all proportions are redrawn,
/// at most `max_retries` times. Each client keeps its examples in input order.
pub fn dirichlet_partition(
    examples: &[MultimodalExample],
    num_classes: usize,
    opts: &PartitionOptions,
) -> Result<Vec<ClientDataset>> {
    let k = opts.num_clients;
    if k == 0 {
        return Err(Error::InvalidArgument("num_clients must be >= 1".into()));
    }
    if !(opts.alpha > 0.0 && opts.alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be > 0, got {}", opts.alpha)));
    }
    if examples.len() < k * opts.min_per_client.max(1) {
        return Err(Error::Partition(format!(
            "{} examples cannot give {k} clients at least {} each",
            examples.len(),
            opts.min_per_client.max(1)
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, e) in examples.iter().enumerate() {
        by_class[e.label].push(i);
    }
    let gamma = Gamma::new(opts.alpha, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = stream(opts.seed, Purpose::Partition, 0, 0);
    let mut smallest = 0;
    for _attempt in 0..=opts.max_retries {
        let mut owner = vec![0usize; examples.len()];
        for idx in &by_class {
            let mut idx = idx.clone();
            idx.shuffle(&mut rng);
            let mut props: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = props.iter().sum();
            if total > 0.0 {
                props.iter_mut().for_each(|p| *p /= total);
            } else {
                // Every gamma draw underflowed (tiny alpha): give the class to one client.
                props = vec![0.0; k];
                props[rand::Rng::random_range(&mut rng, 0..k)] = 1.0;
            }
            let n = idx.len();
            let mut start = 0;
            let mut cum = 0.0;
            for (c, p) in props.iter().enumerate() {
                cum += p;
                let end = if c + 1 == k { n } else { ((cum * n as f64).round() as usize).clamp(start, n) };
                for &i in &idx[start..end] {
                    owner[i] = c;
                }
                start = end;
            }
        }
        let mut counts = vec![0usize; k];
        owner.iter().for_each(|&c| counts[c] += 1);
        smallest = *counts.iter().min().unwrap();
        if smallest >= opts.min_per_client.max(1) {
            let mut parts: Vec<Vec<MultimodalExample>> = vec![Vec::new(); k];
            for (i, &c) in owner.iter().enumerate() {
                parts[c].push(examples[i].clone());
            }
            return parts
                .into_iter()
                .enumerate()
                .map(|(c, ex)| ClientDataset::new(c, ex, num_classes))
                .collect();
        }
    }
    Err(Error::Partition(format!(
        "after {} retries the smallest client still has {smallest} examples (min_per_client = {}, alpha = {}, K = {k})",
        opts.max_retries, opts.min_per_client, opts.alpha
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec};

    fn data(per_class: usize) -> Vec<MultimodalExample> {
        generate_dataset(&DatasetSpec { train_per_class: per_class, test_per_class: 0, ..Default::default() })
            .unwrap()
            .train
    }

    #[test]
    fn single_client_takes_everything() {
        let ex = data(20);
        let parts = dirichlet_partition(&ex, 4, &PartitionOptions { num_clients: 1, ..Default::default() }).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].examples, ex);
    }

    #[test]
    fn conservation_for_several_alphas() {
        let ex = data(50);
        for alpha in [0.05, 0.1, 1.0, 100.0] {
            let opts = PartitionOptions { num_clients: 5, alpha, min_per_client: 2, seed: 3, ..Default::default() };
            let parts = dirichlet_partition(&ex, 4, &opts).unwrap();
            let total: usize = parts.iter().map(|p| p.examples.len()).sum();
            assert_eq!(total, ex.len());
            let mut merged: Vec<_> = parts.iter().flat_map(|p| p.examples.iter()).collect();
            let mut orig: Vec<_> = ex.iter().collect();
            let key = |e: &&MultimodalExample| format!("{:?}", e.features);
            merged.sort_by_key(key);
            orig.sort_by_key(key);
            assert_eq!(merged, orig);
            let mut h = vec![0; 4];
            parts.iter().for_each(|p| p.label_histogram.iter().enumerate().for_each(|(c, n)| h[c] += n));
            assert_eq!(h, vec![50; 4]);
        }
    }

    #[test]
    fn large_alpha_is_near_uniform() {
        let ex = data(2000);
        for seed in 0..5 {
            let opts = PartitionOptions { num_clients: 8, alpha: 1000.0, seed, ..Default::default() };
            for p in dirichlet_partition(&ex, 4, &opts).unwrap() {
                let n = p.examples.len() as f64;
                for &c in &p.label_histogram {
                    assert!((c as f64 / n - 0.25).abs() < 0.05);
                }
            }
        }
    }

    #[test]
    fn infeasible_minimum_is_reported() {
        let ex = data(4);
        let opts = PartitionOptions { num_clients: 4, alpha: 0.01, min_per_client: 4, max_retries: 5, seed: 0 };
        let err = dirichlet_partition(&ex, 4, &opts).unwrap_err();
        assert!(err.to_string().contains("retries"), "{err}");
    }

    #[test]
    fn deterministic() {
        let ex = data(30);
        let opts = PartitionOptions { num_clients: 3, alpha: 0.5, min_per_client: 2, seed: 9, ..Default::default() };
        assert_eq!(dirichlet_partition(&ex, 4, &opts).unwrap(), dirichlet_partition(&ex, 4, &opts).unwrap());
    }
}
