use rand::Rng as _;

use crate::error::{Error, Result};
use crate::tensor::rng::Rng;

use super::MultimodalExample;

const MAX_REDRAWS: usize = 10_000;

/// Marks each modality missing independently with probability `rho`.
///
/// A draw that leaves no modality present is redrawn. When `rho == 1` (or the
/// redraw budget runs out) a single uniformly chosen modality is kept.
/// Feature values and labels are never touched.
pub fn bernoulli_mask(examples: &mut [MultimodalExample], rho: f64, rng: &mut Rng) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!("missing rate must be in [0, 1], got {rho}")));
    }
    for e in examples.iter_mut() {
        let m = e.num_modalities();
        let mut done = false;
        if rho < 1.0 {
            for _ in 0..MAX_REDRAWS {
                for p in e.present.iter_mut() {
                    *p = rng.random::<f64>() >= rho;
                }
                if e.present.iter().any(|&p| p) {
                    done = true;
                    break;
                }
            }
        }
        if !done {
            let keep = rng.random_range(0..m);
            e.present.iter_mut().enumerate().for_each(|(k, p)| *p = k == keep);
        }
    }
    Ok(())
}

/// Per-modality missing probability after the all-missing redraw:
/// `(rho - rho^M) / (1 - rho^M)`, and `(M - 1) / M` at `rho = 1`.
pub fn expected_missing_rate(rho: f64, num_modalities: usize) -> f64 {
    let m = num_modalities as i32;
    if rho >= 1.0 {
        return (num_modalities - 1) as f64 / num_modalities as f64;
    }
    (rho - rho.powi(m)) / (1.0 - rho.powi(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec};
    use crate::tensor::seeded_rng;

    fn examples(n_per_class: usize, dims: Vec<usize>) -> Vec<MultimodalExample> {
        let spec = DatasetSpec { train_per_class: n_per_class, test_per_class: 0, modality_dims: dims, ..Default::default() };
        generate_dataset(&spec).unwrap().train
    }

    #[test]
    fn zero_rate_keeps_everything() {
        let mut ex = examples(10, vec![4, 4]);
        bernoulli_mask(&mut ex, 0.0, &mut seeded_rng(1, 0)).unwrap();
        assert!(ex.iter().all(|e| e.all_present()));
    }

    #[test]
    fn full_rate_keeps_exactly_one_uniformly() {
        let mut ex = examples(1000, vec![4, 4, 4]);
        bernoulli_mask(&mut ex, 1.0, &mut seeded_rng(1, 0)).unwrap();
        let mut counts = [0usize; 3];
        for e in &ex {
            assert_eq!(e.present.iter().filter(|&&p| p).count(), 1);
            counts[e.present.iter().position(|&p| p).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 4000.0 - 1.0 / 3.0).abs() < 0.03, "{counts:?}");
        }
    }

    #[test]
    fn half_rate_matches_guard_adjusted_expectation() {
        // Exact enumeration for two modalities: of the 3 surviving equiprobable
        // masks, each modality is missing in exactly one.
        assert!((expected_missing_rate(0.5, 2) - 1.0 / 3.0).abs() < 1e-15);
        let mut ex = examples(2500, vec![4, 4]);
        bernoulli_mask(&mut ex, 0.5, &mut seeded_rng(2, 0)).unwrap();
        for m in 0..2 {
            let rate = ex.iter().filter(|e| !e.present[m]).count() as f64 / ex.len() as f64;
            assert!((rate - 1.0 / 3.0).abs() < 0.02, "modality {m}: {rate}");
        }
    }

    #[test]
    fn masking_only_changes_presence() {
        let orig = examples(20, vec![4, 4]);
        let mut ex = orig.clone();
        bernoulli_mask(&mut ex, 0.7, &mut seeded_rng(3, 0)).unwrap();
        for (a, b) in orig.iter().zip(&ex) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.features, b.features);
            assert!(b.present.iter().any(|&p| p));
        }
    }

    #[test]
    fn rate_out_of_range() {
        let mut ex = examples(1, vec![4, 4]);
        assert!(bernoulli_mask(&mut ex, 1.5, &mut seeded_rng(0, 0)).is_err());
    }
}
