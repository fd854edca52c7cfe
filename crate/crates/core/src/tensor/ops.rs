//! Tape-free forward operations.

use super::array::{kernels, Array};
use crate::error::{shape_err, Result};

/// Elementwise (or, for softmax, whole-vector) activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
}

/// `W x + b` for a single vector `x`.
pub fn affine_forward(x: &Array, w: &Array, b: &Array) -> Result<Array> {
    if w.shape().len() != 2 {
        return Err(shape_err("affine_forward", format!("W must be rank 2, got shape {:?}", w.shape())));
    }
    let (m, n) = (w.shape()[0], w.shape()[1]);
    if x.len() != n || b.len() != m {
        return Err(shape_err(
            "affine_forward",
            format!("W is {m}x{n}, x has {} values, b has {} values", x.len(), b.len()),
        ));
    }
    let mut out = kernels::matmul_t(x.data(), 1, n, w.data(), m);
    kernels::add_row(&mut out, b.data());
    Ok(Array::vector(out))
}

/// Batched `X W^T + b` for `X: rows x n`.
pub fn affine_batch(x: &Array, w: &Array, b: &Array) -> Result<Array> {
    let (m, n) = (w.rows(), w.cols());
    if x.cols() != n || b.len() != m {
        return Err(shape_err(
            "affine_batch",
            format!("W is {m}x{n}, X is {}x{}, b has {} values", x.rows(), x.cols(), b.len()),
        ));
    }
    let rows = x.rows();
    let mut out = kernels::matmul_t(x.data(), rows, n, w.data(), m);
    kernels::add_row(&mut out, b.data());
    Ok(Array::matrix(rows, m, out))
}

/// Applies `kind`; softmax is taken over each row of the 2-D view.
pub fn activate(x: &Array, kind: Activation) -> Array {
    match kind {
        Activation::Relu => x.map(kernels::relu),
        Activation::Tanh => x.map(f64::tanh),
        Activation::Sigmoid => x.map(kernels::sigmoid),
        Activation::Softmax => {
            let cols = x.cols();
            let mask = vec![true; cols];
            let mut out = Array::zeros(x.shape());
            for (src, dst) in x.data().chunks(cols).zip(out.data_mut().chunks_mut(cols)) {
                kernels::masked_softmax(src, &mask, dst);
            }
            out
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn naive_affine(x: &[f64], w: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; b.len()];
        for i in 0..b.len() {
            let mut s = 0.0;
            for j in 0..x.len() {
                s += w[i][j] * x[j];
            }
            out[i] = s + b[i];
        }
        out
    }

    #[test]
    fn affine_identity_and_hand_cases() {
        let eye = Array::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let zero = Array::vector(vec![0.0, 0.0]);
        let y = affine_forward(&Array::vector(vec![3.0, 4.0]), &eye, &zero).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
        let w = Array::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let y = affine_forward(&Array::vector(vec![1.0, 1.0]), &w, &zero).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn affine_matches_naive_oracle() {
        let mut rng = seeded_rng(11, 0);
        for trial in 0..20 {
            let (m, n) = (1 + trial % 7, 1 + (trial * 3) % 9);
            let w: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let b: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wa = Array::matrix(m, n, w.concat());
            let got = affine_forward(&Array::vector(x.clone()), &wa, &Array::vector(b.clone())).unwrap();
            for (g, e) in got.data().iter().zip(naive_affine(&x, &w, &b)) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn affine_shape_error_names_dims() {
        let w = Array::matrix(2, 3, vec![0.0; 6]);
        let err = affine_forward(&Array::vector(vec![1.0, 2.0]), &w, &Array::vector(vec![0.0; 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("x has 2"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let s = activate(&Array::vector(vec![0.0, 0.0]), Activation::Softmax);
        assert_eq!(s.data(), &[0.5, 0.5]);
        for x in [-1e6, -3.0, 0.0, 42.0, 1e6] {
            assert_eq!(activate(&Array::vector(vec![x]), Activation::Softmax).data(), &[1.0]);
        }
    }

    #[test]
    fn argmax_tie_break() {
        assert_eq!(argmax(&[0.9, 0.1]), 0);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.3, 0.3]), 1);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            v in prop::collection::vec(-30.0f64..30.0, 1..12),
            k in -50.0f64..50.0,
        ) {
            let a = activate(&Array::vector(v.clone()), Activation::Softmax);
            let sum: f64 = a.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(a.is_finite());
            let shifted: Vec<f64> = v.iter().map(|x| x + k).collect();
            let b = activate(&Array::vector(shifted), Activation::Softmax);
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn elementwise_activations_finite(v in prop::collection::vec(-1e3f64..1e3, 1..16)) {
            let x = Array::vector(v);
            for kind in [Activation::Relu, Activation::Tanh, Activation::Sigmoid] {
                prop_assert!(activate(&x, kind).is_finite());
            }
        }
    }
}
