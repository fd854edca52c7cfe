//! Per-modality VAE generators and their evidence lower bound.
//!
//! Each modality owns a [`VaePair`]: an encoder mapping `x_m` to the mean and
//! log-variance of a diagonal Gaussian posterior over an `L`-dimensional
//! latent, and a decoder mapping a latent sample back to `x_m`. The prior is
//! standard normal and the decoder likelihood is unit-variance Gaussian, so
//! the negative ELBO per example is
//!
//! ```text
//! 0.5 * |x_hat - x|^2  +  0.5 * sum_l (mu_l^2 + exp(logvar_l) - logvar_l - 1)
//! ```
//!
//! Training never looks at labels.

use crate::data::MultimodalExample;
use crate::error::{shape_err, Error, Result};
use crate::tensor::rng::normal_vec;
use crate::tensor::{Activation, Array, Mlp, Optimizer, ParamStore, Rng, Tape, Var};
use crate::training::{minibatches, TrainSettings};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Encoder/decoder pair for one modality, parameters under `mvae/<m>/`.
#[derive(Clone, Debug, PartialEq)]
pub struct VaePair {
    pub modality: usize,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub params: ParamStore,
}

/// A reparameterized draw `z = mu + exp(logvar / 2) * eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub mu: Array,
    pub logvar: Array,
    pub eps: Array,
    pub z: Array,
}

impl VaePair {
    pub fn new(modality: usize, input_dim: usize, latent_dim: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let prefix = format!("mvae/{modality}");
        let enc_sizes: Vec<usize> = [input_dim].iter().chain(hidden).chain([2 * latent_dim].iter()).copied().collect();
        let dec_sizes: Vec<usize> = [latent_dim].iter().chain(hidden.iter().rev()).chain([input_dim].iter()).copied().collect();
        let encoder = Mlp::build(&mut params, &prefix, "enc", &enc_sizes, Activation::Relu, rng)?;
        let decoder = Mlp::build(&mut params, &prefix, "dec", &dec_sizes, Activation::Relu, rng)?;
        Ok(Self { modality, input_dim, latent_dim, encoder, decoder, params })
    }

    fn check_input(&self, x: &Array) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(shape_err(
                "encode",
                format!("modality {} expects {} features, got {}", self.modality, self.input_dim, x.cols()),
            ));
        }
        Ok(())
    }

    /// Posterior parameters for a batch `x: B x d_m`; log-variance clamped to
    /// `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub fn encode(&self, x: &Array) -> Result<(Array, Array)> {
        self.check_input(x)?;
        let h = self.encoder.forward(&self.params, x)?;
        Ok(split_posterior(&h, self.latent_dim))
    }

    pub fn decode(&self, z: &Array) -> Result<Array> {
        if z.cols() != self.latent_dim {
            return Err(shape_err("decode", format!("latent has {} dims, expected {}", z.cols(), self.latent_dim)));
        }
        self.decoder.forward(&self.params, z)
    }

    /// `decode(reparameterize(encode(x)))`.
    pub fn self_reconstruct(&self, x: &Array, rng: &mut Rng) -> Result<Array> {
        let (mu, logvar) = self.encode(x)?;
        let s = reparameterize(&mu, &logvar, rng)?;
        self.decode(&s.z)
    }

    /// Recorded encoder pass returning `(mu, clamped logvar)`.
    pub fn encode_tape(&self, tape: &mut Tape, x: Var, frozen: bool) -> Result<(Var, Var)> {
        let h = self.encoder.forward_tape(tape, &self.params, x, frozen)?;
        let mu = tape.slice_cols(h, 0, self.latent_dim)?;
        let lv = tape.slice_cols(h, self.latent_dim, self.latent_dim)?;
        Ok((mu, tape.clamp(lv, LOGVAR_MIN, LOGVAR_MAX)))
    }

    pub fn decode_tape(&self, tape: &mut Tape, z: Var, frozen: bool) -> Result<Var> {
        self.decoder.forward_tape(tape, &self.params, z, frozen)
    }

    /// Batch-mean reconstruction and KL terms, recorded on `tape`, with the
    /// standard-normal noise `eps` supplied by the caller.
    pub fn elbo_tape(&self, tape: &mut Tape, x: &Array, eps: &Array) -> Result<(Var, Var)> {
        self.check_input(x)?;
        let b = x.rows() as f64;
        let xv = tape.constant(x.clone());
        let (mu, lv) = self.encode_tape(tape, xv, false)?;
        let z = sample_tape(tape, mu, lv, eps)?;
        let xhat = self.decode_tape(tape, z, false)?;
        let recon = recon_tape(tape, xhat, xv)?;
        let recon = tape.scale(recon, 1.0 / b);
        let kl = kl_std_normal_tape(tape, mu, lv)?;
        let kl = tape.scale(kl, 1.0 / b);
        Ok((recon, kl))
    }

    /// Batch-mean `(L_recon, L_KL)` with fresh noise.
    pub fn elbo_loss(&self, x: &Array, rng: &mut Rng) -> Result<(f64, f64)> {
        let eps = Array::matrix(x.rows(), self.latent_dim, normal_vec(rng, x.rows() * self.latent_dim));
        let mut tape = Tape::new();
        let (r, k) = self.elbo_tape(&mut tape, x, &eps)?;
        Ok((tape.value(r).item(), tape.value(k).item()))
    }
}

pub(crate) fn split_posterior(h: &Array, latent: usize) -> (Array, Array) {
    let rows = h.rows();
    let mut mu = Vec::with_capacity(rows * latent);
    let mut lv = Vec::with_capacity(rows * latent);
    for r in 0..rows {
        let row = h.row(r);
        mu.extend_from_slice(&row[..latent]);
        lv.extend(row[latent..2 * latent].iter().map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX)));
    }
    (Array::matrix(rows, latent, mu), Array::matrix(rows, latent, lv))
}

/// `z = mu + exp(logvar / 2) * eps` with `eps` drawn from `rng`.
pub fn reparameterize(mu: &Array, logvar: &Array, rng: &mut Rng) -> Result<LatentSample> {
    let eps = Array::matrix(mu.rows(), mu.cols(), normal_vec(rng, mu.len()));
    reparameterize_with(mu, logvar, eps)
}

/// Deterministic reparameterization with recorded noise.
pub fn reparameterize_with(mu: &Array, logvar: &Array, eps: Array) -> Result<LatentSample> {
    if mu.shape() != logvar.shape() || mu.len() != eps.len() {
        return Err(shape_err(
            "reparameterize",
            format!("mu {:?}, logvar {:?}, eps {:?}", mu.shape(), logvar.shape(), eps.shape()),
        ));
    }
    let z = mu
        .data()
        .iter()
        .zip(logvar.data())
        .zip(eps.data())
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    let z = Array::new(mu.shape().to_vec(), z)?;
    Ok(LatentSample { mu: mu.clone(), logvar: logvar.clone(), eps: eps.reshape(mu.shape().to_vec())?, z })
}

/// `KL(N(mu, diag e^logvar) || N(0, I))`, summed over dimensions.
pub fn kl_standard_normal(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu.iter().zip(logvar).map(|(m, lv)| m * m + lv.exp() - lv - 1.0).sum::<f64>()
}

/// `KL(N(mu_q, diag e^lv_q) || N(mu_p, diag e^lv_p))`, summed over dimensions.
pub fn kl_diag_gaussians(mu_q: &[f64], lv_q: &[f64], mu_p: &[f64], lv_p: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..mu_q.len() {
        let d = mu_q[i] - mu_p[i];
        s += lv_p[i] - lv_q[i] + ((lv_q[i]).exp() + d * d) / lv_p[i].exp() - 1.0;
    }
    0.5 * s
}

pub(crate) fn sample_tape(tape: &mut Tape, mu: Var, lv: Var, eps: &Array) -> Result<Var> {
    let half = tape.scale(lv, 0.5);
    let std = tape.exp(half);
    let e = tape.constant(eps.clone());
    let noise = tape.mul(std, e)?;
    tape.add(mu, noise)
}

/// `0.5 * sum (xhat - x)^2` over the whole batch.
pub(crate) fn recon_tape(tape: &mut Tape, xhat: Var, x: Var) -> Result<Var> {
    let d = tape.sub(xhat, x)?;
    let sq = tape.square(d);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 0.5))
}

/// Standard-normal KL summed over the whole batch.
pub(crate) fn kl_std_normal_tape(tape: &mut Tape, mu: Var, lv: Var) -> Result<Var> {
    let n = tape.value(mu).len() as f64;
    let mu2 = tape.square(mu);
    let ev = tape.exp(lv);
    let a = tape.add(mu2, ev)?;
    let b = tape.sub(a, lv)?;
    let s = tape.sum(b);
    let s = tape.add_scalar(s, -n);
    Ok(tape.scale(s, 0.5))
}

/// Diagonal-Gaussian KL against constant target parameters, summed over the batch.
pub(crate) fn kl_gaussians_tape(tape: &mut Tape, mu_q: Var, lv_q: Var, mu_p: &Array, lv_p: &Array) -> Result<Var> {
    let n = mu_p.len() as f64;
    let inv_var = tape.constant(lv_p.map(|v| (-v).exp()));
    let mu_p = tape.constant(mu_p.clone());
    let lv_p = tape.constant(lv_p.clone());
    let d = tape.sub(mu_q, mu_p)?;
    let d2 = tape.square(d);
    let ev = tape.exp(lv_q);
    let num = tape.add(ev, d2)?;
    let ratio = tape.mul(num, inv_var)?;
    let lv_diff = tape.sub(lv_p, lv_q)?;
    let t = tape.add(lv_diff, ratio)?;
    let s = tape.sum(t);
    let s = tape.add_scalar(s, -n);
    Ok(tape.scale(s, 0.5))
}

/// Per-modality loss trace from [`train_stage1`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Stage1Trace {
    /// `epoch_loss[m][e]`: mean negative ELBO per example in epoch `e`.
    pub epoch_loss: Vec<Vec<f64>>,
    /// Modalities skipped because no example had them present.
    pub skipped: Vec<usize>,
}

impl Stage1Trace {
    /// Mean of the final-epoch losses over trained modalities.
    pub fn final_mean(&self) -> Option<f64> {
        let last: Vec<f64> = self.epoch_loss.iter().filter_map(|t| t.last().copied()).collect();
        (!last.is_empty()).then(|| last.iter().sum::<f64>() / last.len() as f64)
    }
}

/// Rows of modality `m` from the examples where it is present.
pub(crate) fn present_rows(examples: &[MultimodalExample], m: usize) -> Vec<&[f64]> {
    examples.iter().filter(|e| e.present[m]).map(|e| e.features[m].as_slice()).collect()
}

pub(crate) fn gather(rows: &[&[f64]], idx: &[usize]) -> Array {
    let cols = rows.first().map_or(0, |r| r.len());
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        data.extend_from_slice(rows[i]);
    }
    Array::matrix(idx.len(), cols, data)
}

/// Trains each VAE on the examples where its modality is present,
/// independently per modality.
pub fn train_stage1(
    vaes: &mut [VaePair],
    examples: &[MultimodalExample],
    settings: &TrainSettings,
    rng: &mut Rng,
) -> Result<Stage1Trace> {
    let mut trace = Stage1Trace { epoch_loss: vec![Vec::new(); vaes.len()], skipped: Vec::new() };
    for vae in vaes.iter_mut() {
        let m = vae.modality;
        let rows = present_rows(examples, m);
        if rows.is_empty() {
            trace.skipped.push(m);
            continue;
        }
        let mut opt = Optimizer::new(settings.optimizer, &vae.params, settings.lr);
        for _ in 0..settings.epochs {
            let mut total = 0.0;
            for batch in minibatches(rows.len(), settings.batch_size, rng) {
                let x = gather(&rows, &batch);
                let eps = Array::matrix(batch.len(), vae.latent_dim, normal_vec(rng, batch.len() * vae.latent_dim));
                let mut tape = Tape::new();
                let (r, k) = vae.elbo_tape(&mut tape, &x, &eps)?;
                let loss = tape.add(r, k)?;
                let l = tape.value(loss).item();
                if !l.is_finite() {
                    return Err(Error::InvalidArgument(format!("modality {m}: non-finite ELBO {l}")));
                }
                total += l * batch.len() as f64;
                vae.params.zero_grad();
                tape.backward(loss)?.accumulate_into(&tape, &mut vae.params)?;
                opt.step(&mut vae.params)?;
            }
            trace.epoch_loss[m].push(total / rows.len() as f64);
        }
        vae.params.zero_grad();
    }
    Ok(trace)
}

/// Mean negative ELBO of `vae` over the present rows of `examples`.
pub fn mean_elbo(vae: &VaePair, examples: &[MultimodalExample], rng: &mut Rng) -> Result<f64> {
    let rows = present_rows(examples, vae.modality);
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!("modality {} has no present examples", vae.modality)));
    }
    let idx: Vec<usize> = (0..rows.len()).collect();
    let (r, k) = vae.elbo_loss(&gather(&rows, &idx), rng)?;
    Ok(r + k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec};
    use crate::tensor::rng::standard_normal;
    use crate::tensor::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn vae(m: usize, d: usize, l: usize, seed: u64) -> VaePair {
        VaePair::new(m, d, l, &[64, 64], &mut seeded_rng(seed, 0)).unwrap()
    }

    fn data() -> crate::data::SyntheticDataset {
        generate_dataset(&DatasetSpec { train_per_class: 250, test_per_class: 32, seed: 4, ..Default::default() }).unwrap()
    }

    fn modality_matrix(ex: &[MultimodalExample], m: usize) -> Array {
        let rows = present_rows(ex, m);
        gather(&rows, &(0..rows.len()).collect::<Vec<_>>())
    }

    #[test]
    fn zero_output_layer_gives_prior() {
        let mut v = vae(0, 16, 8, 1);
        v.encoder.zero_output_layer(&mut v.params).unwrap();
        let x = Array::matrix(1, 16, (0..16).map(|i| i as f64 * 0.3 - 2.0).collect());
        let (mu, lv) = v.encode(&x).unwrap();
        assert!(mu.data().iter().chain(lv.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn encode_is_deterministic_finite_and_clamped() {
        let v = vae(0, 16, 8, 2);
        let mut rng = seeded_rng(2, 1);
        let x = Array::matrix(50, 16, (0..800).map(|_| rng.random_range(-1.0..1.0)).collect());
        let a = v.encode(&x).unwrap();
        assert_eq!(a, v.encode(&x).unwrap());
        assert!(a.0.is_finite());
        assert!(a.1.data().iter().all(|&l| (LOGVAR_MIN..=LOGVAR_MAX).contains(&l)));
    }

    #[test]
    fn encode_rejects_wrong_dim() {
        let v = vae(1, 16, 8, 2);
        assert!(v.encode(&Array::matrix(1, 3, vec![0.0; 3])).is_err());
    }

    #[test]
    fn reparameterize_cases() {
        let s = reparameterize_with(
            &Array::vector(vec![0.0]),
            &Array::vector(vec![0.0]),
            Array::vector(vec![1.0]),
        )
        .unwrap();
        assert_eq!(s.z.data(), &[1.0]);

        let mu = Array::vector(vec![1.0, 2.0]);
        let lv = Array::vector(vec![LOGVAR_MIN; 2]);
        let s = reparameterize(&mu, &lv, &mut seeded_rng(3, 0)).unwrap();
        for i in 0..2 {
            assert!((s.z.data()[i] - mu.data()[i]).abs() <= 0.02 * s.eps.data()[i].abs() + 1e-15);
            let again = mu.data()[i] + (0.5 * s.logvar.data()[i]).exp() * s.eps.data()[i];
            assert_eq!(again, s.z.data()[i]);
        }
    }

    #[test]
    fn reparameterize_moments() {
        let n = 100_000;
        let s = reparameterize(&Array::zeros(&[n]), &Array::zeros(&[n]), &mut seeded_rng(4, 0)).unwrap();
        let mean = s.z.data().iter().sum::<f64>() / n as f64;
        let var = s.z.data().iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02);
        assert!((0.97..=1.03).contains(&var));
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_standard_normal(&[0.0; 5], &[0.0; 5]), 0.0);
        assert_eq!(kl_standard_normal(&[1.0], &[0.0]), 0.5);
        assert_eq!(kl_diag_gaussians(&[0.3, -1.0], &[0.2, 0.1], &[0.3, -1.0], &[0.2, 0.1]), 0.0);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = seeded_rng(5, 0);
        let mu: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
        let lv: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let analytic = kl_standard_normal(&mu, &lv);
        let n = 200_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let mut log_ratio = 0.0;
            for l in 0..4 {
                let e = standard_normal(&mut rng);
                let z = mu[l] + (0.5 * lv[l]).exp() * e;
                // log q - log p, constants cancel
                log_ratio += -0.5 * lv[l] - 0.5 * e * e + 0.5 * z * z;
            }
            s += log_ratio;
            s2 += log_ratio * log_ratio;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - analytic).abs() < 3.0 * se, "{mean} vs {analytic} (se {se})");
    }

    #[test]
    fn stage1_zero_epochs_is_identity() {
        let ds = data();
        let mut vaes = vec![vae(0, 16, 8, 1), vae(1, 16, 8, 2)];
        let before = vaes.clone();
        train_stage1(&mut vaes, &ds.train, &TrainSettings::new(0, 1e-3), &mut seeded_rng(0, 0)).unwrap();
        assert_eq!(vaes, before);
    }

    #[test]
    fn stage1_halves_elbo_and_is_deterministic() {
        let ds = data();
        let run = || {
            let mut vaes = vec![vae(0, 16, 8, 1), vae(1, 16, 8, 2)];
            let trace = train_stage1(&mut vaes, &ds.train, &TrainSettings::new(20, 1e-3), &mut seeded_rng(9, 0)).unwrap();
            (vaes, trace)
        };
        let (a, trace) = run();
        let (b, _) = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.params.digest(), y.params.digest());
        }
        for (m, t) in trace.epoch_loss.iter().enumerate() {
            assert_eq!(t.len(), 20);
            assert!(t.iter().all(|l| l.is_finite()));
            assert!(t[19] < 0.5 * t[0], "modality {m}: {} -> {}", t[0], t[19]);
        }
    }

    #[test]
    fn stage1_skips_absent_modality_and_reconstructs_better() {
        let ds = data();
        let mut ex = ds.train.clone();
        ex.iter_mut().for_each(|e| e.present = vec![true, false]);
        let mut vaes = vec![vae(0, 16, 8, 1), vae(1, 16, 8, 2)];
        let untrained = vaes.clone();
        let trace = train_stage1(&mut vaes, &ex, &TrainSettings::new(20, 1e-3), &mut seeded_rng(1, 0)).unwrap();
        assert_eq!(trace.skipped, vec![1]);
        assert_eq!(vaes[1], untrained[1]);

        let x = modality_matrix(&ds.test, 0);
        let mse = |v: &VaePair| {
            let xh = v.self_reconstruct(&x, &mut seeded_rng(7, 7)).unwrap();
            assert_eq!(xh.cols(), 16);
            xh.data().iter().zip(x.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64
        };
        assert!(mse(&vaes[0]) < mse(&untrained[0]));
        let a = vaes[0].self_reconstruct(&x, &mut seeded_rng(7, 7)).unwrap();
        assert_eq!(a, vaes[0].self_reconstruct(&x, &mut seeded_rng(7, 7)).unwrap());
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(
            mu in prop::collection::vec(-5.0f64..5.0, 1..8),
            lv in prop::collection::vec(-5.0f64..5.0, 8),
        ) {
            let lv = &lv[..mu.len()];
            let kl = kl_standard_normal(&mu, lv);
            prop_assert!(kl >= 0.0);
            let mu_q: Vec<f64> = mu.iter().map(|m| m * 0.5).collect();
            prop_assert!(kl_diag_gaussians(&mu_q, lv, &mu, lv) >= 0.0);
        }
    }
}
