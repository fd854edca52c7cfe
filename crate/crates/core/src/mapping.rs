//! Latent mapping models.
//!
//! A mapping model re-encodes the posterior `(mu_m, logvar_m)` produced by
//! modality `m`'s encoder into a posterior over modality `n`'s latent space.
//! Decoding a sample from the mapped posterior with `n`'s decoder gives a
//! cross-modal reconstruction. The VAEs are frozen while mappings train, and
//! the loss is
//!
//! ```text
//! gamma * KL(N(mu_hat_n, e^lv_hat_n) || N(mu_n, e^lv_n)) + 0.5 * |dec_n(z_hat) - x_n|^2
//! ```
//!
//! where `(mu_n, lv_n)` is the (gradient-free) encoding of the real `x_n`.
//!
//! In [`MappingMode::Full`] there is one model per ordered pair `(n, m)`; in
//! [`MappingMode::Simplified`] one model per target `n` is shared by every
//! source.

use crate::data::MultimodalExample;
use crate::error::{shape_err, Error, Result};
use crate::mvae::{gather, kl_gaussians_tape, recon_tape, sample_tape, split_posterior, VaePair, LOGVAR_MAX, LOGVAR_MIN};
use crate::tensor::rng::normal_vec;
use crate::tensor::{Activation, Array, Mlp, Optimizer, ParamStore, Rng, Tape};
use crate::training::{minibatches, TrainSettings};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MappingMode {
    Full,
    Simplified,
}

impl MappingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MappingMode::Full => "full",
            MappingMode::Simplified => "simplified",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MappingModel {
    /// `None` for a simplified (source-agnostic) model.
    pub source: Option<usize>,
    pub target: usize,
    pub latent_dim: usize,
    pub mlp: Mlp,
    pub params: ParamStore,
}

impl MappingModel {
    pub fn new(source: Option<usize>, target: usize, latent_dim: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        if source == Some(target) {
            return Err(Error::InvalidArgument(format!("mapping from modality {target} to itself")));
        }
        let prefix = match source {
            Some(m) => format!("map/{target}_from_{m}"),
            None => format!("map/{target}"),
        };
        let sizes: Vec<usize> = [2 * latent_dim].iter().chain(hidden).chain([2 * latent_dim].iter()).copied().collect();
        let mut params = ParamStore::new();
        let mlp = Mlp::build(&mut params, &prefix, "l", &sizes, Activation::Relu, rng)?;
        Ok(Self { source, target, latent_dim, mlp, params })
    }

    pub fn handles(&self, source: usize, target: usize) -> bool {
        self.target == target && self.source.is_none_or(|m| m == source) && source != target
    }

    /// Maps a batch of source posteriors to target posteriors.
    pub fn map_posterior(&self, source: usize, target: usize, mu: &Array, logvar: &Array) -> Result<(Array, Array)> {
        if !self.handles(source, target) {
            return Err(Error::InvalidArgument(format!(
                "mapping model {:?}->{} asked to map {source}->{target}",
                self.source, self.target
            )));
        }
        let input = concat_posterior(mu, logvar, self.latent_dim)?;
        let h = self.mlp.forward(&self.params, &input)?;
        Ok(split_posterior(&h, self.latent_dim))
    }
}

fn concat_posterior(mu: &Array, logvar: &Array, latent: usize) -> Result<Array> {
    if mu.cols() != latent || logvar.cols() != latent || mu.rows() != logvar.rows() {
        return Err(shape_err(
            "map_posterior",
            format!("expected two B x {latent} arrays, got {:?} and {:?}", mu.shape(), logvar.shape()),
        ));
    }
    let rows = mu.rows();
    let mut data = Vec::with_capacity(rows * 2 * latent);
    for r in 0..rows {
        data.extend_from_slice(mu.row(r));
        data.extend_from_slice(logvar.row(r));
    }
    Ok(Array::matrix(rows, 2 * latent, data))
}

/// All mapping models of one client or of the server.
#[derive(Clone, Debug, PartialEq)]
pub struct MappingBank {
    pub mode: MappingMode,
    pub num_modalities: usize,
    pub latent_dim: usize,
    pub models: Vec<MappingModel>,
}

impl MappingBank {
    /// Full mode orders models by target, then source.
    pub fn new(mode: MappingMode, num_modalities: usize, latent_dim: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut models = Vec::new();
        for n in 0..num_modalities {
            match mode {
                MappingMode::Full => {
                    for m in (0..num_modalities).filter(|&m| m != n) {
                        models.push(MappingModel::new(Some(m), n, latent_dim, hidden, rng)?);
                    }
                }
                MappingMode::Simplified => models.push(MappingModel::new(None, n, latent_dim, hidden, rng)?),
            }
        }
        Ok(Self { mode, num_modalities, latent_dim, models })
    }

    pub fn model_index(&self, source: usize, target: usize) -> Result<usize> {
        self.models.iter().position(|t| t.handles(source, target)).ok_or_else(|| {
            Error::InvalidArgument(format!("no {} mapping model for {source}->{target}", self.mode.as_str()))
        })
    }

    pub fn model(&self, source: usize, target: usize) -> Result<&MappingModel> {
        Ok(&self.models[self.model_index(source, target)?])
    }

    pub fn num_values(&self) -> usize {
        self.models.iter().map(|t| t.params.num_values()).sum()
    }

    /// Every model's parameters merged into one store.
    pub fn merged_params(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for t in &self.models {
            s.extend_from(&t.params).expect("mapping names are unique");
        }
        s
    }

    pub fn load_merged(&mut self, src: &ParamStore) -> Result<()> {
        for t in &mut self.models {
            let names: Vec<String> = t.params.names().map(str::to_string).collect();
            for name in names {
                let v = src.value(&name)?.clone();
                let dst = &mut t.params.get_mut(&name)?.value;
                if dst.shape() != v.shape() {
                    return Err(Error::Params(format!("{name}: shape {:?} vs {:?}", dst.shape(), v.shape())));
                }
                *dst = v;
            }
        }
        Ok(())
    }
}

/// Posterior of `x_n` predicted from `x_m`; for `m == n` this is just the encoder output.
pub fn mapped_posterior(bank: &MappingBank, vaes: &[VaePair], x_m: &Array, m: usize, n: usize) -> Result<(Array, Array)> {
    let (mu, lv) = vaes[m].encode(x_m)?;
    if m == n {
        return Ok((mu, lv));
    }
    bank.model(m, n)?.map_posterior(m, n, &mu, &lv)
}

/// `decode_n(sample(map(encode_m(x_m))))` with caller-supplied noise. With
/// `m == n` the mapping is bypassed and this is a self-reconstruction.
pub fn cross_reconstruct_with(
    bank: &MappingBank,
    vaes: &[VaePair],
    x_m: &Array,
    m: usize,
    n: usize,
    eps: &Array,
) -> Result<Array> {
    let (mu, lv) = mapped_posterior(bank, vaes, x_m, m, n)?;
    let z = crate::mvae::reparameterize_with(&mu, &lv, eps.clone())?;
    vaes[n].decode(&z.z)
}

pub fn cross_reconstruct(bank: &MappingBank, vaes: &[VaePair], x_m: &Array, m: usize, n: usize, rng: &mut Rng) -> Result<Array> {
    let eps = Array::matrix(x_m.rows(), bank.latent_dim, normal_vec(rng, x_m.rows() * bank.latent_dim));
    cross_reconstruct_with(bank, vaes, x_m, m, n, &eps)
}

/// How several available source modalities are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourcePolicy {
    /// Lowest-index available source only.
    Single,
    /// Mean of the mapped posteriors (mu and logvar averaged).
    Average,
}

impl SourcePolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            SourcePolicy::Single => "single",
            SourcePolicy::Average => "average",
        }
    }
}

/// Reconstructs modality `n` of one example from its present modalities,
/// with noise `eps` of length `L`.
pub fn multi_source_reconstruct_with(
    bank: &MappingBank,
    vaes: &[VaePair],
    example: &MultimodalExample,
    n: usize,
    policy: SourcePolicy,
    eps: &[f64],
) -> Result<Vec<f64>> {
    let sources: Vec<usize> = example.present_modalities().filter(|&m| m != n).collect();
    if sources.is_empty() {
        return Err(Error::InvalidArgument(format!("no source modality available to reconstruct {n}")));
    }
    let used: &[usize] = match policy {
        SourcePolicy::Single => &sources[..1],
        SourcePolicy::Average => &sources,
    };
    let l = bank.latent_dim;
    let mut mu = vec![0.0; l];
    let mut lv = vec![0.0; l];
    for &m in used {
        let x = Array::matrix(1, example.features[m].len(), example.features[m].clone());
        let (pm, plv) = mapped_posterior(bank, vaes, &x, m, n)?;
        for i in 0..l {
            mu[i] += pm.data()[i];
            lv[i] += plv.data()[i];
        }
    }
    let k = used.len() as f64;
    if used.len() > 1 {
        mu.iter_mut().for_each(|v| *v /= k);
        lv.iter_mut().for_each(|v| *v /= k);
    }
    let z = crate::mvae::reparameterize_with(&Array::matrix(1, l, mu), &Array::matrix(1, l, lv), Array::matrix(1, l, eps.to_vec()))?;
    Ok(vaes[n].decode(&z.z)?.into_data())
}

pub fn multi_source_reconstruct(
    bank: &MappingBank,
    vaes: &[VaePair],
    example: &MultimodalExample,
    n: usize,
    policy: SourcePolicy,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let eps = normal_vec(rng, bank.latent_dim);
    multi_source_reconstruct_with(bank, vaes, example, n, policy, &eps)
}

/// Match loss for one batch of paired rows, recorded on `tape`; returns the
/// batch-mean loss node. The VAEs enter the tape as constants.
#[allow(clippy::too_many_arguments)]
fn match_loss_tape(
    tape: &mut Tape,
    model: &MappingModel,
    vae_n: &VaePair,
    src_post: &Array,
    tgt_mu: &Array,
    tgt_lv: &Array,
    x_n: &Array,
    eps: &Array,
    gamma: f64,
) -> Result<crate::tensor::Var> {
    let b = x_n.rows() as f64;
    let l = model.latent_dim;
    let input = tape.constant(src_post.clone());
    let h = model.mlp.forward_tape(tape, &model.params, input, false)?;
    let mu = tape.slice_cols(h, 0, l)?;
    let lv = tape.slice_cols(h, l, l)?;
    let lv = tape.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
    let z = sample_tape(tape, mu, lv, eps)?;
    let xhat = vae_n.decode_tape(tape, z, true)?;
    let xv = tape.constant(x_n.clone());
    let mut loss = recon_tape(tape, xhat, xv)?;
    if gamma != 0.0 {
        let kl = kl_gaussians_tape(tape, mu, lv, tgt_mu, tgt_lv)?;
        let kl = tape.scale(kl, gamma);
        loss = tape.add(loss, kl)?;
    }
    Ok(tape.scale(loss, 1.0 / b))
}

/// Records the batch-mean match loss of `(x_m -> x_n)` pairs on `tape` with
/// fixed noise `eps` (`B x L`). Only the mapping parameters are leaves.
#[allow(clippy::too_many_arguments)]
pub fn match_loss_with(
    tape: &mut Tape,
    model: &MappingModel,
    vae_m: &VaePair,
    vae_n: &VaePair,
    x_m: &Array,
    x_n: &Array,
    eps: &Array,
    gamma: f64,
) -> Result<crate::tensor::Var> {
    if !model.handles(vae_m.modality, vae_n.modality) {
        return Err(Error::InvalidArgument("mapping model does not handle this modality pair".into()));
    }
    let (mu_m, lv_m) = vae_m.encode(x_m)?;
    let (mu_n, lv_n) = vae_n.encode(x_n)?;
    let src = concat_posterior(&mu_m, &lv_m, model.latent_dim)?;
    match_loss_tape(tape, model, vae_n, &src, &mu_n, &lv_n, x_n, eps, gamma)
}

/// Mean match loss of `(x_m -> x_n)` pairs under `model`.
#[allow(clippy::too_many_arguments)]
pub fn match_loss(
    model: &MappingModel,
    vae_m: &VaePair,
    vae_n: &VaePair,
    x_m: &Array,
    x_n: &Array,
    gamma: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let eps = Array::matrix(x_m.rows(), model.latent_dim, normal_vec(rng, x_m.rows() * model.latent_dim));
    let mut tape = Tape::new();
    let loss = match_loss_with(&mut tape, model, vae_m, vae_n, x_m, x_n, &eps, gamma)?;
    Ok(tape.value(loss).item())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Stage2Trace {
    /// `epoch_loss[i][e]` for bank model `i`.
    pub epoch_loss: Vec<Vec<f64>>,
    /// Bank model indices left untouched for lack of paired examples.
    pub skipped: Vec<usize>,
    /// Examples ignored because they lack one side of a pair, per model.
    pub unpaired: Vec<usize>,
}

impl Stage2Trace {
    pub fn final_mean(&self) -> Option<f64> {
        let last: Vec<f64> = self.epoch_loss.iter().filter_map(|t| t.last().copied()).collect();
        (!last.is_empty()).then(|| last.iter().sum::<f64>() / last.len() as f64)
    }

    pub fn trained(&self, idx: usize) -> bool {
        !self.skipped.contains(&idx)
    }
}

/// Trains every mapping model on examples where both its source and target
/// are present. The VAEs are read-only here.
pub fn train_stage2(
    bank: &mut MappingBank,
    vaes: &[VaePair],
    examples: &[MultimodalExample],
    settings: &TrainSettings,
    gamma: f64,
    rng: &mut Rng,
) -> Result<Stage2Trace> {
    let nm = bank.num_modalities;
    let l = bank.latent_dim;
    // Encoders are frozen, so every posterior can be computed once.
    let mut posts: Vec<Option<(Array, Array)>> = Vec::with_capacity(nm);
    for vae in vaes.iter().take(nm) {
        let rows: Vec<&[f64]> = examples.iter().map(|e| e.features[vae.modality].as_slice()).collect();
        posts.push(if rows.is_empty() {
            None
        } else {
            Some(vae.encode(&gather(&rows, &(0..rows.len()).collect::<Vec<_>>()))?)
        });
    }
    let mut trace = Stage2Trace::default();
    for (idx, model) in bank.models.iter_mut().enumerate() {
        let n = model.target;
        let sources: Vec<usize> = match model.source {
            Some(m) => vec![m],
            None => (0..nm).filter(|&m| m != n).collect(),
        };
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        let mut unpaired = 0;
        for (i, e) in examples.iter().enumerate() {
            for &m in &sources {
                if e.present[m] && e.present[n] {
                    pairs.push((i, m));
                } else {
                    unpaired += 1;
                }
            }
        }
        trace.unpaired.push(unpaired);
        if pairs.is_empty() {
            trace.skipped.push(idx);
            trace.epoch_loss.push(Vec::new());
            continue;
        }
        let (tmu, tlv) = posts[n].as_ref().unwrap();
        let mut opt = Optimizer::new(settings.optimizer, &model.params, settings.lr);
        let mut losses = Vec::with_capacity(settings.epochs);
        for _ in 0..settings.epochs {
            let mut total = 0.0;
            for batch in minibatches(pairs.len(), settings.batch_size, rng) {
                let bsz = batch.len();
                let mut src = Vec::with_capacity(bsz * 2 * l);
                let mut mu_n = Vec::with_capacity(bsz * l);
                let mut lv_n = Vec::with_capacity(bsz * l);
                let mut x_n = Vec::with_capacity(bsz * vaes[n].input_dim);
                for &k in &batch {
                    let (i, m) = pairs[k];
                    let (smu, slv) = posts[m].as_ref().unwrap();
                    src.extend_from_slice(smu.row(i));
                    src.extend_from_slice(slv.row(i));
                    mu_n.extend_from_slice(tmu.row(i));
                    lv_n.extend_from_slice(tlv.row(i));
                    x_n.extend_from_slice(&examples[i].features[n]);
                }
                let src = Array::matrix(bsz, 2 * l, src);
                let mu_n = Array::matrix(bsz, l, mu_n);
                let lv_n = Array::matrix(bsz, l, lv_n);
                let x_n = Array::matrix(bsz, vaes[n].input_dim, x_n);
                let eps = Array::matrix(bsz, l, normal_vec(rng, bsz * l));
                let mut tape = Tape::new();
                let loss = match_loss_tape(&mut tape, model, &vaes[n], &src, &mu_n, &lv_n, &x_n, &eps, gamma)?;
                let v = tape.value(loss).item();
                if !v.is_finite() {
                    return Err(Error::InvalidArgument(format!("mapping {idx}: non-finite match loss")));
                }
                total += v * bsz as f64;
                model.params.zero_grad();
                tape.backward(loss)?.accumulate_into(&tape, &mut model.params)?;
                opt.step(&mut model.params)?;
            }
            losses.push(total / pairs.len() as f64);
        }
        model.params.zero_grad();
        trace.epoch_loss.push(losses);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec, SyntheticDataset};
    use crate::mvae::{kl_diag_gaussians, train_stage1};
    use crate::tensor::rng::standard_normal;
    use crate::tensor::seeded_rng;
    use rand::Rng as _;

    const L: usize = 8;

    fn setup(dims: Vec<usize>, seed: u64) -> (SyntheticDataset, Vec<VaePair>) {
        let ds = generate_dataset(&DatasetSpec {
            modality_dims: dims.clone(),
            train_per_class: 250,
            test_per_class: 50,
            seed,
            ..Default::default()
        })
        .unwrap();
        let mut rng = seeded_rng(seed, 100);
        let mut vaes: Vec<VaePair> =
            dims.iter().enumerate().map(|(m, &d)| VaePair::new(m, d, L, &[64, 64], &mut rng).unwrap()).collect();
        train_stage1(&mut vaes, &ds.train, &TrainSettings::new(30, 1e-3), &mut rng).unwrap();
        (ds, vaes)
    }

    fn col(ex: &[MultimodalExample], m: usize) -> Array {
        Array::from_rows(&ex.iter().map(|e| e.features[m].clone()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn bank_sizes() {
        let mut rng = seeded_rng(0, 0);
        for m in 2..5 {
            let full = MappingBank::new(MappingMode::Full, m, L, &[64, 64], &mut rng).unwrap();
            let simple = MappingBank::new(MappingMode::Simplified, m, L, &[64, 64], &mut rng).unwrap();
            assert_eq!(full.models.len(), m * (m - 1));
            assert_eq!(simple.models.len(), m);
            assert_eq!(full.num_values(), (m - 1) * simple.num_values());
            let mut copy = full.clone();
            copy.models.iter_mut().for_each(|t| t.params.iter_mut().for_each(|(_, p)| p.value.data_mut().fill(0.0)));
            copy.load_merged(&full.merged_params()).unwrap();
            assert_eq!(copy, full);
        }
    }

    #[test]
    fn zero_output_and_determinism_and_pair_check() {
        let mut rng = seeded_rng(0, 0);
        let mut t = MappingModel::new(Some(0), 1, L, &[64, 64], &mut rng).unwrap();
        let mu = Array::matrix(3, L, (0..3 * L).map(|_| rng.random_range(-2.0..2.0)).collect());
        let lv = Array::matrix(3, L, (0..3 * L).map(|_| rng.random_range(-2.0..2.0)).collect());
        let a = t.map_posterior(0, 1, &mu, &lv).unwrap();
        assert_eq!(a, t.map_posterior(0, 1, &mu, &lv).unwrap());
        assert!(t.map_posterior(1, 0, &mu, &lv).is_err());
        t.mlp.zero_output_layer(&mut t.params).unwrap();
        let (m, v) = t.map_posterior(0, 1, &mu, &lv).unwrap();
        assert!(m.data().iter().chain(v.data()).all(|&x| x == 0.0));
        assert!(MappingModel::new(Some(1), 1, L, &[4], &mut rng).is_err());
    }

    #[test]
    fn gaussian_kl_matches_monte_carlo() {
        let mut rng = seeded_rng(8, 0);
        let r = |rng: &mut Rng| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (mq, lq, mp, lp) = (r(&mut rng), r(&mut rng), r(&mut rng), r(&mut rng));
        let analytic = kl_diag_gaussians(&mq, &lq, &mp, &lp);
        let n = 200_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let mut lr = 0.0;
            for i in 0..4 {
                let z = mq[i] + (0.5 * lq[i]).exp() * standard_normal(&mut rng);
                let lq_z = -0.5 * lq[i] - 0.5 * (z - mq[i]).powi(2) / lq[i].exp();
                let lp_z = -0.5 * lp[i] - 0.5 * (z - mp[i]).powi(2) / lp[i].exp();
                lr += lq_z - lp_z;
            }
            s += lr;
            s2 += lr * lr;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - analytic).abs() < 3.0 * se, "{mean} vs {analytic}");
    }

    #[test]
    fn gamma_zero_is_cross_reconstruction_mse() {
        let (ds, vaes) = setup(vec![16, 16], 1);
        let bank = MappingBank::new(MappingMode::Full, 2, L, &[64, 64], &mut seeded_rng(1, 1)).unwrap();
        let ex = &ds.test[..10];
        let (x0, x1) = (col(ex, 0), col(ex, 1));
        let loss = match_loss(&bank.models[1], &vaes[0], &vaes[1], &x0, &x1, 0.0, &mut seeded_rng(5, 0)).unwrap();
        let xh = cross_reconstruct(&bank, &vaes, &x0, 0, 1, &mut seeded_rng(5, 0)).unwrap();
        let expected = 0.5 * xh.data().iter().zip(x1.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 10.0;
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn stage2_freezes_vaes_and_halves_loss() {
        let (ds, vaes) = setup(vec![16, 16], 2);
        let digests: Vec<String> = vaes.iter().map(|v| v.params.digest()).collect();
        let mut bank = MappingBank::new(MappingMode::Full, 2, L, &[64, 64], &mut seeded_rng(2, 1)).unwrap();
        let untouched = bank.clone();
        train_stage2(&mut bank, &vaes, &ds.train, &TrainSettings::new(0, 5e-3), 1.0, &mut seeded_rng(0, 0)).unwrap();
        assert_eq!(bank, untouched);

        let trace = train_stage2(&mut bank, &vaes, &ds.train, &TrainSettings::new(40, 5e-3), 1.0, &mut seeded_rng(2, 2)).unwrap();
        for t in &trace.epoch_loss {
            assert!(t[39] < 0.5 * t[0], "{} -> {}", t[0], t[39]);
        }
        assert_eq!(digests, vaes.iter().map(|v| v.params.digest()).collect::<Vec<_>>());

        // mapped means move closer to the true target posterior on held-out pairs
        let (x0, x1) = (col(&ds.test, 0), col(&ds.test, 1));
        let (mu1, _) = vaes[1].encode(&x1).unwrap();
        let err = |b: &MappingBank| {
            let (mh, _) = mapped_posterior(b, &vaes, &x0, 0, 1).unwrap();
            mh.data().iter().zip(mu1.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / mh.len() as f64
        };
        assert!(err(&bank) < err(&untouched));

        // cross reconstruction beats predicting the training mean
        let xh = cross_reconstruct(&bank, &vaes, &x0, 0, 1, &mut seeded_rng(3, 3)).unwrap();
        assert_eq!(xh.cols(), 16);
        let mse = |p: &dyn Fn(usize, usize) -> f64| {
            (0..x1.rows()).flat_map(|r| (0..16).map(move |j| (r, j))).map(|(r, j)| (p(r, j) - x1.row(r)[j]).powi(2)).sum::<f64>()
        };
        let n = ds.train.len() as f64;
        let mean: Vec<f64> = (0..16).map(|j| ds.train.iter().map(|e| e.features[1][j]).sum::<f64>() / n).collect();
        assert!(mse(&|r, j| xh.row(r)[j]) < mse(&|_, j| mean[j]));
    }

    #[test]
    fn skips_models_without_pairs() {
        let (ds, vaes) = setup(vec![16, 16], 3);
        let mut ex = ds.train[..20].to_vec();
        ex.iter_mut().enumerate().for_each(|(i, e)| e.present = vec![i % 2 == 0, i % 2 == 1]);
        let mut bank = MappingBank::new(MappingMode::Full, 2, L, &[64, 64], &mut seeded_rng(3, 1)).unwrap();
        let before = bank.clone();
        let trace = train_stage2(&mut bank, &vaes, &ex, &TrainSettings::new(3, 5e-3), 0.0, &mut seeded_rng(0, 0)).unwrap();
        assert_eq!(trace.skipped, vec![0, 1]);
        assert_eq!(bank, before);
    }

    #[test]
    fn self_and_multi_source_policies() {
        let (ds, vaes) = setup(vec![16, 16, 16], 4);
        let bank = MappingBank::new(MappingMode::Full, 3, L, &[64, 64], &mut seeded_rng(4, 1)).unwrap();
        let e = &ds.test[0];
        let x = Array::matrix(1, 16, e.features[0].clone());
        let eps = Array::matrix(1, L, normal_vec(&mut seeded_rng(1, 1), L));
        let self_rec = vaes[0].decode(&crate::mvae::reparameterize_with(&vaes[0].encode(&x).unwrap().0, &vaes[0].encode(&x).unwrap().1, eps.clone()).unwrap().z).unwrap();
        assert_eq!(cross_reconstruct_with(&bank, &vaes, &x, 0, 0, &eps).unwrap(), self_rec);

        let mut one = e.clone();
        one.present = vec![false, true, false];
        let a = multi_source_reconstruct_with(&bank, &vaes, &one, 0, SourcePolicy::Single, eps.data()).unwrap();
        let b = multi_source_reconstruct_with(&bank, &vaes, &one, 0, SourcePolicy::Average, eps.data()).unwrap();
        assert_eq!(a, b);

        // identical sources give identical mapped posteriors in simplified mode
        let simple = MappingBank::new(MappingMode::Simplified, 3, L, &[64, 64], &mut seeded_rng(4, 2)).unwrap();
        let mut twin = e.clone();
        twin.features[2] = twin.features[1].clone();
        twin.present = vec![false, true, true];
        let mut vaes_twin = vaes.clone();
        vaes_twin[2] = VaePair { modality: 2, ..vaes[1].clone() };
        let a = multi_source_reconstruct_with(&simple, &vaes_twin, &twin, 0, SourcePolicy::Single, eps.data()).unwrap();
        let b = multi_source_reconstruct_with(&simple, &vaes_twin, &twin, 0, SourcePolicy::Average, eps.data()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
