//! Classification metrics, judge-based generative coherence, and a Fréchet
//! distance between Gaussian fits of two feature sets.
//!
//! The Fréchet distance here is computed in raw feature space and is not
//! comparable to Inception-based FID scores.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::MultimodalExample;
use crate::error::{shape_err, Error, Result};
use crate::mapping::{cross_reconstruct, multi_source_reconstruct, MappingBank, SourcePolicy};
use crate::mvae::VaePair;
use crate::tensor::{argmax, Activation, Array, Mlp, Optimizer, ParamStore, Rng, Tape};
use crate::training::{minibatches, TrainSettings};

/// Counts indexed `[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { counts: vec![vec![0; num_classes]; num_classes] }
    }

    pub fn from_rows(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if counts.iter().any(|r| r.len() != c) {
            return Err(shape_err("confusion matrix", format!("rows must all have {c} entries")));
        }
        Ok(Self { counts })
    }

    pub fn from_predictions(labels: &[usize], predictions: &[usize], num_classes: usize) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(shape_err("confusion matrix", format!("{} labels, {} predictions", labels.len(), predictions.len())));
        }
        let mut cm = Self::new(num_classes);
        for (&y, &p) in labels.iter().zip(predictions) {
            cm.add(y, p)?;
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, label: usize, predicted: usize) -> Result<()> {
        let c = self.num_classes();
        if label >= c || predicted >= c {
            return Err(Error::InvalidArgument(format!("class out of range: label {label}, predicted {predicted}, {c} classes")));
        }
        self.counts[label][predicted] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(shape_err("confusion matrix", "class counts differ"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn diag(&self, c: usize) -> f64 {
        self.counts[c][c] as f64
    }

    fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }
}

fn nonempty(cm: &ConfusionMatrix) -> Result<()> {
    if cm.total() == 0 {
        return Err(Error::InvalidArgument("confusion matrix is empty".into()));
    }
    Ok(())
}

pub fn top1_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    nonempty(cm)?;
    Ok((0..cm.num_classes()).map(|c| cm.diag(c)).sum::<f64>() / cm.total() as f64)
}

/// Mean per-class recall. Classes with no true examples are excluded.
pub fn uar(cm: &ConfusionMatrix) -> Result<f64> {
    nonempty(cm)?;
    let mut recalls = Vec::new();
    for c in 0..cm.num_classes() {
        match cm.row_sum(c) {
            0 => warn!("uar: class {c} has no true examples, excluded"),
            n => recalls.push(cm.diag(c) / n as f64),
        }
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Unweighted mean of per-class F1. A class with no true and no predicted
/// examples scores 0.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    nonempty(cm)?;
    let c = cm.num_classes();
    let mut total = 0.0;
    for k in 0..c {
        let tp = cm.diag(k);
        let denom = (cm.row_sum(k) + cm.col_sum(k)) as f64;
        if denom == 0.0 {
            warn!("macro_f1: class {k} never occurs nor is predicted, F1 = 0");
            continue;
        }
        total += 2.0 * tp / denom;
    }
    Ok(total / c as f64)
}

/// One classifier per modality, trained on unmasked features.
#[derive(Clone, Debug, PartialEq)]
pub struct JudgeClassifier {
    pub num_classes: usize,
    pub nets: Vec<Mlp>,
    pub params: ParamStore,
    /// Held-out accuracy per modality; empty until trained.
    pub accuracy: Vec<f64>,
}

impl JudgeClassifier {
    pub fn new(num_classes: usize, modality_dims: &[usize], hidden: usize, rng: &mut Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let nets = modality_dims
            .iter()
            .enumerate()
            .map(|(m, &d)| Mlp::build(&mut params, &format!("judge/{m}"), "l", &[d, hidden, num_classes], Activation::Relu, rng))
            .collect::<Result<_>>()?;
        Ok(Self { num_classes, nets, params, accuracy: Vec::new() })
    }

    pub fn is_trained(&self) -> bool {
        !self.accuracy.is_empty()
    }

    /// Predicted classes for a batch of modality-`m` vectors.
    pub fn classify(&self, m: usize, x: &Array) -> Result<Vec<usize>> {
        let net = self.nets.get(m).ok_or_else(|| Error::InvalidArgument(format!("judge has no modality {m}")))?;
        if x.rows() == 0 {
            return Ok(Vec::new());
        }
        let logits = net.forward(&self.params, x)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }

    pub fn accuracy_on(&self, m: usize, examples: &[MultimodalExample]) -> Result<f64> {
        let x = column(examples, m)?;
        let pred = self.classify(m, &x)?;
        Ok(pred.iter().zip(examples).filter(|(p, e)| **p == e.label).count() as f64 / examples.len().max(1) as f64)
    }
}

fn column(examples: &[MultimodalExample], m: usize) -> Result<Array> {
    if examples.is_empty() {
        return Ok(Array::zeros(&[0, 0]));
    }
    Array::from_rows(&examples.iter().map(|e| e.features[m].clone()).collect::<Vec<_>>())
}

/// Trains the judge on clean data and records its held-out accuracy. An
/// accuracy under 0.9 is reported as a warning since coherence is then hard
/// to interpret.
pub fn train_judge(
    judge: &mut JudgeClassifier,
    train: &[MultimodalExample],
    held_out: &[MultimodalExample],
    settings: &TrainSettings,
    rng: &mut Rng,
) -> Result<()> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("judge needs training data".into()));
    }
    let labels: Vec<usize> = train.iter().map(|e| e.label).collect();
    let mut opt = Optimizer::new(settings.optimizer, &judge.params, settings.lr);
    for m in 0..judge.nets.len() {
        let x = column(train, m)?;
        for _ in 0..settings.epochs {
            for batch in minibatches(train.len(), settings.batch_size, rng) {
                let rows: Vec<Vec<f64>> = batch.iter().map(|&i| x.row(i).to_vec()).collect();
                let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                let mut tape = Tape::new();
                let xv = tape.constant(Array::from_rows(&rows)?);
                let logits = judge.nets[m].forward_tape(&mut tape, &judge.params, xv, false)?;
                let loss = tape.softmax_cross_entropy(logits, &ys)?;
                judge.params.zero_grad();
                tape.backward(loss)?.accumulate_into(&tape, &mut judge.params)?;
                opt.step(&mut judge.params)?;
            }
        }
    }
    judge.params.zero_grad();
    let eval = if held_out.is_empty() { train } else { held_out };
    judge.accuracy = (0..judge.nets.len()).map(|m| judge.accuracy_on(m, eval)).collect::<Result<_>>()?;
    for (m, a) in judge.accuracy.iter().enumerate() {
        if *a < 0.9 {
            warn!("judge accuracy on modality {m} is {a:.3}; coherence will be hard to interpret");
        }
    }
    Ok(())
}

/// Fraction of generated modality-`n` vectors the judge assigns to `labels`.
pub fn coherence_of(judge: &JudgeClassifier, n: usize, generated: &Array, labels: &[usize]) -> Result<f64> {
    if !judge.is_trained() {
        return Err(Error::InvalidArgument("coherence needs a trained judge".into()));
    }
    if generated.rows() != labels.len() || labels.is_empty() {
        return Err(shape_err("coherence", format!("{} samples for {} labels", generated.rows(), labels.len())));
    }
    let pred = judge.classify(n, generated)?;
    Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
}

/// Coherence of `m -> n` cross-reconstructions over examples with `m` present.
pub fn coherence(
    vaes: &[VaePair],
    bank: &MappingBank,
    judge: &JudgeClassifier,
    examples: &[MultimodalExample],
    m: usize,
    n: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let usable: Vec<MultimodalExample> = examples.iter().filter(|e| e.present[m]).cloned().collect();
    if usable.is_empty() {
        return Err(Error::InvalidArgument(format!("no test example has modality {m}")));
    }
    let x = column(&usable, m)?;
    let gen = cross_reconstruct(bank, vaes, &x, m, n, rng)?;
    coherence_of(judge, n, &gen, &usable.iter().map(|e| e.label).collect::<Vec<_>>())
}

/// Coherence of reconstructing `n` from every other modality present in each
/// example, combined by `policy`. Examples without another modality are skipped.
pub fn multi_source_coherence(
    vaes: &[VaePair],
    bank: &MappingBank,
    judge: &JudgeClassifier,
    examples: &[MultimodalExample],
    n: usize,
    policy: SourcePolicy,
    rng: &mut Rng,
) -> Result<f64> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for e in examples.iter().filter(|e| e.present_modalities().any(|m| m != n)) {
        rows.push(multi_source_reconstruct(bank, vaes, e, n, policy, rng)?);
        labels.push(e.label);
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!("no example has a source for modality {n}")));
    }
    coherence_of(judge, n, &Array::from_rows(&rows)?, &labels)
}

/// Macro average of `m -> n` coherence over every ordered pair `m != n`.
pub fn mean_pairwise_coherence(
    vaes: &[VaePair],
    bank: &MappingBank,
    judge: &JudgeClassifier,
    examples: &[MultimodalExample],
    rng: &mut Rng,
) -> Result<f64> {
    let nm = vaes.len();
    let mut vals = Vec::new();
    for n in 0..nm {
        for m in (0..nm).filter(|&m| m != n) {
            vals.push(coherence(vaes, bank, judge, examples, m, n, rng)?);
        }
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

const LOADING: f64 = 1e-6;

fn gaussian_fit(set: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = set[0].len();
    let n = set.len() as f64;
    let mut mu = DVector::zeros(d);
    for x in set {
        mu += DVector::from_column_slice(x);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(d, d);
    for x in set {
        let c = DVector::from_column_slice(x) - &mu;
        cov += &c * c.transpose();
    }
    if set.len() > 1 {
        cov /= n - 1.0;
    }
    (mu, cov)
}

fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn is_singular(a: &DMatrix<f64>) -> bool {
    let eig = SymmetricEigen::new((a + a.transpose()) * 0.5);
    eig.eigenvalues.iter().any(|&v| v <= 1e-12)
}

/// Fréchet distance between two Gaussians:
/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)`.
pub fn frechet_gaussian(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> f64 {
    let r1 = psd_sqrt(s1);
    let cross = psd_sqrt(&(&r1 * s2 * &r1));
    (mu1 - mu2).norm_squared() + (s1 + s2 - cross * 2.0).trace()
}

/// Fréchet distance between Gaussian fits of two sets of vectors. Singular
/// covariances get `1e-6` added to the diagonal.
pub fn feature_distance(generated: &[Vec<f64>], real: &[Vec<f64>]) -> Result<f64> {
    if generated.is_empty() || real.is_empty() {
        return Err(Error::InvalidArgument("feature_distance needs two non-empty sets".into()));
    }
    let d = generated[0].len();
    if generated.iter().chain(real).any(|x| x.len() != d) {
        return Err(shape_err("feature_distance", format!("all vectors must have {d} entries")));
    }
    let (mu1, mut s1) = gaussian_fit(generated);
    let (mu2, mut s2) = gaussian_fit(real);
    for (name, s) in [("generated", &mut s1), ("real", &mut s2)] {
        if is_singular(s) {
            warn!("feature_distance: {name} covariance is singular, adding {LOADING} to the diagonal");
            for i in 0..d {
                s[(i, i)] += LOADING;
            }
        }
    }
    Ok(frechet_gaussian(&mu1, &s1, &mu2, &s2).max(0.0))
}
