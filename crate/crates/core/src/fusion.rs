//! Task model: per-modality feature encoders, attention fusion over feature
//! slots, and a linear classifier.
//!
//! Every example is presented as a list of slots. A present modality gives a
//! real slot; a missing one gives zero, one or two synthetic slots depending
//! on [`FusionMode`]. Each slot carries the data-space input fed to the
//! modality's encoder and a scale applied to the encoded feature. Attention
//! over the scaled features `g_i = scale_i * E_m(x_i)` is
//!
//! ```text
//! u_i = tanh(W g_i + b),  a = softmax_i(u_i . c),  fused = sum_i a_i g_i
//! ```
//!
//! With several context vectors the per-head fused vectors are concatenated
//! and projected back to the feature width.

use std::str::FromStr;

use rand::Rng as _;

use crate::data::MultimodalExample;
use crate::error::{shape_err, Error, Result};
use crate::mapping::{multi_source_reconstruct_with, MappingBank, SourcePolicy};
use crate::mvae::VaePair;
use crate::tensor::rng::normal_vec;
use crate::tensor::{argmax, Activation, Array, Mlp, Optimizer, ParamStore, Rng, Tape, Var};
use crate::training::{minibatches, TrainSettings};

/// How missing modalities are presented to the fusion layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// Local and frozen-global reconstructions as two down-weighted slots.
    FedRecon,
    /// Local reconstruction only.
    NoGgfs,
    /// No reconstruction: a down-weighted slot encoding the zero vector.
    NoMmr,
    /// The zero vector as if it were real data.
    ZeroFill,
    /// Missing modalities contribute nothing.
    Drop,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] =
        [FusionMode::FedRecon, FusionMode::NoGgfs, FusionMode::NoMmr, FusionMode::ZeroFill, FusionMode::Drop];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::FedRecon => "fedrecon",
            FusionMode::NoGgfs => "no_ggfs",
            FusionMode::NoMmr => "no_mmr",
            FusionMode::ZeroFill => "zero_fill",
            FusionMode::Drop => "drop",
        }
    }

    /// Whether local generators feed the task model.
    pub fn uses_generators(self) -> bool {
        matches!(self, FusionMode::FedRecon | FusionMode::NoGgfs)
    }

    pub fn uses_global_generators(self) -> bool {
        self == FusionMode::FedRecon
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode `{s}` (expected fedrecon, no_ggfs, no_mmr, zero_fill or drop)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotOrigin {
    Real,
    SyntheticLocal,
    SyntheticGlobal,
    /// Encoding of the zero vector standing in for a missing modality.
    Zero,
}

/// A slot before encoding: the encoder input and its feature scale.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotInput {
    pub modality: usize,
    pub origin: SlotOrigin,
    pub scale: f64,
    pub input: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSlot {
    pub modality: usize,
    pub origin: SlotOrigin,
    pub scale: f64,
    /// Unscaled encoder output.
    pub feature: Vec<f64>,
}

/// A set of generators: one VAE per modality plus a mapping bank.
#[derive(Clone, Copy)]
pub struct Generators<'a> {
    pub vaes: &'a [VaePair],
    pub bank: &'a MappingBank,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlotPolicy {
    pub mode: FusionMode,
    /// Scale of synthetic slots.
    pub lambda_syn: f64,
    pub source_policy: SourcePolicy,
}

/// Builds the slot inputs of one example.
///
/// For every missing modality (ascending) one latent noise vector is drawn
/// and shared by the local and global reconstruction, so identical
/// generators give identical synthetic slots. No noise is drawn in modes
/// that do not reconstruct.
pub fn assemble_slots(
    example: &MultimodalExample,
    policy: &SlotPolicy,
    local: Option<Generators>,
    global: Option<Generators>,
    rng: &mut Rng,
) -> Result<Vec<SlotInput>> {
    if !example.present.iter().any(|&p| p) {
        return Err(Error::InvalidArgument("example has no present modality".into()));
    }
    let mut slots = Vec::new();
    for m in example.present_modalities() {
        slots.push(SlotInput { modality: m, origin: SlotOrigin::Real, scale: 1.0, input: example.features[m].clone() });
    }
    for n in (0..example.num_modalities()).filter(|&n| !example.present[n]) {
        let dim = example.features[n].len();
        match policy.mode {
            FusionMode::Drop => {}
            FusionMode::ZeroFill => {
                slots.push(SlotInput { modality: n, origin: SlotOrigin::Zero, scale: 1.0, input: vec![0.0; dim] })
            }
            FusionMode::NoMmr => slots.push(SlotInput {
                modality: n,
                origin: SlotOrigin::Zero,
                scale: policy.lambda_syn,
                input: vec![0.0; dim],
            }),
            FusionMode::NoGgfs | FusionMode::FedRecon => {
                let local = local.ok_or_else(|| Error::InvalidArgument("local generators required".into()))?;
                let eps = normal_vec(rng, local.bank.latent_dim);
                let x = multi_source_reconstruct_with(local.bank, local.vaes, example, n, policy.source_policy, &eps)?;
                slots.push(SlotInput { modality: n, origin: SlotOrigin::SyntheticLocal, scale: policy.lambda_syn, input: x });
                if policy.mode == FusionMode::FedRecon {
                    let global = global.ok_or_else(|| Error::InvalidArgument("global generators required".into()))?;
                    let x =
                        multi_source_reconstruct_with(global.bank, global.vaes, example, n, policy.source_policy, &eps)?;
                    slots.push(SlotInput {
                        modality: n,
                        origin: SlotOrigin::SyntheticGlobal,
                        scale: policy.lambda_syn,
                        input: x,
                    });
                }
            }
        }
    }
    Ok(slots)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub feature_dim: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub encoder_hidden: Vec<usize>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { feature_dim: 32, attn_dim: 32, heads: 1, encoder_hidden: vec![64] }
    }
}

/// Parameter names of the attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionHead {
    pub w: String,
    pub b: String,
    pub contexts: Vec<String>,
    /// Projection `(weight, bias)` from the concatenated heads; multi-head only.
    pub proj: Option<(String, String)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskModel {
    pub num_classes: usize,
    pub modality_dims: Vec<usize>,
    pub config: TaskConfig,
    pub encoders: Vec<Mlp>,
    pub head: FusionHead,
    pub classifier: Mlp,
    pub params: ParamStore,
}

fn uniform(rng: &mut Rng, n: usize, a: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-a..a)).collect()
}

impl TaskModel {
    pub fn new(num_classes: usize, modality_dims: &[usize], config: TaskConfig, rng: &mut Rng) -> Result<Self> {
        if config.heads == 0 || config.feature_dim == 0 || config.attn_dim == 0 {
            return Err(Error::InvalidArgument(format!("bad task config {config:?}")));
        }
        let (df, da) = (config.feature_dim, config.attn_dim);
        let mut params = ParamStore::new();
        let mut encoders = Vec::with_capacity(modality_dims.len());
        for (m, &d) in modality_dims.iter().enumerate() {
            let sizes: Vec<usize> = [d].iter().chain(&config.encoder_hidden).chain([df].iter()).copied().collect();
            encoders.push(Mlp::build(&mut params, &format!("task/enc_{m}"), "l", &sizes, Activation::Relu, rng)?);
        }
        let a = 1.0 / (df as f64).sqrt();
        let head = FusionHead {
            w: "task/fusion/w".into(),
            b: "task/fusion/b".into(),
            contexts: (0..config.heads).map(|h| format!("task/fusion/c{h}")).collect(),
            proj: (config.heads > 1).then(|| ("task/fusion/proj/w".to_string(), "task/fusion/proj/b".to_string())),
        };
        params.insert(&head.w, Array::matrix(da, df, uniform(rng, da * df, a)))?;
        params.insert(&head.b, Array::vector(uniform(rng, da, a)))?;
        for c in &head.contexts {
            params.insert(c, Array::matrix(1, da, uniform(rng, da, 1.0 / (da as f64).sqrt())))?;
        }
        if let Some((pw, pb)) = &head.proj {
            let fan_in = config.heads * df;
            let a = 1.0 / (fan_in as f64).sqrt();
            params.insert(pw, Array::matrix(df, fan_in, uniform(rng, df * fan_in, a)))?;
            params.insert(pb, Array::vector(uniform(rng, df, a)))?;
        }
        let classifier = Mlp::build(&mut params, "task/head", "l", &[df, num_classes], Activation::Relu, rng)?;
        Ok(Self { num_classes, modality_dims: modality_dims.to_vec(), config, encoders, head, classifier, params })
    }

    fn check_slot(&self, s: &SlotInput) -> Result<()> {
        let d = self.modality_dims.get(s.modality).ok_or_else(|| {
            Error::InvalidArgument(format!("slot modality {} out of range ({} modalities)", s.modality, self.modality_dims.len()))
        })?;
        if s.input.len() != *d {
            return Err(shape_err("slot", format!("modality {} expects {d} inputs, got {}", s.modality, s.input.len())));
        }
        Ok(())
    }

    /// Unscaled features of a slot list.
    pub fn encode_slots(&self, slots: &[SlotInput]) -> Result<Vec<FeatureSlot>> {
        slots
            .iter()
            .map(|s| {
                self.check_slot(s)?;
                let x = Array::matrix(1, s.input.len(), s.input.clone());
                let f = self.encoders[s.modality].forward(&self.params, &x)?;
                Ok(FeatureSlot { modality: s.modality, origin: s.origin, scale: s.scale, feature: f.into_data() })
            })
            .collect()
    }

    /// Attention over scaled feature vectors recorded on `tape`: `slots[s]` is
    /// a `B x d_f` node for slot position `s` and `mask` is row-major `B x S`.
    /// Returns the fused `B x d_f` node and the per-head weight nodes.
    pub fn fuse_tape(&self, tape: &mut Tape, slots: &[Var], mask: Vec<bool>, frozen: bool) -> Result<(Var, Vec<Var>)> {
        if slots.is_empty() {
            return Err(Error::InvalidArgument("attention needs at least one slot".into()));
        }
        let df = self.config.feature_dim;
        for &g in slots {
            if tape.value(g).cols() != df {
                return Err(shape_err("attention_fuse", format!("slot feature has {} dims, expected {df}", tape.value(g).cols())));
            }
        }
        let leaf = |tape: &mut Tape, name: &str| -> Result<Var> {
            if frozen {
                Ok(tape.constant(self.params.value(name)?.clone()))
            } else {
                tape.param(&self.params, name)
            }
        };
        let w = leaf(tape, &self.head.w)?;
        let b = leaf(tape, &self.head.b)?;
        let us: Vec<Var> = slots
            .iter()
            .map(|&g| {
                let pre = tape.affine(g, w, Some(b))?;
                Ok(tape.tanh(pre))
            })
            .collect::<Result<_>>()?;
        let mut fused_heads = Vec::with_capacity(self.head.contexts.len());
        let mut weights = Vec::with_capacity(self.head.contexts.len());
        for c in &self.head.contexts {
            let c = leaf(tape, c)?;
            let scores: Vec<Var> = us.iter().map(|&u| tape.affine(u, c, None)).collect::<Result<_>>()?;
            let scores = tape.concat_cols(&scores)?;
            let a = tape.masked_softmax(scores, mask.clone())?;
            let mut fused: Option<Var> = None;
            for (s, &g) in slots.iter().enumerate() {
                let a_s = tape.slice_cols(a, s, 1)?;
                let term = tape.mul_col(g, a_s)?;
                fused = Some(match fused {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            fused_heads.push(fused.unwrap());
            weights.push(a);
        }
        let fused = match &self.head.proj {
            None => fused_heads[0],
            Some((pw, pb)) => {
                let cat = tape.concat_cols(&fused_heads)?;
                let pw = leaf(tape, pw)?;
                let pb = leaf(tape, pb)?;
                tape.affine(cat, pw, Some(pb))?
            }
        };
        Ok((fused, weights))
    }

    /// Fuses the slots of a single example. Returns the fused vector and the
    /// attention weights of every head.
    pub fn attention_fuse(&self, slots: &[FeatureSlot]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let gs: Vec<Var> = slots
            .iter()
            .map(|s| {
                let v: Vec<f64> = s.feature.iter().map(|f| s.scale * f).collect();
                tape.constant(Array::matrix(1, v.len(), v))
            })
            .collect();
        let (fused, weights) = self.fuse_tape(&mut tape, &gs, vec![true; slots.len()], true)?;
        Ok((tape.value(fused).data().to_vec(), weights.iter().map(|&a| tape.value(a).data().to_vec()).collect()))
    }

    /// Logits `B x C` for a batch of slot lists.
    ///
    /// Slots are grouped into positions by (modality, global-or-not); a
    /// position absent from every example of the batch is left out entirely,
    /// and absent entries of a present position are masked out.
    pub fn logits_tape(&self, tape: &mut Tape, batch: &[&[SlotInput]], frozen: bool) -> Result<Var> {
        let nm = self.modality_dims.len();
        let rows = batch.len();
        if rows == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let position = |s: &SlotInput| if s.origin == SlotOrigin::SyntheticGlobal { nm + s.modality } else { s.modality };
        let mut table: Vec<Vec<Option<&SlotInput>>> = vec![vec![None; rows]; 2 * nm];
        for (r, slots) in batch.iter().enumerate() {
            if slots.is_empty() {
                return Err(Error::InvalidArgument(format!("batch row {r} has no slots")));
            }
            for s in slots.iter() {
                self.check_slot(s)?;
                let cell = &mut table[position(s)][r];
                if cell.is_some() {
                    return Err(Error::InvalidArgument(format!("batch row {r}: two slots at one position")));
                }
                *cell = Some(s);
            }
        }
        let mut gs = Vec::new();
        let mut used = Vec::new();
        for (p, col) in table.iter().enumerate() {
            if col.iter().all(Option::is_none) {
                continue;
            }
            let m = p % nm;
            let d = self.modality_dims[m];
            let mut x = Vec::with_capacity(rows * d);
            let mut scale = Vec::with_capacity(rows);
            for cell in col {
                match cell {
                    Some(s) => {
                        x.extend_from_slice(&s.input);
                        scale.push(s.scale);
                    }
                    None => {
                        x.extend(std::iter::repeat_n(0.0, d));
                        scale.push(0.0);
                    }
                }
            }
            let xv = tape.constant(Array::matrix(rows, d, x));
            let f = self.encoders[m].forward_tape(tape, &self.params, xv, frozen)?;
            let sv = tape.constant(Array::matrix(rows, 1, scale));
            gs.push(tape.mul_col(f, sv)?);
            used.push(p);
        }
        let mut mask = Vec::with_capacity(rows * used.len());
        for r in 0..rows {
            for &p in &used {
                mask.push(table[p][r].is_some());
            }
        }
        let (fused, _) = self.fuse_tape(tape, &gs, mask, frozen)?;
        self.classifier.forward_tape(tape, &self.params, fused, frozen)
    }

    pub fn logits(&self, batch: &[&[SlotInput]]) -> Result<Array> {
        let mut tape = Tape::new();
        let l = self.logits_tape(&mut tape, batch, true)?;
        Ok(tape.value(l).clone())
    }

    /// Class with the largest logit, ties to the lowest index.
    pub fn predict(&self, slots: &[SlotInput]) -> Result<usize> {
        Ok(argmax(self.logits(&[slots])?.data()))
    }

    pub fn predict_batch(&self, batch: &[&[SlotInput]]) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }

    /// Mean cross-entropy over a batch.
    pub fn task_loss(&self, batch: &[&[SlotInput]], labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.logits_tape(&mut tape, batch, true)?;
        let loss = tape.softmax_cross_entropy(l, labels)?;
        Ok(tape.value(loss).item())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Stage3Trace {
    pub epoch_loss: Vec<f64>,
    pub epoch_acc: Vec<f64>,
}

/// Trains the task model on pre-assembled slot lists. Generators are not
/// touched; the slot inputs were computed from them beforehand.
pub fn train_stage3(
    model: &mut TaskModel,
    data: &[(Vec<SlotInput>, usize)],
    settings: &TrainSettings,
    rng: &mut Rng,
) -> Result<Stage3Trace> {
    let mut trace = Stage3Trace::default();
    if data.is_empty() || settings.epochs == 0 {
        return Ok(trace);
    }
    let mut opt = Optimizer::new(settings.optimizer, &model.params, settings.lr);
    for _ in 0..settings.epochs {
        let (mut total, mut correct) = (0.0, 0usize);
        for batch in minibatches(data.len(), settings.batch_size, rng) {
            let slots: Vec<&[SlotInput]> = batch.iter().map(|&i| data[i].0.as_slice()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| data[i].1).collect();
            let mut tape = Tape::new();
            let logits = model.logits_tape(&mut tape, &slots, false)?;
            let lv = tape.value(logits);
            correct += (0..lv.rows()).filter(|&r| argmax(lv.row(r)) == labels[r]).count();
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let v = tape.value(loss).item();
            if !v.is_finite() {
                return Err(Error::InvalidArgument("non-finite task loss".into()));
            }
            total += v * batch.len() as f64;
            model.params.zero_grad();
            tape.backward(loss)?.accumulate_into(&tape, &mut model.params)?;
            opt.step(&mut model.params)?;
        }
        trace.epoch_loss.push(total / data.len() as f64);
        trace.epoch_acc.push(correct as f64 / data.len() as f64);
    }
    model.params.zero_grad();
    Ok(trace)
}

/// Slot lists for examples, drawing reconstruction noise from `rng`.
pub fn assemble_all(
    examples: &[MultimodalExample],
    policy: &SlotPolicy,
    local: Option<Generators>,
    global: Option<Generators>,
    rng: &mut Rng,
) -> Result<Vec<(Vec<SlotInput>, usize)>> {
    examples.iter().map(|e| Ok((assemble_slots(e, policy, local, global, rng)?, e.label))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec};
    use crate::mapping::MappingMode;
    use crate::tensor::seeded_rng;

    fn model(heads: usize, seed: u64) -> TaskModel {
        let cfg = TaskConfig { feature_dim: 4, attn_dim: 3, heads, encoder_hidden: vec![5] };
        TaskModel::new(3, &[2, 3], cfg, &mut seeded_rng(seed, 0)).unwrap()
    }

    fn slot(m: usize, origin: SlotOrigin, scale: f64, feature: Vec<f64>) -> FeatureSlot {
        FeatureSlot { modality: m, origin, scale, feature }
    }

    #[test]
    fn single_and_identical_slots() {
        let t = model(1, 1);
        let f = vec![0.3, -1.2, 2.0, 0.5];
        let (fused, a) = t.attention_fuse(&[slot(0, SlotOrigin::Real, 1.0, f.clone())]).unwrap();
        assert_eq!(fused, f);
        assert_eq!(a, vec![vec![1.0]]);
        let s = slot(0, SlotOrigin::Real, 1.0, f.clone());
        let (fused, a) = t.attention_fuse(&[s.clone(), s]).unwrap();
        for (x, y) in fused.iter().zip(&f) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(a[0], vec![0.5, 0.5]);
        assert!(t.attention_fuse(&[slot(0, SlotOrigin::Real, 1.0, vec![1.0; 3])]).is_err());
        assert!(t.attention_fuse(&[]).is_err());
    }

    #[test]
    fn straight_line_oracle() {
        let mut t = TaskModel::new(2, &[2, 2], TaskConfig { feature_dim: 2, attn_dim: 2, heads: 1, encoder_hidden: vec![] }, &mut seeded_rng(0, 0)).unwrap();
        let (w, b, c) = ([[0.5, -0.25], [1.5, 0.75]], [0.1, -0.2], [0.8, -1.1]);
        t.params.get_mut("task/fusion/w").unwrap().value = Array::matrix(2, 2, vec![w[0][0], w[0][1], w[1][0], w[1][1]]);
        t.params.get_mut("task/fusion/b").unwrap().value = Array::vector(b.to_vec());
        t.params.get_mut("task/fusion/c0").unwrap().value = Array::matrix(1, 2, c.to_vec());
        let f1 = [1.0, 2.0];
        let f2 = [-0.5, 0.25];
        let (s1, s2) = (1.0, 0.5);
        let g1 = [s1 * f1[0], s1 * f1[1]];
        let g2 = [s2 * f2[0], s2 * f2[1]];
        let score = |g: [f64; 2]| {
            let u0 = (w[0][0] * g[0] + w[0][1] * g[1] + b[0]).tanh();
            let u1 = (w[1][0] * g[0] + w[1][1] * g[1] + b[1]).tanh();
            u0 * c[0] + u1 * c[1]
        };
        let (e1, e2) = (score(g1).exp(), score(g2).exp());
        let (a1, a2) = (e1 / (e1 + e2), e2 / (e1 + e2));
        let expect = [a1 * g1[0] + a2 * g2[0], a1 * g1[1] + a2 * g2[1]];
        let (fused, a) = t
            .attention_fuse(&[slot(0, SlotOrigin::Real, s1, f1.to_vec()), slot(1, SlotOrigin::SyntheticLocal, s2, f2.to_vec())])
            .unwrap();
        assert!((a[0][0] - a1).abs() < 1e-12 && (a[0][1] - a2).abs() < 1e-12);
        for k in 0..2 {
            assert!((fused[k] - expect[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_head_output_width() {
        let t = model(3, 2);
        let (fused, a) = t
            .attention_fuse(&[slot(0, SlotOrigin::Real, 1.0, vec![1.0; 4]), slot(1, SlotOrigin::Zero, 1.0, vec![0.5; 4])])
            .unwrap();
        assert_eq!(fused.len(), 4);
        assert_eq!(a.len(), 3);
    }

    fn inputs(present: [bool; 2]) -> Vec<SlotInput> {
        let mut v = Vec::new();
        if present[0] {
            v.push(SlotInput { modality: 0, origin: SlotOrigin::Real, scale: 1.0, input: vec![0.2, -0.4] });
        }
        if present[1] {
            v.push(SlotInput { modality: 1, origin: SlotOrigin::Real, scale: 1.0, input: vec![1.0, 0.1, -0.7] });
        } else {
            v.push(SlotInput { modality: 1, origin: SlotOrigin::SyntheticLocal, scale: 0.5, input: vec![0.3, 0.3, 0.0] });
            v.push(SlotInput { modality: 1, origin: SlotOrigin::SyntheticGlobal, scale: 0.5, input: vec![0.1, 0.2, 0.9] });
        }
        v
    }

    #[test]
    fn batched_logits_match_single_examples() {
        let t = model(2, 3);
        let a = inputs([true, true]);
        let b = inputs([true, false]);
        let c = inputs([false, true]);
        let batch = t.logits(&[&a, &b, &c]).unwrap();
        for (r, s) in [&a, &b, &c].iter().enumerate() {
            let single = t.logits(&[s]).unwrap();
            for (x, y) in batch.row(r).iter().zip(single.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn task_loss_closed_forms() {
        let mut t = model(1, 4);
        let (w, b) = (t.classifier.layers[0].w.clone(), t.classifier.layers[0].b.clone());
        t.params.get_mut(&w).unwrap().value.data_mut().fill(0.0);
        t.params.get_mut(&b).unwrap().value.data_mut().fill(0.0);
        let s = inputs([true, true]);
        assert!((t.task_loss(&[&s], &[2]).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert_eq!(t.predict(&s).unwrap(), 0);
        t.params.get_mut(&b).unwrap().value = Array::vector(vec![0.0, 5.0, 0.0]);
        assert!(t.task_loss(&[&s], &[1]).unwrap() < 3f64.ln());
        assert_eq!(t.predict(&s).unwrap(), 1);
        t.params.get_mut(&b).unwrap().value = Array::vector(vec![7.0, 12.0, 7.0]);
        assert_eq!(t.predict(&s).unwrap(), 1);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let t = model(2, 5);
        let a = inputs([true, false]);
        let b = inputs([false, true]);
        let batch: Vec<&[SlotInput]> = vec![&a, &b];
        let labels = [1, 2];
        let mut tape = Tape::new();
        let l = t.logits_tape(&mut tape, &batch, false).unwrap();
        let loss = tape.softmax_cross_entropy(l, &labels).unwrap();
        let mut g = t.params.clone();
        g.zero_grad();
        tape.backward(loss).unwrap().accumulate_into(&tape, &mut g).unwrap();
        let h = 1e-5;
        let mut checked = 0;
        for name in t.params.names().map(str::to_string).collect::<Vec<_>>() {
            for i in 0..t.params.value(&name).unwrap().len() {
                let mut p = t.clone();
                p.params.get_mut(&name).unwrap().value.data_mut()[i] += h;
                let up = p.task_loss(&batch, &labels).unwrap();
                p.params.get_mut(&name).unwrap().value.data_mut()[i] -= 2.0 * h;
                let down = p.task_loss(&batch, &labels).unwrap();
                let fd = (up - down) / (2.0 * h);
                let an = g.grad(&name).unwrap().data()[i];
                let err = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-6);
                assert!(err < 1e-4 || (fd - an).abs() < 1e-9, "{name}[{i}]: {an} vs {fd}");
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    fn generators(seed: u64) -> (Vec<VaePair>, MappingBank) {
        let mut rng = seeded_rng(seed, 9);
        let vaes = vec![VaePair::new(0, 2, 3, &[4], &mut rng).unwrap(), VaePair::new(1, 3, 3, &[4], &mut rng).unwrap()];
        let bank = MappingBank::new(MappingMode::Full, 2, 3, &[4], &mut rng).unwrap();
        (vaes, bank)
    }

    fn example(present: [bool; 2]) -> MultimodalExample {
        MultimodalExample { label: 1, features: vec![vec![0.2, -0.4], vec![1.0, 0.1, -0.7]], present: present.to_vec() }
    }

    #[test]
    fn slot_counts_per_mode() {
        let (vaes, bank) = generators(0);
        let g = Generators { vaes: &vaes, bank: &bank };
        let full = example([true, true]);
        let half = example([true, false]);
        let mut reference = None;
        for mode in FusionMode::ALL {
            let p = SlotPolicy { mode, lambda_syn: 0.5, source_policy: SourcePolicy::Average };
            let s = assemble_slots(&full, &p, Some(g), Some(g), &mut seeded_rng(0, 0)).unwrap();
            assert_eq!(*reference.get_or_insert(s.clone()), s);
            let s = assemble_slots(&half, &p, Some(g), Some(g), &mut seeded_rng(0, 0)).unwrap();
            let expected = match mode {
                FusionMode::FedRecon => 3,
                FusionMode::Drop => 1,
                _ => 2,
            };
            assert_eq!(s.len(), expected, "{mode:?}");
            assert!(s.iter().all(|x| x.scale > 0.0 && x.scale <= 1.0));
            assert!(s.iter().filter(|x| x.origin == SlotOrigin::Real).all(|x| x.scale == 1.0));
        }
    }

    #[test]
    fn identical_generators_give_identical_synthetic_slots() {
        let (vaes, bank) = generators(1);
        let copy = (vaes.clone(), bank.clone());
        let p = SlotPolicy { mode: FusionMode::FedRecon, lambda_syn: 0.5, source_policy: SourcePolicy::Single };
        let s = assemble_slots(
            &example([false, true]),
            &p,
            Some(Generators { vaes: &vaes, bank: &bank }),
            Some(Generators { vaes: &copy.0, bank: &copy.1 }),
            &mut seeded_rng(2, 0),
        )
        .unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s[1].input, s[2].input);
        assert_eq!((s[1].origin, s[2].origin), (SlotOrigin::SyntheticLocal, SlotOrigin::SyntheticGlobal));
    }

    #[test]
    fn drop_equals_fedrecon_when_complete() {
        let t = model(1, 6);
        let (vaes, bank) = generators(2);
        let g = Generators { vaes: &vaes, bank: &bank };
        let full = example([true, true]);
        let mk = |mode| SlotPolicy { mode, lambda_syn: 0.5, source_policy: SourcePolicy::Average };
        let a = assemble_slots(&full, &mk(FusionMode::Drop), None, None, &mut seeded_rng(0, 0)).unwrap();
        let b = assemble_slots(&full, &mk(FusionMode::FedRecon), Some(g), Some(g), &mut seeded_rng(0, 0)).unwrap();
        assert_eq!(t.logits(&[&a]).unwrap(), t.logits(&[&b]).unwrap());
        // mixed batches mask absent positions without changing other rows
        let half = assemble_slots(&example([true, false]), &mk(FusionMode::FedRecon), Some(g), Some(g), &mut seeded_rng(0, 0)).unwrap();
        assert_eq!(t.logits(&[&a, &half]).unwrap().row(0), t.logits(&[&a]).unwrap().data());
    }

    #[test]
    fn stage3_learns_easy_data_and_leaves_generators() {
        let ds = generate_dataset(&DatasetSpec { train_per_class: 100, seed: 3, ..Default::default() }).unwrap();
        let mut rng = seeded_rng(3, 0);
        let (vaes, bank) = generators(3);
        let digests = (vaes.iter().map(|v| v.params.digest()).collect::<Vec<_>>(), bank.merged_params().digest());
        let mut t = TaskModel::new(4, &[16, 16], TaskConfig::default(), &mut rng).unwrap();
        let p = SlotPolicy { mode: FusionMode::FedRecon, lambda_syn: 0.5, source_policy: SourcePolicy::Average };
        let data = assemble_all(&ds.train, &p, None, None, &mut rng).unwrap();
        let before = t.clone();
        train_stage3(&mut t, &data, &TrainSettings::new(0, 1e-3), &mut rng).unwrap();
        assert_eq!(t, before);
        let trace = train_stage3(&mut t, &data, &TrainSettings::new(10, 1e-3), &mut rng).unwrap();
        assert!(trace.epoch_acc[9] >= 0.95, "{:?}", trace.epoch_acc);
        assert_eq!(digests, (vaes.iter().map(|v| v.params.digest()).collect::<Vec<_>>(), bank.merged_params().digest()));
    }

    proptest::proptest! {
        #[test]
        fn weights_are_a_simplex_and_fused_in_hull(
            feats in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 4), 1..6),
            scales in proptest::collection::vec(0.01f64..=1.0, 6),
        ) {
            let t = model(1, 7);
            let slots: Vec<FeatureSlot> = feats.iter().zip(&scales).map(|(f, &s)| slot(0, SlotOrigin::Real, s, f.clone())).collect();
            let (fused, a) = t.attention_fuse(&slots).unwrap();
            let sum: f64 = a[0].iter().sum();
            proptest::prop_assert!((sum - 1.0).abs() < 1e-12);
            proptest::prop_assert!(a[0].iter().all(|&x| x >= 0.0));
            for k in 0..4 {
                let vals: Vec<f64> = slots.iter().map(|s| s.scale * s.feature[k]).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                proptest::prop_assert!(fused[k] >= lo - 1e-12 && fused[k] <= hi + 1e-12);
            }
        }
    }
}
