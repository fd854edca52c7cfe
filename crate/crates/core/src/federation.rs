//! Round-based federated training.
//!
//! Each round every client downloads the global generators and task model,
//! trains its VAEs (stage 1), then its mapping models with the VAEs frozen
//! (stage 2), then its task model with every generator frozen (stage 3). The
//! task model sees reconstructions from both its freshly trained local
//! generators and a frozen snapshot of the round-start global ones. The
//! server then averages each parameter family in ascending client order.

use std::time::Instant;

use log::warn;
use rayon::prelude::*;

use crate::config::{Aggregation, ExperimentConfig};
use crate::data::ClientDataset;
use crate::data::MultimodalExample;
use crate::error::{Error, Result};
use crate::evaluation::{macro_f1, mean_pairwise_coherence, top1_accuracy, uar, ConfusionMatrix, JudgeClassifier};
use crate::fusion::{assemble_all, train_stage3, Generators, SlotInput, SlotPolicy, TaskModel};
use crate::mapping::{train_stage2, MappingBank};
use crate::mvae::{train_stage1, VaePair};
use crate::tensor::rng::{stream, Purpose};
use crate::tensor::{argmax, ParamStore};

/// Frozen copy of the round-start global generators.
#[derive(Clone, Debug, PartialEq)]
pub struct GgfsSnapshot {
    pub vaes: Vec<VaePair>,
    pub bank: MappingBank,
    pub digest: String,
}

impl GgfsSnapshot {
    pub fn generators(&self) -> Generators<'_> {
        Generators { vaes: &self.vaes, bank: &self.bank }
    }
}

fn generator_digest(vaes: &[VaePair], bank: &MappingBank) -> String {
    let mut all = ParamStore::new();
    for v in vaes {
        all.extend_from(&v.params).expect("vae names are unique");
    }
    all.extend_from(&bank.merged_params()).expect("mapping names are unique");
    all.digest()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationState {
    /// Rounds completed so far.
    pub round: usize,
    pub vaes: Vec<VaePair>,
    pub bank: MappingBank,
    pub task: TaskModel,
}

impl FederationState {
    pub fn new(config: &ExperimentConfig, num_classes: usize, modality_dims: &[usize], seed: u64) -> Result<Self> {
        let mut rng = stream(seed, Purpose::Init, 0, 0);
        let vaes = modality_dims
            .iter()
            .enumerate()
            .map(|(m, &d)| VaePair::new(m, d, config.latent_dim, &config.vae_hidden, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let bank = MappingBank::new(config.mapping, modality_dims.len(), config.latent_dim, &config.map_hidden, &mut rng)?;
        let task = TaskModel::new(num_classes, modality_dims, config.task.clone(), &mut rng)?;
        Ok(Self { round: 0, vaes, bank, task })
    }

    pub fn generators(&self) -> Generators<'_> {
        Generators { vaes: &self.vaes, bank: &self.bank }
    }
}

/// Deep copy of the current global generators.
pub fn snapshot_ggfs(state: &FederationState) -> GgfsSnapshot {
    GgfsSnapshot { vaes: state.vaes.clone(), bank: state.bank.clone(), digest: generator_digest(&state.vaes, &state.bank) }
}

/// Element-wise mean of stores, accumulated in ascending `client_id` order
/// whatever the input order. `weights` (aligned with `stores`) switches to a
/// weighted mean.
///
/// The running form `m += w_k / W_k * (x_k - m)` is used, so the mean of
/// identical stores is bitwise that store.
pub fn aggregate(stores: &[(usize, &ParamStore)], weights: Option<&[f64]>) -> Result<ParamStore> {
    if stores.is_empty() {
        return Err(Error::Params("nothing to aggregate".into()));
    }
    if let Some(w) = weights {
        if w.len() != stores.len() || w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::Params(format!("need {} positive weights, got {w:?}", stores.len())));
        }
    }
    let mut order: Vec<usize> = (0..stores.len()).collect();
    order.sort_by_key(|&i| stores[i].0);
    let first = stores[order[0]].1;
    for &i in &order[1..] {
        let (id, s) = stores[i];
        if s.len() != first.len() {
            return Err(Error::Params(format!("client {id}: {} entries, expected {}", s.len(), first.len())));
        }
        for (name, p) in first.iter() {
            let other = s.get(name).map_err(|_| Error::Params(format!("client {id}: missing entry `{name}`")))?;
            if other.value.shape() != p.value.shape() {
                return Err(Error::Params(format!(
                    "client {id}: entry `{name}` has shape {:?}, expected {:?}",
                    other.value.shape(),
                    p.value.shape()
                )));
            }
        }
    }
    let mut out = first.clone();
    out.zero_grad();
    let mut seen = weights.map_or(1.0, |w| w[order[0]]);
    for &i in &order[1..] {
        let w = weights.map_or(1.0, |w| w[i]);
        seen += w;
        let k = w / seen;
        let src = stores[i].1;
        for (name, p) in out.iter_mut() {
            let x = src.value(name).expect("checked above");
            for (m, v) in p.value.data_mut().iter_mut().zip(x.data()) {
                *m += k * (v - *m);
            }
        }
    }
    Ok(out)
}

/// Parameter digests taken after each local stage (audit mode).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageDigests {
    pub vaes_after_stage1: String,
    pub vaes_after_stage2: String,
    pub bank_after_stage2: String,
    pub vaes_after_stage3: String,
    pub bank_after_stage3: String,
    pub snapshot_after_stage3: String,
}

impl StageDigests {
    /// Stage 2 leaves the VAEs alone and stage 3 leaves every generator alone.
    pub fn isolated(&self) -> bool {
        self.vaes_after_stage1 == self.vaes_after_stage2
            && self.vaes_after_stage2 == self.vaes_after_stage3
            && self.bank_after_stage2 == self.bank_after_stage3
    }
}

fn vae_digest(vaes: &[VaePair]) -> String {
    let mut all = ParamStore::new();
    for v in vaes {
        all.extend_from(&v.params).expect("vae names are unique");
    }
    all.digest()
}

/// Result of one client's local update.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub num_examples: usize,
    pub vaes: Vec<VaePair>,
    pub bank: MappingBank,
    pub task: TaskModel,
    pub vae_trained: Vec<bool>,
    pub mapping_trained: Vec<bool>,
    pub stage1_loss: Option<f64>,
    pub stage2_loss: Option<f64>,
    pub stage3_loss: Option<f64>,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub digests: Option<StageDigests>,
    /// Number of slot lists assembled with the frozen global generators.
    pub global_generator_uses: usize,
}

/// Bytes moved for one client under modality-conditional transfer: the task
/// model always, a VAE only for modalities the client observes, a mapping
/// model only when the client observes its target and one of its sources.
/// Uploads count only what the client actually trained.
fn transfer_bytes(
    config: &ExperimentConfig,
    state: &FederationState,
    observed: &[bool],
    vae_trained: &[bool],
    mapping_trained: &[bool],
) -> (u64, u64) {
    let mut down = state.task.params.num_values();
    let mut up = down;
    if config.mode.uses_generators() {
        for (m, v) in state.vaes.iter().enumerate() {
            if observed[m] {
                down += v.params.num_values();
            }
            if vae_trained[m] {
                up += v.params.num_values();
            }
        }
        for (i, t) in state.bank.models.iter().enumerate() {
            let has_source = match t.source {
                Some(m) => observed[m],
                None => (0..observed.len()).any(|m| m != t.target && observed[m]),
            };
            if observed[t.target] && has_source {
                down += t.params.num_values();
            }
            if mapping_trained[i] {
                up += t.params.num_values();
            }
        }
    }
    (8 * up as u64, 8 * down as u64)
}

/// Runs the three local stages of one client against the current globals.
pub fn local_update(
    state: &FederationState,
    snapshot: &GgfsSnapshot,
    client: &ClientDataset,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<ClientUpdate> {
    let t = (state.round + 1) as u64;
    let k = client.client_id as u64;
    let nm = state.vaes.len();
    let mut vaes = state.vaes.clone();
    let mut bank = state.bank.clone();
    let mut task = state.task.clone();
    let mut vae_trained = vec![false; nm];
    let mut mapping_trained = vec![false; bank.models.len()];
    let (mut stage1_loss, mut stage2_loss) = (None, None);
    let audit = config.audit;
    let mut digests = StageDigests::default();

    if config.mode.uses_generators() {
        let tr1 = train_stage1(&mut vaes, &client.examples, &config.stage1(), &mut stream(seed, Purpose::Stage1, t, k))?;
        for (m, flag) in vae_trained.iter_mut().enumerate() {
            *flag = !tr1.skipped.contains(&m);
        }
        stage1_loss = tr1.final_mean();
        if audit {
            digests.vaes_after_stage1 = vae_digest(&vaes);
        }
        let tr2 = train_stage2(
            &mut bank,
            &vaes,
            &client.examples,
            &config.stage2(),
            config.gamma,
            &mut stream(seed, Purpose::Stage2, t, k),
        )?;
        for (i, flag) in mapping_trained.iter_mut().enumerate() {
            *flag = tr2.trained(i);
        }
        stage2_loss = tr2.final_mean();
    } else if audit {
        digests.vaes_after_stage1 = vae_digest(&vaes);
    }
    if audit {
        digests.vaes_after_stage2 = vae_digest(&vaes);
        digests.bank_after_stage2 = bank.merged_params().digest();
    }

    let policy = SlotPolicy { mode: config.mode, lambda_syn: config.lambda_syn, source_policy: config.source_policy };
    let mut rng3 = stream(seed, Purpose::Stage3, t, k);
    let local = Generators { vaes: &vaes, bank: &bank };
    let data = assemble_all(&client.examples, &policy, Some(local), Some(snapshot.generators()), &mut rng3)?;
    let global_generator_uses = if config.mode.uses_global_generators() {
        client.examples.iter().filter(|e| !e.all_present()).count()
    } else {
        0
    };
    let tr3 = train_stage3(&mut task, &data, &config.stage3(), &mut rng3)?;
    if audit {
        digests.vaes_after_stage3 = vae_digest(&vaes);
        digests.bank_after_stage3 = bank.merged_params().digest();
        digests.snapshot_after_stage3 = generator_digest(&snapshot.vaes, &snapshot.bank);
    }
    let observed = client.observed_modalities();
    let (bytes_up, bytes_down) = transfer_bytes(config, state, &observed, &vae_trained, &mapping_trained);
    Ok(ClientUpdate {
        client_id: client.client_id,
        num_examples: client.examples.len(),
        vaes,
        bank,
        task,
        vae_trained,
        mapping_trained,
        stage1_loss,
        stage2_loss,
        stage3_loss: tr3.epoch_loss.last().copied(),
        bytes_up,
        bytes_down,
        digests: audit.then_some(digests),
        global_generator_uses,
    })
}

/// Averages client updates into `state`. A VAE is averaged over the clients
/// that trained it and a mapping model over the clients that trained that
/// model; parameters nobody trained keep their global value.
pub fn aggregate_updates(state: &mut FederationState, updates: &[ClientUpdate], aggregation: Aggregation) -> Result<()> {
    if updates.is_empty() {
        return Ok(());
    }
    let weight = |u: &ClientUpdate| u.num_examples as f64;
    let combine = |picked: Vec<(&ClientUpdate, &ParamStore)>| -> Result<Option<ParamStore>> {
        if picked.is_empty() {
            return Ok(None);
        }
        let stores: Vec<(usize, &ParamStore)> = picked.iter().map(|(u, s)| (u.client_id, *s)).collect();
        let w: Vec<f64> = picked.iter().map(|(u, _)| weight(u)).collect();
        let w = (aggregation == Aggregation::Weighted).then_some(w.as_slice());
        aggregate(&stores, w).map(Some)
    };
    for m in 0..state.vaes.len() {
        let picked = updates.iter().filter(|u| u.vae_trained[m]).map(|u| (u, &u.vaes[m].params)).collect();
        if let Some(p) = combine(picked)? {
            state.vaes[m].params = p;
        }
    }
    for i in 0..state.bank.models.len() {
        let picked = updates.iter().filter(|u| u.mapping_trained[i]).map(|u| (u, &u.bank.models[i].params)).collect();
        if let Some(p) = combine(picked)? {
            state.bank.models[i].params = p;
        }
    }
    let picked = updates.iter().map(|u| (u, &u.task.params)).collect();
    if let Some(p) = combine(picked)? {
        state.task.params = p;
    }
    Ok(())
}

/// Metrics of one round (round 0 is the initial model).
#[derive(Clone, Debug, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub mode: String,
    pub seed: u64,
    pub stage1_loss: f64,
    pub stage2_loss: f64,
    pub stage3_loss: f64,
    pub top1: f64,
    pub uar: f64,
    pub f1: f64,
    pub coherence: f64,
    /// Summed over clients.
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub wall_s: f64,
}

pub const CSV_HEADER: &str = "round,mode,seed,stage1_loss,stage2_loss,stage3_loss,top1,uar,f1,coherence,bytes_up,bytes_down,wall_s";

impl RoundMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{},{:?}",
            self.round,
            self.mode,
            self.seed,
            self.stage1_loss,
            self.stage2_loss,
            self.stage3_loss,
            self.top1,
            self.uar,
            self.f1,
            self.coherence,
            self.bytes_up,
            self.bytes_down,
            self.wall_s
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 13 {
            return Err(Error::InvalidArgument(format!("metrics row has {} fields, expected 13: `{line}`", f.len())));
        }
        let bad = |i: usize| Error::InvalidArgument(format!("metrics row: bad field {i} `{}`", f[i]));
        let fl = |i: usize| f[i].parse::<f64>().map_err(|_| bad(i));
        let int = |i: usize| f[i].parse::<u64>().map_err(|_| bad(i));
        Ok(Self {
            round: int(0)? as usize,
            mode: f[1].to_string(),
            seed: int(2)?,
            stage1_loss: fl(3)?,
            stage2_loss: fl(4)?,
            stage3_loss: fl(5)?,
            top1: fl(6)?,
            uar: fl(7)?,
            f1: fl(8)?,
            coherence: fl(9)?,
            bytes_up: int(10)?,
            bytes_down: int(11)?,
            wall_s: fl(12)?,
        })
    }
}

/// Everything the server needs to score the global model.
pub struct EvalContext<'a> {
    pub test: &'a [MultimodalExample],
    pub judge: Option<&'a JudgeClassifier>,
    pub clean_test: &'a [MultimodalExample],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub top1: f64,
    pub uar: f64,
    pub f1: f64,
    /// Mean pairwise coherence; 0 when the mode trains no generators.
    pub coherence: f64,
    pub confusion: ConfusionMatrix,
}

/// Scores the global model on the masked test set. Missing modalities are
/// reconstructed with the global generators, which play both the local and
/// the frozen-global role at the server.
pub fn evaluate_global(state: &FederationState, config: &ExperimentConfig, ctx: &EvalContext, seed: u64) -> Result<EvalResult> {
    let t = state.round as u64;
    let policy = SlotPolicy { mode: config.mode, lambda_syn: config.lambda_syn, source_policy: config.source_policy };
    let g = state.generators();
    let mut rng = stream(seed, Purpose::Eval, t, 0);
    let data = assemble_all(ctx.test, &policy, Some(g), Some(g), &mut rng)?;
    let mut cm = ConfusionMatrix::new(state.task.num_classes);
    for chunk in data.chunks(256) {
        let batch: Vec<&[SlotInput]> = chunk.iter().map(|(s, _)| s.as_slice()).collect();
        let logits = state.task.logits(&batch)?;
        for (r, (_, y)) in chunk.iter().enumerate() {
            cm.add(*y, argmax(logits.row(r)))?;
        }
    }
    let coherence = match ctx.judge {
        Some(judge) if config.mode.uses_generators() && !ctx.clean_test.is_empty() => mean_pairwise_coherence(
            &state.vaes,
            &state.bank,
            judge,
            ctx.clean_test,
            &mut stream(seed, Purpose::Eval, t, 1),
        )?,
        _ => 0.0,
    };
    Ok(EvalResult { top1: top1_accuracy(&cm)?, uar: uar(&cm)?, f1: macro_f1(&cm)?, coherence, confusion: cm })
}

/// Per-round details beyond the CSV row.
#[derive(Clone, Debug)]
pub struct RoundOutcome {
    pub metrics: RoundMetrics,
    pub snapshot_digest_start: String,
    pub snapshot_digest_end: String,
    pub client_digests: Vec<(usize, StageDigests)>,
    pub global_generator_uses: usize,
}

fn mean(v: impl Iterator<Item = Option<f64>>) -> f64 {
    let vals: Vec<f64> = v.flatten().collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Runs every client's update for one round, aggregates, and evaluates.
///
/// With `threads > 1` clients run on a rayon pool; each client owns its RNG
/// streams and aggregation order is fixed, so the result is bitwise the
/// same as a serial run.
pub fn run_round(
    state: &mut FederationState,
    clients: &[ClientDataset],
    config: &ExperimentConfig,
    ctx: &EvalContext,
    seed: u64,
) -> Result<RoundOutcome> {
    let start = Instant::now();
    let active: Vec<&ClientDataset> = clients
        .iter()
        .filter(|c| {
            if c.examples.is_empty() {
                warn!("client {} has no data, excluded from round {}", c.client_id, state.round + 1);
            }
            !c.examples.is_empty()
        })
        .collect();
    if active.is_empty() {
        return Err(Error::InvalidArgument("no client has data".into()));
    }
    let snapshot = snapshot_ggfs(state);
    let frozen: &FederationState = state;
    let updates: Vec<ClientUpdate> = if config.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| active.par_iter().map(|c| local_update(frozen, &snapshot, c, config, seed)).collect::<Result<_>>())?
    } else {
        active.iter().map(|c| local_update(frozen, &snapshot, c, config, seed)).collect::<Result<_>>()?
    };
    let snapshot_digest_end = generator_digest(&snapshot.vaes, &snapshot.bank);

    aggregate_updates(state, &updates, config.aggregation)?;
    state.round += 1;
    let eval = evaluate_global(state, config, ctx, seed)?;
    let metrics = RoundMetrics {
        round: state.round,
        mode: config.mode.as_str().into(),
        seed,
        stage1_loss: mean(updates.iter().map(|u| u.stage1_loss)),
        stage2_loss: mean(updates.iter().map(|u| u.stage2_loss)),
        stage3_loss: mean(updates.iter().map(|u| u.stage3_loss)),
        top1: eval.top1,
        uar: eval.uar,
        f1: eval.f1,
        coherence: eval.coherence,
        bytes_up: updates.iter().map(|u| u.bytes_up).sum(),
        bytes_down: updates.iter().map(|u| u.bytes_down).sum(),
        wall_s: if config.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 },
    };
    Ok(RoundOutcome {
        metrics,
        snapshot_digest_start: snapshot.digest,
        snapshot_digest_end,
        client_digests: updates.iter().filter_map(|u| u.digests.clone().map(|d| (u.client_id, d))).collect(),
        global_generator_uses: updates.iter().map(|u| u.global_generator_uses).sum(),
    })
}
