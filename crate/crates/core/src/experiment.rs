//! Whole experiments: data, partition, masks, rounds, metrics and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::data::{
    bernoulli_mask, dirichlet_partition, generate_dataset, load_features, render_features, ClientDataset, FeatureHeader,
    MultimodalExample, PartitionOptions,
};
use crate::error::{Error, Result};
use crate::evaluation::{train_judge, JudgeClassifier};
use crate::federation::{evaluate_global, run_round, EvalContext, FederationState, RoundMetrics, RoundOutcome, CSV_HEADER};
use crate::tensor::checkpoint;
use crate::tensor::rng::{stream, Purpose};
use crate::tensor::ParamStore;

/// Train/test examples plus their shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentData {
    pub num_classes: usize,
    pub modality_dims: Vec<usize>,
    /// Unmasked splits.
    pub clean_train: Vec<MultimodalExample>,
    pub clean_test: Vec<MultimodalExample>,
    pub train: Vec<MultimodalExample>,
    pub test: Vec<MultimodalExample>,
    pub clients: Vec<ClientDataset>,
}

impl ExperimentData {
    /// Hex sha256 over each client's id, example order and contents.
    pub fn partition_digest(&self) -> String {
        let mut h = Sha256::new();
        let header = FeatureHeader { num_classes: self.num_classes, modality_dims: self.modality_dims.clone() };
        for c in &self.clients {
            h.update(c.client_id.to_le_bytes());
            h.update(render_features(&header, &c.examples).as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn mask_split(examples: &[MultimodalExample], rho: f64, seed: u64, split: u64) -> Result<Vec<MultimodalExample>> {
    let mut out = examples.to_vec();
    // Rows that arrive with presence flags already cleared keep them.
    let mut idx: Vec<usize> = (0..out.len()).filter(|&i| out[i].all_present()).collect();
    let mut fresh: Vec<MultimodalExample> = idx.iter().map(|&i| out[i].clone()).collect();
    bernoulli_mask(&mut fresh, rho, &mut stream(seed, Purpose::Mask, 0, split))?;
    for (i, e) in idx.drain(..).zip(fresh) {
        out[i] = e;
    }
    Ok(out)
}

/// Builds or loads the data for one seed, masks both splits with the
/// configured missing rate, and partitions the training split.
pub fn prepare_data(config: &ExperimentConfig, seed: u64) -> Result<ExperimentData> {
    let (num_classes, modality_dims, clean_train, clean_test) = match (&config.train_features, &config.test_features) {
        (Some(tr), Some(te)) => {
            let (h, train) = load_features(tr)?;
            let (h2, test) = load_features(te)?;
            if h != h2 {
                return Err(Error::InvalidArgument(format!("{} and {} have different headers", tr.display(), te.display())));
            }
            (h.num_classes, h.modality_dims, train, test)
        }
        _ => {
            let ds = generate_dataset(&config.dataset)?;
            (config.dataset.num_classes, config.dataset.modality_dims.clone(), ds.train, ds.test)
        }
    };
    let train = mask_split(&clean_train, config.rho, seed, 0)?;
    let test = mask_split(&clean_test, config.rho, seed, 1)?;
    let clients = dirichlet_partition(
        &train,
        num_classes,
        &PartitionOptions {
            num_clients: config.num_clients,
            alpha: config.alpha,
            min_per_client: config.min_per_client,
            seed,
            ..Default::default()
        },
    )?;
    Ok(ExperimentData { num_classes, modality_dims, clean_train, clean_test, train, test, clients })
}

/// Judge trained on fully observed training rows, scored on fully observed test rows.
pub fn build_judge(config: &ExperimentConfig, data: &ExperimentData, seed: u64) -> Result<JudgeClassifier> {
    let mut rng = stream(seed, Purpose::Judge, 0, 0);
    let mut judge = JudgeClassifier::new(data.num_classes, &data.modality_dims, 64, &mut rng)?;
    let train: Vec<MultimodalExample> = data.clean_train.iter().filter(|e| e.all_present()).cloned().collect();
    let test: Vec<MultimodalExample> = data.clean_test.iter().filter(|e| e.all_present()).cloned().collect();
    train_judge(&mut judge, &train, &test, &config.judge(), &mut rng)?;
    Ok(judge)
}

/// Output of one seed.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub metrics: Vec<RoundMetrics>,
    pub outcomes: Vec<RoundOutcome>,
    pub state: FederationState,
    pub judge: Option<JudgeClassifier>,
}

impl SeedRun {
    pub fn csv(&self) -> String {
        metrics_csv(&self.metrics)
    }

    pub fn final_metrics(&self) -> &RoundMetrics {
        self.metrics.last().expect("at least the round-0 row")
    }
}

pub fn metrics_csv(rows: &[RoundMetrics]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<RoundMetrics>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::InvalidArgument("metrics CSV lacks the expected header".into()));
    }
    lines.filter(|l| !l.trim().is_empty()).map(RoundMetrics::parse_csv_row).collect()
}

/// Checkpoint file names, one per parameter family.
pub const CHECKPOINT_FILES: [&str; 3] = ["vaes.frck", "mapping.frck", "task.frck"];

pub fn write_checkpoint(dir: &Path, state: &FederationState) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut vaes = ParamStore::new();
    for v in &state.vaes {
        vaes.extend_from(&v.params)?;
    }
    checkpoint::save(&vaes, &dir.join(CHECKPOINT_FILES[0]))?;
    checkpoint::save(&state.bank.merged_params(), &dir.join(CHECKPOINT_FILES[1]))?;
    checkpoint::save(&state.task.params, &dir.join(CHECKPOINT_FILES[2]))?;
    Ok(())
}

/// Loads checkpoint values into a freshly initialized state of the same shape.
/// Generator files are read only when `generators` is set, so a task-only
/// checkpoint loads for modes that never use them.
pub fn read_checkpoint(dir: &Path, state: &mut FederationState, round: usize, generators: bool) -> Result<()> {
    let task = checkpoint::load(&dir.join(CHECKPOINT_FILES[2]))?;
    if task.len() != state.task.params.len() {
        return Err(Error::Params(format!("task checkpoint in {} does not match the configured model", dir.display())));
    }
    if generators {
        let vaes = checkpoint::load(&dir.join(CHECKPOINT_FILES[0]))?;
        if vaes.len() != state.vaes.iter().map(|v| v.params.len()).sum::<usize>() {
            return Err(Error::Params(format!("VAE checkpoint in {} does not match the configured model", dir.display())));
        }
        for v in &mut state.vaes {
            let prefix = format!("mvae/{}/", v.modality);
            v.params.load_values(&vaes.with_prefix(&prefix))?;
        }
        state.bank.load_merged(&checkpoint::load(&dir.join(CHECKPOINT_FILES[1]))?)?;
    }
    state.task.params.load_values(&task)?;
    state.round = round;
    Ok(())
}

/// Runs all rounds for one seed. With `out` set, writes `metrics.csv` and
/// checkpoints (`ckpt/round_<t>/` every `checkpoint_every` rounds and
/// `final/` always) below it.
pub fn run_seed(config: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<SeedRun> {
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let data = prepare_data(config, seed)?;
    let judge = if config.coherence && config.mode.uses_generators() {
        let j = build_judge(config, &data, seed)?;
        info!("seed {seed}: judge accuracy {:?}", j.accuracy);
        Some(j)
    } else {
        None
    };
    let mut state = FederationState::new(config, data.num_classes, &data.modality_dims, seed)?;
    let ctx = EvalContext { test: &data.test, judge: judge.as_ref(), clean_test: &data.clean_test };
    let e0 = evaluate_global(&state, config, &ctx, seed)?;
    let mut metrics = vec![RoundMetrics {
        round: 0,
        mode: config.mode.as_str().into(),
        seed,
        stage1_loss: 0.0,
        stage2_loss: 0.0,
        stage3_loss: 0.0,
        top1: e0.top1,
        uar: e0.uar,
        f1: e0.f1,
        coherence: e0.coherence,
        bytes_up: 0,
        bytes_down: 0,
        wall_s: 0.0,
    }];
    let mut outcomes = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        let o = run_round(&mut state, &data.clients, config, &ctx, seed)?;
        info!(
            "seed {seed} round {} {}: top1 {:.4} coherence {:.4}",
            o.metrics.round, o.metrics.mode, o.metrics.top1, o.metrics.coherence
        );
        if o.snapshot_digest_start != o.snapshot_digest_end {
            warn!("round {}: frozen generator snapshot changed during the round", o.metrics.round);
        }
        metrics.push(o.metrics.clone());
        if let (Some(dir), true) = (out, config.checkpoint_every > 0 && state.round % config.checkpoint_every.max(1) == 0) {
            write_checkpoint(&dir.join("ckpt").join(format!("round_{}", state.round)), &state)?;
        }
        outcomes.push(o);
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), metrics_csv(&metrics))?;
        write_checkpoint(&dir.join("final"), &state)?;
        if let Some(j) = &judge {
            checkpoint::save(&j.params, &dir.join("final").join("judge.frck"))?;
        }
    }
    Ok(SeedRun { seed, metrics, outcomes, state, judge })
}

/// Runs every configured seed, writing each below `out/seed_<s>/`.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<SeedRun>> {
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    config
        .seeds
        .iter()
        .map(|&s| {
            let dir: Option<PathBuf> = out.map(|o| o.join(format!("seed_{s}")));
            run_seed(config, s, dir.as_deref())
        })
        .collect()
}

/// Re-scores the final checkpoint of a finished seed; returns the metrics of
/// the last round with losses, byte counts and time zeroed.
pub fn evaluate_checkpoint(config: &ExperimentConfig, seed: u64, dir: &Path) -> Result<RoundMetrics> {
    let data = prepare_data(config, seed)?;
    let mut state = FederationState::new(config, data.num_classes, &data.modality_dims, seed)?;
    read_checkpoint(&dir.join("final"), &mut state, config.rounds, config.mode.uses_generators())?;
    let judge = if config.coherence && config.mode.uses_generators() {
        let mut j = JudgeClassifier::new(
            data.num_classes,
            &data.modality_dims,
            64,
            &mut stream(seed, Purpose::Judge, 0, 0),
        )?;
        j.params.load_values(&checkpoint::load(&dir.join("final").join("judge.frck"))?)?;
        j.accuracy = vec![f64::NAN; data.modality_dims.len()];
        Some(j)
    } else {
        None
    };
    let ctx = EvalContext { test: &data.test, judge: judge.as_ref(), clean_test: &data.clean_test };
    let e = evaluate_global(&state, config, &ctx, seed)?;
    Ok(RoundMetrics {
        round: config.rounds,
        mode: config.mode.as_str().into(),
        seed,
        stage1_loss: 0.0,
        stage2_loss: 0.0,
        stage3_loss: 0.0,
        top1: e.top1,
        uar: e.uar,
        f1: e.f1,
        coherence: e.coherence,
        bytes_up: 0,
        bytes_down: 0,
        wall_s: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionMode;

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.dataset.train_per_class = 24;
        c.dataset.test_per_class = 10;
        c.num_clients = 3;
        c.alpha = 1.0;
        c.rounds = 2;
        c.vae_epochs = 2;
        c.map_epochs = 2;
        c.task_epochs = 2;
        c.judge_epochs = 2;
        c.latent_dim = 4;
        c.vae_hidden = vec![16];
        c.map_hidden = vec![16];
        c.task.encoder_hidden = vec![16];
        c.task.feature_dim = 8;
        c.task.attn_dim = 8;
        c
    }

    #[test]
    fn zero_rounds_gives_one_row() {
        let mut c = small();
        c.rounds = 0;
        let run = run_seed(&c, 0, None).unwrap();
        assert_eq!(run.metrics.len(), 1);
        assert_eq!(run.metrics[0].round, 0);
    }

    #[test]
    fn deterministic_csv_and_checkpoint_reload() {
        let dir = tempfile::tempdir().unwrap();
        let c = small();
        let a = run_experiment(&c, Some(dir.path())).unwrap();
        let b = run_seed(&c, 0, None).unwrap();
        assert_eq!(a[0].csv(), b.csv());
        let text = fs::read_to_string(dir.path().join("seed_0/metrics.csv")).unwrap();
        assert_eq!(text, a[0].csv());
        assert_eq!(parse_metrics_csv(&text).unwrap(), a[0].metrics);
        let re = evaluate_checkpoint(&c, 0, &dir.path().join("seed_0")).unwrap();
        let last = a[0].final_metrics();
        assert_eq!((re.top1, re.uar, re.f1, re.coherence), (last.top1, last.uar, last.f1, last.coherence));
    }

    #[test]
    fn masks_fixed_per_seed_and_test_masked() {
        let c = small();
        let d = prepare_data(&c, 3).unwrap();
        assert_eq!(d, prepare_data(&c, 3).unwrap());
        assert!(d.test.iter().any(|e| !e.all_present()));
        assert!(d.clean_test.iter().all(|e| e.all_present()));
        let n: usize = d.clients.iter().map(|c| c.examples.len()).sum();
        assert_eq!(n, d.train.len());
    }

    #[test]
    fn invalid_config_rejected_before_compute() {
        let mut c = small();
        c.rho = 2.0;
        c.num_clients = 0;
        match run_experiment(&c, None) {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 2, "{errs:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn modes_without_generators_skip_them() {
        let mut c = small();
        c.mode = FusionMode::ZeroFill;
        let run = run_seed(&c, 1, None).unwrap();
        let init = FederationState::new(&c, 4, &[16, 16], 1).unwrap();
        assert_eq!(run.state.vaes, init.vaes);
        assert_eq!(run.final_metrics().coherence, 0.0);
        assert_eq!(run.final_metrics().stage1_loss, 0.0);
    }
}
