//! Experiment configuration and its line-oriented text form.
//!
//! ```text
//! [federation]
//! num_clients = 8
//! alpha = 0.1
//! ```
//!
//! Every key lives in exactly one section, and key names are unique across
//! sections, so a bare key also identifies its field. Sections and keys may
//! be omitted (defaults apply), unknown ones are rejected, and all errors of
//! a file are reported together. [`ExperimentConfig::render`] writes every
//! field explicitly, and parsing the rendered text gives back the same
//! config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::fusion::{FusionMode, TaskConfig};
use crate::mapping::{MappingMode, SourcePolicy};
use crate::tensor::OptimizerKind;
use crate::training::TrainSettings;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// Plain mean over participating clients.
    Uniform,
    /// Mean weighted by client example counts.
    Weighted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub train_features: Option<PathBuf>,
    pub test_features: Option<PathBuf>,

    pub num_clients: usize,
    pub alpha: f64,
    pub rho: f64,
    pub rounds: usize,
    pub min_per_client: usize,
    pub aggregation: Aggregation,
    pub threads: usize,

    pub mode: FusionMode,
    pub mapping: MappingMode,
    pub source_policy: SourcePolicy,
    pub latent_dim: usize,
    pub vae_hidden: Vec<usize>,
    pub map_hidden: Vec<usize>,
    pub task: TaskConfig,
    pub gamma: f64,
    pub lambda_syn: f64,

    pub vae_epochs: usize,
    pub vae_lr: f64,
    pub map_epochs: usize,
    pub map_lr: f64,
    pub task_epochs: usize,
    pub task_lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub judge_epochs: usize,

    pub seeds: Vec<u64>,
    pub coherence: bool,
    /// Record per-stage parameter digests for every client (slower).
    pub audit: bool,
    /// Write measured seconds to the `wall_s` column instead of 0.
    pub record_wall_time: bool,
    /// Checkpoint every this many rounds; 0 writes only the final round.
    pub checkpoint_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            train_features: None,
            test_features: None,
            num_clients: 8,
            alpha: 0.1,
            rho: 0.5,
            rounds: 30,
            min_per_client: 8,
            aggregation: Aggregation::Uniform,
            threads: 1,
            mode: FusionMode::FedRecon,
            mapping: MappingMode::Full,
            source_policy: SourcePolicy::Average,
            latent_dim: 8,
            vae_hidden: vec![64, 64],
            map_hidden: vec![64, 64],
            task: TaskConfig::default(),
            gamma: 1.0,
            lambda_syn: 0.5,
            vae_epochs: 20,
            vae_lr: 1e-3,
            map_epochs: 40,
            map_lr: 5e-3,
            task_epochs: 5,
            task_lr: 1e-3,
            batch_size: 64,
            optimizer: OptimizerKind::Adam,
            judge_epochs: 20,
            seeds: vec![0],
            coherence: true,
            audit: false,
            record_wall_time: false,
            checkpoint_every: 0,
        }
    }
}

/// Section of every key, in rendering order.
pub const KEYS: &[(&str, &[&str])] = &[
    (
        "data",
        &[
            "num_classes",
            "modality_dims",
            "train_per_class",
            "test_per_class",
            "noise_scale",
            "style_scale",
            "style_rank",
            "data_seed",
            "train_features",
            "test_features",
        ],
    ),
    ("federation", &["num_clients", "alpha", "rho", "rounds", "min_per_client", "aggregation", "threads"]),
    (
        "model",
        &[
            "mode",
            "mapping",
            "source_policy",
            "latent_dim",
            "vae_hidden",
            "map_hidden",
            "feature_dim",
            "attn_dim",
            "heads",
            "encoder_hidden",
            "gamma",
            "lambda_syn",
        ],
    ),
    (
        "training",
        &["vae_epochs", "vae_lr", "map_epochs", "map_lr", "task_epochs", "task_lr", "batch_size", "optimizer", "judge_epochs"],
    ),
    ("run", &["seeds", "coherence", "audit", "record_wall_time", "checkpoint_every"]),
];

/// Keys whose value is a comma-separated list rather than one scalar.
pub const LIST_KEYS: &[&str] = &["modality_dims", "vae_hidden", "map_hidden", "encoder_hidden", "seeds"];

pub fn section_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(_, keys)| keys.contains(&key)).map(|(s, _)| *s)
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| num(p.trim())).collect()
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{v}` is not true or false")),
    }
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl FromStr for MappingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(MappingMode::Full),
            "simplified" => Ok(MappingMode::Simplified),
            _ => Err(Error::InvalidArgument(format!("unknown mapping `{s}` (expected full or simplified)"))),
        }
    }
}

impl FromStr for SourcePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(SourcePolicy::Single),
            "average" => Ok(SourcePolicy::Average),
            _ => Err(Error::InvalidArgument(format!("unknown source_policy `{s}` (expected single or average)"))),
        }
    }
}

impl ExperimentConfig {
    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let d = &mut self.dataset;
        match key {
            "num_classes" => d.num_classes = num(v)?,
            "modality_dims" => d.modality_dims = list(v)?,
            "train_per_class" => d.train_per_class = num(v)?,
            "test_per_class" => d.test_per_class = num(v)?,
            "noise_scale" => d.noise_scale = num(v)?,
            "style_scale" => d.style_scale = num(v)?,
            "style_rank" => d.style_rank = num(v)?,
            "data_seed" => d.seed = num(v)?,
            "train_features" => self.train_features = path(v),
            "test_features" => self.test_features = path(v),
            "num_clients" => self.num_clients = num(v)?,
            "alpha" => self.alpha = num(v)?,
            "rho" => self.rho = num(v)?,
            "rounds" => self.rounds = num(v)?,
            "min_per_client" => self.min_per_client = num(v)?,
            "aggregation" => {
                self.aggregation = match v {
                    "uniform" => Aggregation::Uniform,
                    "weighted" => Aggregation::Weighted,
                    _ => return Err(format!("`{v}` is not uniform or weighted")),
                }
            }
            "threads" => self.threads = num(v)?,
            "mode" => self.mode = v.parse().map_err(|e: Error| e.to_string())?,
            "mapping" => self.mapping = v.parse().map_err(|e: Error| e.to_string())?,
            "source_policy" => self.source_policy = v.parse().map_err(|e: Error| e.to_string())?,
            "latent_dim" => self.latent_dim = num(v)?,
            "vae_hidden" => self.vae_hidden = list(v)?,
            "map_hidden" => self.map_hidden = list(v)?,
            "feature_dim" => self.task.feature_dim = num(v)?,
            "attn_dim" => self.task.attn_dim = num(v)?,
            "heads" => self.task.heads = num(v)?,
            "encoder_hidden" => self.task.encoder_hidden = list(v)?,
            "gamma" => self.gamma = num(v)?,
            "lambda_syn" => self.lambda_syn = num(v)?,
            "vae_epochs" => self.vae_epochs = num(v)?,
            "vae_lr" => self.vae_lr = num(v)?,
            "map_epochs" => self.map_epochs = num(v)?,
            "map_lr" => self.map_lr = num(v)?,
            "task_epochs" => self.task_epochs = num(v)?,
            "task_lr" => self.task_lr = num(v)?,
            "batch_size" => self.batch_size = num(v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(format!("`{v}` is not adam or sgd")),
                }
            }
            "judge_epochs" => self.judge_epochs = num(v)?,
            "seeds" => self.seeds = list(v)?,
            "coherence" => self.coherence = flag(v)?,
            "audit" => self.audit = flag(v)?,
            "record_wall_time" => self.record_wall_time = flag(v)?,
            "checkpoint_every" => self.checkpoint_every = num(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Text form of one field.
    pub fn get(&self, key: &str) -> Option<String> {
        let d = &self.dataset;
        let p = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Some(match key {
            "num_classes" => d.num_classes.to_string(),
            "modality_dims" => join(&d.modality_dims),
            "train_per_class" => d.train_per_class.to_string(),
            "test_per_class" => d.test_per_class.to_string(),
            "noise_scale" => d.noise_scale.to_string(),
            "style_scale" => d.style_scale.to_string(),
            "style_rank" => d.style_rank.to_string(),
            "data_seed" => d.seed.to_string(),
            "train_features" => p(&self.train_features),
            "test_features" => p(&self.test_features),
            "num_clients" => self.num_clients.to_string(),
            "alpha" => self.alpha.to_string(),
            "rho" => self.rho.to_string(),
            "rounds" => self.rounds.to_string(),
            "min_per_client" => self.min_per_client.to_string(),
            "aggregation" => match self.aggregation {
                Aggregation::Uniform => "uniform".into(),
                Aggregation::Weighted => "weighted".into(),
            },
            "threads" => self.threads.to_string(),
            "mode" => self.mode.as_str().into(),
            "mapping" => self.mapping.as_str().into(),
            "source_policy" => self.source_policy.as_str().into(),
            "latent_dim" => self.latent_dim.to_string(),
            "vae_hidden" => join(&self.vae_hidden),
            "map_hidden" => join(&self.map_hidden),
            "feature_dim" => self.task.feature_dim.to_string(),
            "attn_dim" => self.task.attn_dim.to_string(),
            "heads" => self.task.heads.to_string(),
            "encoder_hidden" => join(&self.task.encoder_hidden),
            "gamma" => self.gamma.to_string(),
            "lambda_syn" => self.lambda_syn.to_string(),
            "vae_epochs" => self.vae_epochs.to_string(),
            "vae_lr" => self.vae_lr.to_string(),
            "map_epochs" => self.map_epochs.to_string(),
            "map_lr" => self.map_lr.to_string(),
            "task_epochs" => self.task_epochs.to_string(),
            "task_lr" => self.task_lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "optimizer" => match self.optimizer {
                OptimizerKind::Adam => "adam".into(),
                OptimizerKind::Sgd => "sgd".into(),
            },
            "judge_epochs" => self.judge_epochs.to_string(),
            "seeds" => join(&self.seeds),
            "coherence" => self.coherence.to_string(),
            "audit" => self.audit.to_string(),
            "record_wall_time" => self.record_wall_time.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            _ => return None,
        })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, (section, keys)) in KEYS.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            writeln!(out, "[{section}]").unwrap();
            for k in *keys {
                writeln!(out, "{k} = {}", self.get(k).unwrap()).unwrap();
            }
        }
        out
    }

    /// Parses config text; `source` names the file in error messages.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut errs = Vec::new();
        let mut section: Option<&str> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            let at = |msg: String| format!("{source}:{}: {msg}", i + 1);
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                match KEYS.iter().find(|(s, _)| *s == name.trim()) {
                    Some((s, _)) => section = Some(s),
                    None => {
                        errs.push(at(format!("unknown section [{}]", name.trim())));
                        section = None;
                    }
                }
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errs.push(at(format!("expected `key = value`, got `{line}`")));
                continue;
            };
            let k = k.trim();
            match (section, section_of(k)) {
                (None, _) => errs.push(at(format!("key `{k}` outside a known section"))),
                (_, None) => errs.push(at(format!("unknown key `{k}`"))),
                (Some(s), Some(owner)) if s != owner => {
                    errs.push(at(format!("key `{k}` belongs in [{owner}], not [{s}]")))
                }
                _ => {
                    if let Err(e) = cfg.set(k, v) {
                        errs.push(at(format!("{k}: {e}")));
                    }
                }
            }
        }
        errs.extend(cfg.validate());
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Every range violation, empty when the config is usable.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.train_features.is_none() {
            errs.extend(self.dataset.validate());
        }
        if self.train_features.is_some() != self.test_features.is_some() {
            errs.push("train_features and test_features must be given together".into());
        }
        let mut check = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        check(self.num_clients >= 1, format!("num_clients = {} (must be >= 1)", self.num_clients));
        check(self.alpha > 0.0 && self.alpha.is_finite(), format!("alpha = {} (must be > 0)", self.alpha));
        check((0.0..=1.0).contains(&self.rho), format!("rho = {} (must be in [0, 1])", self.rho));
        check(self.threads >= 1, format!("threads = {} (must be >= 1)", self.threads));
        check(self.latent_dim >= 1, "latent_dim must be >= 1".into());
        check(!self.vae_hidden.contains(&0), "vae_hidden sizes must be >= 1".into());
        check(!self.map_hidden.contains(&0), "map_hidden sizes must be >= 1".into());
        check(!self.task.encoder_hidden.contains(&0), "encoder_hidden sizes must be >= 1".into());
        check(self.task.feature_dim >= 1 && self.task.attn_dim >= 1, "feature_dim and attn_dim must be >= 1".into());
        check(self.task.heads >= 1, format!("heads = {} (must be >= 1)", self.task.heads));
        check(self.gamma >= 0.0 && self.gamma.is_finite(), format!("gamma = {} (must be >= 0)", self.gamma));
        check(
            self.lambda_syn > 0.0 && self.lambda_syn <= 1.0,
            format!("lambda_syn = {} (must be in (0, 1])", self.lambda_syn),
        );
        for (name, lr) in [("vae_lr", self.vae_lr), ("map_lr", self.map_lr), ("task_lr", self.task_lr)] {
            check(lr > 0.0 && lr.is_finite(), format!("{name} = {lr} (must be > 0)"));
        }
        check(self.batch_size >= 1, "batch_size must be >= 1".into());
        check(!self.seeds.is_empty(), "seeds must list at least one seed".into());
        errs
    }

    pub fn stage1(&self) -> TrainSettings {
        self.settings(self.vae_epochs, self.vae_lr)
    }

    pub fn stage2(&self) -> TrainSettings {
        self.settings(self.map_epochs, self.map_lr)
    }

    pub fn stage3(&self) -> TrainSettings {
        self.settings(self.task_epochs, self.task_lr)
    }

    pub fn judge(&self) -> TrainSettings {
        TrainSettings { optimizer: OptimizerKind::Adam, ..self.settings(self.judge_epochs, 1e-3) }
    }

    fn settings(&self, epochs: usize, lr: f64) -> TrainSettings {
        TrainSettings { epochs, lr, batch_size: self.batch_size, optimizer: self.optimizer }
    }

    /// Hex sha256 of the rendered form.
    pub fn hash(&self) -> String {
        Sha256::digest(self.render().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_defaults() {
        assert_eq!(ExperimentConfig::parse("", "c").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn every_key_round_trips() {
        let all: Vec<&str> = KEYS.iter().flat_map(|(_, k)| k.iter().copied()).collect();
        let mut uniq = all.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), all.len(), "keys must be unique across sections");
        let cfg = ExperimentConfig::default();
        for k in all {
            let mut c = cfg.clone();
            c.set(k, &cfg.get(k).unwrap()).unwrap();
            assert_eq!(c, cfg, "{k}");
        }
    }

    #[test]
    fn render_parse_fixed_point() {
        let mut cfg = ExperimentConfig::default();
        cfg.alpha = 5.0;
        cfg.rho = 0.3;
        cfg.mode = FusionMode::NoGgfs;
        cfg.seeds = vec![0, 1, 2];
        cfg.train_features = Some("a.txt".into());
        cfg.test_features = Some("b.txt".into());
        cfg.vae_lr = 0.000123;
        let text = cfg.render();
        let back = ExperimentConfig::parse(&text, "c").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.render(), text);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(ExperimentConfig::default().hash(), cfg.hash());
    }

    #[test]
    fn all_errors_listed_with_lines() {
        let text = "[federation]\nalpha = -1\nbogus = 3\n[model]\nrho = 0.5\nmode = fancy\n[nope]\nrounds = x\n";
        match ExperimentConfig::parse(text, "c.ini") {
            Err(Error::Config(errs)) => {
                let joined = errs.join("\n");
                assert!(joined.contains("c.ini:3: unknown key `bogus`"), "{joined}");
                assert!(joined.contains("c.ini:5: key `rho` belongs in [federation]"), "{joined}");
                assert!(joined.contains("c.ini:6: mode"), "{joined}");
                assert!(joined.contains("c.ini:7: unknown section [nope]"), "{joined}");
                assert!(joined.contains("c.ini:8: key `rounds` outside"), "{joined}");
                assert!(joined.contains("alpha = -1"), "{joined}");
                assert_eq!(errs.len(), 6, "{joined}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn comments_and_whitespace() {
        let cfg = ExperimentConfig::parse("# top\n[run]\n  seeds =  1, 2 # two seeds\n", "c").unwrap();
        assert_eq!(cfg.seeds, vec![1, 2]);
    }
}
