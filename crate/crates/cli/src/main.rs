use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};
use std::{env, fs};

use clap::{Arg, ArgMatches, Command, FromArgMatches, Parser, Subcommand};
use log::warn;
use serde_json::json;

use fedrecon::config::{ExperimentConfig, KEYS, LIST_KEYS};
use fedrecon::data::{generate_dataset, save_features, FeatureHeader};
use fedrecon::experiment::{evaluate_checkpoint, metrics_csv, parse_metrics_csv, prepare_data, run_seed};
use fedrecon::fusion::FusionMode;
use fedrecon::Error;

/// Simulator for multimodal federated learning with missing-modality
/// reconstruction.
///
/// Every config key is also a flag (`--rho 0.5`). Flags beat the config file,
/// which beats the defaults. For `run`, a comma-separated flag value sweeps
/// that key (`--rho 0.1,0.5,0.9`), except for keys whose value is a list.
#[derive(Parser)]
#[command(name = "fedrecon", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every seed of a config (or of each sweep point).
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Run fedrecon, no_ggfs, no_mmr and zero_fill on the same data and seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Re-score the final checkpoint of a finished seed directory.
    Evaluate {
        /// A `<out>/<hash>/seed_<s>` directory written by `run`.
        run_dir: PathBuf,
        /// Defaults to the `config.txt` next to the seed directory.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to the number in the directory name.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the clean synthetic train and test splits as feature files.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a config and print its full rendered form.
    ValidateConfig { config: Option<PathBuf> },
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn config(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 2,
            Error::Checkpoint { .. } | Error::CheckpointVersion { .. } => 4,
            _ => 3,
        };
        Self { code, msg: e.to_string() }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn with_overrides(cmd: Command) -> Command {
    const HEADINGS: [&str; 5] = ["[data] overrides", "[federation] overrides", "[model] overrides", "[training] overrides", "[run] overrides"];
    let mut cmd = cmd;
    for ((_, keys), heading) in KEYS.iter().zip(HEADINGS) {
        for key in *keys {
            let list = LIST_KEYS.contains(key);
            cmd = cmd.arg(
                Arg::new(*key)
                    .long(*key)
                    .value_name(if list { "A,B,.." } else { "VALUE" })
                    .help_heading(heading)
                    .allow_hyphen_values(true),
            );
        }
    }
    cmd
}

fn command() -> Command {
    let mut cmd = <Cli as clap::CommandFactory>::command();
    for verb in ["run", "ablate", "gen-data", "validate-config"] {
        cmd = cmd.mut_subcommand(verb, with_overrides);
    }
    cmd
}

/// Override flags in key-table order.
fn overrides(m: &ArgMatches) -> Vec<(&'static str, String)> {
    KEYS.iter()
        .flat_map(|(_, keys)| keys.iter())
        .filter_map(|k| m.try_get_one::<String>(k).ok().flatten().map(|v| (*k, v.clone())))
        .collect()
}

fn base_config(path: Option<&Path>) -> CliResult<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?;
            ExperimentConfig::parse(&text, &p.display().to_string()).map_err(Failure::from)
        }
    }
}

/// Applies the overrides, expanding comma-separated values into a sweep when
/// `sweep` is set. Every problem of every sweep point is reported together.
fn build_configs(base: ExperimentConfig, over: &[(&'static str, String)], sweep: bool) -> CliResult<Vec<ExperimentConfig>> {
    let mut points = vec![base];
    let mut errs = Vec::new();
    for (key, value) in over {
        let values: Vec<&str> = if LIST_KEYS.contains(key) { vec![value.as_str()] } else { value.split(',').collect() };
        if values.len() > 1 && !sweep {
            errs.push(format!("--{key}: sweeps are only supported by `run`"));
            continue;
        }
        let mut next = Vec::with_capacity(points.len() * values.len());
        for p in &points {
            for v in &values {
                let mut c = p.clone();
                match c.set(key, v) {
                    Ok(()) => next.push(c),
                    Err(e) => errs.push(format!("--{key}: {e}")),
                }
            }
        }
        if !next.is_empty() {
            points = next;
        }
    }
    for c in &points {
        for e in c.validate() {
            if !errs.contains(&e) {
                errs.push(e);
            }
        }
    }
    if errs.is_empty() {
        Ok(points)
    } else {
        Err(Error::Config(errs).into())
    }
}

/// `FEDRECON_THREADS` caps the worker count; 0 means serial.
fn apply_thread_cap(c: &mut ExperimentConfig) -> CliResult {
    if let Ok(v) = env::var("FEDRECON_THREADS") {
        let cap: usize = v.trim().parse().map_err(|_| Failure::config(format!("FEDRECON_THREADS=`{v}` is not a number")))?;
        c.threads = if cap == 0 { 1 } else { c.threads.min(cap) };
    }
    Ok(())
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult {
    let text = serde_json::to_string_pretty(value).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(|e| Error::from(e).into())
}

/// Final metrics of one finished seed.
struct SeedResult {
    seed: u64,
    metrics: fedrecon::federation::RoundMetrics,
}

/// Runs all seeds of one config below `out/<hash>/`, keeping the manifest
/// current so an interrupted run is marked partial.
fn run_config(config: &ExperimentConfig, out: &Path) -> CliResult<(PathBuf, Vec<SeedResult>)> {
    let hash = config.hash();
    let dir = out.join(&hash[..16]);
    fs::create_dir_all(&dir).map_err(Error::from)?;
    fs::write(dir.join("config.txt"), config.render()).map_err(Error::from)?;
    let mut run = config.clone();
    apply_thread_cap(&mut run)?;

    let started = unix_now();
    let mut artifacts: Vec<String> = vec!["config.txt".into()];
    let manifest = |status: &str, artifacts: &[String], error: Option<&str>| {
        json!({
            "config_hash": hash,
            "mode": config.mode.as_str(),
            "seeds": config.seeds,
            "artifacts": artifacts,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "started_unix": started,
            "finished_unix": if status == "running" { None } else { Some(unix_now()) },
            "status": status,
            "error": error,
        })
    };
    write_json(&dir.join("manifest.json"), &manifest("running", &artifacts, None))?;
    let mut results = Vec::new();
    for &seed in &config.seeds {
        let seed_dir = dir.join(format!("seed_{seed}"));
        match run_seed(&run, seed, Some(&seed_dir)) {
            Ok(r) => {
                let m = r.final_metrics().clone();
                println!(
                    "{} seed {seed}: top1 {:.4} uar {:.4} f1 {:.4} coherence {:.4} -> {}",
                    m.mode,
                    m.top1,
                    m.uar,
                    m.f1,
                    m.coherence,
                    seed_dir.display()
                );
                artifacts.push(format!("seed_{seed}/metrics.csv"));
                artifacts.push(format!("seed_{seed}/final"));
                results.push(SeedResult { seed, metrics: m });
                write_json(&dir.join("manifest.json"), &manifest("running", &artifacts, None))?;
            }
            Err(e) => {
                let f = Failure::from(e);
                write_json(&dir.join("manifest.json"), &manifest("partial", &artifacts, Some(&f.msg)))?;
                return Err(f);
            }
        }
    }
    write_json(&dir.join("manifest.json"), &manifest("complete", &artifacts, None))?;
    Ok((dir, results))
}

fn cmd_run(configs: Vec<ExperimentConfig>, out: &Path) -> CliResult {
    for c in &configs {
        run_config(c, out)?;
    }
    Ok(())
}

const ABLATION_MODES: [FusionMode; 4] = [FusionMode::FedRecon, FusionMode::NoGgfs, FusionMode::NoMmr, FusionMode::ZeroFill];

fn cmd_ablate(base: ExperimentConfig, out: &Path) -> CliResult {
    let mut digests = Vec::new();
    for &seed in &base.seeds {
        digests.push((seed, prepare_data(&base, seed)?.partition_digest()));
    }
    let mut rows = vec!["mode,seed,top1,uar,f1,coherence,partition_digest,run_dir".to_string()];
    for mode in ABLATION_MODES {
        let config = ExperimentConfig { mode, ..base.clone() };
        let (dir, results) = run_config(&config, out)?;
        for r in results {
            let digest = &digests.iter().find(|(s, _)| *s == r.seed).expect("seed listed").1;
            let m = &r.metrics;
            rows.push(format!(
                "{},{},{:?},{:?},{:?},{:?},{digest},{}",
                mode.as_str(),
                r.seed,
                m.top1,
                m.uar,
                m.f1,
                m.coherence,
                dir.display()
            ));
        }
    }
    let path = out.join("ablation.csv");
    fs::write(&path, rows.join("\n") + "\n").map_err(Error::from)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn seed_from_dir(dir: &Path) -> Option<u64> {
    dir.file_name()?.to_str()?.strip_prefix("seed_")?.parse().ok()
}

fn cmd_evaluate(run_dir: &Path, config: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> CliResult {
    let config_path = match config {
        Some(p) => p.to_path_buf(),
        None => run_dir
            .parent()
            .map(|p| p.join("config.txt"))
            .ok_or_else(|| Failure::config("cannot locate config.txt; pass --config"))?,
    };
    let config = base_config(Some(&config_path))?;
    let seed = seed
        .or_else(|| seed_from_dir(run_dir))
        .ok_or_else(|| Failure::config(format!("cannot tell the seed of {}; pass --seed", run_dir.display())))?;
    let row = evaluate_checkpoint(&config, seed, run_dir)?;
    if let Ok(text) = fs::read_to_string(run_dir.join("metrics.csv")) {
        if let Some(last) = parse_metrics_csv(&text)?.into_iter().find(|m| m.round == row.round) {
            let same = (last.top1, last.uar, last.f1, last.coherence) == (row.top1, row.uar, row.f1, row.coherence);
            if !same {
                warn!("re-scored metrics differ from the training row of round {}", row.round);
            }
        }
    }
    let csv = metrics_csv(&[row]);
    match out {
        Some(p) => fs::write(p, csv).map_err(Error::from)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_gen_data(config: &ExperimentConfig, out: &Path) -> CliResult {
    let ds = generate_dataset(&config.dataset)?;
    let header = FeatureHeader { num_classes: config.dataset.num_classes, modality_dims: config.dataset.modality_dims.clone() };
    for (name, split) in [("train.frfeat", &ds.train), ("test.frfeat", &ds.test)] {
        let path = out.join(name);
        save_features(&path, &header, split)?;
        println!("wrote {} ({} examples)", path.display(), split.len());
    }
    Ok(())
}

fn dispatch(matches: &ArgMatches) -> CliResult {
    let cli = Cli::from_arg_matches(matches).map_err(|e| Failure::config(e.to_string()))?;
    let over = matches.subcommand().map(|(_, m)| overrides(m)).unwrap_or_default();
    apply_thread_cap(&mut ExperimentConfig::default())?;
    match cli.cmd {
        Cmd::Run { config, out } => cmd_run(build_configs(base_config(config.as_deref())?, &over, true)?, &out),
        Cmd::Ablate { config, out } => {
            let c = build_configs(base_config(config.as_deref())?, &over, false)?.remove(0);
            cmd_ablate(c, &out)
        }
        Cmd::Evaluate { run_dir, config, seed, out } => cmd_evaluate(&run_dir, config.as_deref(), seed, out.as_deref()),
        Cmd::GenData { config, out } => cmd_gen_data(&build_configs(base_config(config.as_deref())?, &over, false)?[0], &out),
        Cmd::ValidateConfig { config } => {
            let c = build_configs(base_config(config.as_deref())?, &over, false)?.remove(0);
            print!("{}", c.render());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = command().get_matches();
    match dispatch(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
