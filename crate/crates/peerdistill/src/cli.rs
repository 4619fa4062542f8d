//! Command-line entry points: train, eval, fewshot, verify.
//!
//! Configuration precedence is file, then `--override key=value` pairs in
//! the order given, then `--seed`. Training writes the resolved snapshot
//! into the run directory as both `manifest.json` and `config.toml`, so a
//! run can be reproduced from its own artifacts with no other inputs.

use crate::config::TrainConfig;
use crate::data::{load_cifar100, synthetic, IndexedDataset, Split};
use crate::error::{Error, Result};
use crate::eval::{ensemble_top1_error, peer_top1_error};
use crate::fewshot::{embed_dataset, episodic_accuracy, random_embeddings, EmbedSource};
use crate::trainer::{fit, restore_checkpoint, CHECKPOINT_VERSION};
use crate::verify::run_suite;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Peer classifiers trained jointly with distillation and contrastive
/// regularization; one deployment network exported at the end.
#[derive(Debug, Parser)]
#[command(name = "peerdistill", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the configured dataset and write run artifacts.
    Train(TrainArgs),
    /// Report a checkpoint's top-1 test error.
    Eval(EvalArgs),
    /// Episodic few-shot evaluation of a checkpoint's embeddings.
    Fewshot(FewshotArgs),
    /// Run the numerical verification suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Path to a TOML config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Model seed; takes precedence over the config file and any override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory for metrics, checkpoints, and the manifest.
    /// Defaults to `run-seed<seed>` under the working directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Set one config field, e.g. `--override beta=0.05`. Repeatable;
    /// applied in order after the file is read.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluate the exported deployment peer or the logit-averaged ensemble.
    #[arg(long, value_enum, default_value_t = EvalMode::Deploy)]
    pub mode: EvalMode,
    /// Where to append the result record; defaults to the checkpoint's
    /// directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Deploy,
    Ensemble,
}

impl EvalMode {
    fn as_str(self) -> &'static str {
        match self {
            EvalMode::Deploy => "deploy",
            EvalMode::Ensemble => "ensemble",
        }
    }
}

#[derive(Debug, Args)]
pub struct FewshotArgs {
    /// Checkpoint whose embeddings are evaluated.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub way: usize,
    #[arg(long, default_value_t = 1)]
    pub shot: usize,
    #[arg(long, default_value_t = 600)]
    pub episodes: usize,
    /// Query images per episode class.
    #[arg(long, default_value_t = 15)]
    pub query: usize,
    /// Episode-sampling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Representation to evaluate; defaults to the checkpoint config's
    /// `embed_source`. `random` scores a data-independent baseline.
    #[arg(long, value_enum)]
    pub source: Option<SourceArg>,
    /// Where to append the result record; defaults to the checkpoint's
    /// directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Gap,
    Head,
    Random,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Maximum relative error accepted by every check.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

/// Dispatch one parsed invocation and return the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Fewshot(args) => cmd_fewshot(args),
        Command::Verify(args) => cmd_verify(args),
    }
}

/// Exit code for a failed invocation: 2 for configuration problems, 1 for
/// everything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn resolve_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::from_file(&args.config)?;
    for pair in &args.overrides {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            Error::Config(format!("override '{pair}' is not of the form key=value"))
        })?;
        cfg.apply_override(key.trim(), value.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn data_root() -> Result<PathBuf> {
    std::env::var_os("PEERDISTILL_DATA_ROOT")
        .map(PathBuf::from)
        .ok_or_else(|| {
            Error::Config(
                "field 'dataset': cifar100 requires the PEERDISTILL_DATA_ROOT \
                 environment variable to point at the dataset directory"
                    .to_string(),
            )
        })
}

fn load_split(cfg: &TrainConfig, split: Split) -> Result<IndexedDataset> {
    match cfg.dataset.as_str() {
        "synthetic" => synthetic(&cfg.synthetic_spec(), split),
        "cifar100" => load_cifar100(&data_root()?, split),
        other => Err(Error::Config(format!(
            "field 'dataset': unsupported value '{other}'"
        ))),
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    seed: u64,
    crate_version: &'static str,
    checkpoint_version: u32,
    config: &'a TrainConfig,
}

fn write_manifest(dir: &Path, cfg: &TrainConfig) -> Result<()> {
    let manifest = Manifest {
        seed: cfg.seed,
        crate_version: env!("CARGO_PKG_VERSION"),
        checkpoint_version: CHECKPOINT_VERSION,
        config: cfg,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = dir.join("manifest.json");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(path.display().to_string(), e))?;
    let toml = toml::to_string_pretty(cfg).expect("config serializes");
    let path = dir.join("config.toml");
    std::fs::write(&path, toml).map_err(|e| Error::io(path.display().to_string(), e))
}

fn append_jsonl<T: Serialize>(dir: &Path, name: &str, record: &T) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let path = dir.join(name);
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let line = serde_json::to_string(record).expect("record serializes");
    writeln!(file, "{line}").map_err(|e| Error::io(path.display().to_string(), e))
}

fn checkpoint_dir(checkpoint: &Path, out_dir: Option<PathBuf>) -> PathBuf {
    out_dir.unwrap_or_else(|| {
        let parent = checkpoint.parent().unwrap_or_else(|| Path::new("."));
        if parent.as_os_str().is_empty() {
            PathBuf::from(".")
        } else {
            parent.to_path_buf()
        }
    })
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let cfg = resolve_config(&args)?;
    let out_dir = args
        .out_dir
        .unwrap_or_else(|| PathBuf::from(format!("run-seed{}", cfg.seed)));
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    write_manifest(&out_dir, &cfg)?;

    let train_data = load_split(&cfg, Split::Train)?;
    let test_data = load_split(&cfg, Split::Test)?;
    let report = fit(&cfg, &train_data, &test_data, Some(&out_dir))?;

    if let Some(last) = report.history.last() {
        println!(
            "trained {} epochs (seed {}); deploy error {:.2}% on the held-out set",
            report.history.len(),
            cfg.seed,
            last.eval_error
        );
    } else {
        println!("zero epochs requested; wrote manifest and final checkpoint only");
    }
    if let Some(best) = report.best_epoch {
        println!("best epoch {best}; artifacts in {}", out_dir.display());
    } else {
        println!("artifacts in {}", out_dir.display());
    }
    Ok(0)
}

#[derive(Serialize)]
struct EvalRecord {
    checkpoint: String,
    mode: &'static str,
    epoch: usize,
    error: f64,
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let (state, cfg) = restore_checkpoint(&args.checkpoint, None)?;
    let test_data = load_split(&cfg, Split::Test)?;
    let error = match args.mode {
        EvalMode::Deploy => {
            peer_top1_error(&state.graph, state.graph.peer_count() - 1, &test_data)?
        }
        EvalMode::Ensemble => ensemble_top1_error(&state.graph, &test_data)?,
    };
    let record = EvalRecord {
        checkpoint: args.checkpoint.display().to_string(),
        mode: args.mode.as_str(),
        epoch: state.epoch,
        error,
    };
    println!(
        "{} top-1 error {:.2}% (epoch {})",
        record.mode, record.error, record.epoch
    );
    let dir = checkpoint_dir(&args.checkpoint, args.out_dir);
    append_jsonl(&dir, "eval.jsonl", &record)?;
    Ok(0)
}

#[derive(Serialize)]
struct FewshotRecord {
    checkpoint: String,
    source: &'static str,
    seed: u64,
    way: usize,
    shot: usize,
    episodes: usize,
    mean: f64,
    ci: f64,
}

fn cmd_fewshot(args: FewshotArgs) -> Result<i32> {
    let (state, cfg) = restore_checkpoint(&args.checkpoint, None)?;
    let test_data = load_split(&cfg, Split::Test)?;

    let source = match args.source {
        Some(SourceArg::Gap) => Some(EmbedSource::DeployGap),
        Some(SourceArg::Head) => Some(EmbedSource::ContrastiveHead),
        Some(SourceArg::Random) => None,
        None => Some(cfg.embed_source()?),
    };
    let (embeddings, source_name) = match source {
        Some(s) => (
            embed_dataset(&state.graph, s, &test_data)?,
            match s {
                EmbedSource::DeployGap => "gap",
                EmbedSource::ContrastiveHead => "head",
            },
        ),
        None => (random_embeddings(&test_data, cfg.embed_dim)?, "random"),
    };

    let mut rng = ChaCha20Rng::seed_from_u64(args.seed);
    let result = episodic_accuracy(
        &embeddings,
        &test_data,
        args.way,
        args.shot,
        args.query,
        args.episodes,
        &mut rng,
    )?;
    let record = FewshotRecord {
        checkpoint: args.checkpoint.display().to_string(),
        source: source_name,
        seed: args.seed,
        way: result.way,
        shot: result.shot,
        episodes: result.episodes,
        mean: result.mean,
        ci: result.ci,
    };
    println!(
        "{}-way {}-shot over {} episodes ({} embeddings): {:.2} ± {:.2}",
        record.way, record.shot, record.episodes, record.source, record.mean, record.ci
    );
    let dir = checkpoint_dir(&args.checkpoint, args.out_dir);
    append_jsonl(&dir, "fewshot.jsonl", &record)?;
    Ok(0)
}

fn cmd_verify(args: VerifyArgs) -> Result<i32> {
    let reports = run_suite(args.tolerance)?;
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status} {} (max err {:.3e}, tolerance {:.1e})",
            r.name, r.max_err, r.tol
        );
        if !r.passed() {
            failed.push(r.name.as_str());
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed", reports.len());
        Ok(0)
    } else {
        eprintln!("failed checks: {}", failed.join(", "));
        Ok(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("config.toml");
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn overrides_apply_in_order_and_seed_flag_wins() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "dataset = \"synthetic\"\nseed = 2\n");
        let args = TrainArgs {
            config: path,
            seed: Some(9),
            out_dir: None,
            overrides: vec![
                "beta=0.08".to_string(),
                "beta=0.125".to_string(),
                "seed=5".to_string(),
            ],
        };
        let cfg = resolve_config(&args).unwrap();
        assert_eq!(cfg.beta, 0.125, "later overrides replace earlier ones");
        assert_eq!(cfg.seed, 9, "--seed outranks the file and overrides");
    }

    #[test]
    fn shapeless_override_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "dataset = \"synthetic\"\n");
        let args = TrainArgs {
            config: path,
            seed: None,
            out_dir: None,
            overrides: vec!["beta0.05".to_string()],
        };
        match resolve_config(&args) {
            Err(Error::Config(msg)) => assert!(msg.contains("key=value"), "{msg}"),
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_names_the_seed_and_versions() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = TrainConfig::default();
        cfg.dataset = "synthetic".to_string();
        cfg.seed = 31;
        write_manifest(dir.path(), &cfg).unwrap();

        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(manifest["seed"], 31);
        assert_eq!(manifest["crate_version"], env!("CARGO_PKG_VERSION"));
        assert_eq!(manifest["config"]["seed"], 31);

        let round =
            TrainConfig::from_file(&dir.path().join("config.toml")).unwrap();
        assert_eq!(round, cfg, "the snapshot reproduces the resolved config");
    }
}
