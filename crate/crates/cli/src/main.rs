//! `episeg`: dataset generation, training, evaluation, ablations, and
//! gradient checks from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use episeg::ablation::{self, Axis};
use episeg::config::RunConfig;
use episeg::data::{dataset_seed, Dataset};
use episeg::eval::{self, Report};
use episeg::gradcheck;
use episeg::manifest::{hash_file, Manifest};
use episeg::model::{self, checkpoint, with_threads};

#[derive(Parser)]
#[command(name = "episeg", version, about = "Few-shot segmentation with memory re-encoding and feature augmentation")]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic shape dataset.
    GenerateData(GenerateArgs),
    /// Train on the base classes of one fold and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on the novel classes of its fold.
    Eval(EvalArgs),
    /// Train and score all four folds.
    CrossValidate(RunArgs),
    /// Compare settings along one ablation axis.
    Ablate(AblateArgs),
    /// Finite-difference check of every differentiable component.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Key-value config file or the `manifest.json` of an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Key-value config file or a run manifest (`.json`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory; generated in memory from the seed when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k_shot: Option<usize>,
    /// Worker threads (0: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    fold: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    axis: String,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    fold: Option<usize>,
    /// Comma-separated seeds; defaults to the run seed alone.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Negate one component's analytic gradient to confirm the check fails.
    #[arg(long, value_name = "COMPONENT")]
    inject_sign_flip: Option<String>,
    /// Also write the table as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Marks errors that are the caller's fault (exit code 1).
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn lift(e: episeg::Error) -> anyhow::Error {
    match e {
        episeg::Error::Config(_) | episeg::Error::UnknownConfigKey(_) => usage(e.to_string()),
        other => other.into(),
    }
}

/// Defaults, then `--config`, then `EPISEG_SEED`, then flags and `--set`.
fn build_config(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(p) => {
            if !p.exists() {
                return Err(usage(format!("config file {} does not exist", p.display())));
            }
            RunConfig::from_path(p).map_err(lift)?
        }
        None => RunConfig::default(),
    };
    if let Ok(s) = std::env::var("EPISEG_SEED") {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| usage(format!("EPISEG_SEED=`{s}` is not an unsigned integer")))?;
    }
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(k) = run.k_shot {
        cfg.train.k_shot = k;
    }
    if let Some(t) = run.threads {
        cfg.threads = t;
    }
    for kv in &run.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim()).map_err(lift)?;
    }
    Ok(cfg)
}

/// Loads `--data` or renders the dataset implied by the config and seed.
/// The config's data section is aligned with whatever is used.
fn dataset(cfg: &mut RunConfig, data: Option<&Path>) -> Result<(Dataset, serde_json::Value)> {
    match data {
        Some(dir) => {
            let ds = Dataset::load(dir)
                .with_context(|| format!("loading dataset from {}", dir.display()))?;
            cfg.data = ds.data_config();
            let h = hash_file(&dir.join("dataset.json"))?;
            let info = serde_json::json!({"dir": dir.display().to_string(), "dataset_json_sha256": h});
            Ok((ds, info))
        }
        None => {
            let seed = dataset_seed(cfg.seed);
            let ds = Dataset::generate(&cfg.data, seed).map_err(lift)?;
            Ok((ds, serde_json::json!({"generated_with_seed": seed})))
        }
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) if !p.exists() => {
            return Err(usage(format!("config file {} does not exist", p.display())))
        }
        Some(p) => RunConfig::from_path(p).map_err(lift)?,
        None => RunConfig::default(),
    };
    if let Ok(s) = std::env::var("EPISEG_SEED") {
        cfg.seed = s.trim().parse().map_err(|_| usage("EPISEG_SEED is not an unsigned integer"))?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(c) = a.classes {
        cfg.data.classes = c;
    }
    if let Some(n) = a.samples_per_class {
        cfg.data.samples_per_class = n;
    }
    if let Some(s) = a.image_size {
        cfg.data.image_size = s;
    }
    let ds = episeg::data::generate_dataset(&cfg.data, cfg.seed, &a.out).map_err(lift)?;
    let mut m = Manifest::new("generate-data", &cfg);
    m.extra = serde_json::json!({"classes": ds.num_classes(), "samples_per_class": ds.meta.samples_per_class});
    m.hash_dir(&a.out)?;
    m.write(&a.out.join("manifest.json"))?;
    println!(
        "wrote {} classes x {} samples ({}x{}) to {}",
        ds.num_classes(),
        ds.meta.samples_per_class,
        ds.image_size(),
        ds.image_size(),
        a.out.display()
    );
    Ok(())
}

fn write_metrics(path: &Path, history: &[model::EpochLog]) -> Result<()> {
    let mut text = String::from("epoch,seg_loss,recon_loss,train_miou,probe_recon,grad_norm\n");
    for h in history {
        text.push_str(&format!(
            "{},{:.6},{:.6},{},{:.6},{:.6}\n",
            h.epoch,
            h.seg_loss,
            h.recon_loss,
            h.train_miou.map_or("".into(), |v| format!("{v:.6}")),
            h.probe_recon,
            h.grad_norm
        ));
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = build_config(&a.run)?;
    if let Some(f) = a.fold {
        cfg.train.fold = f;
    }
    let (ds, data_info) = dataset(&mut cfg, a.run.data.as_deref())?;
    cfg.validate().map_err(lift)?;
    let outcome = model::train(&cfg, &ds).map_err(lift)?;
    fs::create_dir_all(&a.run.out)?;
    write_metrics(&a.run.out.join("metrics.csv"), &outcome.history)?;
    let mut manifest = checkpoint::save(&outcome, &a.run.out)?;
    if let serde_json::Value::Object(map) = &mut manifest.extra {
        map.insert("data".into(), data_info);
    }
    manifest.write(&a.run.out.join(checkpoint::MANIFEST))?;
    let last = outcome
        .history
        .last()
        .map_or_else(|| "n/a".to_string(), |h| format!("{:.4}", h.seg_loss));
    println!(
        "trained fold {} ({}-shot, {} epochs); final seg loss {last}; checkpoint in {}",
        cfg.train.fold,
        cfg.train.k_shot,
        outcome.history.len(),
        a.run.out.display()
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    if !a.checkpoint.join(checkpoint::MANIFEST).exists() {
        return Err(usage(format!(
            "no checkpoint at {} (run `episeg train --out {}` first)",
            a.checkpoint.display(),
            a.checkpoint.display()
        )));
    }
    let (mut m, ck_manifest) = checkpoint::load(&a.checkpoint)?;
    if let Some(t) = a.threads {
        m.config.threads = t;
    }
    let trained_k = m.config.train.k_shot;
    let k = a.k_shot.unwrap_or(trained_k);
    if k != trained_k && m.config.eval.kshot_retrain {
        return Err(usage(format!(
            "checkpoint was trained {trained_k}-shot; evaluating {k}-shot needs a {k}-shot checkpoint \
             (or eval.kshot_retrain=false at training time)"
        )));
    }
    let mut cfg = m.config.clone();
    let (ds, data_info) = dataset(&mut cfg, a.data.as_deref())?;
    if cfg.data != m.config.data {
        return Err(usage("dataset does not match the checkpoint's data configuration"));
    }
    let episodes = a.episodes.unwrap_or(cfg.eval.episodes);
    let fold = cfg.train.fold;
    let result = with_threads(cfg.threads, || {
        eval::evaluate(&m, &ds, fold, k, episodes, eval::test_seed(cfg.seed, fold))
    })?;
    let report = Report::new(&cfg, vec![result]);
    report.write(&a.out)?;
    let mut manifest = Manifest::new("eval", &cfg);
    manifest.extra = serde_json::json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "checkpoint_artifacts": ck_manifest.artifacts,
        "k_shot": k,
        "episodes": episodes,
        "data": data_info,
    });
    manifest.hash_dir(&a.out)?;
    manifest.write(&a.out.join("manifest.json"))?;
    println!("fold {fold} {k}-shot mIoU {:.4} over {episodes} episodes", report.average);
    Ok(())
}

fn cross_validate_cmd(a: RunArgs) -> Result<()> {
    let mut cfg = build_config(&a)?;
    let (ds, data_info) = dataset(&mut cfg, a.data.as_deref())?;
    cfg.validate().map_err(lift)?;
    let report = eval::cross_validate(&cfg, &ds).map_err(lift)?;
    report.write(&a.out)?;
    let mut manifest = Manifest::new("cross-validate", &cfg);
    manifest.extra = serde_json::json!({"data": data_info});
    manifest.hash_dir(&a.out)?;
    manifest.write(&a.out.join("manifest.json"))?;
    for f in &report.folds {
        println!("fold {}: mIoU {:.4}", f.fold, f.miou);
    }
    println!("average: {:.4}", report.average);
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let axis: Axis = a.axis.parse().map_err(lift)?;
    let mut cfg = build_config(&a.run)?;
    if let Some(f) = a.fold {
        cfg.train.fold = f;
    }
    let (ds, data_info) = dataset(&mut cfg, a.run.data.as_deref())?;
    cfg.validate().map_err(lift)?;
    let seeds = if a.seeds.is_empty() { vec![cfg.seed] } else { a.seeds.clone() };
    let table = ablation::run(&cfg, &ds, axis, &seeds).map_err(lift)?;
    fs::create_dir_all(&a.run.out)?;
    table.write_csv(&a.run.out.join("ablation.csv"))?;
    let tj = a.run.out.join("ablation.json");
    fs::write(&tj, serde_json::to_string_pretty(&table)? + "\n")?;
    let mut manifest = Manifest::new("ablate", &cfg);
    manifest.extra = serde_json::json!({"axis": a.axis, "seeds": seeds, "data": data_info});
    manifest.hash_dir(&a.run.out)?;
    manifest.write(&a.run.out.join("manifest.json"))?;
    for r in &table.rows {
        println!("{:<16} median mIoU {:.4} (seeds {:?})", r.label, r.median, r.seeds);
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<bool> {
    if let Some(c) = &a.inject_sign_flip {
        if !gradcheck::COMPONENTS.contains(&c.as_str()) {
            return Err(usage(format!(
                "unknown component `{c}` (expected one of {})",
                gradcheck::COMPONENTS.join(", ")
            )));
        }
    }
    let report = gradcheck::run_suite(a.seed, a.inject_sign_flip.as_deref())?;
    println!("{:<12} {:>12} {:>10} {:>8}  status", "component", "max_rel_err", "tolerance", "entries");
    for r in &report.rows {
        println!(
            "{:<12} {:>12.3e} {:>10.0e} {:>8}  {}",
            r.component,
            r.max_rel_err,
            r.tolerance,
            r.entries,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("gradcheck.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    if !report.passed() {
        eprintln!("gradient check failed: {}", report.failures().join(", "));
    }
    Ok(report.passed())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenerateData(a) => generate(a).map(|_| true),
        Command::Train(a) => train_cmd(a).map(|_| true),
        Command::Eval(a) => eval_cmd(a).map(|_| true),
        Command::CrossValidate(a) => cross_validate_cmd(a).map(|_| true),
        Command::Ablate(a) => ablate_cmd(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
