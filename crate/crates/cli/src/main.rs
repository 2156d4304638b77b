//! `sprout` — experiment runner: train, attack, evaluate, and analyze
//! models from a plain-text config, writing all artifacts (plus the resolved
//! config) into a self-describing output directory.

mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use sprout_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use sprout_core::error::Error as CoreError;
use sprout_core::eval::{
    accuracy, beta_correlation_csv, evaluate, gradient_diversity, loss_landscape,
    robust_accuracy, runtime_benchmark,
};
use sprout_core::train::train;
use sprout_core::vicinity::VicinityMode;

use config::RawConfig;

#[derive(Debug)]
pub enum CliError {
    /// bad config/arguments -> exit 2
    Config(String),
    /// missing or malformed data/checkpoint files -> exit 3
    Data(String),
    /// numeric failure (divergence, non-finite values) -> exit 4
    Numeric(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config: {m}"),
            CliError::Data(m) => write!(f, "data: {m}"),
            CliError::Numeric(m) => write!(f, "numeric: {m}"),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Data(_) | CoreError::Io(_) | CoreError::Checkpoint(_) => {
                CliError::Data(e.to_string())
            }
            CoreError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            CoreError::InvalidArgument(_) => CliError::Config(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

#[derive(Parser)]
#[command(name = "sprout", about = "robust-training laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct RunArgs {
    /// INI-style experiment config
    #[arg(long)]
    config: PathBuf,
    /// override a config value: --set section.key=value (repeatable)
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.ckpt and history.csv
    Train(RunArgs),
    /// Attack a checkpoint; writes attack_report.json
    Attack(RunArgs),
    /// Clean accuracy and invariance suite; writes eval_report.json
    Eval(RunArgs),
    /// Loss-landscape grid around evaluation examples; writes landscape.csv
    Landscape(RunArgs),
    /// Pairwise input-gradient cosine across checkpoints; writes diversity.csv
    Diversity(RunArgs),
    /// Wall-clock comparison across training modes; writes bench.csv
    Bench(RunArgs),
    /// Train and attack every module on/off combination; writes ablate.csv
    Ablate(RunArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::Train(a) => ("train", a),
        Command::Attack(a) => ("attack", a),
        Command::Eval(a) => ("eval", a),
        Command::Landscape(a) => ("landscape", a),
        Command::Diversity(a) => ("diversity", a),
        Command::Bench(a) => ("bench", a),
        Command::Ablate(a) => ("ablate", a),
    };
    match run(name, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: &str, args: &RunArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let mut cfg = RawConfig::parse(&text)?;
    for expr in &args.set {
        cfg.apply_set(expr)?;
    }

    let outdir = cfg.output_dir(command)?;
    fs::create_dir_all(&outdir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", outdir.display())))?;
    write(&outdir.join("resolved.ini"), &cfg.render())?;

    match command {
        "train" => cmd_train(&cfg, &outdir),
        "attack" => cmd_attack(&cfg, &outdir),
        "eval" => cmd_eval(&cfg, &outdir),
        "landscape" => cmd_landscape(&cfg, &outdir),
        "diversity" => cmd_diversity(&cfg, &outdir),
        "bench" => cmd_bench(&cfg, &outdir),
        "ablate" => cmd_ablate(&cfg, &outdir),
        _ => unreachable!("clap restricts the command set"),
    }
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn load_model(cfg: &RawConfig) -> Result<(Checkpoint, sprout_core::model::Model), CliError> {
    let ckpt = load_checkpoint(&cfg.checkpoint_path()?)?;
    let model = ckpt.model();
    Ok((ckpt, model))
}

fn cmd_train(cfg: &RawConfig, outdir: &Path) -> Result<(), CliError> {
    let dataset = cfg.load_dataset()?;
    let config = cfg.train_config()?;
    let (ckpt, history) = train(&dataset, &config)?;
    save_checkpoint(&outdir.join("model.ckpt"), &ckpt)?;
    write(&outdir.join("history.csv"), &history.to_csv())?;
    if let Some(beta) = &ckpt.beta {
        write(&outdir.join("beta_correlation.csv"), &beta_correlation_csv(beta))?;
    }
    let last = history.records.last().expect("epochs >= 1");
    println!("trained {} epochs; final clean accuracy {:.4}", config.epochs, last.clean_acc);
    Ok(())
}

fn cmd_attack(cfg: &RawConfig, outdir: &Path) -> Result<(), CliError> {
    let dataset = cfg.load_dataset()?;
    let (ckpt, model) = load_model(cfg)?;
    ckpt.expect_classes(dataset.num_classes)?;
    let dataset = dataset.sample(cfg.eval_examples()?, ckpt.master_seed)?;
    let spec = cfg.attack_spec()?;
    let clean = accuracy(&model, &dataset)?;
    let robust = robust_accuracy(&model, &dataset, &spec)?;
    let report = json!({
        "dataset": dataset.name,
        "examples": dataset.len(),
        "attack": spec,
        "clean_accuracy": clean,
        "robust_accuracy": robust,
    });
    write(&outdir.join("attack_report.json"), &serde_json::to_string_pretty(&report).unwrap())?;
    println!("clean {clean:.4}, robust {robust:.4} at epsilon {}", spec.epsilon);
    Ok(())
}

fn cmd_eval(cfg: &RawConfig, outdir: &Path) -> Result<(), CliError> {
    let dataset = cfg.load_dataset()?;
    let (ckpt, model) = load_model(cfg)?;
    ckpt.expect_classes(dataset.num_classes)?;
    let dataset = dataset.sample(cfg.eval_examples()?, ckpt.master_seed)?;
    let report = evaluate(&model, &dataset, &[])?;
    write(&outdir.join("eval_report.json"), &report.to_json()?)?;
    println!("clean accuracy {:.4} on {} examples", report.clean_accuracy, report.examples);
    Ok(())
}

fn cmd_landscape(cfg: &RawConfig, outdir: &Path) -> Result<(), CliError> {
    let dataset = cfg.load_dataset()?;
    let (ckpt, model) = load_model(cfg)?;
    ckpt.expect_classes(dataset.num_classes)?;
    let n = cfg.eval_examples()?.min(50);
    let dataset = dataset.sample(n, ckpt.master_seed)?;
    let (max_mag, n_grid) = cfg.landscape_params()?;
    let scape = loss_landscape(&model, &dataset, max_mag, n_grid, ckpt.master_seed)?;
    write(&outdir.join("landscape.csv"), &scape.to_csv())?;
    println!("grid range {:.4} over {} examples", scape.range(), dataset.len());
    Ok(())
}

fn cmd_diversity(cfg: &RawConfig, outdir: &Path) -> Result<(), CliError> {
    let dataset = cfg.load_dataset()?;
    let paths = cfg.checkpoint_paths()?;
    if paths.len() < 2 {
        return Err(CliError::Config("diversity needs >= 2 model.checkpoints".into()));
    }
    let mut models = Vec::new();
    let mut seed = 0;
    for p in &paths {
        let ckpt = load_checkpoint(p)?;
        ckpt.expect_classes(dataset.num_classes)?;
        seed = ckpt.master_seed;
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        models.push((name, ckpt.model()));
    }
    let dataset = dataset.sample(cfg.eval_examples()?, seed)?;
    let d = gradient_diversity(&models, &dataset)?;
    write(&outdir.join("diversity.csv"), &d.to_csv())?;
    println!(
        "{} models over {} examples ({} zero-gradient examples excluded)",
        models.len(),
        d.examples_used,
        d.zero_grad_examples
    );
    Ok(())
}

fn cmd_bench(cfg: &RawConfig, outdir: &Path) -> Result<(), CliError> {
    let dataset = cfg.load_dataset()?;
    let mut base = cfg.train_config()?;
    base.epochs = cfg.bench_epochs()?;
    let entries = runtime_benchmark(&dataset, &cfg.bench_modes()?, &base)?;
    let mut csv = String::from("mode,seconds,ratio_to_natural\n");
    for e in &entries {
        csv.push_str(&format!("{},{},{}\n", e.mode, e.seconds, e.ratio_to_natural));
        println!("{:12} {:8.2}s  {:.2}x natural", e.mode, e.seconds, e.ratio_to_natural);
    }
    write(&outdir.join("bench.csv"), &csv)?;
    Ok(())
}

fn cmd_ablate(cfg: &RawConfig, outdir: &Path) -> Result<(), CliError> {
    let dataset = cfg.load_dataset()?;
    let base = cfg.train_config()?;
    let spec = cfg.attack_spec()?;
    let eval_ds = dataset.sample(cfg.eval_examples()?, base.seed)?;
    let (alpha, a, delta) = match cfg.mode()? {
        VicinityMode::Sprout { alpha, a, delta } => (alpha, a, delta),
        VicinityMode::Combo { alpha, a, delta, .. } => (alpha, a, delta),
        _ => (0.01, 0.2, 0.1),
    };

    let mut csv = String::from("combination,clean_accuracy,robust_accuracy\n");
    for bits in 0..8u8 {
        let mode = VicinityMode::Combo {
            ga: bits & 1 != 0,
            mixup: bits & 2 != 0,
            dirichlet: bits & 4 != 0,
            alpha,
            a,
            delta,
        };
        let name = mode.name();
        let mut config = base.clone();
        config.mode = mode;
        let (ckpt, _) = train(&dataset, &config)?;
        let model = ckpt.model();
        let clean = accuracy(&model, &eval_ds)?;
        let robust = robust_accuracy(&model, &eval_ds, &spec)?;
        let report = json!({
            "combination": name,
            "clean_accuracy": clean,
            "robust_accuracy": robust,
            "attack": spec,
            "epochs": config.epochs,
        });
        write(
            &outdir.join(format!("ablate_{}.json", name.replace('+', "_"))),
            &serde_json::to_string_pretty(&report).unwrap(),
        )?;
        csv.push_str(&format!("{name},{clean},{robust}\n"));
        println!("{name:22} clean {clean:.4}  robust {robust:.4}");
    }
    write(&outdir.join("ablate.csv"), &csv)?;
    Ok(())
}
