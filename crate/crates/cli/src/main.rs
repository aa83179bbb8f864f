//! `faithsae` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use faithsae::experiment::{self, ExperimentConfig, PropertyStatus, Run, Stage};

#[derive(Parser, Debug)]
#[command(name = "faithsae", version, about = "Train TopK SAEs on a tiny LM's own samples and measure faithfulness")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Experiment config (JSON).
    #[arg(long, global = true, default_value = "configs/demo.json")]
    config: PathBuf,
    /// Run directory; defaults to the config's `out_dir`, else `runs/<name>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace the SAE seeds with N, N+1, ...
    #[arg(long, global = true, value_name = "N")]
    seed_override: Option<u64>,
    /// Worker threads for independent runs.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Override a config field, e.g. `--set sae.steps=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the subject model on grammar text.
    TrainLm,
    /// Build every configured corpus and its statistics.
    Generate,
    /// Train one SAE per dataset and seed.
    Train,
    /// Shared feature ratio across seed pairs.
    Match,
    /// Faithfulness grid and fake feature ratio.
    Evaluate,
    /// Linear probes on hidden states, SAE features and reconstructions.
    Probe,
    /// Consolidated report with every property evaluated.
    Report {
        /// Run every earlier stage first.
        #[arg(long)]
        all: bool,
        /// Another run directory expected to hold identical artifacts.
        #[arg(long, value_name = "DIR")]
        compare: Option<PathBuf>,
        /// Exit with status 4 when a property fails.
        #[arg(long)]
        strict: bool,
    },
}

fn load_run(g: &Global) -> anyhow::Result<Run> {
    let mut cfg = ExperimentConfig::load_with_overrides(&g.config, &g.overrides)
        .with_context(|| format!("loading {}", g.config.display()))?;
    if let Some(base) = g.seed_override {
        cfg.override_seeds(base);
    }
    if let Some(jobs) = g.jobs {
        cfg.jobs = jobs;
    }
    cfg.validate()?;
    Ok(Run::new(cfg, g.out.clone()))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Runs one stage, prints its result and records it in the manifest.
fn stage(run: &Run, s: Stage, compare: Option<&PathBuf>) -> anyhow::Result<Option<experiment::Summary>> {
    let started = now();
    let (artifacts, summary) = match s {
        Stage::TrainLm => (experiment::train_lm(run)?, None),
        Stage::Generate => {
            let (rows, artifacts) = experiment::generate(run)?;
            println!(
                "{:<12} {:<9} {:>12} {:>10} {:>10} {:>12}",
                "dataset", "source", "tokens", "coverage", "first_cov", "kl"
            );
            for r in rows {
                println!(
                    "{:<12} {:<9} {:>12} {:>10.4} {:>10.4} {:>12.6}",
                    r.dataset,
                    r.source.as_str(),
                    r.stats.total_tokens,
                    r.stats.all_token_coverage,
                    r.stats.first_token_coverage,
                    r.stats.kl_model_to_dataset
                );
            }
            (artifacts, None)
        }
        Stage::Train => (experiment::train(run)?, None),
        Stage::Match => {
            let (file, artifacts) = experiment::match_saes(run)?;
            print!("{}", file.text_table());
            (artifacts, None)
        }
        Stage::Evaluate => {
            let ((faith, ffr), artifacts) = experiment::evaluate(run)?;
            println!("{:<12} {:<12} {:>12} {:>10} {:>10}", "train", "eval", "ce_diff", "l2", "ev");
            for g in &faith.grid {
                println!(
                    "{:<12} {:<12} {:>12.6} {:>10.4} {:>10.4}",
                    g.train_dataset, g.eval_dataset, g.ce_difference, g.l2_error, g.explained_variance
                );
            }
            for d in &ffr.per_dataset {
                println!("ffr {:<12} {:.4}", d.dataset, d.mean_ffr);
            }
            (artifacts, None)
        }
        Stage::Probe => {
            let (file, artifacts) = experiment::probe(run)?;
            print!("{}", file.report.text_table());
            (artifacts, None)
        }
        Stage::Report => {
            let (summary, artifacts) = experiment::report(run, compare.map(PathBuf::as_path))?;
            for p in &summary.properties {
                println!("[{}] {:>2} {}: {}", p.status.as_str(), p.id, p.name, p.detail);
            }
            println!("report written to {}", run.path("report.md").display());
            (artifacts, Some(summary))
        }
    };
    run.record(s, started, &artifacts)?;
    Ok(summary)
}

fn execute(cli: Cli) -> anyhow::Result<ExitCode> {
    let run = load_run(&cli.global)?;
    let single = |s| stage(&run, s, None).map(|_| ExitCode::SUCCESS);
    match cli.command {
        Command::TrainLm => single(Stage::TrainLm),
        Command::Generate => single(Stage::Generate),
        Command::Train => single(Stage::Train),
        Command::Match => single(Stage::Match),
        Command::Evaluate => single(Stage::Evaluate),
        Command::Probe => single(Stage::Probe),
        Command::Report { all, compare, strict } => {
            if all {
                for s in &Stage::ALL[..Stage::ALL.len() - 1] {
                    stage(&run, *s, None)?;
                }
            }
            let summary = stage(&run, Stage::Report, compare.as_ref())?.expect("report returns a summary");
            let failed = summary.properties.iter().any(|p| p.status == PropertyStatus::Fail);
            Ok(if strict && failed { ExitCode::from(4) } else { ExitCode::SUCCESS })
        }
    }
}

/// 2 for configuration problems, 3 for I/O, 4 for invariant violations.
fn exit_code(err: &anyhow::Error) -> u8 {
    use faithsae::Error as E;
    match err.chain().find_map(|e| e.downcast_ref::<E>()) {
        Some(E::Io { .. } | E::Json { .. } | E::Format { .. }) => 3,
        Some(E::Invariant(_)) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
