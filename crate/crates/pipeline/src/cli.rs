//! Command-line entry point. Exit codes: 0 success, 2 configuration or
//! usage error, 3 stage failure.

use std::ffi::OsString;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand};

use trialcensus_core::corpus;
use trialcensus_core::labels::{read_splits_jsonl, LabelStore};
use trialcensus_core::synthetic::{generate, generate_registry, write_registry_csv, SyntheticSpec};

use crate::config::{validate_config, PipelineConfig};
use crate::manifest::{RunManifest, Stage, Status, Step};
use crate::server::{serve, LabelService};
use crate::stages::{write_truth, Runner, StageError, StepOutcome};
use crate::tools::{self, AnalyticsOp, EvalOp, UniverseOp};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_STAGE: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "trialcensus",
    version,
    about = "Census of published drug trials from bibliographic records"
)]
pub struct Cli {
    /// Pipeline configuration file.
    #[arg(long, global = true, default_value = "trialcensus.toml")]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Report which steps would run without running them.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the configuration and report every problem.
    Validate,
    /// Normalize the corpus (JSONL or MEDLINE XML).
    Ingest,
    /// Apply the inclusion rules; with an operation, work on explicit files.
    Universe {
        #[command(subcommand)]
        op: Option<UniverseOp>,
    },
    /// Draw the hand-labeling splits.
    Splits,
    /// Serve the hand-labeling API.
    ServeLabels {
        #[arg(long)]
        bind: Option<String>,
    },
    /// Collect LLM completions and assemble weak labels.
    Annotate,
    /// Train the distilled text classifiers.
    Distill,
    /// Fit the stacked ensemble on the validation split.
    Ensemble,
    /// ROC, operating points and prompt evaluation on the test split.
    Eval {
        #[command(subcommand)]
        op: Option<EvalOp>,
    },
    /// Census samples at each operating point.
    Census,
    /// Trend, citation, funding and country tables.
    Analytics {
        #[command(subcommand)]
        op: Option<AnalyticsOp>,
    },
    /// Registry filter cascade.
    Audit,
    /// Every step in order.
    Run,
    /// Step status from the run manifests.
    Status,
    /// Write a synthetic corpus, planted truth, registry export and config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6000)]
        records: usize,
        #[arg(long, default_value_t = 2000)]
        registry_rows: usize,
    },
}

impl Command {
    fn step(&self) -> Option<Step> {
        Some(match self {
            Command::Ingest => Step::Ingest,
            Command::Universe { op: None } => Step::Universe,
            Command::Splits => Step::Splits,
            Command::Annotate => Step::Annotate,
            Command::Distill => Step::Distill,
            Command::Ensemble => Step::Ensemble,
            Command::Eval { op: None } => Step::Eval,
            Command::Census => Step::Census,
            Command::Analytics { op: None } => Step::Analytics,
            Command::Audit => Step::Audit,
            _ => return None,
        })
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => usage_error(e),
    }
}

pub fn usage_error(e: clap::Error) -> i32 {
    let _ = e.print();
    if e.use_stderr() {
        EXIT_CONFIG
    } else {
        EXIT_OK
    }
}

pub fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

pub fn run(cli: Cli) -> i32 {
    if let Command::Synth {
        out,
        records,
        registry_rows,
    } = &cli.command
    {
        return match synth(out, *records, *registry_rows, cli.seed.unwrap_or(1)) {
            Ok(()) => EXIT_OK,
            Err(e) => {
                eprintln!("error: {e:#}");
                EXIT_STAGE
            }
        };
    }

    let standalone = match &cli.command {
        Command::Universe { op: Some(op) } => Some(tools::universe(op)),
        Command::Eval { op: Some(op) } => Some(tools::eval(op)),
        Command::Analytics { op: Some(op) } => Some(tools::analytics(op)),
        _ => None,
    };
    if let Some(result) = standalone {
        return match result {
            Ok(()) => EXIT_OK,
            Err(e) => {
                eprintln!("error: {e:#}");
                EXIT_STAGE
            }
        };
    }

    let cfg = match validate_config(&cli.config, cli.seed) {
        Ok(c) => c,
        Err(errors) => {
            eprintln!("{}: {} configuration problem(s)", cli.config.display(), errors.len());
            for e in errors {
                eprintln!("  {e}");
            }
            return EXIT_CONFIG;
        }
    };

    let result = match &cli.command {
        Command::Validate => {
            println!("{}: ok", cli.config.display());
            Ok(())
        }
        Command::Status => status(&cfg),
        Command::ServeLabels { bind } => serve_labels(&cfg, bind.as_deref()),
        Command::Run => report(Runner::new(cfg, cli.dry_run).run_all()),
        cmd => {
            let step = cmd.step().expect("remaining commands map to steps");
            report(Runner::new(cfg, cli.dry_run).run_step(step).map(|o| vec![(step, o)]))
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_STAGE
        }
    }
}

fn report(result: Result<Vec<(Step, StepOutcome)>, StageError>) -> anyhow::Result<()> {
    for (step, outcome) in result? {
        match outcome {
            StepOutcome::Ran(r) => println!(
                "{:<10} ran{}",
                step.name(),
                r.message.map(|m| format!(" ({m})")).unwrap_or_default()
            ),
            StepOutcome::Skipped(_) => println!("{:<10} up to date", step.name()),
            StepOutcome::Planned { would_run } => {
                println!(
                    "{:<10} {}",
                    step.name(),
                    if would_run { "would run" } else { "up to date" }
                )
            }
        }
    }
    Ok(())
}

fn status(cfg: &PipelineConfig) -> anyhow::Result<()> {
    let dir = Runner::new(cfg.clone(), true).manifest_dir();
    for stage in Stage::ALL {
        let manifest = RunManifest::load(&dir, stage)?;
        for step in stage.steps() {
            let state = manifest
                .as_ref()
                .and_then(|m| m.steps.get(step))
                .map(|r| {
                    format!(
                        "{} at {}",
                        if r.status == Status::Complete {
                            "complete"
                        } else {
                            "failed"
                        },
                        r.finished_at.to_rfc3339()
                    )
                })
                .unwrap_or_else(|| "not run".into());
            println!("{:<10} {:<10} {state}", stage.name(), step.name());
        }
    }
    Ok(())
}

fn serve_labels(cfg: &PipelineConfig, bind: Option<&str>) -> anyhow::Result<()> {
    let runner = Runner::new(cfg.clone(), true);
    let work = &runner.config().paths.work;
    let corpus = corpus::load_jsonl(work.join("corpus.jsonl"))
        .context("the label server needs the ingest step's corpus")?
        .corpus;
    let plan = read_splits_jsonl(std::io::BufReader::new(
        std::fs::File::open(work.join("splits.jsonl")).context("the label server needs the splits step's output")?,
    ))?;
    let token = match &cfg.labels.token_env {
        Some(var) => {
            Some(std::env::var(var).with_context(|| format!("labels.token_env names {var}, which is not set"))?)
        }
        None => None,
    };
    let store = LabelStore::open(cfg.labels_path())?.with_known_pmids(corpus.pmids().map(str::to_string));
    let svc = Arc::new(LabelService::new(
        store,
        plan,
        Arc::new(corpus),
        token,
        Duration::from_secs(cfg.labels.lease_secs),
    ));
    let bind = bind.unwrap_or(&cfg.labels.bind).to_string();
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(serve(svc, &bind))?;
    Ok(())
}

/// Fixture sizes scale with the corpus so a default run finishes in seconds.
pub fn synth_config(records: usize, seed: u64) -> String {
    let split = (records / 20).max(10);
    let n_records = (records / 3).max(40);
    format!(
        r#"seed = {seed}

[paths]
corpus = "corpus.jsonl"
truth = "truth.jsonl"
registry = "registry.csv"

[splits]
train = {split}
validation = {split}
test = {split}

[provider]
endpoint = "mock://"
model_id = "mock-gpt"
max_in_flight = 8
requests_per_minute = 600000
price_per_1k_input_tokens = 0.03
price_per_1k_output_tokens = 0.06
budget_cap = 1000.0

[annotate]
n_records = {n_records}
sizes = [{}, {}, {n_records}]

[distill]
folds = 5

[analytics]
min_trunk_citations = 5
country_floor = 5
"#,
        n_records / 4,
        n_records / 2,
    )
}

fn synth(out: &Path, records: usize, registry_rows: usize, seed: u64) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    let synthetic = generate(&SyntheticSpec::new(records, seed));
    synthetic.corpus.save_jsonl(out.join("corpus.jsonl"))?;
    write_truth(&out.join("truth.jsonl"), &synthetic.truth)?;
    let registry = generate_registry(registry_rows, seed);
    write_registry_csv(
        BufWriter::new(std::fs::File::create(out.join("registry.csv"))?),
        &registry,
    )?;
    let config = out.join("trialcensus.toml");
    if !config.exists() {
        std::fs::write(&config, synth_config(records, seed))?;
    }
    // Fail early if the generated config does not validate.
    validate_config(&config, None).map_err(|e| anyhow::anyhow!("generated config is invalid: {e:?}"))?;
    println!(
        "wrote {} records and {} registry rows to {}",
        records,
        registry_rows,
        out.display()
    );
    Ok(())
}
