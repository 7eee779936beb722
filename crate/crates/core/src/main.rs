use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tracing_subscriber::EnvFilter;

use mcabsa::backend::ResponseCache;
use mcabsa::dialogue::{serialize_dataset, FlipRecord, Sextuple};
use mcabsa::metrics::FlipKey;
use mcabsa::pipeline::{
    self, default_work_dir, load_dataset, load_predictions, to_pretty_json, write_atomic, Manifest,
    PipelineError, RunConfig, Runner, Task,
};

#[derive(Parser)]
#[command(
    name = "mcabsa",
    version,
    about = "Multimodal conversational sentiment sextuple and flip extraction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Caption every audio, image and video attachment.
    Caption(IoArgs),
    /// Extract sentiment sextuples.
    Extract(RunArgs),
    /// Detect sentiment flips and classify their triggers.
    Flip {
        #[command(flatten)]
        run: RunArgs,
        /// Sextuple predictions produced by `extract`.
        #[arg(long)]
        sextuples: PathBuf,
    },
    /// Score predictions against gold annotations.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Prediction file.
        #[arg(long = "in")]
        input: PathBuf,
        /// Dataset file or prediction-format gold file.
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        task: u8,
        /// Report file (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FlipKeyArg::Full)]
        flip_key: FlipKeyArg,
    },
    /// Response cache maintenance.
    Cache {
        #[command(subcommand)]
        command: CacheCommand,
    },
    /// Check a configuration, its prompts and optionally a dataset.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CacheCommand {
    /// Print entry count and total size.
    Stats {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct IoArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    io: IoArgs,
    /// Directory for intermediate stage files.
    #[arg(long)]
    work_dir: Option<PathBuf>,
    /// Overrides the configured worker count.
    #[arg(long)]
    concurrency: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FlipKeyArg {
    Full,
    FlippedTrigger,
}

impl From<FlipKeyArg> for FlipKey {
    fn from(k: FlipKeyArg) -> Self {
        match k {
            FlipKeyArg::Full => FlipKey::Full,
            FlipKeyArg::FlippedTrigger => FlipKey::FlippedTrigger,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();

    match run(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(path: &Path, task: Task, run: Option<&RunArgs>) -> Result<RunConfig, PipelineError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(run) = run {
        if let Some(w) = &run.work_dir {
            cfg.work_dir = Some(w.clone());
        }
        if let Some(c) = run.concurrency {
            cfg.concurrency = c;
        }
    }
    cfg.validate(task)?;
    Ok(cfg)
}

fn report_manifest(manifest: &Manifest) -> i32 {
    for f in &manifest.failures {
        eprintln!("failed: {} at {}: {}", f.doc_id, f.stage, f.error);
    }
    if !manifest.skipped.is_empty() {
        eprintln!(
            "skipped {} target-aspect pair(s); see errors.json",
            manifest.skipped.len()
        );
    }
    manifest.exit_code()
}

fn run(command: Command) -> Result<i32, PipelineError> {
    match command {
        Command::Caption(io) => {
            let cfg = load_config(&io.config, Task::Caption, None)?;
            let runner = Runner::new(cfg, Task::Caption)?;
            let dialogues = load_dataset(&io.input)?;
            let (captioned, manifest) = runner.caption(&dialogues);
            write_atomic(&io.out, serialize_dataset(&captioned).as_bytes())?;
            Ok(report_manifest(&manifest))
        }
        Command::Extract(run) => {
            let cfg = load_config(&run.io.config, Task::Extract, Some(&run))?;
            let runner = Runner::new(cfg.clone(), Task::Extract)?;
            let dialogues = load_dataset(&run.io.input)?;
            let work = cfg
                .work_dir
                .clone()
                .unwrap_or_else(|| default_work_dir(&run.io.out));
            let outcome = runner.run_subtask1(&dialogues, &work)?;
            write_atomic(&run.io.out, &to_pretty_json(&outcome.predictions))?;
            let n: usize = outcome.predictions.values().map(Vec::len).sum();
            println!(
                "{n} sextuple(s) for {} dialogue(s)",
                outcome.predictions.len()
            );
            Ok(report_manifest(&outcome.manifest))
        }
        Command::Flip { run, sextuples } => {
            let cfg = load_config(&run.io.config, Task::Flip, Some(&run))?;
            let runner = Runner::new(cfg.clone(), Task::Flip)?;
            let dialogues = load_dataset(&run.io.input)?;
            let sx: mcabsa::dialogue::PredictionFile<Sextuple> = load_predictions(&sextuples)?;
            let work = cfg
                .work_dir
                .clone()
                .unwrap_or_else(|| default_work_dir(&run.io.out));
            let outcome = runner.run_subtask2(&dialogues, &sx, &work)?;
            write_atomic(&run.io.out, &to_pretty_json(&outcome.predictions))?;
            let n: usize = outcome.predictions.values().map(Vec::len).sum();
            println!("{n} flip(s) for {} dialogue(s)", outcome.predictions.len());
            Ok(report_manifest(&outcome.manifest))
        }
        Command::Evaluate {
            config: _,
            input,
            gold,
            task,
            out,
            flip_key,
        } => {
            let report = pipeline::evaluate(&input, &gold, task, flip_key.into())?;
            println!("{}", report.summary());
            if let Some(out) = out {
                write_atomic(&out, &to_pretty_json(&report))?;
            }
            Ok(0)
        }
        Command::Cache {
            command: CacheCommand::Stats { config, out },
        } => {
            let cfg = load_config(&config, Task::Inspect, None)?;
            let dir = cfg
                .cache_dir
                .ok_or_else(|| PipelineError::Config("config has no cache_dir".into()))?;
            let stats = ResponseCache::open(&dir)?.stats()?;
            println!(
                "{} entries, {} bytes in {}",
                stats.entries,
                stats.bytes,
                dir.display()
            );
            if let Some(out) = out {
                write_atomic(&out, &to_pretty_json(&stats))?;
            }
            Ok(0)
        }
        Command::Validate { config, input, out } => {
            let cfg = load_config(&config, Task::Inspect, None)?;
            let mut summary = ValidateSummary {
                backends: cfg.backends.len(),
                ..Default::default()
            };
            for task in [Task::Caption, Task::Extract, Task::Flip] {
                if cfg.validate(task).is_ok() {
                    let names = cfg.required_prompts(task)?;
                    mcabsa::prompts::PromptSet::load(&cfg.prompt_dir, &names)?;
                    summary.ready_for.push(match task {
                        Task::Caption => "caption",
                        Task::Extract => "extract",
                        _ => "flip",
                    });
                }
            }
            if let Some(input) = input {
                let ds = load_dataset(&input)?;
                summary.dialogues = Some(ds.len());
                summary.utterances = Some(ds.iter().map(|d| d.utterances.len()).sum());
                summary.gold_sextuples = Some(
                    ds.iter()
                        .filter_map(|d| d.gold_sextuples.as_ref())
                        .map(Vec::len)
                        .sum(),
                );
                summary.gold_flips = Some(
                    ds.iter()
                        .filter_map(|d| d.gold_flips.as_ref())
                        .map(|v: &Vec<FlipRecord>| v.len())
                        .sum(),
                );
            }
            println!(
                "{}",
                serde_json::to_string(&summary).expect("summary serializes")
            );
            if let Some(out) = out {
                write_atomic(&out, &to_pretty_json(&summary))?;
            }
            Ok(0)
        }
    }
}

#[derive(Default, Serialize)]
struct ValidateSummary {
    backends: usize,
    ready_for: Vec<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dialogues: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    utterances: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gold_sextuples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gold_flips: Option<usize>,
}
