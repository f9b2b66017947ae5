use std::collections::BTreeMap;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use delegator_core::fixture;
use delegator_core::harness::{self, Report, RunConfig, Suite};
use delegator_core::protocol::conformance::{check_all, enumerate, oracle, ExpectedOutcome, Space};
use delegator_core::protocol::{Engine, EngineConfig, RunOutcome};
use delegator_core::sandbox::{kernel, ExecutorKind, SandboxFactory};
use delegator_core::schema::to_canonical_string;
use delegator_core::workspace::JournalKind;

#[derive(Parser)]
#[command(name = "delegator", version, about = "Run delegated coding tasks and score them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a suite of tasks and write records, journals and reports.
    Run {
        /// Task definitions, one JSON document per line.
        #[arg(long)]
        suite: PathBuf,
        /// TOML run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for records.jsonl, report.txt, report.jsonl and journals/.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_runs: Option<u32>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Render tables from a records file.
    Report {
        records: PathBuf,
        /// Print the machine-readable rows instead of tables.
        #[arg(long)]
        jsonl: bool,
    },
    /// Enumerate small protocol scenarios and their expected outcomes.
    Oracle {
        #[arg(long, default_value_t = 3)]
        max_subtasks: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        retries: Vec<u32>,
        #[arg(long, value_delimiter = ',', default_value = "1,2")]
        iterations: Vec<u32>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        replans: Vec<u32>,
        #[arg(long, value_delimiter = ',', default_value = "100")]
        dispatch_rounds: Vec<u32>,
        /// Print every scenario with its expected outcome as JSONL.
        #[arg(long)]
        list: bool,
        /// Run the engine on every scenario and compare it with the oracle.
        #[arg(long)]
        check: bool,
    },
    /// Replay the catalogue-cleaning scenario and print its specification and result.
    Fixture {
        /// Print the scenario as a one-task suite instead of replaying it.
        #[arg(long)]
        suite: bool,
    },
    /// Serve the sandbox line protocol on stdin/stdout.
    Kernel,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse().command) {
        Ok(code) => ExitCode::from(code),
        // Output piped into something like `head` that stopped reading.
        Err(e) if e.chain().any(|c| c.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe)) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn dispatch(command: Command) -> Result<u8> {
    match command {
        Command::Run { suite, config, out, n_runs, workers } => run(&suite, config.as_deref(), &out, n_runs, workers),
        Command::Report { records, jsonl } => {
            let records = harness::read_records(&records)?;
            let report = Report::from_records(&records);
            let text = if jsonl { report.to_jsonl() } else { report.render() };
            io::stdout().write_all(text.as_bytes())?;
            Ok(0)
        }
        Command::Oracle { max_subtasks, retries, iterations, replans, dispatch_rounds, list, check } => {
            let space = Space { max_subtasks, retries, iterations, replans, dispatch_rounds };
            oracle_cmd(&space, list, check)
        }
        Command::Fixture { suite } => fixture_cmd(suite),
        Command::Kernel => {
            kernel::serve(io::stdin().lock(), io::stdout().lock())?;
            Ok(0)
        }
    }
}

fn run(suite: &Path, config: Option<&Path>, out: &Path, n_runs: Option<u32>, workers: Option<usize>) -> Result<u8> {
    let suite = Suite::load(suite)?;
    let mut config = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(n) = n_runs {
        config.n_runs = n;
    }
    if let Some(w) = workers {
        config.workers = w;
    }
    if config.executor.contains(&ExecutorKind::Kernel) && config.kernel.command.is_empty() {
        // This binary doubles as the kernel.
        let exe = std::env::current_exe().context("locating the delegator binary")?;
        config.kernel.command = vec![exe.display().to_string(), "kernel".into()];
    }
    let started = Instant::now();
    let result = harness::run_suite(&suite, &config, Some(out))?;
    log::info!("{} runs in {:.1?}, outputs in {}", result.records.len(), started.elapsed(), out.display());
    io::stdout().write_all(result.report.render().as_bytes())?;
    Ok(u8::try_from(result.exit_code()).unwrap_or(3))
}

fn oracle_cmd(space: &Space, list: bool, check: bool) -> Result<u8> {
    let scenarios = enumerate(space);
    let mut out = io::stdout().lock();
    if list {
        for s in &scenarios {
            let line = serde_json::json!({ "scenario": s, "expected": oracle(s) });
            writeln!(out, "{line}")?;
        }
    }
    let mut tally: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &scenarios {
        let label = match oracle(s).outcome {
            ExpectedOutcome::Completed { .. } => "completed",
            ExpectedOutcome::Failure { .. } => "failure",
            ExpectedOutcome::BudgetExceeded(_) => "budget_exceeded",
        };
        *tally.entry(label).or_default() += 1;
    }
    writeln!(out, "scenarios: {}", scenarios.len())?;
    for (outcome, n) in &tally {
        writeln!(out, "  {outcome}: {n}")?;
    }
    if !check {
        return Ok(0);
    }
    let started = Instant::now();
    let summary = check_all(&scenarios, &SandboxFactory::builtin());
    writeln!(out, "engine matched {}/{} in {:.2?}", summary.matched, summary.scenarios, started.elapsed())?;
    for m in &summary.mismatches {
        writeln!(out, "mismatch: {m}")?;
    }
    Ok(if summary.all_matched() { 0 } else { 1 })
}

fn fixture_cmd(as_suite: bool) -> Result<u8> {
    let mut out = io::stdout().lock();
    if as_suite {
        out.write_all(Suite::to_jsonl(&[harness::fixture_task()])?.as_bytes())?;
        return Ok(0);
    }
    let engine = Engine::new(EngineConfig::default(), SandboxFactory::builtin());
    let report = engine.run(fixture::TASK, fixture::inputs(), &mut fixture::script());
    for entry in report.workspace.journal().entries() {
        if matches!(entry.kind, JournalKind::SpecIssued | JournalKind::ResultReceived) {
            writeln!(out, "{}", entry.payload)?;
        }
    }
    if let RunOutcome::Completed { artifacts } = &report.outcome {
        writeln!(out, "{}", to_canonical_string(&serde_json::json!({ "completed": artifacts }))?)?;
    } else {
        bail!("fixture did not complete: {:?}", report.outcome);
    }
    Ok(0)
}
