//! Suite runner: loads task definitions, executes the run matrix
//! (modes × executors × seeds) and aggregates pass^k, context size and
//! error counts into reports.

mod metrics;
mod report;
mod suite;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::agents::{Policy, PolicyError};
use crate::fixture;
use crate::policies::{LlmConfig, LlmPolicy, ScriptedPolicy};
use crate::protocol::{Budgets, Engine, EngineConfig, Escalation, Mode, RunOutcome};
use crate::sandbox::{ExecutorKind, KernelSettings, SandboxFactory};
use crate::schema::{ValidationCondition, Value};

pub use metrics::{complexity, pass_hat_k, stratify, Complexity};
pub use report::{ModeRow, Report, TaskRow};
pub use suite::{PredicateDef, ScriptRef, Suite, Task, TaskDefinition};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuiteProblem {
    pub task: String,
    pub message: String,
}

impl fmt::Display for SuiteProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.task, self.message)
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid tasks in suite: {}", list(.0))]
    SuiteLoad(Vec<SuiteProblem>),
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("malformed record on line {line}: {message}")]
    Record { line: usize, message: String },
}

fn list(problems: &[SuiteProblem]) -> String {
    problems.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyBackend {
    /// Each task's embedded or referenced script.
    #[default]
    Scripted,
    /// The chat-completions client configured under `[llm]`.
    Llm,
}

fn one_or_many<'de, D, T>(de: D) -> Result<Vec<T>, D::Error>
where
    D: Deserializer<'de>,
    T: Deserialize<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany<T> {
        One(T),
        Many(Vec<T>),
    }
    Ok(match OneOrMany::deserialize(de)? {
        OneOrMany::One(t) => vec![t],
        OneOrMany::Many(v) => v,
    })
}

/// Run configuration, read from TOML. `mode` and `executor` take one value or a list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(deserialize_with = "one_or_many")]
    pub mode: Vec<Mode>,
    #[serde(deserialize_with = "one_or_many")]
    pub executor: Vec<ExecutorKind>,
    pub budgets: Budgets,
    pub escalation: Escalation,
    /// Where per-run journals go; defaults to `journals/` under the output directory.
    pub journal_dir: Option<PathBuf>,
    pub policy: PolicyBackend,
    pub llm: LlmConfig,
    pub kernel: KernelSettings,
    pub n_runs: u32,
    pub workers: usize,
    /// Seed of the first run; run i of a task uses `seed + i`.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: vec![Mode::Full],
            executor: vec![ExecutorKind::Builtin],
            budgets: Budgets::default(),
            escalation: Escalation::default(),
            journal_dir: None,
            policy: PolicyBackend::Scripted,
            llm: LlmConfig::default(),
            kernel: KernelSettings::default(),
            n_runs: 4,
            workers: 4,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Parses without [`check`](Self::check), so callers can fill in defaults first.
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.into(), source })?;
        Self::from_toml(&text)
    }

    pub fn check(&self) -> Result<(), HarnessError> {
        let fail = |m: &str| Err(HarnessError::Config(m.into()));
        if self.mode.is_empty() {
            return fail("mode lists no modes");
        }
        if self.executor.is_empty() {
            return fail("executor lists no executors");
        }
        if self.n_runs == 0 {
            return fail("n_runs must be at least 1");
        }
        if self.workers == 0 {
            return fail("workers must be at least 1");
        }
        if self.budgets.iterations == 0 {
            return fail("budgets.iterations must be at least 1");
        }
        if self.executor.contains(&ExecutorKind::Kernel) && self.kernel.command.is_empty() {
            return fail("the kernel executor needs kernel.command");
        }
        Ok(())
    }
}

/// One executed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task_id: String,
    pub mode: Mode,
    pub executor: ExecutorKind,
    pub seed: u64,
    pub outcome: RunOutcome,
    /// Completed and every success condition held.
    pub success: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub check_issues: Vec<String>,
    pub dispatches: u32,
    pub retries: u32,
    pub replans: u32,
    pub coder_iterations: u32,
    pub context_chars: u64,
    /// Cells that raised a user error.
    pub error_count: u32,
}

/// Identifies one cell of the run matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunKey {
    pub task: usize,
    pub mode: Mode,
    pub executor: ExecutorKind,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SuiteRun {
    pub records: Vec<RunRecord>,
    pub report: Report,
}

impl SuiteRun {
    /// Highest CLI exit code among the runs.
    pub fn exit_code(&self) -> i32 {
        self.records.iter().map(|r| r.outcome.exit_code()).max().unwrap_or(0)
    }

    /// Writes `records.jsonl`, `report.txt` and `report.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        let io = |path: PathBuf| move |source| HarnessError::Io { path, source };
        std::fs::create_dir_all(dir).map_err(io(dir.into()))?;
        let path = dir.join("records.jsonl");
        std::fs::write(&path, records_to_jsonl(&self.records)).map_err(io(path.clone()))?;
        let path = dir.join("report.txt");
        std::fs::write(&path, self.report.render()).map_err(io(path.clone()))?;
        let path = dir.join("report.jsonl");
        std::fs::write(&path, self.report.to_jsonl()).map_err(io(path.clone()))?;
        Ok(())
    }
}

pub fn records_to_jsonl(records: &[RunRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("records serialize") + "\n").collect()
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    let file = std::fs::File::open(path).map_err(|source| HarnessError::Io { path: path.into(), source })?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| HarnessError::Io { path: path.into(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| HarnessError::Record { line: i + 1, message: e.to_string() })?;
        records.push(record);
    }
    Ok(records)
}

/// Runs the matrix with the policy backend named in the configuration.
pub fn run_suite(suite: &Suite, config: &RunConfig, output: Option<&Path>) -> Result<SuiteRun, HarnessError> {
    config.check()?;
    match config.policy {
        PolicyBackend::Scripted => {
            let missing: Vec<SuiteProblem> = suite
                .tasks
                .iter()
                .filter(|t| t.script.is_none())
                .map(|t| SuiteProblem { task: t.id().into(), message: "no script for the scripted backend".into() })
                .collect();
            if !missing.is_empty() {
                return Err(HarnessError::SuiteLoad(missing));
            }
            run_suite_with(suite, config, output, |task, _| {
                Ok(Box::new(ScriptedPolicy::new(task.script.clone().expect("checked above"))))
            })
        }
        PolicyBackend::Llm => {
            // Surface a missing key once instead of per run.
            LlmPolicy::new(config.llm.clone()).map_err(|e| HarnessError::Config(e.to_string()))?;
            run_suite_with(suite, config, output, |_, _| Ok(Box::new(LlmPolicy::new(config.llm.clone())?)))
        }
    }
}

/// Runs the matrix with a caller-supplied policy per run.
pub fn run_suite_with<F>(
    suite: &Suite,
    config: &RunConfig,
    output: Option<&Path>,
    policy_for: F,
) -> Result<SuiteRun, HarnessError>
where
    F: Fn(&Task, &RunKey) -> Result<Box<dyn Policy>, PolicyError> + Sync,
{
    config.check()?;
    let journal_dir = config.journal_dir.clone().or_else(|| output.map(|o| o.join("journals")));
    let mut keys = Vec::new();
    for task in 0..suite.tasks.len() {
        for &mode in &config.mode {
            for &executor in &config.executor {
                for i in 0..u64::from(config.n_runs) {
                    keys.push(RunKey { task, mode, executor, seed: config.seed + i });
                }
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let records: Vec<RunRecord> = pool.install(|| {
        keys.par_iter()
            .map(|key| {
                let task = &suite.tasks[key.task];
                let journal = journal_dir
                    .as_ref()
                    .map(|d| d.join(format!("{}__{}__{}__{}.jsonl", task.id(), key.mode, key.executor, key.seed)));
                match policy_for(task, key) {
                    Ok(mut policy) => run_one(task, config, key, journal, policy.as_mut()),
                    Err(e) => failed_record(task, key, e.to_string()),
                }
            })
            .collect()
    });
    let report = Report::from_records(&records);
    let run = SuiteRun { records, report };
    if let Some(dir) = output {
        run.write(dir)?;
    }
    Ok(run)
}

fn failed_record(task: &Task, key: &RunKey, message: String) -> RunRecord {
    RunRecord {
        task_id: task.id().into(),
        mode: key.mode,
        executor: key.executor,
        seed: key.seed,
        outcome: RunOutcome::EngineError { message },
        success: false,
        check_issues: vec![],
        dispatches: 0,
        retries: 0,
        replans: 0,
        coder_iterations: 0,
        context_chars: 0,
        error_count: 0,
    }
}

/// Executes one run with its own engine, sandbox factory and journal.
pub fn run_one(
    task: &Task,
    config: &RunConfig,
    key: &RunKey,
    journal_path: Option<PathBuf>,
    policy: &mut dyn Policy,
) -> RunRecord {
    let factory = SandboxFactory::new(key.executor, config.kernel.clone());
    let engine_config =
        EngineConfig { budgets: config.budgets, escalation: config.escalation, mode: key.mode, journal_path };
    let engine = Engine::new(engine_config, factory).with_registry(task.registry.clone());
    let report = engine.run(&task.definition.statement, task.definition.artifacts.clone(), policy);

    let mut check_issues = Vec::new();
    let mut success = false;
    if report.outcome.is_completed() {
        let committed: BTreeMap<String, Value> =
            report.workspace.artifacts().iter().map(|(k, a)| (k.clone(), a.value.clone())).collect();
        match task.check_success(&committed) {
            Ok(v) if v.is_valid() => success = true,
            Ok(v) => check_issues = v.issues.iter().map(ToString::to_string).collect(),
            Err(e) => check_issues.push(e.to_string()),
        }
    }
    let s = &report.stats;
    RunRecord {
        task_id: task.id().into(),
        mode: key.mode,
        executor: key.executor,
        seed: key.seed,
        outcome: report.outcome,
        success,
        check_issues,
        dispatches: s.dispatches,
        retries: s.retries,
        replans: s.replans,
        coder_iterations: s.coder_iterations,
        context_chars: s.context_chars,
        error_count: s.error_cells,
    }
}

/// The catalogue-cleaning task as a suite entry, with its script inline.
pub fn fixture_task() -> TaskDefinition {
    let mut success = fixture::returns();
    success[0].conditions.push(ValidationCondition::Named("prices_positive".into()));
    TaskDefinition {
        id: fixture::SUBTASK_ID.into(),
        statement: fixture::TASK.into(),
        artifacts: fixture::inputs(),
        predicates: BTreeMap::from([(
            "prices_positive".into(),
            PredicateDef::ColumnRange { column: "price".into(), min: Some(0.0), max: None },
        )]),
        success,
        script: Some(ScriptRef::Inline(fixture::script_definition())),
    }
}
