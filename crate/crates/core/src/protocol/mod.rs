//! The dispatch loop: decompose, then for each pending subtask specify,
//! dispatch a fresh Coder, assess and commit, retry or replan.

pub mod conformance;

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    assess, coder_run, context, decompose, gen_spec, filter_upward, AgentError, CoderRun, Handoff, Metered, Policy,
    Prior, SpecOutcome,
};
use crate::sandbox::{SandboxError, SandboxFactory, SandboxSession};
use crate::schema::{
    CoderResult, Decision, Diagnostics, FailureKind, PredicateRegistry, Specification, SubTaskId, Value, Verdict,
};
use crate::workspace::{Journal, StagingArea, SubTask, Workspace, WorkspaceConfig, WorkspaceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budgets {
    /// Retries per subtask (R); a subtask gets at most R + 1 attempts.
    pub retries: u32,
    /// Code actions per Coder session (K).
    pub iterations: u32,
    pub dispatch_rounds: u32,
    pub replans: u32,
}

impl Default for Budgets {
    fn default() -> Self {
        Self { retries: 3, iterations: 20, dispatch_rounds: 100, replans: 3 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Escalation {
    /// Retry exhaustion ends the run with a failure.
    StrictAlg1,
    /// Retry exhaustion asks for a replan while the replan budget lasts.
    #[default]
    EscalateToReplan,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Full,
    /// Untyped prose handoffs, unchecked commits, uncapped planning context.
    NoEpss,
    /// One persistent session and one growing context for every subtask.
    SingleAgent,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Full => "full",
            Mode::NoEpss => "no_epss",
            Mode::SingleAgent => "single_agent",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetKind {
    DispatchRounds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum RunOutcome {
    /// Names of every artifact in the workspace at the end of the run.
    Completed { artifacts: Vec<String> },
    Failure { subtask_id: SubTaskId, diagnostics: Diagnostics },
    BudgetExceeded { budget: BudgetKind },
    /// The run was aborted by a protocol violation, policy or infrastructure error.
    EngineError { message: String },
}

impl RunOutcome {
    pub fn is_completed(&self) -> bool {
        matches!(self, RunOutcome::Completed { .. })
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            RunOutcome::Completed { .. } => 0,
            RunOutcome::Failure { .. } => 1,
            RunOutcome::BudgetExceeded { .. } => 2,
            RunOutcome::EngineError { .. } => 3,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            RunOutcome::Completed { .. } => "completed",
            RunOutcome::Failure { .. } => "failure",
            RunOutcome::BudgetExceeded { .. } => "budget_exceeded",
            RunOutcome::EngineError { .. } => "engine_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "event", content = "subtask_id", rename_all = "snake_case")]
pub enum Event {
    Dispatch(SubTaskId),
    Retry(SubTaskId),
    Replan(SubTaskId),
    Commit(SubTaskId),
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
    #[error("sandbox: {0}")]
    Sandbox(#[from] SandboxError),
    #[error("journal: {0}")]
    Journal(#[from] io::Error),
}

/// Counters gathered during one run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub dispatches: u32,
    pub retries: u32,
    /// Highest retry count reached by any one subtask.
    pub max_subtask_retries: u32,
    pub replans: u32,
    pub coder_iterations: u32,
    /// Highest code-action count of any one Coder session.
    pub max_session_iterations: u32,
    pub error_cells: u32,
    /// Characters of delegator-role context (the journal's proxy).
    pub context_chars: u64,
    pub coder_context_chars: u64,
    pub policy_calls: u64,
    pub sessions_spawned: u64,
    pub sessions_disposed: u64,
}

impl RunStats {
    /// Every counter within its budget and every session disposed.
    pub fn check_budgets(&self, b: &Budgets) -> Result<(), String> {
        let checks = [
            (self.dispatches <= b.dispatch_rounds, "dispatches", self.dispatches, b.dispatch_rounds),
            (self.max_subtask_retries <= b.retries, "retries", self.max_subtask_retries, b.retries),
            (self.max_session_iterations <= b.iterations, "iterations", self.max_session_iterations, b.iterations),
            (self.replans <= b.replans, "replans", self.replans, b.replans),
        ];
        for (ok, name, used, budget) in checks {
            if !ok {
                return Err(format!("{name}: used {used}, budget {budget}"));
            }
        }
        if self.sessions_spawned != self.sessions_disposed {
            return Err(format!("{} sessions spawned, {} disposed", self.sessions_spawned, self.sessions_disposed));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct RunReport {
    pub outcome: RunOutcome,
    pub events: Vec<Event>,
    pub stats: RunStats,
    pub workspace: Workspace,
    /// The typed cause behind [`RunOutcome::EngineError`].
    pub error: Option<EngineError>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub budgets: Budgets,
    pub escalation: Escalation,
    pub mode: Mode,
    /// Mirror the journal to this JSONL file.
    pub journal_path: Option<PathBuf>,
}

/// Runs tasks. Holds no per-run state, so one engine can serve many runs.
#[derive(Debug, Clone)]
pub struct Engine {
    config: EngineConfig,
    factory: SandboxFactory,
    registry: PredicateRegistry,
}

impl Engine {
    pub fn new(config: EngineConfig, factory: SandboxFactory) -> Self {
        Self { config, factory, registry: PredicateRegistry::new() }
    }

    pub fn with_registry(mut self, registry: PredicateRegistry) -> Self {
        self.registry = registry;
        self
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn factory(&self) -> &SandboxFactory {
        &self.factory
    }

    /// Runs `task` with `environment` pre-committed as artifacts.
    pub fn run(&self, task: &str, environment: BTreeMap<String, Value>, policy: &mut dyn Policy) -> RunReport {
        let budgets = self.config.budgets;
        let ws_config = WorkspaceConfig {
            retry_budget: budgets.retries,
            replan_budget: budgets.replans,
            block_cap: match self.config.mode {
                Mode::NoEpss => None,
                _ => WorkspaceConfig::default().block_cap,
            },
        };
        let journal = match &self.config.journal_path {
            Some(path) => Journal::with_file(path),
            None => Ok(Journal::new()),
        };
        let mut metered = Metered::new(policy);
        metered.count_all_roles = self.config.mode == Mode::SingleAgent;
        let mut runner = Runner {
            engine: self,
            ws: Workspace::new(task, ws_config.clone()),
            policy: metered,
            staging: StagingArea::new(),
            events: Vec::new(),
            stats: RunStats::default(),
        };
        let result = journal.map_err(EngineError::from).and_then(|journal| {
            runner.ws = Workspace::with_journal(task, ws_config, journal);
            for (name, value) in environment {
                runner.ws.seed_artifact(name, value)?;
            }
            if budgets.iterations == 0 {
                return Err(EngineError::Config("iterations (K) must be at least 1".into()));
            }
            match self.config.mode {
                Mode::Full | Mode::NoEpss => runner.run_delegated(),
                Mode::SingleAgent => runner.run_single_agent(),
            }
        });
        runner.sync();
        let _ = runner.ws.journal_mut().flush_context();
        let Runner { ws, policy, events, mut stats, .. } = runner;
        stats.context_chars = ws.journal().total_context_chars();
        stats.coder_context_chars = policy.coder_chars;
        stats.policy_calls = policy.calls;
        let (outcome, error) = match result {
            Ok(outcome) => (outcome, None),
            Err(e) => (RunOutcome::EngineError { message: e.to_string() }, Some(e)),
        };
        log::info!("run finished: {} after {} dispatches", outcome.label(), stats.dispatches);
        RunReport { outcome, events, stats, workspace: ws, error }
    }
}

enum Attempt {
    Committed,
    Replanned,
    Retry(Prior),
    Failed(Diagnostics),
}

struct Runner<'e, 'p> {
    engine: &'e Engine,
    ws: Workspace,
    policy: Metered<'p>,
    staging: StagingArea,
    events: Vec<Event>,
    stats: RunStats,
}

impl Runner<'_, '_> {
    fn budgets(&self) -> Budgets {
        self.engine.config.budgets
    }

    /// Attaches context consumed since the last journal entry to the next one.
    fn sync(&mut self) {
        let chars = self.policy.take_pending();
        self.ws.journal_mut().add_context_chars(chars);
    }

    fn completed(&self) -> RunOutcome {
        RunOutcome::Completed { artifacts: self.ws.artifacts().keys().cloned().collect() }
    }

    fn subtask(&self, id: &SubTaskId) -> Result<SubTask, EngineError> {
        self.ws.subtask(id).cloned().ok_or_else(|| WorkspaceError::UnknownSubTask(id.clone()).into())
    }

    fn plan(&mut self) -> Result<(), EngineError> {
        let plan = decompose(&self.ws, &mut self.policy);
        self.sync();
        self.ws.set_plan(plan?)?;
        Ok(())
    }

    fn spawn(&mut self, inputs: BTreeMap<String, Value>) -> Result<SandboxSession, SandboxError> {
        let session = self.engine.factory.spawn(inputs)?;
        self.stats.sessions_spawned += 1;
        Ok(session)
    }

    fn dispose(&mut self, session: &mut SandboxSession) {
        session.dispose();
        if session.is_disposed() {
            self.stats.sessions_disposed += 1;
        }
    }

    fn count_run(&mut self, run: &CoderRun) {
        self.stats.coder_iterations += run.code_actions;
        self.stats.max_session_iterations = self.stats.max_session_iterations.max(run.code_actions);
        self.stats.error_cells += run.error_cells;
    }

    fn run_delegated(&mut self) -> Result<RunOutcome, EngineError> {
        self.plan()?;
        while let Some(next) = self.ws.next_pending() {
            let id = next.id.clone();
            self.ws.mark_in_progress(&id)?;
            let mut prior: Option<Prior> = None;
            loop {
                if self.stats.dispatches >= self.budgets().dispatch_rounds {
                    return Ok(RunOutcome::BudgetExceeded { budget: BudgetKind::DispatchRounds });
                }
                match self.attempt(&id, prior.as_ref())? {
                    Attempt::Committed | Attempt::Replanned => break,
                    Attempt::Retry(p) => prior = Some(p),
                    Attempt::Failed(diagnostics) => {
                        self.ws.mark_failed(&id, &diagnostics)?;
                        return Ok(RunOutcome::Failure { subtask_id: id, diagnostics });
                    }
                }
            }
        }
        Ok(self.completed())
    }

    /// One specify / dispatch / assess cycle for subtask `id`.
    fn attempt(&mut self, id: &SubTaskId, prior: Option<&Prior>) -> Result<Attempt, EngineError> {
        let st = self.subtask(id)?;
        let spec = gen_spec(&self.ws, &st, prior, &self.engine.registry, &mut self.policy);
        self.sync();
        let (spec, result, values) = match spec? {
            SpecOutcome::Ready(spec) => {
                let (result, values) = self.dispatch(&spec)?;
                (Some(spec), result, values)
            }
            SpecOutcome::Rejected { issues } => {
                let result = CoderResult::fail(
                    id.clone(),
                    "specification rejected",
                    Diagnostics {
                        kind: FailureKind::Delegation,
                        root_cause: filter_upward(&issues, &Default::default()),
                        failed_operation: "specification".into(),
                        recoverable_hint: Some(true),
                    },
                );
                self.ws.record_result(&result)?;
                (None, result, BTreeMap::new())
            }
        };

        let Some(decision) = self.decide(&st, &result)? else {
            return Ok(Attempt::Failed(result.diagnostics.expect("only failures escalate")));
        };
        match &decision.verdict {
            Verdict::Proceed => {
                let spec = spec.expect("success implies a dispatched specification");
                if self.engine.config.mode == Mode::NoEpss {
                    self.ws.commit_unchecked(id, values)?;
                } else {
                    self.ws.commit(&result, &spec.returns, &self.staging, &self.engine.registry)?;
                    for reference in result.artifacts.values() {
                        self.staging.discard_prefix(&reference.handle);
                    }
                }
                self.events.push(Event::Commit(id.clone()));
                Ok(Attempt::Committed)
            }
            Verdict::Retry { refined_directive } => {
                let count = self.ws.record_retry(id, &decision)?;
                self.stats.retries += 1;
                self.stats.max_subtask_retries = self.stats.max_subtask_retries.max(count);
                self.events.push(Event::Retry(id.clone()));
                Ok(Attempt::Retry(Prior {
                    diagnostics: result.diagnostics.clone().expect("retry follows a failure"),
                    refined_directive: refined_directive.clone(),
                }))
            }
            Verdict::Replan { edit } => {
                self.ws.splice_replan(&decision, edit)?;
                self.stats.replans += 1;
                self.events.push(Event::Replan(id.clone()));
                Ok(Attempt::Replanned)
            }
        }
    }

    /// Spawns a fresh session holding exactly the bound inputs, runs the Coder and disposes it.
    fn dispatch(&mut self, spec: &Specification) -> Result<(CoderResult, BTreeMap<String, Value>), EngineError> {
        self.ws.record_spec(spec)?;
        self.stats.dispatches += 1;
        self.events.push(Event::Dispatch(spec.subtask_id.clone()));
        let mut inputs = BTreeMap::new();
        for binding in &spec.inputs {
            let (value, _) = self.ws.resolve(&binding.artifact_name)?;
            inputs.insert(binding.name.clone(), value.clone());
        }
        let handoff = match self.engine.config.mode {
            Mode::NoEpss => Handoff::FreeText,
            _ => Handoff::Typed,
        };
        let iterations = self.budgets().iterations;
        let (result, values) = match self.spawn(inputs) {
            Ok(mut session) => {
                let run = coder_run(
                    spec,
                    &mut session,
                    &mut self.policy,
                    iterations,
                    handoff,
                    "",
                    &mut self.staging,
                    &self.engine.registry,
                );
                self.dispose(&mut session);
                self.sync();
                let run = run?;
                self.count_run(&run);
                match run.free_text {
                    Some(text) => self.ws.record_free_text_result(&spec.subtask_id, text)?,
                    None => self.ws.record_result(&run.result)?,
                }
                (run.result, run.values)
            }
            Err(e) if e.is_infrastructure() => {
                log::warn!("spawn for {} failed: {e}", spec.subtask_id);
                let result = CoderResult::fail(
                    spec.subtask_id.clone(),
                    "",
                    Diagnostics {
                        kind: FailureKind::Infrastructure,
                        root_cause: filter_upward(&e.to_string(), &Default::default()),
                        failed_operation: "spawn session".into(),
                        recoverable_hint: Some(true),
                    },
                );
                self.ws.record_result(&result)?;
                (result, BTreeMap::new())
            }
            Err(e) => return Err(e.into()),
        };
        Ok((result, values))
    }

    /// The verdict for a result after budget clamping; `None` means the run fails.
    fn decide(&mut self, st: &SubTask, result: &CoderResult) -> Result<Option<Decision>, EngineError> {
        let r = self.budgets().retries;
        let mut decision = assess(&self.ws, st, result, r, false, &mut self.policy);
        self.sync();
        if matches!(decision, Ok(Decision { verdict: Verdict::Retry { .. }, .. })) && st.retry_count >= r {
            if self.engine.config.escalation == Escalation::StrictAlg1 || self.ws.replans_remaining() == 0 {
                return Ok(None);
            }
            decision = assess(&self.ws, st, result, r, true, &mut self.policy);
            self.sync();
        }
        let decision = decision?;
        if matches!(decision.verdict, Verdict::Replan { .. }) && self.ws.replans_remaining() == 0 {
            return Ok(None);
        }
        Ok(Some(decision))
    }

    /// Every subtask in one session; a failure is recorded and the run moves on.
    fn run_single_agent(&mut self) -> Result<RunOutcome, EngineError> {
        self.plan()?;
        let inputs: BTreeMap<String, Value> =
            self.ws.artifacts().iter().map(|(name, a)| (name.clone(), a.value.clone())).collect();
        let mut session = self.spawn(inputs)?;
        let outcome = self.single_agent_loop(&mut session);
        self.dispose(&mut session);
        outcome
    }

    fn single_agent_loop(&mut self, session: &mut SandboxSession) -> Result<RunOutcome, EngineError> {
        let mut shared = String::new();
        let mut first_failure: Option<(SubTaskId, Diagnostics)> = None;
        while let Some(next) = self.ws.next_pending() {
            let st = next.clone();
            if self.stats.dispatches >= self.budgets().dispatch_rounds {
                return Ok(RunOutcome::BudgetExceeded { budget: BudgetKind::DispatchRounds });
            }
            self.ws.mark_in_progress(&st.id)?;
            let spec = gen_spec(&self.ws, &st, None, &self.engine.registry, &mut self.policy);
            self.sync();
            let spec = match spec? {
                SpecOutcome::Ready(spec) => spec,
                SpecOutcome::Rejected { issues } => {
                    let d = Diagnostics {
                        kind: FailureKind::Delegation,
                        root_cause: filter_upward(&issues, &Default::default()),
                        failed_operation: "specification".into(),
                        recoverable_hint: None,
                    };
                    self.ws.mark_failed(&st.id, &d)?;
                    first_failure.get_or_insert((st.id.clone(), d));
                    continue;
                }
            };
            self.ws.record_spec(&spec)?;
            self.stats.dispatches += 1;
            self.events.push(Event::Dispatch(st.id.clone()));
            let iterations = self.budgets().iterations;
            let run = coder_run(
                &spec,
                session,
                &mut self.policy,
                iterations,
                Handoff::Typed,
                &shared,
                &mut self.staging,
                &self.engine.registry,
            );
            self.sync();
            let run = run?;
            self.count_run(&run);
            shared.push_str(&context::render_spec(&spec));
            shared.push_str("\n# Cells\n");
            shared.push_str(&run.transcript);
            shared.push('\n');
            self.ws.record_result(&run.result)?;
            match &run.result.diagnostics {
                None => {
                    self.ws.commit(&run.result, &spec.returns, &self.staging, &self.engine.registry)?;
                    self.events.push(Event::Commit(st.id.clone()));
                }
                Some(d) => {
                    self.ws.mark_failed(&st.id, d)?;
                    first_failure.get_or_insert((st.id.clone(), d.clone()));
                }
            }
        }
        Ok(match first_failure {
            Some((subtask_id, diagnostics)) => RunOutcome::Failure { subtask_id, diagnostics },
            None => self.completed(),
        })
    }
}
