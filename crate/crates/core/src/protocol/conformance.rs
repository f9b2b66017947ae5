//! Ground truth for the dispatch loop over a bounded scenario space.
//!
//! A [`Scenario`] fixes, for every subtask, the outcome of each attempt and,
//! for every replan, what replaces the target. [`oracle`] walks the scenario
//! with nothing but counters; [`ScenarioPolicy`] realises the same scenario
//! through real agents and sandboxes so the engine can be compared event for
//! event.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BudgetKind, Budgets, Engine, EngineConfig, Escalation, Event, Mode, RunOutcome};
use crate::agents::{ActionKind, Policy, PolicyAction, PolicyError, Role};
use crate::sandbox::SandboxFactory;
use crate::schema::{
    Decision, Diagnostics, FailureKind, Kind, ReplanEdit, ReturnField, SubTaskId, SubTaskSeed, TypeAnnotation, Verdict,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    /// Success.
    S,
    /// Failure the Delegator judges recoverable: it votes retry.
    FR,
    /// Failure the Coder reports as unrecoverable: the Delegator votes replan.
    FU,
}

/// What a replan puts in place of its target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReplanChoice {
    /// One subtask that succeeds.
    Single,
    /// One subtask that fails recoverably once, then succeeds.
    RetryThenSuccess,
    /// One subtask that fails unrecoverably.
    Unrecoverable,
    /// Two subtasks that both succeed.
    Split,
}

pub const REPLAN_CHOICES: [ReplanChoice; 4] =
    [ReplanChoice::Single, ReplanChoice::RetryThenSuccess, ReplanChoice::Unrecoverable, ReplanChoice::Split];

impl ReplanChoice {
    /// Replacement ids and scripts for the `j`-th replan (1-based) of `target`.
    pub fn replacement(self, target: &str, j: usize) -> Vec<(String, Vec<Outcome>)> {
        let a = format!("{target}_r{j}a");
        match self {
            ReplanChoice::Single => vec![(a, vec![Outcome::S])],
            ReplanChoice::RetryThenSuccess => vec![(a, vec![Outcome::FR, Outcome::S])],
            ReplanChoice::Unrecoverable => vec![(a, vec![Outcome::FU])],
            ReplanChoice::Split => vec![(a, vec![Outcome::S]), (format!("{target}_r{j}b"), vec![Outcome::S])],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scenario {
    pub escalation: Escalation,
    pub budgets: Budgets,
    /// Initial plan: subtask id and per-attempt outcomes.
    pub subtasks: Vec<(String, Vec<Outcome>)>,
    /// The j-th replan uses `replans[j - 1]`; past the end it falls back to `Single`.
    pub replans: Vec<ReplanChoice>,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} R={} K={} replans={} dispatch={} plan=",
            self.escalation,
            self.budgets.retries,
            self.budgets.iterations,
            self.budgets.replans,
            self.budgets.dispatch_rounds
        )?;
        for (id, script) in &self.subtasks {
            write!(f, "{id}{script:?} ")?;
        }
        write!(f, "menu={:?}", self.replans)
    }
}

impl Scenario {
    fn replan_choice(&self, j: usize) -> ReplanChoice {
        self.replans.get(j - 1).copied().unwrap_or(ReplanChoice::Single)
    }
}

/// What a scenario should produce: terminal outcome and event sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expected {
    pub outcome: ExpectedOutcome,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExpectedOutcome {
    Completed { artifacts: Vec<String> },
    Failure { subtask_id: SubTaskId, kind: FailureKind },
    BudgetExceeded(BudgetKind),
}

impl ExpectedOutcome {
    /// The comparable part of an engine outcome; `None` for engine errors.
    pub fn of(outcome: &RunOutcome) -> Option<Self> {
        Some(match outcome {
            RunOutcome::Completed { artifacts } => ExpectedOutcome::Completed { artifacts: artifacts.clone() },
            RunOutcome::Failure { subtask_id, diagnostics } => {
                ExpectedOutcome::Failure { subtask_id: subtask_id.clone(), kind: diagnostics.kind }
            }
            RunOutcome::BudgetExceeded { budget } => ExpectedOutcome::BudgetExceeded(*budget),
            RunOutcome::EngineError { .. } => return None,
        })
    }
}

fn output_name(id: &str) -> String {
    format!("out_{id}")
}

fn failure_kind(outcome: Outcome) -> FailureKind {
    match outcome {
        Outcome::FU => FailureKind::Reported,
        _ => FailureKind::BudgetExhausted,
    }
}

/// The dispatch loop over the scenario table, with no agents or sandboxes.
pub fn oracle(s: &Scenario) -> Expected {
    let b = s.budgets;
    let mut plan: Vec<(String, Vec<Outcome>)> = s.subtasks.clone();
    let mut committed: Vec<String> = Vec::new();
    let mut events = Vec::new();
    let mut dispatches = 0;
    let mut replans_used = 0;
    let mut next = 0;
    let done = |events: Vec<Event>, outcome| Expected { outcome, events };

    while next < plan.len() {
        let (id, script) = plan[next].clone();
        let mut retries = 0u32;
        loop {
            if dispatches >= b.dispatch_rounds {
                return done(events, ExpectedOutcome::BudgetExceeded(BudgetKind::DispatchRounds));
            }
            dispatches += 1;
            events.push(Event::Dispatch(SubTaskId::new(&id)));
            let outcome = script.get(retries as usize).copied().unwrap_or(Outcome::FR);
            let replan = match outcome {
                Outcome::S => {
                    committed.push(output_name(&id));
                    events.push(Event::Commit(SubTaskId::new(&id)));
                    next += 1;
                    break;
                }
                Outcome::FR if retries < b.retries => {
                    retries += 1;
                    events.push(Event::Retry(SubTaskId::new(&id)));
                    continue;
                }
                Outcome::FR => s.escalation == Escalation::EscalateToReplan && replans_used < b.replans,
                Outcome::FU => replans_used < b.replans,
            };
            if !replan {
                let failure = ExpectedOutcome::Failure { subtask_id: SubTaskId::new(&id), kind: failure_kind(outcome) };
                return done(events, failure);
            }
            replans_used += 1;
            let replacement = s.replan_choice(replans_used as usize).replacement(&id, replans_used as usize);
            plan.splice(next..=next, replacement);
            events.push(Event::Replan(SubTaskId::new(&id)));
            break;
        }
    }
    committed.sort();
    done(events, ExpectedOutcome::Completed { artifacts: committed })
}

/// Every per-subtask script that matters under retry budget `r`.
///
/// A run of recoverable failures ending in success or an unrecoverable
/// failure, with at most `r` leading failures, or `r + 1` recoverable
/// failures (retries exhausted).
pub fn scripts(r: u32) -> Vec<Vec<Outcome>> {
    let mut out = Vec::new();
    for fails in 0..=r as usize {
        for last in [Outcome::S, Outcome::FU] {
            let mut s = vec![Outcome::FR; fails];
            s.push(last);
            out.push(s);
        }
    }
    out.push(vec![Outcome::FR; r as usize + 1]);
    out
}

/// Bounds of the enumerated scenario space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Space {
    pub max_subtasks: usize,
    pub retries: Vec<u32>,
    pub iterations: Vec<u32>,
    pub replans: Vec<u32>,
    pub dispatch_rounds: Vec<u32>,
}

impl Default for Space {
    fn default() -> Self {
        Self {
            max_subtasks: 3,
            retries: vec![0, 1, 2],
            iterations: vec![1, 2],
            replans: vec![0, 1, 2],
            dispatch_rounds: vec![Budgets::default().dispatch_rounds],
        }
    }
}

fn product<T: Clone>(choices: &[T], n: usize) -> Vec<Vec<T>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                choices.iter().map(move |c| {
                    let mut p = prefix.clone();
                    p.push(c.clone());
                    p
                })
            })
            .collect();
    }
    out
}

/// All scenarios in `space`, in a fixed order.
pub fn enumerate(space: &Space) -> Vec<Scenario> {
    let mut out = Vec::new();
    for escalation in [Escalation::StrictAlg1, Escalation::EscalateToReplan] {
        for &iterations in &space.iterations {
            for &retries in &space.retries {
                for &replans in &space.replans {
                    for &dispatch_rounds in &space.dispatch_rounds {
                        let budgets = Budgets { retries, iterations, dispatch_rounds, replans };
                        let per_subtask = scripts(retries);
                        let menus = product(&REPLAN_CHOICES, replans as usize);
                        for n in 0..=space.max_subtasks {
                            for plan in product(&per_subtask, n) {
                                let subtasks: Vec<(String, Vec<Outcome>)> =
                                    plan.into_iter().enumerate().map(|(i, s)| (format!("s{}", i + 1), s)).collect();
                                for menu in &menus {
                                    out.push(Scenario {
                                        escalation,
                                        budgets,
                                        subtasks: subtasks.clone(),
                                        replans: menu.clone(),
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub const FAILING_CELL: &str = "let scratch = 1 / 0";
pub const CODER_SUMMARY: &str = "produced the output";
pub const UNRECOVERABLE_CAUSE: &str = "input cannot support this subtask";
/// Every successful subtask binds this, whatever K is, so runs differing only in K commit equal values.
pub const SCENARIO_VALUE: i64 = 7;

/// Drives the agents through a scenario.
///
/// Reactive: it reads the subtask id from each context, counts attempts per
/// subtask and looks the outcome up in the scenario table. Successful
/// attempts with K > 1 first run one failing cell, so K changes what happens
/// in the session but not what the Delegator sees.
#[derive(Debug, Clone)]
pub struct ScenarioPolicy {
    scenario: Scenario,
    scripts: BTreeMap<String, Vec<Outcome>>,
    attempts: BTreeMap<String, usize>,
    replans_issued: usize,
    /// Extra stdout printed by every cell.
    pub verbose: Option<String>,
    /// Every delegator-role context seen, in order.
    pub delegator_contexts: Vec<String>,
}

impl ScenarioPolicy {
    pub fn new(scenario: Scenario) -> Self {
        let scripts = scenario.subtasks.iter().cloned().collect();
        Self {
            scenario,
            scripts,
            attempts: BTreeMap::new(),
            replans_issued: 0,
            verbose: None,
            delegator_contexts: Vec::new(),
        }
    }

    fn seed(id: &str) -> SubTaskSeed {
        SubTaskSeed::new(id, format!("produce {}", output_name(id)), format!("compute {}", output_name(id)))
    }

    /// Current subtask and the text of the context after its marker.
    fn locate<'c>(context: &'c str) -> Result<(String, &'c str), PolicyError> {
        let typed = context.rfind("\nsubtask: ").map(|i| i + "\nsubtask: ".len());
        let free = context.rfind("Subtask ").map(|i| i + "Subtask ".len());
        let start = typed.max(free).or(if context.starts_with("subtask: ") { Some(9) } else { None });
        let start = start.ok_or_else(|| PolicyError::Divergence { step: 0, message: "no subtask marker".into() })?;
        let rest = &context[start..];
        let end = rest.find(|c: char| c == '\n' || c == ':').unwrap_or(rest.len());
        Ok((rest[..end].trim().to_string(), rest))
    }

    fn outcome(&self, id: &str) -> Outcome {
        let attempt = self.attempts.get(id).copied().unwrap_or(1);
        self.scripts.get(id).and_then(|s| s.get(attempt - 1)).copied().unwrap_or(Outcome::FR)
    }

    fn cell(&self, body: String) -> PolicyAction {
        let code = match &self.verbose {
            Some(line) => format!("print \"{line}\"\n{body}"),
            None => body,
        };
        PolicyAction::Code { code }
    }

    fn replan(&mut self, id: &str) -> PolicyAction {
        self.replans_issued += 1;
        let j = self.replans_issued;
        let replacement = self.scenario.replan_choice(j).replacement(id, j);
        let seeds = replacement.iter().map(|(rid, _)| Self::seed(rid)).collect();
        self.scripts.extend(replacement);
        PolicyAction::verdict(Decision {
            verdict: Verdict::Replan { edit: ReplanEdit { target: SubTaskId::new(id), replacement: seeds } },
            rationale: "replace the subtask".into(),
        })
    }
}

impl Policy for ScenarioPolicy {
    fn propose(&mut self, role: Role, context: &str, expected: &[ActionKind]) -> Result<PolicyAction, PolicyError> {
        if role == Role::Delegator {
            self.delegator_contexts.push(context.to_string());
        }
        let k = self.scenario.budgets.iterations;
        match (role, expected) {
            (Role::Delegator, [ActionKind::Plan]) => Ok(PolicyAction::PlanProposal {
                subtasks: self.scenario.subtasks.iter().map(|(id, _)| Self::seed(id)).collect(),
            }),
            (Role::Delegator, [ActionKind::Spec]) => {
                let (id, _) = Self::locate(context)?;
                *self.attempts.entry(id.clone()).or_insert(0) += 1;
                Ok(PolicyAction::SpecProposal {
                    directive: format!("Bind {} to an integer.", output_name(&id)),
                    inputs: vec![],
                    returns: vec![ReturnField::new(output_name(&id), TypeAnnotation::of_kind(Kind::Int))],
                })
            }
            (Role::Delegator, [ActionKind::Replan]) => {
                let (id, _) = Self::locate(context)?;
                Ok(self.replan(&id))
            }
            (Role::Delegator, _) => {
                let (id, _) = Self::locate(context)?;
                match self.outcome(&id) {
                    Outcome::FU => Ok(self.replan(&id)),
                    _ => Ok(PolicyAction::verdict(Decision {
                        verdict: Verdict::Retry { refined_directive: "Check the arithmetic before binding.".into() },
                        rationale: "recoverable".into(),
                    })),
                }
            }
            (Role::Coder, [ActionKind::Report]) => {
                Ok(PolicyAction::ResultReport { summary: CODER_SUMMARY.into(), diagnostics: None })
            }
            (Role::Coder, _) => {
                let (id, rest) = Self::locate(context)?;
                let cells = rest.matches("## cell ").count() as u32;
                Ok(match self.outcome(&id) {
                    Outcome::S if cells + 1 < k => self.cell(FAILING_CELL.into()),
                    Outcome::S => self.cell(format!("let {} = {}", output_name(&id), SCENARIO_VALUE)),
                    Outcome::FR => self.cell(FAILING_CELL.into()),
                    Outcome::FU if cells == 0 && k > 1 => self.cell(FAILING_CELL.into()),
                    Outcome::FU => PolicyAction::ResultReport {
                        summary: "giving up".into(),
                        diagnostics: Some(Diagnostics {
                            kind: FailureKind::Reported,
                            root_cause: UNRECOVERABLE_CAUSE.into(),
                            failed_operation: "input inspection".into(),
                            recoverable_hint: Some(false),
                        }),
                    },
                })
            }
        }
    }
}

/// Engine result for one scenario, reduced to what the oracle predicts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observed {
    pub outcome: Option<ExpectedOutcome>,
    pub events: Vec<Event>,
    pub engine_error: Option<String>,
    pub budget_violation: Option<String>,
    pub delegator_contexts: Vec<String>,
}

pub const SCENARIO_TASK: &str = "Produce one integer output per subtask.";

pub fn run_scenario(s: &Scenario, factory: &SandboxFactory, mode: Mode) -> Observed {
    let config = EngineConfig { budgets: s.budgets, escalation: s.escalation, mode, journal_path: None };
    let engine = Engine::new(config, factory.clone());
    let mut policy = ScenarioPolicy::new(s.clone());
    let report = engine.run(SCENARIO_TASK, BTreeMap::new(), &mut policy);
    let engine_error = match &report.outcome {
        RunOutcome::EngineError { message } => Some(message.clone()),
        _ => None,
    };
    Observed {
        outcome: ExpectedOutcome::of(&report.outcome),
        events: report.events,
        engine_error,
        budget_violation: report.stats.check_budgets(&s.budgets).err(),
        delegator_contexts: policy.delegator_contexts,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConformanceSummary {
    pub scenarios: usize,
    pub matched: usize,
    /// First few mismatches, rendered.
    pub mismatches: Vec<String>,
}

impl ConformanceSummary {
    pub fn all_matched(&self) -> bool {
        self.scenarios == self.matched
    }
}

/// Runs every scenario through the engine and the oracle in parallel.
pub fn check_all(scenarios: &[Scenario], factory: &SandboxFactory) -> ConformanceSummary {
    let failures: Vec<String> = scenarios
        .par_iter()
        .filter_map(|s| {
            let expected = oracle(s);
            let got = run_scenario(s, factory, Mode::Full);
            if let Some(e) = got.engine_error {
                return Some(format!("{s}\n  engine error: {e}"));
            }
            if let Some(v) = got.budget_violation {
                return Some(format!("{s}\n  budget violation: {v}"));
            }
            if got.outcome.as_ref() != Some(&expected.outcome) || got.events != expected.events {
                return Some(format!(
                    "{s}\n  expected {:?} {:?}\n  observed {:?} {:?}",
                    expected.outcome, expected.events, got.outcome, got.events
                ));
            }
            None
        })
        .collect();
    ConformanceSummary {
        scenarios: scenarios.len(),
        matched: scenarios.len() - failures.len(),
        mismatches: failures.into_iter().take(10).collect(),
    }
}

/// Delegator contexts with the capped per-subtask note lines blanked.
pub fn mask_notes(context: &str) -> String {
    context
        .lines()
        .map(|l| if l.starts_with("  last: ") { "  last: <note>" } else { l })
        .collect::<Vec<_>>()
        .join("\n")
}
