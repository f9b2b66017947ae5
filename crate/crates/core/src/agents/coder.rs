use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use crate::sandbox::{CellError, SandboxError, SandboxSession};
use crate::schema::{
    validate_values, ArtifactRef, CoderResult, Diagnostics, FailureKind, PredicateRegistry, Specification,
    TypeAnnotation, ValidationCondition, Value,
};
use crate::workspace::{StagingArea, FREE_TEXT_SUCCESS};

use super::context::{self, render_cell};
use super::{request, ActionKind, AgentError, Policy, PolicyAction, Role};

/// Byte cap on each text field that crosses from a Coder to the Delegator.
pub const UPWARD_CAP: usize = 1024;
const REDACTED: &str = "[redacted trace]";
const CAPPED: &str = " [truncated]";
/// Stdout lines shorter than this are too generic to redact.
const MIN_REDACT_LEN: usize = 8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Handoff {
    /// Typed result, validated artifacts, filtered text.
    #[default]
    Typed,
    /// Untyped prose carrying printed values and the whole transcript.
    FreeText,
}

#[derive(Debug, Clone)]
pub struct CoderRun {
    pub result: CoderResult,
    /// Extracted return values; staged by handle as well in typed mode.
    pub values: BTreeMap<String, Value>,
    /// The prose handoff, in free-text mode.
    pub free_text: Option<String>,
    /// The cells as the Coder saw them.
    pub transcript: String,
    pub code_actions: u32,
    pub error_cells: u32,
}

/// Strips echoed stdout lines from `text` and caps it at [`UPWARD_CAP`] bytes.
pub fn filter_upward(text: &str, stdout_lines: &BTreeSet<String>) -> String {
    let mut out = text.to_string();
    for line in stdout_lines.iter().rev() {
        if out.contains(line.as_str()) {
            out = out.replace(line.as_str(), REDACTED);
        }
    }
    if out.len() > UPWARD_CAP {
        let mut end = UPWARD_CAP - CAPPED.len();
        while !out.is_char_boundary(end) {
            end -= 1;
        }
        out.truncate(end);
        out.push_str(CAPPED);
    }
    out
}

fn render_free_spec(spec: &Specification) -> String {
    let mut out = format!("Subtask {}: {}\n", spec.subtask_id, spec.directive);
    let inputs: Vec<&str> = spec.inputs.iter().map(|i| i.name.as_str()).collect();
    let returns: Vec<&str> = spec.returns.iter().map(|r| r.name.as_str()).collect();
    let _ = writeln!(out, "Available data: {}", if inputs.is_empty() { "none".into() } else { inputs.join(", ") });
    let _ = writeln!(out, "Produce: {}", if returns.is_empty() { "nothing".into() } else { returns.join(", ") });
    out
}

struct Loop<'a> {
    spec: &'a Specification,
    session: &'a mut SandboxSession,
    registry: &'a PredicateRegistry,
    handoff: Handoff,
    history: String,
    stdout_lines: BTreeSet<String>,
    code_actions: u32,
    error_cells: u32,
}

enum Check {
    Done(BTreeMap<String, Value>),
    NotYet(String),
    Broken(SandboxError),
}

impl Loop<'_> {
    fn check_returns(&mut self) -> Check {
        let values = match self.session.extract_artifacts(&self.spec.returns) {
            Ok(values) => values,
            Err(e @ SandboxError::Missing { .. }) | Err(e @ SandboxError::Unconvertible { .. }) => {
                return Check::NotYet(e.to_string())
            }
            Err(e) => return Check::Broken(e),
        };
        if self.handoff == Handoff::FreeText {
            return Check::Done(values);
        }
        match validate_values(&self.spec.returns, &values, self.registry) {
            Ok(report) if report.is_valid() => Check::Done(values),
            Ok(report) => Check::NotYet(report.describe()),
            Err(e) => Check::NotYet(e.to_string()),
        }
    }

    fn fail(&self, kind: FailureKind, root_cause: &str, failed_operation: &str, summary: &str, hint: Option<bool>) -> CoderResult {
        let f = |s: &str| filter_upward(s, &self.stdout_lines);
        let diagnostics = Diagnostics {
            kind,
            root_cause: f(root_cause),
            failed_operation: f(failed_operation),
            recoverable_hint: hint,
        };
        CoderResult::fail(self.spec.subtask_id.clone(), f(summary), diagnostics)
    }

    fn finish(self, result: CoderResult, values: BTreeMap<String, Value>, staging: &mut StagingArea) -> CoderRun {
        let free_text = (self.handoff == Handoff::FreeText).then(|| {
            let mut text = match &result.diagnostics {
                None => format!("{FREE_TEXT_SUCCESS}\nsummary: {}\n", result.summary),
                Some(d) => format!("status: fail ({})\n{}\n{}\n", d.kind.as_str(), d.root_cause, result.summary),
            };
            for (name, value) in &values {
                let _ = writeln!(text, "{name} =\n{value}");
            }
            let _ = write!(text, "transcript:\n{}", self.history);
            text
        });
        if self.handoff == Handoff::Typed {
            for (name, value) in &values {
                staging.put(format!("{}/{name}", self.session.session_id()), value.clone());
            }
        }
        CoderRun {
            result,
            values,
            free_text,
            transcript: self.history,
            code_actions: self.code_actions,
            error_cells: self.error_cells,
        }
    }
}

fn annotate(value: &Value, spec: &Specification, name: &str) -> TypeAnnotation {
    let mut annotation = TypeAnnotation::infer(value);
    if let Some(field) = spec.returns.iter().find(|f| f.name == name) {
        for c in &field.conditions {
            if let ValidationCondition::NoNullsInColumn(col) = c {
                annotation = annotation.with_no_nulls(col.clone());
            }
        }
    }
    annotation
}

/// Runs the Coder's propose / execute / observe loop for at most `k` cells.
///
/// Succeeds as soon as every return field extracts and validates, then asks
/// the Coder for a summary. Every text field of the returned result passes
/// through [`filter_upward`]. The caller owns and disposes the session.
#[allow(clippy::too_many_arguments)]
pub fn coder_run(
    spec: &Specification,
    session: &mut SandboxSession,
    policy: &mut dyn Policy,
    k: u32,
    handoff: Handoff,
    preamble: &str,
    staging: &mut StagingArea,
    registry: &PredicateRegistry,
) -> Result<CoderRun, AgentError> {
    let spec_text = match handoff {
        Handoff::Typed => context::render_spec(spec),
        Handoff::FreeText => render_free_spec(spec),
    };
    let spec_text = format!("{preamble}{spec_text}");
    let mut lp = Loop {
        spec,
        session,
        registry,
        handoff,
        history: String::new(),
        stdout_lines: BTreeSet::new(),
        code_actions: 0,
        error_cells: 0,
    };
    let mut note: Option<String> = None;
    let mut last_error: Option<(u32, CellError)> = None;
    let expected = [ActionKind::Code, ActionKind::Report];

    let done = loop {
        if lp.code_actions >= k {
            let (root, op) = match (&last_error, &note) {
                (Some((idx, e)), _) => (format!("{}: {}", e.kind.as_str(), e.message), format!("cell {idx}")),
                (None, Some(check)) => (check.clone(), "return extraction".to_string()),
                (None, None) => ("no cells were executed".to_string(), "coding loop".to_string()),
            };
            let result = lp.fail(FailureKind::BudgetExhausted, &root, &op, &format!("stopped after {k} cell(s)"), None);
            return Ok(lp.finish(result, BTreeMap::new(), staging));
        }
        let ctx = context::coder_context(&spec_text, &lp.history, note.as_deref(), false);
        match request(policy, Role::Coder, &ctx, &expected)? {
            PolicyAction::Code { code } => {
                lp.code_actions += 1;
                let outcome = match lp.session.execute_cell(&code) {
                    Ok(outcome) => outcome,
                    Err(e) => {
                        let result = lp.fail(FailureKind::Infrastructure, &e.to_string(), "execute cell", "", Some(true));
                        return Ok(lp.finish(result, BTreeMap::new(), staging));
                    }
                };
                render_cell(&mut lp.history, &code, &outcome);
                for line in outcome.stdout.lines() {
                    let line = line.trim();
                    if line.len() >= MIN_REDACT_LEN {
                        lp.stdout_lines.insert(line.to_string());
                    }
                }
                if let Some(e) = outcome.error {
                    lp.error_cells += 1;
                    last_error = Some((outcome.cell_index, e));
                    note = None;
                    continue;
                }
                last_error = None;
                match lp.check_returns() {
                    Check::Done(values) => break values,
                    Check::NotYet(issue) => note = Some(issue),
                    Check::Broken(e) => {
                        let result = lp.fail(FailureKind::Infrastructure, &e.to_string(), "extract", "", Some(true));
                        return Ok(lp.finish(result, BTreeMap::new(), staging));
                    }
                }
            }
            PolicyAction::ResultReport { summary, diagnostics: Some(d) } => {
                let result = lp.fail(d.kind, &d.root_cause, &d.failed_operation, &summary, d.recoverable_hint);
                return Ok(lp.finish(result, BTreeMap::new(), staging));
            }
            PolicyAction::ResultReport { summary, diagnostics: None } => match lp.check_returns() {
                Check::Done(values) => return Ok(succeed(lp, values, &summary, staging)),
                Check::NotYet(issue) => {
                    let result = lp.fail(FailureKind::Validation, &issue, "report", &summary, Some(true));
                    return Ok(lp.finish(result, BTreeMap::new(), staging));
                }
                Check::Broken(e) => {
                    let result = lp.fail(FailureKind::Infrastructure, &e.to_string(), "extract", "", Some(true));
                    return Ok(lp.finish(result, BTreeMap::new(), staging));
                }
            },
            other => unreachable!("request() enforces the kind, got {:?}", other.kind()),
        }
    };

    let ctx = context::coder_context(&spec_text, &lp.history, None, true);
    match request(policy, Role::Coder, &ctx, &[ActionKind::Report])? {
        PolicyAction::ResultReport { summary, diagnostics: None } => Ok(succeed(lp, done, &summary, staging)),
        PolicyAction::ResultReport { diagnostics: Some(_), .. } => Err(AgentError::MalformedAction {
            role: Role::Coder,
            reason: "reported a failure after every return value validated".into(),
        }),
        other => unreachable!("request() enforces the kind, got {:?}", other.kind()),
    }
}

fn succeed(lp: Loop<'_>, values: BTreeMap<String, Value>, summary: &str, staging: &mut StagingArea) -> CoderRun {
    let summary = filter_upward(summary, &lp.stdout_lines);
    let artifacts = values
        .iter()
        .map(|(name, value)| {
            let handle = format!("{}/{name}", lp.session.session_id());
            (name.clone(), ArtifactRef { handle, annotation: annotate(value, lp.spec, name) })
        })
        .collect();
    let result = CoderResult::success(lp.spec.subtask_id.clone(), artifacts, summary);
    lp.finish(result, values, staging)
}
