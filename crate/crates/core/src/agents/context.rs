//! Fixed templates for every policy context.
//!
//! Delegator contexts are the workspace planning context followed by one
//! request section. Coder contexts are the specification followed by the
//! cells run so far in the current session; nothing else is shown.

use std::fmt::Write;

use crate::sandbox::CellOutcome;
use crate::schema::{CoderResult, Specification};
use crate::workspace::{SubTask, Workspace};

use super::Prior;

pub const PLAN_REQUEST: &str = "# Request\nDecompose the task into an ordered list of subtasks. \
Each must fit in one coding session and have a checkable outcome.\n";

pub const SPEC_REQUEST: &str = "# Request\nWrite the specification for this subtask: a directive, \
the committed artifacts it needs as inputs, and the typed return fields.\n";

pub const ASSESS_REQUEST: &str = "# Request\nThe subtask failed. Choose retry (with a refined directive) \
or replan (replace the subtask).\n";

pub const REPLAN_REQUEST: &str = "# Request\nThe retry budget for this subtask is spent. \
Replace it with a replan edit.\n";

pub const CODE_REQUEST: &str = "# Request\nWrite the next cell, or report if the task cannot be done.\n";

pub const REPORT_REQUEST: &str = "# Request\nAll return values are present and valid. \
Report a one-line summary of what was done.\n";

fn subtask_header(out: &mut String, st: &SubTask) {
    let _ = writeln!(out, "subtask: {}", st.id);
    let _ = writeln!(out, "title: {}", st.title);
    let _ = writeln!(out, "directive seed: {}", st.directive_seed);
}

pub fn plan_context(ws: &Workspace) -> String {
    format!("{}\n{PLAN_REQUEST}", ws.planning_context())
}

pub fn spec_context(ws: &Workspace, st: &SubTask, prior: Option<&Prior>, rejected: Option<&str>) -> String {
    let mut out = ws.planning_context();
    out.push_str("\n# Dispatch\n");
    subtask_header(&mut out, st);
    let _ = writeln!(out, "attempt: {}", st.retry_count + 1);
    if let Some(prior) = prior {
        let d = &prior.diagnostics;
        let _ = writeln!(out, "previous failure ({}): {}", d.kind.as_str(), d.root_cause);
        let _ = writeln!(out, "refined directive: {}", prior.refined_directive);
    }
    if let Some(issues) = rejected {
        let _ = writeln!(out, "previous proposal rejected: {issues}");
    }
    out.push('\n');
    out.push_str(SPEC_REQUEST);
    out
}

pub fn assess_context(
    ws: &Workspace,
    st: &SubTask,
    result: &CoderResult,
    retry_budget: u32,
    replan_only: bool,
) -> String {
    let mut out = ws.planning_context();
    out.push_str("\n# Assessment\n");
    subtask_header(&mut out, st);
    let _ = writeln!(out, "retries used: {} of {retry_budget}", st.retry_count);
    let _ = writeln!(out, "replans remaining: {}", ws.replans_remaining());
    if let Some(d) = &result.diagnostics {
        let _ = writeln!(out, "failure kind: {}", d.kind.as_str());
        if let Some(hint) = d.recoverable_hint {
            let _ = writeln!(out, "recoverable hint: {hint}");
        }
    }
    out.push('\n');
    out.push_str(if replan_only { REPLAN_REQUEST } else { ASSESS_REQUEST });
    out
}

/// The specification as the Coder sees it.
pub fn render_spec(spec: &Specification) -> String {
    let mut out = String::from("# Specification\n");
    let _ = writeln!(out, "subtask: {}", spec.subtask_id);
    let _ = writeln!(out, "directive: {}", spec.directive);
    out.push_str("\n# Inputs\n");
    if spec.inputs.is_empty() {
        out.push_str("(none)\n");
    }
    for input in &spec.inputs {
        let _ = writeln!(out, "- {}: {}", input.name, input.annotation);
        if let Some(sample) = &input.sample {
            let _ = writeln!(out, "    {}", sample.to_string().replace('\n', "\n    "));
        }
    }
    out.push_str("\n# Returns\n");
    if spec.returns.is_empty() {
        out.push_str("(none)\n");
    }
    for field in &spec.returns {
        let conditions: Vec<String> = field.conditions.iter().map(ToString::to_string).collect();
        if conditions.is_empty() {
            let _ = writeln!(out, "- {}: {}", field.name, field.annotation);
        } else {
            let _ = writeln!(out, "- {}: {} [{}]", field.name, field.annotation, conditions.join("; "));
        }
    }
    out
}

/// One executed cell as shown back to the Coder.
pub fn render_cell(out: &mut String, code: &str, outcome: &CellOutcome) {
    let _ = writeln!(out, "## cell {}", outcome.cell_index);
    let _ = writeln!(out, "{}", code.trim_end());
    if !outcome.stdout.is_empty() {
        let _ = write!(out, "-- stdout\n{}", outcome.stdout);
        if !outcome.stdout.ends_with('\n') {
            out.push('\n');
        }
    }
    if let Some(e) = &outcome.error {
        let _ = writeln!(out, "-- error ({}): {}", e.kind.as_str(), e.message);
    }
}

pub fn coder_context(spec_text: &str, history: &str, note: Option<&str>, finishing: bool) -> String {
    let mut out = String::with_capacity(spec_text.len() + history.len() + 256);
    out.push_str(spec_text);
    if !history.is_empty() {
        out.push_str("\n# Cells\n");
        out.push_str(history);
    }
    if let Some(note) = note {
        let _ = write!(out, "\n# Check\n{note}\n");
    }
    out.push('\n');
    out.push_str(if finishing { REPORT_REQUEST } else { CODE_REQUEST });
    out
}
