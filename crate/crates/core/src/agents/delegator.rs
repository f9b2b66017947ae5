use std::collections::BTreeMap;

use crate::schema::{
    validate_specification, validate_values, CoderResult, Decision, Diagnostics, InputBinding, PredicateRegistry,
    ReturnField, Specification, TypeAnnotation, Verdict,
};
use crate::workspace::{Plan, SubTask, Workspace};

use super::context;
use super::{request, ActionKind, AgentError, Policy, PolicyAction, Role};

/// What a retried subtask carries over from its failed attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prior {
    pub diagnostics: Diagnostics,
    pub refined_directive: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpecOutcome {
    Ready(Specification),
    /// Both the proposal and its one free regeneration failed validation.
    Rejected { issues: String },
}

pub fn decompose(ws: &Workspace, policy: &mut dyn Policy) -> Result<Plan, AgentError> {
    if ws.task().trim().is_empty() {
        return Err(AgentError::EmptyTask);
    }
    match request(policy, Role::Delegator, &context::plan_context(ws), &[ActionKind::Plan])? {
        PolicyAction::PlanProposal { subtasks } => Ok(Plan::from_seeds(subtasks)),
        other => unreachable!("request() enforces the kind, got {:?}", other.kind()),
    }
}

fn build_spec(
    ws: &Workspace,
    st: &SubTask,
    prior: Option<&Prior>,
    directive: String,
    inputs: Vec<String>,
    returns: Vec<ReturnField>,
) -> Specification {
    let directive = match prior {
        Some(p) if !directive.contains(p.refined_directive.as_str()) => {
            format!("{directive}\nRefinement: {}", p.refined_directive)
        }
        _ => directive,
    };
    let inputs = inputs
        .into_iter()
        .map(|name| match ws.resolve(&name) {
            Ok((value, annotation)) => InputBinding {
                artifact_name: name.clone(),
                name,
                annotation: annotation.clone(),
                sample: Some(value.preview()),
            },
            Err(_) => InputBinding { artifact_name: name.clone(), name, annotation: TypeAnnotation::any(), sample: None },
        })
        .collect();
    Specification { subtask_id: st.id.clone(), directive, inputs, returns }
}

fn spec_issues(ws: &Workspace, spec: &Specification, registry: &PredicateRegistry) -> Vec<String> {
    let mut issues: Vec<String> =
        validate_specification(spec, &ws.visible_annotations()).issues.iter().map(ToString::to_string).collect();
    if issues.is_empty() {
        if let Err(e) = spec.check("spec") {
            issues.push(e.to_string());
        }
    }
    if let Err(e) = validate_values(&spec.returns, &BTreeMap::new(), registry) {
        issues.push(e.to_string());
    }
    issues
}

/// Asks for a specification and validates it against the workspace.
///
/// An invalid proposal is sent back once with its issues; a second invalid
/// proposal gives [`SpecOutcome::Rejected`].
pub fn gen_spec(
    ws: &Workspace,
    st: &SubTask,
    prior: Option<&Prior>,
    registry: &PredicateRegistry,
    policy: &mut dyn Policy,
) -> Result<SpecOutcome, AgentError> {
    let mut rejected: Option<String> = None;
    for _ in 0..2 {
        let ctx = context::spec_context(ws, st, prior, rejected.as_deref());
        let PolicyAction::SpecProposal { directive, inputs, returns } =
            request(policy, Role::Delegator, &ctx, &[ActionKind::Spec])?
        else {
            unreachable!("request() enforces the kind");
        };
        let spec = build_spec(ws, st, prior, directive, inputs, returns);
        let issues = spec_issues(ws, &spec, registry);
        if issues.is_empty() {
            return Ok(SpecOutcome::Ready(spec));
        }
        log::debug!("specification for {} rejected: {}", st.id, issues.join("; "));
        rejected = Some(issues.join("; "));
    }
    Ok(SpecOutcome::Rejected { issues: rejected.unwrap_or_default() })
}

/// Decides what follows a Coder result.
///
/// A successful result is accepted without consulting the policy. For a
/// failure the policy picks retry or replan; with `replan_only` it may only
/// pick replan.
pub fn assess(
    ws: &Workspace,
    st: &SubTask,
    result: &CoderResult,
    retry_budget: u32,
    replan_only: bool,
    policy: &mut dyn Policy,
) -> Result<Decision, AgentError> {
    if result.is_success() {
        return Ok(Decision::proceed("all return fields validated"));
    }
    let expected: &[ActionKind] =
        if replan_only { &[ActionKind::Replan] } else { &[ActionKind::Retry, ActionKind::Replan] };
    let ctx = context::assess_context(ws, st, result, retry_budget, replan_only);
    match request(policy, Role::Delegator, &ctx, expected)? {
        PolicyAction::Verdict { decision } => match &decision.verdict {
            Verdict::Replan { edit } if edit.target != st.id => Err(AgentError::MalformedAction {
                role: Role::Delegator,
                reason: format!("replan targets `{}` while assessing `{}`", edit.target, st.id),
            }),
            _ => Ok(decision),
        },
        other => unreachable!("request() enforces the kind, got {:?}", other.kind()),
    }
}
