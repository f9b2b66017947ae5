//! Delegator and Coder behaviours over a pluggable [`Policy`].
//!
//! The functions here hold no state of their own: everything mutable lives in
//! the [`Workspace`](crate::workspace::Workspace) or a
//! [`SandboxSession`](crate::sandbox::SandboxSession). Delegator calls see
//! only the workspace's planning context; Coder calls see only their own
//! specification and the cells of their own session.

mod coder;
pub mod context;
mod delegator;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{Decision, Diagnostics, InvariantError, ReturnField, SubTaskSeed, Verdict};
use crate::workspace::WorkspaceError;

pub use coder::{coder_run, filter_upward, CoderRun, Handoff, UPWARD_CAP};
pub use delegator::{assess, decompose, gen_spec, Prior, SpecOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Delegator,
    Coder,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Delegator => "delegator",
            Role::Coder => "coder",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Plan,
    Spec,
    Code,
    Report,
    Proceed,
    Retry,
    Replan,
}

impl ActionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::Plan => "plan",
            ActionKind::Spec => "spec",
            ActionKind::Code => "code",
            ActionKind::Report => "report",
            ActionKind::Proceed => "proceed",
            ActionKind::Retry => "retry",
            ActionKind::Replan => "replan",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyAction {
    PlanProposal {
        subtasks: Vec<SubTaskSeed>,
    },
    /// Input names refer to committed artifacts; each is bound under the same name.
    SpecProposal {
        directive: String,
        #[serde(default)]
        inputs: Vec<String>,
        #[serde(default)]
        returns: Vec<ReturnField>,
    },
    Code {
        code: String,
    },
    /// Summary of the session's work. Diagnostics mean the Coder is giving up.
    ResultReport {
        summary: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        diagnostics: Option<Diagnostics>,
    },
    Verdict {
        decision: Decision,
    },
}

impl PolicyAction {
    pub fn kind(&self) -> ActionKind {
        match self {
            PolicyAction::PlanProposal { .. } => ActionKind::Plan,
            PolicyAction::SpecProposal { .. } => ActionKind::Spec,
            PolicyAction::Code { .. } => ActionKind::Code,
            PolicyAction::ResultReport { .. } => ActionKind::Report,
            PolicyAction::Verdict { decision } => match decision.verdict {
                Verdict::Proceed => ActionKind::Proceed,
                Verdict::Retry { .. } => ActionKind::Retry,
                Verdict::Replan { .. } => ActionKind::Replan,
            },
        }
    }

    /// Structural checks that apply regardless of context.
    pub fn check(&self) -> Result<(), InvariantError> {
        match self {
            PolicyAction::Verdict { decision } => decision.check("verdict.decision"),
            PolicyAction::SpecProposal { directive, .. } if directive.trim().is_empty() => {
                Err(InvariantError::new("spec_proposal.directive", "must not be empty"))
            }
            _ => Ok(()),
        }
    }

    pub fn verdict(decision: Decision) -> Self {
        PolicyAction::Verdict { decision }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    /// A scripted policy was asked for something its script does not hold.
    #[error("replay diverged at step {step}: {message}")]
    Divergence { step: usize, message: String },
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("model output could not be parsed: {0}")]
    Unparseable(String),
    #[error("policy configuration: {0}")]
    Config(String),
}

/// Chooses the next action for a role given its rendered context.
///
/// Implementations must return an action whose kind is in `expected`; the
/// agent functions treat anything else as a protocol violation.
pub trait Policy {
    fn propose(&mut self, role: Role, context: &str, expected: &[ActionKind]) -> Result<PolicyAction, PolicyError>;
}

impl<P: Policy + ?Sized> Policy for &mut P {
    fn propose(&mut self, role: Role, context: &str, expected: &[ActionKind]) -> Result<PolicyAction, PolicyError> {
        (**self).propose(role, context, expected)
    }
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn propose(&mut self, role: Role, context: &str, expected: &[ActionKind]) -> Result<PolicyAction, PolicyError> {
        (**self).propose(role, context, expected)
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("{role} policy returned {got}, expected one of [{}]", list(expected))]
    ProtocolViolation { role: Role, expected: Vec<ActionKind>, got: ActionKind },
    #[error("{role} policy returned a malformed action: {reason}")]
    MalformedAction { role: Role, reason: String },
    #[error("task statement is empty")]
    EmptyTask,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
}

fn list(kinds: &[ActionKind]) -> String {
    kinds.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(", ")
}

/// Asks `policy` for an action and enforces the expected kinds.
pub fn request(
    policy: &mut dyn Policy,
    role: Role,
    context: &str,
    expected: &[ActionKind],
) -> Result<PolicyAction, AgentError> {
    let action = policy.propose(role, context, expected)?;
    if !expected.contains(&action.kind()) {
        return Err(AgentError::ProtocolViolation { role, expected: expected.to_vec(), got: action.kind() });
    }
    action.check().map_err(|e| AgentError::MalformedAction { role, reason: e.to_string() })?;
    Ok(action)
}

/// Wraps a policy and counts the characters of every context it is shown.
pub struct Metered<'p> {
    inner: &'p mut dyn Policy,
    pending: u64,
    /// Characters shown in delegator-role calls.
    pub delegator_chars: u64,
    /// Characters shown in coder-role calls.
    pub coder_chars: u64,
    pub calls: u64,
    /// Count coder-role contexts as delegator context too (single-agent runs).
    pub count_all_roles: bool,
}

impl<'p> Metered<'p> {
    pub fn new(inner: &'p mut dyn Policy) -> Self {
        Self { inner, pending: 0, delegator_chars: 0, coder_chars: 0, calls: 0, count_all_roles: false }
    }

    /// Delegator characters seen since the last call to this method.
    pub fn take_pending(&mut self) -> u64 {
        std::mem::take(&mut self.pending)
    }
}

impl Policy for Metered<'_> {
    fn propose(&mut self, role: Role, context: &str, expected: &[ActionKind]) -> Result<PolicyAction, PolicyError> {
        let chars = context.chars().count() as u64;
        self.calls += 1;
        match role {
            Role::Delegator => self.delegator_chars += chars,
            Role::Coder => self.coder_chars += chars,
        }
        if role == Role::Delegator || self.count_all_roles {
            self.pending += chars;
        }
        self.inner.propose(role, context, expected)
    }
}

#[cfg(test)]
mod tests;
