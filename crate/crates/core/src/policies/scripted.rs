use serde::{Deserialize, Serialize};

use crate::agents::{ActionKind, Policy, PolicyAction, PolicyError, Role};

const EXCERPT_CHARS: usize = 240;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextPredicate {
    #[default]
    Any,
    Contains(String),
    NotContains(String),
    All(Vec<ContextPredicate>),
}

impl ContextPredicate {
    pub fn accepts(&self, context: &str) -> bool {
        match self {
            ContextPredicate::Any => true,
            ContextPredicate::Contains(s) => context.contains(s.as_str()),
            ContextPredicate::NotContains(s) => !context.contains(s.as_str()),
            ContextPredicate::All(ps) => ps.iter().all(|p| p.accepts(context)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub role: Role,
    #[serde(default)]
    pub when: ContextPredicate,
    pub action: PolicyAction,
}

impl ScriptStep {
    pub fn new(role: Role, action: PolicyAction) -> Self {
        Self { role, when: ContextPredicate::Any, action }
    }

    pub fn when(mut self, predicate: ContextPredicate) -> Self {
        self.when = predicate;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Script {
    pub steps: Vec<ScriptStep>,
}

/// Replays a script strictly in order and stops at the first mismatch.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    script: Script,
    cursor: usize,
}

impl ScriptedPolicy {
    pub fn new(script: Script) -> Self {
        Self { script, cursor: 0 }
    }

    pub fn from_steps(steps: Vec<ScriptStep>) -> Self {
        Self::new(Script { steps })
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn is_finished(&self) -> bool {
        self.cursor == self.script.steps.len()
    }
}

fn excerpt(context: &str) -> String {
    let n = context.chars().count();
    if n <= 2 * EXCERPT_CHARS {
        return context.to_string();
    }
    let head: String = context.chars().take(EXCERPT_CHARS).collect();
    let tail: String = context.chars().skip(n - EXCERPT_CHARS).collect();
    format!("{head}\n[... {} chars ...]\n{tail}", n - 2 * EXCERPT_CHARS)
}

impl Policy for ScriptedPolicy {
    fn propose(&mut self, role: Role, context: &str, expected: &[ActionKind]) -> Result<PolicyAction, PolicyError> {
        let step = self.cursor;
        let wanted: Vec<&str> = expected.iter().map(|k| k.as_str()).collect();
        let Some(next) = self.script.steps.get(step) else {
            return Err(PolicyError::Divergence {
                step,
                message: format!(
                    "script exhausted; {role} asked for [{}] with context:\n{}",
                    wanted.join(", "),
                    excerpt(context)
                ),
            });
        };
        if next.role != role || !expected.contains(&next.action.kind()) {
            return Err(PolicyError::Divergence {
                step,
                message: format!(
                    "script has {} {}, engine asked {role} for [{}]",
                    next.role,
                    next.action.kind(),
                    wanted.join(", ")
                ),
            });
        }
        if !next.when.accepts(context) {
            return Err(PolicyError::Divergence {
                step,
                message: format!("expected context matching {:?}\nactual context:\n{}", next.when, excerpt(context)),
            });
        }
        self.cursor += 1;
        Ok(next.action.clone())
    }
}

/// A policy backed by a closure; handy for reactive test policies.
pub struct FnPolicy<F>(pub F);

impl<F> Policy for FnPolicy<F>
where
    F: FnMut(Role, &str, &[ActionKind]) -> Result<PolicyAction, PolicyError>,
{
    fn propose(&mut self, role: Role, context: &str, expected: &[ActionKind]) -> Result<PolicyAction, PolicyError> {
        (self.0)(role, context, expected)
    }
}
