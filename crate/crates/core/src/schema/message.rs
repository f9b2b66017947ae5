//! The three messages that cross the Delegator/Coder boundary.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::annotation::{TypeAnnotation, ValidationCondition};
use super::value::Value;
use super::{check_identifier, InvariantError};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubTaskId(pub String);

impl SubTaskId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SubTaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SubTaskId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBinding {
    pub name: String,
    pub artifact_name: String,
    pub annotation: TypeAnnotation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReturnField {
    pub name: String,
    pub annotation: TypeAnnotation,
    #[serde(default)]
    pub conditions: Vec<ValidationCondition>,
}

impl ReturnField {
    pub fn new(name: impl Into<String>, annotation: TypeAnnotation) -> Self {
        Self { name: name.into(), annotation, conditions: Vec::new() }
    }

    pub fn with_condition(mut self, condition: ValidationCondition) -> Self {
        self.conditions.push(condition);
        self
    }
}

/// The downward message: directive, typed input bindings and return schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Specification {
    pub subtask_id: SubTaskId,
    pub directive: String,
    #[serde(default)]
    pub inputs: Vec<InputBinding>,
    #[serde(default)]
    pub returns: Vec<ReturnField>,
}

impl Specification {
    pub fn check(&self, path: &str) -> Result<(), InvariantError> {
        if self.directive.trim().is_empty() {
            return Err(InvariantError::new(&format!("{path}.directive"), "directive must not be empty"));
        }
        let mut names = BTreeSet::new();
        for (i, input) in self.inputs.iter().enumerate() {
            let p = format!("{path}.inputs[{i}]");
            check_identifier(&input.name).map_err(|m| InvariantError::new(&format!("{p}.name"), m))?;
            if !names.insert(input.name.as_str()) {
                return Err(InvariantError::new(&format!("{p}.name"), "duplicate input name"));
            }
            input.annotation.check(&format!("{p}.annotation"))?;
            if let Some(sample) = &input.sample {
                sample.check(&format!("{p}.sample"))?;
                if !input.annotation.kind.accepts(sample) {
                    return Err(InvariantError::new(
                        &format!("{p}.sample"),
                        "sample does not conform to the annotation kind",
                    ));
                }
            }
        }
        let mut names = BTreeSet::new();
        for (i, field) in self.returns.iter().enumerate() {
            let p = format!("{path}.returns[{i}]");
            check_identifier(&field.name).map_err(|m| InvariantError::new(&format!("{p}.name"), m))?;
            if !names.insert(field.name.as_str()) {
                return Err(InvariantError::new(&format!("{p}.name"), "duplicate return name"));
            }
            field.annotation.check(&format!("{p}.annotation"))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Success,
    Fail,
}

/// Handle to a value held in the staging area between extraction and commit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub handle: String,
    pub annotation: TypeAnnotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    /// The Coder gave up and reported a root cause itself.
    Reported,
    BudgetExhausted,
    Infrastructure,
    Extraction,
    Validation,
    /// The Delegator could not produce a resolvable specification.
    Delegation,
}

impl FailureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureKind::Reported => "reported",
            FailureKind::BudgetExhausted => "budget_exhausted",
            FailureKind::Infrastructure => "infrastructure",
            FailureKind::Extraction => "extraction",
            FailureKind::Validation => "validation",
            FailureKind::Delegation => "delegation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub kind: FailureKind,
    pub root_cause: String,
    pub failed_operation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recoverable_hint: Option<bool>,
}

/// The upward message. Status and payload fields are coupled; see [`CoderResult::check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoderResult {
    pub subtask_id: SubTaskId,
    pub status: Status,
    #[serde(default)]
    pub artifacts: BTreeMap<String, ArtifactRef>,
    pub summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Diagnostics>,
}

impl CoderResult {
    pub fn success(
        subtask_id: SubTaskId,
        artifacts: BTreeMap<String, ArtifactRef>,
        summary: impl Into<String>,
    ) -> Self {
        Self { subtask_id, status: Status::Success, artifacts, summary: summary.into(), diagnostics: None }
    }

    pub fn fail(subtask_id: SubTaskId, summary: impl Into<String>, diagnostics: Diagnostics) -> Self {
        Self {
            subtask_id,
            status: Status::Fail,
            artifacts: BTreeMap::new(),
            summary: summary.into(),
            diagnostics: Some(diagnostics),
        }
    }

    pub fn is_success(&self) -> bool {
        self.status == Status::Success
    }

    pub fn check(&self, path: &str) -> Result<(), InvariantError> {
        match self.status {
            Status::Success => {
                if self.diagnostics.is_some() {
                    return Err(InvariantError::new(
                        &format!("{path}.diagnostics"),
                        "diagnostics must be absent when status is success",
                    ));
                }
            }
            Status::Fail => {
                if !self.artifacts.is_empty() {
                    return Err(InvariantError::new(
                        &format!("{path}.artifacts"),
                        "artifacts must be empty when status is fail",
                    ));
                }
                if self.diagnostics.is_none() {
                    return Err(InvariantError::new(
                        &format!("{path}.diagnostics"),
                        "diagnostics are required when status is fail",
                    ));
                }
            }
        }
        for (name, r) in &self.artifacts {
            check_identifier(name)
                .map_err(|m| InvariantError::new(&format!("{path}.artifacts.{name}"), m))?;
            r.annotation.check(&format!("{path}.artifacts.{name}.annotation"))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubTaskSeed {
    pub id: SubTaskId,
    pub title: String,
    pub directive_seed: String,
}

impl SubTaskSeed {
    pub fn new(id: impl Into<String>, title: impl Into<String>, directive_seed: impl Into<String>) -> Self {
        Self { id: SubTaskId::new(id), title: title.into(), directive_seed: directive_seed.into() }
    }
}

/// Replace `target` with an ordered, non-empty list of fresh subtasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplanEdit {
    pub target: SubTaskId,
    pub replacement: Vec<SubTaskSeed>,
}

impl ReplanEdit {
    pub fn check(&self, path: &str) -> Result<(), InvariantError> {
        if self.replacement.is_empty() {
            return Err(InvariantError::new(
                &format!("{path}.replacement"),
                "a replan must replace its target with at least one subtask",
            ));
        }
        let mut ids = BTreeSet::new();
        for (i, seed) in self.replacement.iter().enumerate() {
            if seed.id.0.trim().is_empty() {
                return Err(InvariantError::new(&format!("{path}.replacement[{i}].id"), "empty id"));
            }
            if !ids.insert(&seed.id) {
                return Err(InvariantError::new(&format!("{path}.replacement[{i}].id"), "duplicate id"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Proceed,
    Retry { refined_directive: String },
    Replan { edit: ReplanEdit },
}

impl Verdict {
    pub fn name(&self) -> &'static str {
        match self {
            Verdict::Proceed => "proceed",
            Verdict::Retry { .. } => "retry",
            Verdict::Replan { .. } => "replan",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub verdict: Verdict,
    #[serde(default)]
    pub rationale: String,
}

impl Decision {
    pub fn proceed(rationale: impl Into<String>) -> Self {
        Self { verdict: Verdict::Proceed, rationale: rationale.into() }
    }

    pub fn check(&self, path: &str) -> Result<(), InvariantError> {
        match &self.verdict {
            Verdict::Proceed => Ok(()),
            Verdict::Retry { refined_directive } if refined_directive.trim().is_empty() => Err(
                InvariantError::new(&format!("{path}.verdict.retry.refined_directive"), "must not be empty"),
            ),
            Verdict::Retry { .. } => Ok(()),
            Verdict::Replan { edit } => edit.check(&format!("{path}.verdict.replan.edit")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "message", content = "body", rename_all = "snake_case")]
pub enum Message {
    Specification(Specification),
    Result(CoderResult),
    Decision(Decision),
}

impl Message {
    pub fn check(&self) -> Result<(), InvariantError> {
        match self {
            Message::Specification(s) => s.check("body"),
            Message::Result(r) => r.check("body"),
            Message::Decision(d) => d.check("body"),
        }
    }
}
