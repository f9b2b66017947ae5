use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HarnessError, SuiteProblem};
use crate::agents::PolicyAction;
use crate::policies::Script;
use crate::schema::{
    check_identifier, from_json, validate_values, PredicateRegistry, ReturnField, SchemaError, ValidationCondition,
    ValidationReport, Value, FLOAT_TOLERANCE,
};

/// A data-level predicate that a task can register under a `Named` id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "predicate", rename_all = "snake_case")]
pub enum PredicateDef {
    /// Equal to the given value (floats within tolerance).
    Equals { value: Value },
    /// Every non-null entry of a table column is a number inside the bounds.
    ColumnRange {
        column: String,
        #[serde(default)]
        min: Option<f64>,
        #[serde(default)]
        max: Option<f64>,
    },
    /// No two rows of a table share a value in the column.
    UniqueColumn { column: String },
}

fn number(v: &Value) -> Option<f64> {
    match v {
        Value::Int(i) => Some(*i as f64),
        Value::Float(f) => Some(*f),
        _ => None,
    }
}

impl PredicateDef {
    pub fn evaluate(&self, value: &Value) -> bool {
        match self {
            PredicateDef::Equals { value: expected } => value.approx_eq(expected),
            PredicateDef::ColumnRange { column, min, max } => {
                let Some(t) = value.as_table() else { return false };
                let Some(i) = t.column_index(column) else { return false };
                t.rows().iter().map(|r| &r[i]).filter(|v| !v.is_null()).all(|v| {
                    number(v).is_some_and(|x| {
                        min.is_none_or(|m| x >= m - FLOAT_TOLERANCE) && max.is_none_or(|m| x <= m + FLOAT_TOLERANCE)
                    })
                })
            }
            PredicateDef::UniqueColumn { column } => {
                let Some(t) = value.as_table() else { return false };
                let Some(i) = t.column_index(column) else { return false };
                let mut seen = BTreeSet::new();
                t.rows().iter().all(|r| seen.insert(r[i].to_string()))
            }
        }
    }
}

/// Either an inline script or a path to a JSON script, relative to the suite file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptRef {
    Inline(Script),
    File(PathBuf),
}

/// One line of a suite file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDefinition {
    pub id: String,
    pub statement: String,
    /// Environment data seeded into the workspace before planning.
    #[serde(default)]
    pub artifacts: BTreeMap<String, Value>,
    #[serde(default)]
    pub predicates: BTreeMap<String, PredicateDef>,
    /// Conditions the committed artifacts must satisfy for the run to count as a success.
    pub success: Vec<ReturnField>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<ScriptRef>,
}

/// A validated task with its script resolved and predicates registered.
#[derive(Debug, Clone)]
pub struct Task {
    pub definition: TaskDefinition,
    pub script: Option<Script>,
    pub registry: PredicateRegistry,
}

impl Task {
    pub fn id(&self) -> &str {
        &self.definition.id
    }

    /// Checks the success conditions against whatever the run committed.
    pub fn check_success(&self, committed: &BTreeMap<String, Value>) -> Result<ValidationReport, SchemaError> {
        validate_values(&self.definition.success, committed, &self.registry)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Suite {
    pub tasks: Vec<Task>,
}

impl Suite {
    pub fn load(path: &Path) -> Result<Suite, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.into(), source })?;
        Suite::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses JSONL task definitions; every invalid task is reported, not just the first.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Suite, HarnessError> {
        let mut tasks = Vec::new();
        let mut problems = Vec::new();
        let mut ids = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let label = task_label(line, n + 1);
            let def: TaskDefinition = match from_json(line.as_bytes()) {
                Ok(d) => d,
                Err(e) => {
                    problems.push(SuiteProblem { task: label, message: e.to_string() });
                    continue;
                }
            };
            if !ids.insert(def.id.clone()) {
                problems.push(SuiteProblem { task: label, message: "duplicate task id".into() });
                continue;
            }
            match resolve(def, base_dir) {
                Ok(task) => tasks.push(task),
                Err(message) => problems.push(SuiteProblem { task: label, message }),
            }
        }
        if problems.is_empty() {
            Ok(Suite { tasks })
        } else {
            Err(HarnessError::SuiteLoad(problems))
        }
    }

    pub fn to_jsonl(definitions: &[TaskDefinition]) -> Result<String, SchemaError> {
        let mut out = String::new();
        for d in definitions {
            out.push_str(&crate::schema::to_canonical_string(d)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn task_label(line: &str, line_no: usize) -> String {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()
        .and_then(|v| v.get("id").and_then(|id| id.as_str()).map(str::to_string))
        .unwrap_or_else(|| format!("line {line_no}"))
}

fn resolve(def: TaskDefinition, base_dir: &Path) -> Result<Task, String> {
    if def.id.trim().is_empty() {
        return Err("empty task id".into());
    }
    if def.statement.trim().is_empty() {
        return Err("empty statement".into());
    }
    for (name, value) in &def.artifacts {
        check_identifier(name).map_err(|e| format!("artifact `{name}`: {e}"))?;
        value.check(&format!("artifacts.{name}")).map_err(|e| e.to_string())?;
    }
    let mut registry = PredicateRegistry::new();
    for (id, p) in &def.predicates {
        let p = p.clone();
        registry.register(id.clone(), move |v| p.evaluate(v));
    }
    if def.success.is_empty() {
        return Err("no success conditions".into());
    }
    let script = match &def.script {
        None => None,
        Some(ScriptRef::Inline(s)) => Some(s.clone()),
        Some(ScriptRef::File(p)) => {
            let path = base_dir.join(p);
            let bytes = std::fs::read(&path).map_err(|e| format!("script {}: {e}", path.display()))?;
            Some(from_json(&bytes).map_err(|e| format!("script {}: {e}", path.display()))?)
        }
    };
    let scripted_returns: Option<BTreeSet<&str>> = script.as_ref().map(|s| {
        s.steps
            .iter()
            .filter_map(|step| match &step.action {
                PolicyAction::SpecProposal { returns, .. } => Some(returns.iter().map(|r| r.name.as_str())),
                _ => None,
            })
            .flatten()
            .collect()
    });
    for (i, field) in def.success.iter().enumerate() {
        let name = &field.name;
        check_identifier(name).map_err(|e| format!("success `{name}`: {e}"))?;
        field.annotation.check(&format!("success[{i}].annotation")).map_err(|e| e.to_string())?;
        if def.artifacts.contains_key(name) {
            return Err(format!("success `{name}` names an environment artifact, which no plan can commit"));
        }
        if scripted_returns.as_ref().is_some_and(|r| !r.contains(name.as_str())) {
            return Err(format!("success `{name}` is never returned by the task's script"));
        }
        for c in &field.conditions {
            if let ValidationCondition::Named(id) = c {
                if !registry.contains(id) {
                    return Err(format!("success `{name}` uses unregistered predicate `{id}`"));
                }
            }
        }
    }
    Ok(Task { definition: def, script, registry })
}
