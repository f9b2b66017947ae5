//! Schema validation for specifications (downward) and results (upward).

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::annotation::{TypeAnnotation, ValidationCondition};
use super::message::{ArtifactRef, CoderResult, ReturnField, Specification, Status};
use super::value::Value;
use super::SchemaError;

type PredicateFn = Arc<dyn Fn(&Value) -> bool + Send + Sync>;

/// Named predicates referenced by `ValidationCondition::Named`. Unknown ids never pass.
#[derive(Clone, Default)]
pub struct PredicateRegistry {
    predicates: BTreeMap<String, PredicateFn>,
}

impl fmt::Debug for PredicateRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.predicates.keys()).finish()
    }
}

impl PredicateRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, id: impl Into<String>, predicate: F)
    where
        F: Fn(&Value) -> bool + Send + Sync + 'static,
    {
        self.predicates.insert(id.into(), Arc::new(predicate));
    }

    pub fn contains(&self, id: &str) -> bool {
        self.predicates.contains_key(id)
    }

    pub fn evaluate(&self, id: &str, value: &Value) -> Result<bool, SchemaError> {
        self.predicates
            .get(id)
            .map(|p| p(value))
            .ok_or_else(|| SchemaError::UnknownPredicate(id.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "issue", rename_all = "snake_case")]
pub enum Issue {
    EmptyDirective,
    DuplicateInput { name: String },
    DuplicateReturn { name: String },
    InvalidIdentifier { name: String, reason: String },
    UnresolvedBinding { name: String, artifact: String },
    IncompatibleBinding { name: String, expected: String, stored: String },
    MissingOutput { name: String },
    DanglingReference { name: String, handle: String },
    TypeMismatch { name: String, reason: String },
    ConditionFailed { name: String, condition: String },
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Issue::EmptyDirective => f.write_str("directive is empty"),
            Issue::DuplicateInput { name } => write!(f, "duplicate input `{name}`"),
            Issue::DuplicateReturn { name } => write!(f, "duplicate return `{name}`"),
            Issue::InvalidIdentifier { name, reason } => write!(f, "invalid identifier `{name}`: {reason}"),
            Issue::UnresolvedBinding { name, artifact } => {
                write!(f, "binding `{name}` refers to unknown artifact `{artifact}`")
            }
            Issue::IncompatibleBinding { name, expected, stored } => {
                write!(f, "binding `{name}` expects {expected} but the artifact is {stored}")
            }
            Issue::MissingOutput { name } => write!(f, "missing output `{name}`"),
            Issue::DanglingReference { name, handle } => {
                write!(f, "output `{name}` refers to unknown handle `{handle}`")
            }
            Issue::TypeMismatch { name, reason } => write!(f, "output `{name}`: {reason}"),
            Issue::ConditionFailed { name, condition } => {
                write!(f, "output `{name}` fails condition: {condition}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BindingCheck {
    pub name: String,
    pub resolved: bool,
    pub compatible: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub bindings: Vec<BindingCheck>,
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }

    /// One line per issue, for diagnostics.
    pub fn describe(&self) -> String {
        self.issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
    }
}

/// Checks a specification against the artifacts currently visible in the workspace.
pub fn validate_specification(
    spec: &Specification,
    visible: &BTreeMap<String, TypeAnnotation>,
) -> ValidationReport {
    let mut report = ValidationReport::default();
    if spec.directive.trim().is_empty() {
        report.issues.push(Issue::EmptyDirective);
    }
    let mut seen = std::collections::BTreeSet::new();
    for binding in &spec.inputs {
        if !seen.insert(binding.name.as_str()) {
            report.issues.push(Issue::DuplicateInput { name: binding.name.clone() });
        }
        if let Err(reason) = super::check_identifier(&binding.name) {
            report.issues.push(Issue::InvalidIdentifier { name: binding.name.clone(), reason });
        }
        let (resolved, compatible) = match visible.get(&binding.artifact_name) {
            None => {
                report.issues.push(Issue::UnresolvedBinding {
                    name: binding.name.clone(),
                    artifact: binding.artifact_name.clone(),
                });
                (false, false)
            }
            Some(stored) => {
                let ok = binding.annotation.compatible_with(stored);
                if !ok {
                    report.issues.push(Issue::IncompatibleBinding {
                        name: binding.name.clone(),
                        expected: binding.annotation.to_string(),
                        stored: stored.to_string(),
                    });
                }
                (true, ok)
            }
        };
        report.bindings.push(BindingCheck { name: binding.name.clone(), resolved, compatible });
    }
    let mut seen = std::collections::BTreeSet::new();
    for field in &spec.returns {
        if !seen.insert(field.name.as_str()) {
            report.issues.push(Issue::DuplicateReturn { name: field.name.clone() });
        }
    }
    report
}

/// Evaluates one condition against a value. Only `Named` can error (unknown predicate).
pub fn check_condition(
    condition: &ValidationCondition,
    annotation: &TypeAnnotation,
    value: &Value,
    registry: &PredicateRegistry,
) -> Result<bool, SchemaError> {
    let rows = || match value {
        Value::Table(t) => Some(t.n_rows()),
        Value::List(items) => Some(items.len()),
        _ => None,
    };
    Ok(match condition {
        ValidationCondition::TypeMatches => annotation.conforms(value).is_ok(),
        ValidationCondition::NonEmpty => match value {
            Value::Null => false,
            Value::Text(s) => !s.is_empty(),
            Value::List(items) => !items.is_empty(),
            Value::Record(fields) => !fields.is_empty(),
            Value::Table(t) => t.n_rows() > 0,
            _ => true,
        },
        ValidationCondition::ShapeEquals(shape) => value
            .as_table()
            .is_some_and(|t| t.n_rows() == shape.rows && t.n_cols() == shape.cols),
        ValidationCondition::RowsAtMost(n) => rows().is_some_and(|r| r <= *n),
        ValidationCondition::RowsAtLeast(n) => rows().is_some_and(|r| r >= *n),
        ValidationCondition::NoNullsInColumn(column) => {
            value.as_table().is_some_and(|t| t.column_has_no_nulls(column))
        }
        ValidationCondition::Named(id) => registry.evaluate(id, value)?,
    })
}

fn unknown_predicates<'a>(
    fields: impl IntoIterator<Item = &'a ReturnField>,
    registry: &PredicateRegistry,
) -> Result<(), SchemaError> {
    for field in fields {
        for condition in &field.conditions {
            if let ValidationCondition::Named(id) = condition {
                if !registry.contains(id) {
                    return Err(SchemaError::UnknownPredicate(id.clone()));
                }
            }
        }
    }
    Ok(())
}

/// Validates the named values of a return schema directly.
pub fn validate_values(
    returns: &[ReturnField],
    values: &BTreeMap<String, Value>,
    registry: &PredicateRegistry,
) -> Result<ValidationReport, SchemaError> {
    unknown_predicates(returns, registry)?;
    let mut report = ValidationReport::default();
    for field in returns {
        let Some(value) = values.get(&field.name) else {
            report.issues.push(Issue::MissingOutput { name: field.name.clone() });
            continue;
        };
        check_field(field, value, registry, &mut report)?;
    }
    Ok(report)
}

fn check_field(
    field: &ReturnField,
    value: &Value,
    registry: &PredicateRegistry,
    report: &mut ValidationReport,
) -> Result<(), SchemaError> {
    if let Err(reason) = field.annotation.conforms(value) {
        report.issues.push(Issue::TypeMismatch { name: field.name.clone(), reason });
    }
    for condition in &field.conditions {
        if !check_condition(condition, &field.annotation, value, registry)? {
            report.issues.push(Issue::ConditionFailed {
                name: field.name.clone(),
                condition: condition.to_string(),
            });
        }
    }
    Ok(())
}

/// Validates a successful result against its return schema, resolving each artifact reference.
pub fn validate_result<'v, F>(
    result: &CoderResult,
    returns: &[ReturnField],
    resolve: F,
    registry: &PredicateRegistry,
) -> Result<ValidationReport, SchemaError>
where
    F: Fn(&ArtifactRef) -> Option<&'v Value>,
{
    if result.status != Status::Success {
        return Err(SchemaError::NotSuccess);
    }
    unknown_predicates(returns, registry)?;
    let mut report = ValidationReport::default();
    for field in returns {
        let Some(reference) = result.artifacts.get(&field.name) else {
            report.issues.push(Issue::MissingOutput { name: field.name.clone() });
            continue;
        };
        let Some(value) = resolve(reference) else {
            report.issues.push(Issue::DanglingReference {
                name: field.name.clone(),
                handle: reference.handle.clone(),
            });
            continue;
        };
        check_field(field, value, registry, &mut report)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::annotation::Kind;
    use crate::schema::message::{InputBinding, SubTaskId};
    use crate::schema::value::Table;

    fn spec_with(inputs: Vec<InputBinding>, returns: Vec<ReturnField>) -> Specification {
        Specification { subtask_id: SubTaskId::new("s"), directive: "do it".into(), inputs, returns }
    }

    fn binding(name: &str, annotation: TypeAnnotation) -> InputBinding {
        InputBinding { name: name.into(), artifact_name: name.into(), annotation, sample: None }
    }

    #[test]
    fn resolvable_table_binding_is_valid() {
        let visible = BTreeMap::from([("df_raw".to_string(), TypeAnnotation::table(847, 12))]);
        let spec = spec_with(vec![binding("df_raw", TypeAnnotation::table(847, 12))], vec![]);
        let report = validate_specification(&spec, &visible);
        assert!(report.is_valid(), "{report:?}");
        assert_eq!(report.bindings, vec![BindingCheck { name: "df_raw".into(), resolved: true, compatible: true }]);
    }

    #[test]
    fn zero_inputs_one_return_is_valid() {
        let spec = spec_with(vec![], vec![ReturnField::new("out", TypeAnnotation::of_kind(Kind::Int))]);
        assert!(validate_specification(&spec, &BTreeMap::new()).is_valid());
    }

    #[test]
    fn unresolved_binding_is_reported() {
        let spec = spec_with(vec![binding("x", TypeAnnotation::any())], vec![]);
        let report = validate_specification(&spec, &BTreeMap::new());
        assert_eq!(
            report.issues,
            vec![Issue::UnresolvedBinding { name: "x".into(), artifact: "x".into() }]
        );
    }

    #[test]
    fn incompatible_shape_is_reported() {
        let visible = BTreeMap::from([("t".to_string(), TypeAnnotation::table(3, 2))]);
        let spec = spec_with(vec![binding("t", TypeAnnotation::table(4, 2))], vec![]);
        assert!(matches!(
            validate_specification(&spec, &visible).issues[0],
            Issue::IncompatibleBinding { .. }
        ));
    }

    fn clean_table() -> Value {
        let rows = (0..821)
            .map(|i| {
                let mut row = vec![Value::Int(i), Value::Float(1.5)];
                row.extend((0..10).map(|_| Value::Null));
                row
            })
            .collect();
        let mut columns = vec!["product_id".to_string(), "price".to_string()];
        columns.extend((0..10).map(|i| format!("c{i}")));
        Value::Table(Table::new(columns, rows).unwrap())
    }

    fn handle(name: &str, v: &Value) -> ArtifactRef {
        ArtifactRef { handle: format!("h/{name}"), annotation: TypeAnnotation::infer(v) }
    }

    #[test]
    fn clean_table_satisfies_no_null_conditions() {
        let value = clean_table();
        let result = CoderResult::success(
            SubTaskId::new("s2"),
            BTreeMap::from([("df_clean".to_string(), handle("df_clean", &value))]),
            "ok",
        );
        let returns = vec![ReturnField::new("df_clean", TypeAnnotation::of_kind(Kind::Table))
            .with_condition(ValidationCondition::NoNullsInColumn("price".into()))
            .with_condition(ValidationCondition::NoNullsInColumn("product_id".into()))];
        let report = validate_result(&result, &returns, |_| Some(&value), &PredicateRegistry::new()).unwrap();
        assert!(report.is_valid(), "{report:?}");

        let strict = vec![ReturnField::new("df_clean", TypeAnnotation::of_kind(Kind::Table))
            .with_condition(ValidationCondition::NoNullsInColumn("c0".into()))];
        let report = validate_result(&result, &strict, |_| Some(&value), &PredicateRegistry::new()).unwrap();
        assert!(!report.is_valid());
    }

    #[test]
    fn vacuous_schema_is_valid() {
        let result = CoderResult::success(SubTaskId::new("s"), BTreeMap::new(), "nothing");
        let report = validate_result(&result, &[], |_| None, &PredicateRegistry::new()).unwrap();
        assert!(report.is_valid());
    }

    #[test]
    fn missing_output_is_reported() {
        let value = Value::Int(1);
        let result = CoderResult::success(
            SubTaskId::new("s"),
            BTreeMap::from([("df".to_string(), handle("df", &value))]),
            "",
        );
        let returns = vec![ReturnField::new("df_clean", TypeAnnotation::any())];
        let report = validate_result(&result, &returns, |_| Some(&value), &PredicateRegistry::new()).unwrap();
        assert_eq!(report.issues, vec![Issue::MissingOutput { name: "df_clean".into() }]);
    }

    #[test]
    fn unknown_named_predicate_is_an_error_not_true() {
        let value = Value::Int(1);
        let result = CoderResult::success(
            SubTaskId::new("s"),
            BTreeMap::from([("x".to_string(), handle("x", &value))]),
            "",
        );
        let returns = vec![ReturnField::new("x", TypeAnnotation::any())
            .with_condition(ValidationCondition::Named("positive".into()))];
        let err = validate_result(&result, &returns, |_| Some(&value), &PredicateRegistry::new()).unwrap_err();
        assert_eq!(err, SchemaError::UnknownPredicate("positive".into()));

        let mut registry = PredicateRegistry::new();
        registry.register("positive", |v| matches!(v, Value::Int(i) if *i > 0));
        assert!(validate_result(&result, &returns, |_| Some(&value), &registry).unwrap().is_valid());
    }

    #[test]
    fn fail_results_are_not_schema_validated() {
        let result = CoderResult::fail(
            SubTaskId::new("s"),
            "",
            crate::schema::Diagnostics {
                kind: crate::schema::FailureKind::Reported,
                root_cause: "x".into(),
                failed_operation: "y".into(),
                recoverable_hint: None,
            },
        );
        assert_eq!(
            validate_result(&result, &[], |_| None, &PredicateRegistry::new()).unwrap_err(),
            SchemaError::NotSuccess
        );
    }
}
