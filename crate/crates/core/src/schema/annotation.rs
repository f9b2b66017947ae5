use std::fmt;

use serde::{Deserialize, Serialize};

use super::value::Value;
use super::InvariantError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Null,
    Bool,
    Int,
    Float,
    Text,
    List,
    Record,
    Table,
    Any,
}

impl Kind {
    pub fn of(value: &Value) -> Kind {
        match value {
            Value::Null => Kind::Null,
            Value::Bool(_) => Kind::Bool,
            Value::Int(_) => Kind::Int,
            Value::Float(_) => Kind::Float,
            Value::Text(_) => Kind::Text,
            Value::List(_) => Kind::List,
            Value::Record(_) => Kind::Record,
            Value::Table(_) => Kind::Table,
        }
    }

    pub fn accepts(self, value: &Value) -> bool {
        self == Kind::Any || self == Kind::of(value)
    }

    /// Whether a stored artifact of kind `stored` may be bound where `self` is expected.
    pub fn compatible_with(self, stored: Kind) -> bool {
        self == Kind::Any || stored == Kind::Any || self == stored
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Null => "null",
            Kind::Bool => "bool",
            Kind::Int => "int",
            Kind::Float => "float",
            Kind::Text => "text",
            Kind::List => "list",
            Kind::Record => "record",
            Kind::Table => "table",
            Kind::Any => "any",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ColumnConstraint {
    pub column: String,
    pub no_nulls: bool,
}

/// Type, optional table shape and per-column constraints attached to a binding or artifact.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TypeAnnotation {
    pub kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Shape>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub columns: Vec<ColumnConstraint>,
}

impl TypeAnnotation {
    pub fn of_kind(kind: Kind) -> Self {
        Self { kind, shape: None, columns: Vec::new() }
    }

    pub fn any() -> Self {
        Self::of_kind(Kind::Any)
    }

    pub fn table(rows: usize, cols: usize) -> Self {
        Self { kind: Kind::Table, shape: Some(Shape { rows, cols }), columns: Vec::new() }
    }

    pub fn with_no_nulls(mut self, column: impl Into<String>) -> Self {
        let column = column.into();
        if !self.columns.iter().any(|c| c.column == column) {
            self.columns.push(ColumnConstraint { column, no_nulls: true });
        }
        self
    }

    /// Annotation describing `value` exactly: its kind, and its shape when it is a table.
    pub fn infer(value: &Value) -> Self {
        match value {
            Value::Table(t) => Self::table(t.n_rows(), t.n_cols()),
            other => Self::of_kind(Kind::of(other)),
        }
    }

    pub fn check(&self, path: &str) -> Result<(), InvariantError> {
        if self.shape.is_some() && self.kind != Kind::Table {
            return Err(InvariantError::new(
                &format!("{path}.shape"),
                "shape is only allowed on table annotations",
            ));
        }
        if !self.columns.is_empty() && !matches!(self.kind, Kind::Table | Kind::Any) {
            return Err(InvariantError::new(
                &format!("{path}.columns"),
                "column constraints are only allowed on table annotations",
            ));
        }
        Ok(())
    }

    /// Full conformance: kind, shape (if declared) and column constraints.
    pub fn conforms(&self, value: &Value) -> Result<(), String> {
        if !self.kind.accepts(value) {
            return Err(format!("expected {}, found {}", self.kind.as_str(), value.kind_name()));
        }
        if let Some(shape) = self.shape {
            let t = value.as_table().ok_or("shape declared on a non-table value")?;
            if t.n_rows() != shape.rows || t.n_cols() != shape.cols {
                return Err(format!(
                    "expected shape {}×{}, found {}×{}",
                    shape.rows,
                    shape.cols,
                    t.n_rows(),
                    t.n_cols()
                ));
            }
        }
        for constraint in &self.columns {
            let Some(t) = value.as_table() else {
                return Err("column constraint declared on a non-table value".into());
            };
            if t.column_index(&constraint.column).is_none() {
                return Err(format!("missing column `{}`", constraint.column));
            }
            if constraint.no_nulls && !t.column_has_no_nulls(&constraint.column) {
                return Err(format!("column `{}` contains nulls", constraint.column));
            }
        }
        Ok(())
    }

    /// Compatibility between a requested annotation and the one stored with an artifact.
    pub fn compatible_with(&self, stored: &TypeAnnotation) -> bool {
        if !self.kind.compatible_with(stored.kind) {
            return false;
        }
        match (self.shape, stored.shape) {
            (Some(a), Some(b)) => a == b,
            _ => true,
        }
    }
}

/// Compact rendering, e.g. `table 847×12, no nulls in price, product_id`.
impl fmt::Display for TypeAnnotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind.as_str())?;
        if let Some(shape) = self.shape {
            write!(f, " {}×{}", shape.rows, shape.cols)?;
        }
        let no_nulls: Vec<&str> = self
            .columns
            .iter()
            .filter(|c| c.no_nulls)
            .map(|c| c.column.as_str())
            .collect();
        if !no_nulls.is_empty() {
            write!(f, ", no nulls in {}", no_nulls.join(", "))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationCondition {
    TypeMatches,
    NonEmpty,
    ShapeEquals(Shape),
    RowsAtMost(usize),
    RowsAtLeast(usize),
    NoNullsInColumn(String),
    Named(String),
}

impl fmt::Display for ValidationCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationCondition::TypeMatches => f.write_str("type matches"),
            ValidationCondition::NonEmpty => f.write_str("non-empty"),
            ValidationCondition::ShapeEquals(s) => write!(f, "shape {}×{}", s.rows, s.cols),
            ValidationCondition::RowsAtMost(n) => write!(f, "at most {n} rows"),
            ValidationCondition::RowsAtLeast(n) => write!(f, "at least {n} rows"),
            ValidationCondition::NoNullsInColumn(c) => write!(f, "no nulls in {c}"),
            ValidationCondition::Named(id) => write!(f, "satisfies {id}"),
        }
    }
}
