//! The artifact object model shared by the workspace, sandboxes and the wire.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::InvariantError;

/// Absolute tolerance used whenever two floats are compared for equality.
pub const FLOAT_TOLERANCE: f64 = 1e-9;

/// Maximum number of rows (tables) or items (lists, records) kept in a preview.
pub const PREVIEW_ROWS: usize = 5;
/// Maximum number of characters kept for any text inside a preview.
pub const PREVIEW_CHARS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Value {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
    List(Vec<Value>),
    Record(BTreeMap<String, Value>),
    Table(Table),
}

/// A rectangular table. Every row has one cell per column and column names are unique.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTable")]
pub struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<Value>>,
}

#[derive(Deserialize)]
struct RawTable {
    columns: Vec<String>,
    rows: Vec<Vec<Value>>,
}

impl TryFrom<RawTable> for Table {
    type Error = String;

    fn try_from(raw: RawTable) -> Result<Self, Self::Error> {
        Table::new(raw.columns, raw.rows)
    }
}

impl Table {
    pub fn new(columns: Vec<String>, rows: Vec<Vec<Value>>) -> Result<Self, String> {
        let mut seen = BTreeSet::new();
        for column in &columns {
            if !seen.insert(column.as_str()) {
                return Err(format!("duplicate column name `{column}`"));
            }
        }
        for (index, row) in rows.iter().enumerate() {
            if row.len() != columns.len() {
                return Err(format!(
                    "row {index} has {} cells but the table has {} columns",
                    row.len(),
                    columns.len()
                ));
            }
        }
        Ok(Self { columns, rows })
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<Value>] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn into_parts(self) -> (Vec<String>, Vec<Vec<Value>>) {
        (self.columns, self.rows)
    }

    /// True when the named column exists and holds no `Null` cell.
    pub fn column_has_no_nulls(&self, name: &str) -> bool {
        match self.column_index(name) {
            Some(idx) => self.rows.iter().all(|row| !row[idx].is_null()),
            None => false,
        }
    }
}

impl Value {
    pub fn text(s: impl Into<String>) -> Self {
        Value::Text(s.into())
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Value::Null => "null",
            Value::Bool(_) => "bool",
            Value::Int(_) => "int",
            Value::Float(_) => "float",
            Value::Text(_) => "text",
            Value::List(_) => "list",
            Value::Record(_) => "record",
            Value::Table(_) => "table",
        }
    }

    pub fn as_table(&self) -> Option<&Table> {
        match self {
            Value::Table(t) => Some(t),
            _ => None,
        }
    }

    /// Structural equality where floats compare within [`FLOAT_TOLERANCE`].
    pub fn approx_eq(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Float(a), Value::Float(b)) => (a - b).abs() <= FLOAT_TOLERANCE,
            (Value::Int(a), Value::Float(b)) | (Value::Float(b), Value::Int(a)) => {
                (*a as f64 - b).abs() <= FLOAT_TOLERANCE
            }
            (Value::List(a), Value::List(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.approx_eq(y))
            }
            (Value::Record(a), Value::Record(b)) => {
                a.len() == b.len()
                    && a.iter().zip(b).all(|((ka, va), (kb, vb))| ka == kb && va.approx_eq(vb))
            }
            (Value::Table(a), Value::Table(b)) => {
                a.columns == b.columns
                    && a.rows.len() == b.rows.len()
                    && a.rows.iter().zip(&b.rows).all(|(ra, rb)| {
                        ra.iter().zip(rb).all(|(x, y)| x.approx_eq(y))
                    })
            }
            _ => self == other,
        }
    }

    /// Checks the invariants serde alone cannot enforce (finite floats, table shape).
    pub fn check(&self, path: &str) -> Result<(), InvariantError> {
        match self {
            Value::Float(f) if !f.is_finite() => {
                Err(InvariantError::new(path, "float must be finite"))
            }
            Value::List(items) => items
                .iter()
                .enumerate()
                .try_for_each(|(i, v)| v.check(&format!("{path}[{i}]"))),
            Value::Record(fields) => fields
                .iter()
                .try_for_each(|(k, v)| v.check(&format!("{path}.{k}"))),
            Value::Table(t) => {
                Table::new(t.columns.clone(), Vec::new())
                    .map_err(|e| InvariantError::new(&format!("{path}.columns"), e))?;
                for (r, row) in t.rows.iter().enumerate() {
                    if row.len() != t.columns.len() {
                        return Err(InvariantError::new(
                            &format!("{path}.rows[{r}]"),
                            "row length differs from column count",
                        ));
                    }
                    for (c, cell) in row.iter().enumerate() {
                        cell.check(&format!("{path}.rows[{r}][{c}]"))?;
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// A truncated copy: at most [`PREVIEW_ROWS`] rows/items and [`PREVIEW_CHARS`] per text.
    pub fn preview(&self) -> Value {
        match self {
            Value::Text(s) => Value::Text(truncate_chars(s, PREVIEW_CHARS)),
            Value::List(items) => {
                Value::List(items.iter().take(PREVIEW_ROWS).map(Value::preview).collect())
            }
            Value::Record(fields) => Value::Record(
                fields
                    .iter()
                    .take(PREVIEW_ROWS)
                    .map(|(k, v)| (truncate_chars(k, PREVIEW_CHARS), v.preview()))
                    .collect(),
            ),
            Value::Table(t) => Value::Table(Table {
                columns: t.columns.clone(),
                rows: t
                    .rows
                    .iter()
                    .take(PREVIEW_ROWS)
                    .map(|row| row.iter().map(Value::preview).collect())
                    .collect(),
            }),
            other => other.clone(),
        }
    }
}

pub(crate) fn truncate_chars(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((idx, _)) => s[..idx].to_string(),
        None => s.to_string(),
    }
}

fn fmt_float(f: f64, out: &mut fmt::Formatter<'_>) -> fmt::Result {
    if f.fract() == 0.0 && f.abs() < 1e15 {
        write!(out, "{f:.1}")
    } else {
        write!(out, "{f}")
    }
}

/// Human-readable rendering used for `print` and free-text handoffs.
impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => f.write_str("null"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => fmt_float(*x, f),
            Value::Text(s) => f.write_str(s),
            Value::List(items) => {
                f.write_str("[")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write_nested(item, f)?;
                }
                f.write_str("]")
            }
            Value::Record(fields) => {
                f.write_str("{")?;
                for (i, (k, v)) in fields.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{k}: ")?;
                    write_nested(v, f)?;
                }
                f.write_str("}")
            }
            Value::Table(t) => {
                write!(f, "{}", t.columns.join(" | "))?;
                for row in &t.rows {
                    f.write_str("\n")?;
                    for (i, cell) in row.iter().enumerate() {
                        if i > 0 {
                            f.write_str(" | ")?;
                        }
                        write_nested(cell, f)?;
                    }
                }
                Ok(())
            }
        }
    }
}

fn write_nested(v: &Value, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match v {
        Value::Text(s) => write!(f, "{s:?}"),
        other => write!(f, "{other}"),
    }
}
