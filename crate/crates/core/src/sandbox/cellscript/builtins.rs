use std::collections::HashSet;

use crate::schema::{Table, Value};

use super::{multiply, runtime, CellError};

pub const BUILTINS: &[&str] =
    &["table", "len", "rows", "cols", "dedupe_by", "drop_null_rows", "fill_forward", "scale_column"];

pub(super) fn call(name: &str, args: Vec<Value>) -> Result<Value, CellError> {
    let arity = |n: usize| -> Result<(), CellError> {
        if args.len() == n {
            Ok(())
        } else {
            Err(runtime(format!("{name}() takes {n} argument(s), got {}", args.len())))
        }
    };
    match name {
        "table" => {
            arity(2)?;
            build_table(&args[0], &args[1])
        }
        "len" => {
            arity(1)?;
            let n = match &args[0] {
                Value::Text(s) => s.chars().count(),
                Value::List(items) => items.len(),
                Value::Record(fields) => fields.len(),
                Value::Table(t) => t.n_rows(),
                other => return Err(runtime(format!("len() of {}", other.kind_name()))),
            };
            Ok(Value::Int(n as i64))
        }
        "rows" | "cols" => {
            arity(1)?;
            let t = table_arg(name, &args[0])?;
            Ok(Value::Int(if name == "rows" { t.n_rows() } else { t.n_cols() } as i64))
        }
        "dedupe_by" | "drop_null_rows" | "fill_forward" => {
            arity(2)?;
            let t = table_arg(name, &args[0])?;
            let col = text_arg(name, &args[1])?;
            let out = match name {
                "dedupe_by" => dedupe_by(t, col),
                "drop_null_rows" => drop_null_rows(t, col),
                _ => fill_forward(t, col),
            };
            out.map(Value::Table).map_err(runtime)
        }
        "scale_column" => {
            arity(3)?;
            let t = table_arg(name, &args[0])?;
            let col = text_arg(name, &args[1])?;
            scale_column(t, col, &args[2]).map(Value::Table).map_err(runtime)
        }
        other => Err(CellError {
            kind: super::CellErrorKind::Name,
            message: format!("function `{other}` is not defined"),
        }),
    }
}

fn table_arg<'a>(name: &str, v: &'a Value) -> Result<&'a Table, CellError> {
    v.as_table().ok_or_else(|| runtime(format!("{name}() expects a table, got {}", v.kind_name())))
}

fn text_arg<'a>(name: &str, v: &'a Value) -> Result<&'a str, CellError> {
    match v {
        Value::Text(s) => Ok(s),
        other => Err(runtime(format!("{name}() expects a column name, got {}", other.kind_name()))),
    }
}

fn build_table(columns: &Value, rows: &Value) -> Result<Value, CellError> {
    let Value::List(columns) = columns else {
        return Err(runtime("table() columns must be a list of text"));
    };
    let columns = columns
        .iter()
        .map(|c| match c {
            Value::Text(s) => Ok(s.clone()),
            _ => Err(runtime("table() columns must be a list of text")),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let Value::List(rows) = rows else {
        return Err(runtime("table() rows must be a list of lists"));
    };
    let rows = rows
        .iter()
        .map(|r| match r {
            Value::List(cells) => Ok(cells.clone()),
            _ => Err(runtime("table() rows must be a list of lists")),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Table::new(columns, rows).map(Value::Table).map_err(runtime)
}

fn column(t: &Table, col: &str) -> Result<usize, String> {
    t.column_index(col).ok_or_else(|| format!("table has no column `{col}`"))
}

/// Keeps the first row for each distinct value of `col`; nulls count as one value.
pub fn dedupe_by(t: &Table, col: &str) -> Result<Table, String> {
    let c = column(t, col)?;
    let mut seen = HashSet::new();
    let rows = t
        .rows()
        .iter()
        .filter(|row| seen.insert(serde_json::to_string(&row[c]).expect("values serialize")))
        .cloned()
        .collect();
    Table::new(t.columns().to_vec(), rows)
}

pub fn drop_null_rows(t: &Table, col: &str) -> Result<Table, String> {
    let c = column(t, col)?;
    let rows = t.rows().iter().filter(|row| !row[c].is_null()).cloned().collect();
    Table::new(t.columns().to_vec(), rows)
}

/// Replaces each null in `col` with the nearest non-null above it. Leading nulls stay.
pub fn fill_forward(t: &Table, col: &str) -> Result<Table, String> {
    let c = column(t, col)?;
    let mut last: Option<Value> = None;
    let rows = t
        .rows()
        .iter()
        .map(|row| {
            let mut row = row.clone();
            match (&row[c], &last) {
                (Value::Null, Some(prev)) => row[c] = prev.clone(),
                (Value::Null, None) => {}
                (v, _) => last = Some(v.clone()),
            }
            row
        })
        .collect();
    Table::new(t.columns().to_vec(), rows)
}

/// Multiplies every non-null cell of a numeric column by `factor`.
pub fn scale_column(t: &Table, col: &str, factor: &Value) -> Result<Table, String> {
    let c = column(t, col)?;
    if !matches!(factor, Value::Int(_) | Value::Float(_)) {
        return Err(format!("scale factor must be numeric, got {}", factor.kind_name()));
    }
    let rows = t
        .rows()
        .iter()
        .map(|row| {
            let mut row = row.clone();
            match &row[c] {
                Value::Null => {}
                v @ (Value::Int(_) | Value::Float(_)) => {
                    row[c] = multiply(v, factor).map_err(|e| e.message)?;
                }
                other => return Err(format!("column `{col}` holds {}, not a number", other.kind_name())),
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>, String>>()?;
    Table::new(t.columns().to_vec(), rows)
}
