//! CellScript: the small deterministic language run by the builtin executor.
//!
//! ```text
//! let t2 = dedupe_by(df_raw, "product_id")   # statements end at a newline or `;`
//! print rows(t2)
//! fail "no usable rows"
//! ```

mod builtins;
mod lexer;
mod parser;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::schema::Value;

use super::{CellError, CellErrorKind, CellOutcome};
use parser::{BinOp, Expr, Stmt};

pub use builtins::{dedupe_by, drop_null_rows, fill_forward, scale_column, BUILTINS};

/// Per-cell stdout limit in bytes.
pub const STDOUT_CAP: usize = 64 * 1024;
pub const STDOUT_TRUNCATED: &str = "\n[stdout truncated]\n";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl ParseError {
    fn new(line: usize, message: impl Into<String>) -> Self {
        Self { line, message: message.into() }
    }
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

/// Checks that `code` parses, without running it.
pub fn parse_check(code: &str) -> Result<(), ParseError> {
    parser::parse(lexer::lex(code)?).map(|_| ())
}

/// Runs one cell against `namespace`.
///
/// Statements run in order until one fails; bindings made before the failure
/// persist, and stdout written before it is kept.
pub fn eval_cell(namespace: &mut BTreeMap<String, Value>, code: &str, cell_index: u32) -> CellOutcome {
    let mut out = Stdout::default();
    let mut defined = BTreeSet::new();
    let error = match lexer::lex(code).and_then(parser::parse) {
        Err(e) => Some(CellError { kind: CellErrorKind::Parse, message: e.to_string() }),
        Ok(stmts) => run(namespace, &stmts, &mut out, &mut defined).err(),
    };
    CellOutcome { cell_index, stdout: out.text, error, defined_names: defined.into_iter().collect() }
}

#[derive(Default)]
struct Stdout {
    text: String,
    truncated: bool,
}

impl Stdout {
    fn write_line(&mut self, line: &str) {
        if self.truncated {
            return;
        }
        let room = STDOUT_CAP - self.text.len();
        if line.len() < room {
            self.text.push_str(line);
            self.text.push('\n');
            return;
        }
        let mut cut = room;
        while !line.is_char_boundary(cut) {
            cut -= 1;
        }
        self.text.push_str(&line[..cut]);
        self.text.push_str(STDOUT_TRUNCATED);
        self.truncated = true;
    }
}

fn run(
    ns: &mut BTreeMap<String, Value>,
    stmts: &[Stmt],
    out: &mut Stdout,
    defined: &mut BTreeSet<String>,
) -> Result<(), CellError> {
    for stmt in stmts {
        match stmt {
            Stmt::Let(name, expr) => {
                let v = eval(ns, expr)?;
                ns.insert(name.clone(), v);
                defined.insert(name.clone());
            }
            Stmt::Print(expr) => out.write_line(&eval(ns, expr)?.to_string()),
            Stmt::Fail(msg) => return Err(CellError { kind: CellErrorKind::UserFail, message: msg.clone() }),
        }
    }
    Ok(())
}

pub(super) fn runtime(message: impl Into<String>) -> CellError {
    CellError { kind: CellErrorKind::Runtime, message: message.into() }
}

fn eval(ns: &BTreeMap<String, Value>, expr: &Expr) -> Result<Value, CellError> {
    Ok(match expr {
        Expr::Null => Value::Null,
        Expr::Bool(b) => Value::Bool(*b),
        Expr::Int(i) => Value::Int(*i),
        Expr::Float(f) => Value::Float(*f),
        Expr::Str(s) => Value::Text(s.clone()),
        Expr::Name(name) => ns.get(name).cloned().ok_or_else(|| CellError {
            kind: CellErrorKind::Name,
            message: format!("name `{name}` is not defined"),
        })?,
        Expr::List(items) => Value::List(items.iter().map(|e| eval(ns, e)).collect::<Result<_, _>>()?),
        Expr::Record(fields) => {
            let mut map = BTreeMap::new();
            for (k, e) in fields {
                map.insert(k.clone(), eval(ns, e)?);
            }
            Value::Record(map)
        }
        Expr::Neg(e) => match eval(ns, e)? {
            Value::Int(i) => Value::Int(i.checked_neg().ok_or_else(|| runtime("integer overflow"))?),
            Value::Float(f) => Value::Float(-f),
            other => return Err(runtime(format!("cannot negate {}", other.kind_name()))),
        },
        Expr::Binary(op, l, r) => binary(*op, eval(ns, l)?, eval(ns, r)?)?,
        Expr::Index(target, index) => index_value(eval(ns, target)?, eval(ns, index)?)?,
        Expr::Call(name, args) => {
            let args = args.iter().map(|e| eval(ns, e)).collect::<Result<Vec<_>, _>>()?;
            builtins::call(name, args)?
        }
    })
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Int(i) => Some(*i as f64),
        Value::Float(f) => Some(*f),
        _ => None,
    }
}

pub(super) fn finite(f: f64) -> Result<Value, CellError> {
    if f.is_finite() {
        Ok(Value::Float(f))
    } else {
        Err(runtime("float result is not finite"))
    }
}

pub(super) fn multiply(a: &Value, b: &Value) -> Result<Value, CellError> {
    binary(BinOp::Mul, a.clone(), b.clone())
}

fn binary(op: BinOp, l: Value, r: Value) -> Result<Value, CellError> {
    use BinOp::*;
    let type_error =
        |l: &Value, r: &Value| runtime(format!("unsupported operands for {op:?}: {} and {}", l.kind_name(), r.kind_name()));
    match op {
        Add | Sub | Mul => match (&l, &r) {
            (Value::Int(a), Value::Int(b)) => {
                let v = match op {
                    Add => a.checked_add(*b),
                    Sub => a.checked_sub(*b),
                    _ => a.checked_mul(*b),
                };
                v.map(Value::Int).ok_or_else(|| runtime("integer overflow"))
            }
            (Value::Text(a), Value::Text(b)) if op == Add => Ok(Value::Text(format!("{a}{b}"))),
            (Value::List(a), Value::List(b)) if op == Add => {
                Ok(Value::List(a.iter().chain(b).cloned().collect()))
            }
            _ => match (as_f64(&l), as_f64(&r)) {
                (Some(a), Some(b)) => finite(match op {
                    Add => a + b,
                    Sub => a - b,
                    _ => a * b,
                }),
                _ => Err(type_error(&l, &r)),
            },
        },
        Div => match (as_f64(&l), as_f64(&r)) {
            (Some(_), Some(b)) if b == 0.0 => Err(runtime("division by zero")),
            (Some(a), Some(b)) => finite(a / b),
            _ => Err(type_error(&l, &r)),
        },
        Eq => Ok(Value::Bool(values_equal(&l, &r))),
        Ne => Ok(Value::Bool(!values_equal(&l, &r))),
        Lt | Le | Gt | Ge => {
            let ord = match (&l, &r) {
                (Value::Text(a), Value::Text(b)) => a.cmp(b),
                _ => match (as_f64(&l), as_f64(&r)) {
                    (Some(a), Some(b)) => a.partial_cmp(&b).ok_or_else(|| type_error(&l, &r))?,
                    _ => return Err(type_error(&l, &r)),
                },
            };
            Ok(Value::Bool(match op {
                Lt => ord.is_lt(),
                Le => ord.is_le(),
                Gt => ord.is_gt(),
                _ => ord.is_ge(),
            }))
        }
    }
}

fn values_equal(l: &Value, r: &Value) -> bool {
    match (as_f64(l), as_f64(r)) {
        (Some(a), Some(b)) => a == b,
        _ => l == r,
    }
}

fn index_value(target: Value, index: Value) -> Result<Value, CellError> {
    let position = |len: usize| -> Result<usize, CellError> {
        match index {
            Value::Int(i) if i >= 0 && (i as usize) < len => Ok(i as usize),
            Value::Int(i) => Err(runtime(format!("index {i} out of range for length {len}"))),
            ref other => Err(runtime(format!("cannot index with {}", other.kind_name()))),
        }
    };
    match &target {
        Value::List(items) => Ok(items[position(items.len())?].clone()),
        Value::Record(fields) => match &index {
            Value::Text(k) => fields.get(k).cloned().ok_or_else(|| runtime(format!("record has no key `{k}`"))),
            other => Err(runtime(format!("record keys are text, not {}", other.kind_name()))),
        },
        Value::Table(t) => match &index {
            Value::Text(col) => {
                let c = t.column_index(col).ok_or_else(|| runtime(format!("table has no column `{col}`")))?;
                Ok(Value::List(t.rows().iter().map(|row| row[c].clone()).collect()))
            }
            _ => {
                let row = &t.rows()[position(t.n_rows())?];
                Ok(Value::Record(t.columns().iter().cloned().zip(row.iter().cloned()).collect()))
            }
        },
        other => Err(runtime(format!("{} is not indexable", other.kind_name()))),
    }
}
