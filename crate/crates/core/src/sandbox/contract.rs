//! Black-box checks every executor must pass, whatever runs behind it.

use std::collections::BTreeMap;

use super::{CellErrorKind, CellOutcome, SandboxError, SandboxFactory};
use crate::schema::{ReturnField, Table, TypeAnnotation, Value};

#[derive(Debug, Clone)]
pub struct ContractCheck {
    pub name: &'static str,
    pub result: Result<(), String>,
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

type Check = fn(&SandboxFactory) -> Result<(), String>;

const CHECKS: &[(&str, Check)] = &[
    ("inputs_are_the_whole_namespace", inputs_are_the_whole_namespace),
    ("empty_inputs_give_empty_namespace", empty_inputs_give_empty_namespace),
    ("arithmetic_and_print", arithmetic_and_print),
    ("user_fail_is_a_cell_error", user_fail_is_a_cell_error),
    ("division_by_zero_is_a_runtime_error", division_by_zero_is_a_runtime_error),
    ("names_persist_within_a_session_only", names_persist_within_a_session_only),
    ("extraction_reports_missing_names", extraction_reports_missing_names),
    ("disposal_is_final_and_idempotent", disposal_is_final_and_idempotent),
    ("every_spawn_is_disposed", every_spawn_is_disposed),
];

/// Runs the whole suite against `factory`.
pub fn run_contract(factory: &SandboxFactory) -> Vec<ContractCheck> {
    CHECKS
        .iter()
        .map(|(name, check)| ContractCheck { name, result: check(factory) })
        .collect()
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn inputs_are_the_whole_namespace(f: &SandboxFactory) -> Result<(), String> {
    let mut inputs = BTreeMap::new();
    inputs.insert("a".to_string(), Value::Int(1));
    inputs.insert("b".to_string(), Value::text("two"));
    let mut s = f.spawn(inputs).map_err(err)?;
    let out = s.execute_cell("print a\nprint b").map_err(err)?;
    ensure!(out.error.is_none(), "inputs unreadable: {:?}", out.error);
    ensure!(out.stdout == "1\ntwo\n", "stdout was {:?}", out.stdout);
    let out = s.execute_cell("print c").map_err(err)?;
    ensure!(
        out.error.as_ref().map(|e| e.kind) == Some(CellErrorKind::Name),
        "undeclared name was readable: {out:?}"
    );
    s.dispose();
    Ok(())
}

fn empty_inputs_give_empty_namespace(f: &SandboxFactory) -> Result<(), String> {
    let mut s = f.spawn(BTreeMap::new()).map_err(err)?;
    let out = s.execute_cell("print a").map_err(err)?;
    ensure!(out.error.map(|e| e.kind) == Some(CellErrorKind::Name), "namespace was not empty");
    Ok(())
}

fn arithmetic_and_print(f: &SandboxFactory) -> Result<(), String> {
    let mut s = f.spawn(BTreeMap::new()).map_err(err)?;
    let first = s.execute_cell("let x = 2 + 3").map_err(err)?;
    ensure!(first.defined_names == ["x"], "defined names {:?}", first.defined_names);
    ensure!(first.stdout.is_empty() && first.error.is_none(), "unexpected output {first:?}");
    let second = s.execute_cell("print x").map_err(err)?;
    ensure!(second.stdout == "5\n", "stdout was {:?}", second.stdout);
    ensure!(second.cell_index == 1, "cell index {}", second.cell_index);
    Ok(())
}

fn user_fail_is_a_cell_error(f: &SandboxFactory) -> Result<(), String> {
    let mut s = f.spawn(BTreeMap::new()).map_err(err)?;
    let out = s.execute_cell("print \"before\"\nfail \"boom\"").map_err(err)?;
    let e = out.error.ok_or("no error recorded")?;
    ensure!(e.kind == CellErrorKind::UserFail && e.message == "boom", "error was {e:?}");
    ensure!(out.stdout == "before\n", "partial stdout lost: {:?}", out.stdout);
    let next = s.execute_cell("print 1").map_err(err)?;
    ensure!(next.error.is_none(), "session unusable after a code error");
    Ok(())
}

fn division_by_zero_is_a_runtime_error(f: &SandboxFactory) -> Result<(), String> {
    let mut s = f.spawn(BTreeMap::new()).map_err(err)?;
    let out = s.execute_cell("let ok = 1\nlet z = 1 / 0").map_err(err)?;
    ensure!(out.error.map(|e| e.kind) == Some(CellErrorKind::Runtime), "expected a runtime error");
    ensure!(out.defined_names == ["ok"], "defined names {:?}", out.defined_names);
    Ok(())
}

fn names_persist_within_a_session_only(f: &SandboxFactory) -> Result<(), String> {
    let mut first = f.spawn(BTreeMap::new()).map_err(err)?;
    first.execute_cell("let y = 7").map_err(err)?;
    let read = first.execute_cell("print y").map_err(err)?;
    ensure!(read.stdout == "7\n", "same-session read failed: {read:?}");
    let mut second = f.spawn(BTreeMap::new()).map_err(err)?;
    let read = second.execute_cell("print y").map_err(err)?;
    ensure!(read.error.map(|e| e.kind) == Some(CellErrorKind::Name), "name leaked across sessions");
    second.execute_cell("let y = 8").map_err(err)?;
    let read = first.execute_cell("print y").map_err(err)?;
    ensure!(read.stdout == "7\n", "write leaked across sessions: {:?}", read.stdout);
    Ok(())
}

fn extraction_reports_missing_names(f: &SandboxFactory) -> Result<(), String> {
    let mut s = f.spawn(BTreeMap::new()).map_err(err)?;
    s.execute_cell("let t = table([\"a\"], [[1], [null]])").map_err(err)?;
    ensure!(s.extract_artifacts(&[]).map_err(err)?.is_empty(), "empty returns gave values");
    let got = s.extract_artifacts(&[ReturnField::new("t", TypeAnnotation::any())]).map_err(err)?;
    let want = Table::new(vec!["a".into()], vec![vec![Value::Int(1)], vec![Value::Null]]).map_err(err)?;
    ensure!(got.get("t") == Some(&Value::Table(want)), "extracted {got:?}");
    let missing = [ReturnField::new("t", TypeAnnotation::any()), ReturnField::new("nope", TypeAnnotation::any())];
    match s.extract_artifacts(&missing) {
        Err(SandboxError::Missing { missing }) => ensure!(missing == ["nope"], "missing {missing:?}"),
        other => return Err(format!("expected a missing-binding error, got {other:?}")),
    }
    Ok(())
}

fn disposal_is_final_and_idempotent(f: &SandboxFactory) -> Result<(), String> {
    let mut s = f.spawn(BTreeMap::new()).map_err(err)?;
    s.execute_cell("let x = 1").map_err(err)?;
    s.dispose();
    s.dispose();
    ensure!(matches!(s.execute_cell("print x"), Err(SandboxError::Disposed(_))), "execute after dispose");
    ensure!(matches!(s.extract_artifacts(&[]), Err(SandboxError::Disposed(_))), "extract after dispose");
    Ok(())
}

fn every_spawn_is_disposed(f: &SandboxFactory) -> Result<(), String> {
    let tracker = f.tracker();
    let (spawned, disposed) = (tracker.sessions_spawned(), tracker.sessions_disposed());
    {
        let mut a = f.spawn(BTreeMap::new()).map_err(err)?;
        let _b = f.spawn(BTreeMap::new()).map_err(err)?;
        a.dispose();
    }
    ensure!(tracker.sessions_spawned() - spawned == 2, "spawn count off");
    ensure!(tracker.sessions_disposed() - disposed == 2, "a dropped session was not disposed");
    Ok(())
}

/// Programs whose outcomes must be identical on every executor.
pub const EQUIVALENCE_PROGRAMS: &[&[&str]] = &[
    &["let x = 2 + 3", "print x", "print x * 2.5"],
    &["print \"a\" + \"b\"", "print [1, 2] + [3]", "print {k: 1, j: null}"],
    &["let t = table([\"id\", \"p\"], [[1, null], [1, 2.0], [null, 3]])", "print dedupe_by(t, \"id\")"],
    &["let t = table([\"p\"], [[null], [1], [null]])", "let f = fill_forward(t, \"p\")", "print f", "print rows(drop_null_rows(f, \"p\"))"],
    &["let t = table([\"p\"], [[2], [null]])", "print scale_column(t, \"p\", 1.5)", "print scale_column(t, \"q\", 2)"],
    &["print undefined_name", "let z = 1 / 0", "fail \"stop\"", "let ok = true"],
    &["let r = {a: [1, 2, 3]}", "print r[\"a\"][1]", "print len(r[\"a\"])", "print r[\"b\"]"],
    &["let = 3", "print (1 + 2", "print 1 < 2", "print \"b\" >= \"a\""],
];

/// Runs `cells` in one fresh session and returns every outcome.
pub fn run_program(factory: &SandboxFactory, cells: &[&str]) -> Result<Vec<CellOutcome>, SandboxError> {
    let mut s = factory.spawn(BTreeMap::new())?;
    cells.iter().map(|c| s.execute_cell(c)).collect()
}
