use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;
use crate::schema::{ArtifactRef, FailureKind, Kind, Table, Verdict};

fn seeds(ids: &[&str]) -> Vec<SubTaskSeed> {
    ids.iter().map(|id| SubTaskSeed::new(*id, format!("title {id}"), format!("do {id}"))).collect()
}

fn workspace(ids: &[&str]) -> Workspace {
    let mut ws = Workspace::new("Analyse pricing", WorkspaceConfig::default());
    ws.set_plan(Plan::from_seeds(seeds(ids))).unwrap();
    ws
}

fn table(rows: usize, cols: usize) -> Value {
    let columns = (0..cols).map(|c| format!("c{c}")).collect();
    let rows = (0..rows).map(|r| (0..cols).map(|c| Value::Int((r * cols + c) as i64)).collect()).collect();
    Value::Table(Table::new(columns, rows).unwrap())
}

/// Runs a subtask to a successful commit of `outputs`.
fn complete(ws: &mut Workspace, id: &str, outputs: Vec<(&str, Value)>) -> Vec<String> {
    let id = SubTaskId::new(id);
    ws.mark_in_progress(&id).unwrap();
    let mut staging = StagingArea::new();
    let mut artifacts = BTreeMap::new();
    let mut returns = Vec::new();
    for (name, value) in outputs {
        let handle = format!("{id}/{name}");
        artifacts.insert(
            name.to_string(),
            ArtifactRef { handle: handle.clone(), annotation: TypeAnnotation::infer(&value) },
        );
        returns.push(ReturnField::new(name, TypeAnnotation::of_kind(Kind::of(&value))));
        staging.put(handle, value);
    }
    let result = CoderResult::success(id, artifacts, "done");
    ws.record_result(&result).unwrap();
    ws.commit(&result, &returns, &staging, &PredicateRegistry::new()).unwrap()
}

fn replan_decision(target: &str, ids: &[&str]) -> (Decision, ReplanEdit) {
    let edit = ReplanEdit { target: target.into(), replacement: seeds(ids) };
    let decision = Decision { verdict: Verdict::Replan { edit: edit.clone() }, rationale: "split".into() };
    (decision, edit)
}

fn status_of(ws: &Workspace, id: &str) -> SubTaskStatus {
    ws.subtask(&SubTaskId::new(id)).unwrap().status
}

#[test]
fn empty_plan_has_nothing_pending() {
    let ws = workspace(&[]);
    assert!(ws.next_pending().is_none());
    assert_eq!(ws.journal().entries().len(), 1);
    assert_eq!(ws.journal().entries()[0].kind, JournalKind::PlanSet);
}

#[test]
fn next_pending_is_order_minimal() {
    let ws = workspace(&["a", "b", "c"]);
    assert_eq!(ws.next_pending().unwrap().id.as_str(), "a");
}

#[test]
fn duplicate_ids_are_rejected() {
    let mut ws = Workspace::new("t", WorkspaceConfig::default());
    let err = ws.set_plan(Plan::from_seeds(seeds(&["a", "a"]))).unwrap_err();
    assert!(matches!(err, WorkspaceError::DuplicateSubTask(_)));
    assert!(ws.journal().entries().is_empty());
}

#[test]
fn plan_cannot_be_set_twice() {
    let mut ws = workspace(&["a"]);
    assert!(matches!(ws.set_plan(Plan::default()), Err(WorkspaceError::PlanAlreadySet)));
}

#[test]
fn next_pending_skips_done_and_failed() {
    let mut ws = workspace(&["a", "b", "c"]);
    complete(&mut ws, "a", vec![]);
    assert_eq!(ws.next_pending().unwrap().id.as_str(), "b");

    complete(&mut ws, "b", vec![]);
    complete(&mut ws, "c", vec![]);
    assert!(ws.next_pending().is_none());

    let mut ws = workspace(&["x", "y"]);
    let diag = Diagnostics {
        kind: FailureKind::Reported,
        root_cause: "r".into(),
        failed_operation: "o".into(),
        recoverable_hint: None,
    };
    ws.mark_in_progress(&"x".into()).unwrap();
    ws.mark_failed(&"x".into(), &diag).unwrap();
    assert_eq!(ws.next_pending().unwrap().id.as_str(), "y");
}

#[test]
fn status_transitions_are_forward_only() {
    let mut ws = workspace(&["a"]);
    complete(&mut ws, "a", vec![]);
    assert!(matches!(
        ws.mark_in_progress(&"a".into()),
        Err(WorkspaceError::InvalidTransition { .. })
    ));
}

#[test]
fn committed_table_resolves_with_shape() {
    let mut ws = workspace(&["s1", "s2"]);
    complete(&mut ws, "s1", vec![]);
    complete(&mut ws, "s2", vec![("df_clean", table(821, 12))]);
    let (value, annotation) = ws.resolve("df_clean").unwrap();
    assert_eq!(annotation.kind, Kind::Table);
    assert_eq!(annotation.shape, Some(crate::schema::Shape { rows: 821, cols: 12 }));
    assert_eq!(value.as_table().unwrap().n_rows(), 821);
    assert!(ws.audit_commits().is_ok());
}

#[test]
fn resolve_unknown_is_an_error() {
    let ws = workspace(&[]);
    assert!(matches!(ws.resolve("nope"), Err(WorkspaceError::UnresolvedArtifact(_))));
}

#[test]
fn failed_result_cannot_be_committed() {
    let mut ws = workspace(&["a"]);
    ws.mark_in_progress(&"a".into()).unwrap();
    let result = CoderResult::fail(
        "a".into(),
        "",
        Diagnostics {
            kind: FailureKind::Reported,
            root_cause: "r".into(),
            failed_operation: "o".into(),
            recoverable_hint: None,
        },
    );
    let err = ws.commit(&result, &[], &StagingArea::new(), &PredicateRegistry::new()).unwrap_err();
    assert!(matches!(err, WorkspaceError::CommitOfFailedResult));
}

#[test]
fn invalid_result_is_not_committed() {
    let mut ws = workspace(&["a"]);
    ws.mark_in_progress(&"a".into()).unwrap();
    let result = CoderResult::success("a".into(), BTreeMap::new(), "");
    let returns = vec![ReturnField::new("missing", TypeAnnotation::any())];
    let err = ws.commit(&result, &returns, &StagingArea::new(), &PredicateRegistry::new()).unwrap_err();
    assert!(matches!(err, WorkspaceError::CommitInvalid(_)));
    assert_eq!(status_of(&ws, "a"), SubTaskStatus::InProgress);
}

#[test]
fn second_commit_of_a_name_wins_and_is_journaled() {
    let mut ws = workspace(&["a", "b"]);
    complete(&mut ws, "a", vec![("x", Value::Int(1))]);
    complete(&mut ws, "b", vec![("x", Value::Int(2))]);
    assert_eq!(ws.resolve("x").unwrap().0, &Value::Int(2));
    assert_eq!(ws.artifacts()["x"].produced_by.as_str(), "b");
    let last = ws.journal().entries().last().unwrap();
    assert_eq!(last.kind, JournalKind::Committed);
    assert!(last.payload.contains("supersedes commit 1 by a"), "{}", last.payload);
}

#[test]
fn replan_splits_target_into_pending_subtasks() {
    let mut ws = workspace(&["s1", "s2", "s3"]);
    complete(&mut ws, "s1", vec![("raw", Value::Int(1))]);
    ws.mark_in_progress(&"s2".into()).unwrap();
    let (decision, edit) = replan_decision("s2", &["s2a", "s2b"]);
    ws.splice_replan(&decision, &edit).unwrap();

    let plan = ws.plan().unwrap();
    let ids: Vec<&str> = plan.subtasks.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, ["s1", "s2a", "s2b", "s3"]);
    assert_eq!(plan.replan_count, 1);
    assert!(plan.check().is_ok());
    assert_eq!(status_of(&ws, "s2a"), SubTaskStatus::Pending);
    assert_eq!(status_of(&ws, "s2b"), SubTaskStatus::Pending);
    assert_eq!(ws.next_pending().unwrap().id.as_str(), "s2a");
    assert!(ws.resolve("raw").is_ok());
    assert_eq!(ws.journal().entries().last().unwrap().kind, JournalKind::Replan);
}

#[test]
fn replan_rejects_empty_replacement_and_exhausted_budget() {
    let mut ws = Workspace::new("t", WorkspaceConfig { replan_budget: 1, ..WorkspaceConfig::default() });
    ws.set_plan(Plan::from_seeds(seeds(&["a"]))).unwrap();
    let (decision, edit) = replan_decision("a", &[]);
    assert!(matches!(ws.splice_replan(&decision, &edit), Err(WorkspaceError::EmptyReplacement)));

    let (decision, edit) = replan_decision("a", &["a1"]);
    ws.splice_replan(&decision, &edit).unwrap();
    let (decision, edit) = replan_decision("a1", &["a2"]);
    assert!(matches!(
        ws.splice_replan(&decision, &edit),
        Err(WorkspaceError::ReplanExhausted { budget: 1 })
    ));
}

#[test]
fn replan_rejects_done_target_and_colliding_ids() {
    let mut ws = workspace(&["a", "b"]);
    complete(&mut ws, "a", vec![]);
    let (d, e) = replan_decision("a", &["a1"]);
    assert!(matches!(ws.splice_replan(&d, &e), Err(WorkspaceError::ReplanTargetDone(_))));
    let (d, e) = replan_decision("b", &["a"]);
    assert!(matches!(ws.splice_replan(&d, &e), Err(WorkspaceError::DuplicateSubTask(_))));
}

#[test]
fn retries_are_bounded_by_budget() {
    let mut ws = Workspace::new("t", WorkspaceConfig { retry_budget: 1, ..WorkspaceConfig::default() });
    ws.set_plan(Plan::from_seeds(seeds(&["a"]))).unwrap();
    ws.mark_in_progress(&"a".into()).unwrap();
    let d = Decision { verdict: Verdict::Retry { refined_directive: "again".into() }, rationale: String::new() };
    assert_eq!(ws.record_retry(&"a".into(), &d).unwrap(), 1);
    assert!(matches!(ws.record_retry(&"a".into(), &d), Err(WorkspaceError::RetryExhausted { .. })));
}

#[test]
fn empty_workspace_renders_task_only() {
    let ws = Workspace::new("Summarise the quarter", WorkspaceConfig::default());
    assert_eq!(ws.planning_context(), "# Task\nSummarise the quarter\n");
}

#[test]
fn planning_context_lists_committed_annotations() {
    let mut ws = workspace(&["s1", "s2"]);
    complete(&mut ws, "s1", vec![]);
    complete(&mut ws, "s2", vec![("df_clean", table(821, 12))]);
    let ctx = ws.planning_context();
    assert!(ctx.contains("df_clean: table 821×12"), "{ctx}");
    assert!(ctx.contains("[s2] title s2 (done, retries 0)"));
}

#[test]
fn planning_context_blocks_are_capped() {
    let mut ws = workspace(&["a"]);
    ws.mark_in_progress(&"a".into()).unwrap();
    let huge = "x".repeat(10_000);
    let result = CoderResult::fail(
        "a".into(),
        huge.clone(),
        Diagnostics {
            kind: FailureKind::Reported,
            root_cause: huge,
            failed_operation: "o".into(),
            recoverable_hint: None,
        },
    );
    ws.record_result(&result).unwrap();
    let ctx = ws.planning_context();
    let base = "# Task\nAnalyse pricing\n\n# Plan\n".len();
    assert!(ctx.len() <= base + DEFAULT_BLOCK_CAP, "{}", ctx.len());
    assert!(ctx.contains("[truncated]"));
}

#[test]
fn planning_context_is_linear_in_subtasks() {
    let long = "y".repeat(5_000);
    for n in [1usize, 5, 20] {
        let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let mut ws = workspace(&refs);
        for id in &refs {
            ws.mark_in_progress(&(*id).into()).unwrap();
            let result = CoderResult::success((*id).into(), BTreeMap::new(), long.clone());
            ws.record_result(&result).unwrap();
        }
        let c0 = "# Task\nAnalyse pricing\n\n# Plan\n".len();
        assert!(ws.planning_context().len() <= c0 + n * DEFAULT_BLOCK_CAP);
    }
}

#[test]
fn journal_is_hash_chained() {
    let mut ws = workspace(&["a", "b"]);
    complete(&mut ws, "a", vec![("x", Value::Int(1))]);
    complete(&mut ws, "b", vec![("y", Value::Int(2))]);
    assert!(verify_chain(ws.journal().entries()).is_ok());
    let seqs: Vec<u64> = ws.journal().entries().iter().map(|e| e.seq).collect();
    assert!(seqs.windows(2).all(|w| w[0] < w[1]));
}

#[derive(Debug, Clone)]
enum Op {
    Complete(usize, u8),
    Replan(usize, u8),
    Fail(usize),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0usize..6, 0u8..4).prop_map(|(i, n)| Op::Complete(i, n)),
        (0usize..6, 1u8..3).prop_map(|(i, m)| Op::Replan(i, m)),
        (0usize..6).prop_map(Op::Fail),
    ]
}

proptest! {
    #[test]
    fn committed_artifact_set_only_grows(ops in proptest::collection::vec(op(), 0..30)) {
        let mut ws = Workspace::new("t", WorkspaceConfig { replan_budget: 5, ..WorkspaceConfig::default() });
        ws.set_plan(Plan::from_seeds(seeds(&["a", "b", "c"]))).unwrap();
        let mut fresh = 0u32;
        let mut before: Vec<String> = Vec::new();
        for op in ops {
            let pending: Vec<SubTaskId> = ws
                .plan()
                .unwrap()
                .subtasks
                .iter()
                .filter(|s| s.status == SubTaskStatus::Pending)
                .map(|s| s.id.clone())
                .collect();
            if pending.is_empty() {
                break;
            }
            match op {
                Op::Complete(i, n) => {
                    let id = pending[i % pending.len()].clone();
                    let name = format!("v{n}");
                    complete(&mut ws, id.as_str(), vec![(name.as_str(), Value::Int(i as i64))]);
                }
                Op::Replan(i, m) => {
                    let id = pending[i % pending.len()].clone();
                    let ids: Vec<String> = (0..m).map(|_| { fresh += 1; format!("n{fresh}") }).collect();
                    let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
                    let (d, e) = replan_decision(id.as_str(), &refs);
                    let _ = ws.splice_replan(&d, &e);
                }
                Op::Fail(i) => {
                    let id = pending[i % pending.len()].clone();
                    ws.mark_in_progress(&id).unwrap();
                    let diag = Diagnostics {
                        kind: FailureKind::Reported,
                        root_cause: "r".into(),
                        failed_operation: "o".into(),
                        recoverable_hint: None,
                    };
                    ws.mark_failed(&id, &diag).unwrap();
                }
            }
            let now: Vec<String> = ws.artifacts().keys().cloned().collect();
            prop_assert!(before.iter().all(|n| now.contains(n)));
            prop_assert!(ws.plan().unwrap().check().is_ok());
            before = now;
        }
        prop_assert!(verify_chain(ws.journal().entries()).is_ok());
        prop_assert!(ws.audit_commits().is_ok());
    }
}
