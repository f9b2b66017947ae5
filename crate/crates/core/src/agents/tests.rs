use std::cell::RefCell;
use std::collections::BTreeSet;
use std::rc::Rc;

use super::*;
use crate::fixture;
use crate::policies::{FnPolicy, ScriptStep, ScriptedPolicy};
use crate::sandbox::SandboxFactory;
use crate::schema::{
    CoderResult, Decision, FailureKind, Kind, PredicateRegistry, ReplanEdit, ReturnField, Specification,
    SubTaskId, TypeAnnotation, Value,
};
use crate::workspace::{Plan, StagingArea, SubTask, Workspace, WorkspaceConfig};

const SENTINEL: &str = "SENTINEL_7f3a_do_not_leak";

fn fixture_workspace() -> Workspace {
    let mut ws = Workspace::new(fixture::TASK, WorkspaceConfig::default());
    for (name, value) in fixture::inputs() {
        ws.seed_artifact(name, value).unwrap();
    }
    let PolicyAction::PlanProposal { subtasks } = fixture::plan_action() else { unreachable!() };
    ws.set_plan(Plan::from_seeds(subtasks)).unwrap();
    ws
}

fn subtask(ws: &Workspace) -> SubTask {
    ws.subtask(&SubTaskId::new(fixture::SUBTASK_ID)).unwrap().clone()
}

fn fixture_spec(ws: &Workspace) -> Specification {
    let mut p = ScriptedPolicy::from_steps(vec![ScriptStep::new(Role::Delegator, fixture::spec_action())]);
    match gen_spec(ws, &subtask(ws), None, &PredicateRegistry::new(), &mut p).unwrap() {
        SpecOutcome::Ready(spec) => spec,
        other => panic!("{other:?}"),
    }
}

fn int_spec(name: &str) -> Specification {
    Specification {
        subtask_id: SubTaskId::new("s"),
        directive: "compute".into(),
        inputs: vec![],
        returns: vec![ReturnField::new(name, TypeAnnotation::of_kind(Kind::Int))],
    }
}

fn code(c: &str) -> PolicyAction {
    PolicyAction::Code { code: c.into() }
}

fn report(summary: &str) -> PolicyAction {
    PolicyAction::ResultReport { summary: summary.into(), diagnostics: None }
}

fn coder(actions: Vec<PolicyAction>) -> ScriptedPolicy {
    ScriptedPolicy::from_steps(actions.into_iter().map(|a| ScriptStep::new(Role::Coder, a)).collect())
}

fn run(spec: &Specification, policy: &mut dyn Policy, k: u32, handoff: Handoff) -> (CoderRun, StagingArea) {
    let factory = SandboxFactory::builtin();
    let inputs = spec
        .inputs
        .iter()
        .map(|b| (b.name.clone(), fixture::inputs().remove(&b.artifact_name).unwrap()))
        .collect();
    let mut session = factory.spawn(inputs).unwrap();
    let mut staging = StagingArea::new();
    let out = coder_run(spec, &mut session, policy, k, handoff, "", &mut staging, &PredicateRegistry::new()).unwrap();
    (out, staging)
}

fn never_called() -> FnPolicy<impl FnMut(Role, &str, &[ActionKind]) -> Result<PolicyAction, PolicyError>> {
    FnPolicy(|role: Role, _: &str, _: &[ActionKind]| -> Result<PolicyAction, PolicyError> {
        panic!("{role} policy must not be consulted")
    })
}

#[test]
fn fixture_cells_produce_the_clean_table() {
    let ws = fixture_workspace();
    let spec = fixture_spec(&ws);
    assert_eq!(spec.directive, fixture::DIRECTIVE);
    let mut p = ScriptedPolicy::from_steps(fixture::coder_steps());
    let (out, staging) = run(&spec, &mut p, 20, Handoff::Typed);
    assert!(p.is_finished());
    assert!(out.result.is_success(), "{:?}", out.result);
    assert_eq!(out.code_actions, 3);
    assert_eq!(out.result.summary, fixture::SUMMARY);
    let handle = &out.result.artifacts["df_clean"].handle;
    assert_eq!(staging.get(handle), Some(&Value::Table(fixture::expected_clean())));
    assert_eq!(out.result.artifacts["df_clean"].annotation.to_string(), "table 821×12, no nulls in price, product_id");
}

#[test]
fn k_bounds_code_actions() {
    for k in [1, 2, 5] {
        let mut calls = 0;
        let mut p = FnPolicy(|_: Role, _: &str, _: &[ActionKind]| {
            calls += 1;
            Ok(code("let x = 1 / 0"))
        });
        let (out, _) = run(&int_spec("x"), &mut p, k, Handoff::Typed);
        assert_eq!(out.code_actions, k);
        assert_eq!(calls, k);
        let d = out.result.diagnostics.as_ref().unwrap();
        assert_eq!(d.kind, FailureKind::BudgetExhausted);
        assert!(d.root_cause.starts_with("runtime: "), "{}", d.root_cause);
        assert_eq!(d.failed_operation, format!("cell {}", k - 1));
    }
}

#[test]
fn budget_exhaustion_without_errors_reports_the_missing_return() {
    let mut p = coder(vec![code("let y = 1")]);
    let (out, _) = run(&int_spec("x"), &mut p, 1, Handoff::Typed);
    let d = out.result.diagnostics.unwrap();
    assert_eq!(d.kind, FailureKind::BudgetExhausted);
    assert!(d.root_cause.contains("x"), "{}", d.root_cause);
    assert_eq!(d.failed_operation, "return extraction");
}

#[test]
fn a_corrected_cell_succeeds_and_hides_the_error() {
    let mut p = coder(vec![code("let x = undefined_name + 1"), code("let x = 41 + 1"), report("computed x")]);
    let (out, staging) = run(&int_spec("x"), &mut p, 2, Handoff::Typed);
    assert!(out.result.is_success());
    assert_eq!(out.error_cells, 1);
    let json = crate::schema::to_canonical_string(&out.result).unwrap();
    assert!(!json.contains("undefined_name"), "{json}");
    assert_eq!(staging.get(&out.result.artifacts["x"].handle), Some(&Value::Int(42)));
    assert!(out.transcript.contains("undefined_name"));
}

#[test]
fn coder_context_shows_only_spec_and_own_cells() {
    let seen = Rc::new(RefCell::new(Vec::<String>::new()));
    let log = Rc::clone(&seen);
    let mut step = 0;
    let mut p = FnPolicy(move |_: Role, ctx: &str, _: &[ActionKind]| {
        log.borrow_mut().push(ctx.to_string());
        step += 1;
        Ok(match step {
            1 => code("print 1 / 0"),
            2 => code("let x = 3"),
            _ => report("ok"),
        })
    });
    let (out, _) = run(&int_spec("x"), &mut p, 5, Handoff::Typed);
    assert!(out.result.is_success());
    let seen = seen.borrow();
    assert!(seen[0].starts_with("# Specification\nsubtask: s\ndirective: compute\n"));
    assert!(!seen[0].contains("# Cells"));
    assert!(seen[1].contains("## cell 0\nprint 1 / 0\n-- error (runtime):"));
    assert!(seen[2].ends_with(context::REPORT_REQUEST));
    assert!(seen.iter().all(|c| !c.contains("# Task")));
}

#[test]
fn stdout_never_reaches_the_delegator() {
    let mut ws = Workspace::new("t", WorkspaceConfig::default());
    ws.set_plan(Plan::from_seeds(vec![crate::schema::SubTaskSeed::new("s", "t", "d")])).unwrap();
    let spec = int_spec("x");
    let mut p = coder(vec![
        code(&format!("print \"{SENTINEL}\"; fail \"{SENTINEL}\"")),
        PolicyAction::ResultReport {
            summary: format!("printed {SENTINEL}"),
            diagnostics: Some(crate::schema::Diagnostics {
                kind: FailureKind::Reported,
                root_cause: format!("value was {SENTINEL}"),
                failed_operation: SENTINEL.into(),
                recoverable_hint: Some(true),
            }),
        },
    ]);
    let (out, _) = run(&spec, &mut p, 5, Handoff::Typed);
    let json = crate::schema::to_canonical_string(&out.result).unwrap();
    assert!(!json.contains(SENTINEL), "{json}");
    assert!(json.contains("[redacted trace]"));

    let id = SubTaskId::new("s");
    ws.mark_in_progress(&id).unwrap();
    ws.record_result(&out.result).unwrap();
    let st = ws.subtask(&id).unwrap().clone();
    let ctx = context::assess_context(&ws, &st, &out.result, 3, false);
    assert!(!ctx.contains(SENTINEL));
}

#[test]
fn upward_text_is_capped() {
    let long = "é".repeat(2000);
    let out = filter_upward(&long, &BTreeSet::new());
    assert!(out.len() <= UPWARD_CAP);
    assert!(out.ends_with(" [truncated]"));
    assert_eq!(filter_upward("short", &BTreeSet::new()), "short");
}

#[test]
fn premature_report_is_a_validation_failure() {
    let mut p = coder(vec![report("done already")]);
    let (out, _) = run(&int_spec("x"), &mut p, 3, Handoff::Typed);
    let d = out.result.diagnostics.unwrap();
    assert_eq!(d.kind, FailureKind::Validation);
    assert_eq!(out.code_actions, 0);
}

#[test]
fn failure_report_after_success_is_malformed() {
    let mut p = coder(vec![
        code("let x = 1"),
        PolicyAction::ResultReport {
            summary: "no".into(),
            diagnostics: Some(crate::schema::Diagnostics {
                kind: FailureKind::Reported,
                root_cause: "r".into(),
                failed_operation: "o".into(),
                recoverable_hint: None,
            }),
        },
    ]);
    let factory = SandboxFactory::builtin();
    let mut session = factory.spawn(Default::default()).unwrap();
    let err = coder_run(
        &int_spec("x"),
        &mut session,
        &mut p,
        3,
        Handoff::Typed,
        "",
        &mut StagingArea::new(),
        &PredicateRegistry::new(),
    )
    .unwrap_err();
    assert!(matches!(err, AgentError::MalformedAction { role: Role::Coder, .. }));
}

#[test]
fn free_text_handoff_carries_values_and_transcript() {
    let mut p = coder(vec![code("let x = 7\nprint \"working on it now\""), report("done")]);
    let (out, staging) = run(&int_spec("x"), &mut p, 3, Handoff::FreeText);
    let text = out.free_text.unwrap();
    assert!(text.starts_with("status: success\nsummary: done\n"), "{text}");
    assert!(text.contains("x =\n7"));
    assert!(text.contains("transcript:\n## cell 0"));
    assert!(staging.is_empty());
}

#[test]
fn successful_assessment_does_not_consult_the_policy() {
    let ws = fixture_workspace();
    let result = CoderResult::success(SubTaskId::new(fixture::SUBTASK_ID), Default::default(), "ok");
    let d = assess(&ws, &subtask(&ws), &result, 3, false, &mut never_called()).unwrap();
    assert_eq!(d.verdict, crate::schema::Verdict::Proceed);
}

fn failed(id: &str) -> CoderResult {
    CoderResult::fail(
        SubTaskId::new(id),
        "stopped",
        crate::schema::Diagnostics {
            kind: FailureKind::BudgetExhausted,
            root_cause: "runtime: x".into(),
            failed_operation: "cell 0".into(),
            recoverable_hint: None,
        },
    )
}

#[test]
fn proceed_on_a_failure_is_a_protocol_violation() {
    let ws = fixture_workspace();
    let mut p = ScriptedPolicy::from_steps(vec![ScriptStep::new(
        Role::Delegator,
        PolicyAction::verdict(Decision::proceed("looks fine")),
    )]);
    let err = assess(&ws, &subtask(&ws), &failed(fixture::SUBTASK_ID), 3, false, &mut FnPolicy(
        |r: Role, c: &str, e: &[ActionKind]| p.propose(r, c, &[ActionKind::Proceed]).map(|a| {
            let _ = e;
            a
        }),
    ))
    .unwrap_err();
    assert!(matches!(err, AgentError::ProtocolViolation { got: ActionKind::Proceed, .. }), "{err}");
}

#[test]
fn replan_only_assessment_rejects_retry_and_foreign_targets() {
    let ws = fixture_workspace();
    let st = subtask(&ws);
    let mut seen = String::new();
    let mut retry = FnPolicy(|_: Role, ctx: &str, expected: &[ActionKind]| {
        seen = ctx.to_string();
        assert_eq!(expected, [ActionKind::Replan]);
        Ok(PolicyAction::verdict(Decision {
            verdict: crate::schema::Verdict::Retry { refined_directive: "again".into() },
            rationale: String::new(),
        }))
    });
    assert!(matches!(
        assess(&ws, &st, &failed(fixture::SUBTASK_ID), 3, true, &mut retry),
        Err(AgentError::ProtocolViolation { got: ActionKind::Retry, .. })
    ));
    assert!(seen.ends_with(context::REPLAN_REQUEST));
    assert!(seen.contains("failure kind: budget_exhausted"));

    let foreign = PolicyAction::verdict(Decision {
        verdict: crate::schema::Verdict::Replan {
            edit: ReplanEdit {
                target: SubTaskId::new("other"),
                replacement: vec![crate::schema::SubTaskSeed::new("n", "t", "d")],
            },
        },
        rationale: String::new(),
    });
    let mut p = ScriptedPolicy::from_steps(vec![ScriptStep::new(Role::Delegator, foreign)]);
    assert!(matches!(
        assess(&ws, &st, &failed(fixture::SUBTASK_ID), 3, false, &mut p),
        Err(AgentError::MalformedAction { .. })
    ));
}

fn bad_spec() -> PolicyAction {
    PolicyAction::SpecProposal { directive: "clean".into(), inputs: vec!["df_missing".into()], returns: vec![] }
}

#[test]
fn invalid_specification_gets_one_free_regeneration() {
    let ws = fixture_workspace();
    let st = subtask(&ws);
    let mut p = ScriptedPolicy::from_steps(vec![
        ScriptStep::new(Role::Delegator, bad_spec()),
        ScriptStep::new(Role::Delegator, fixture::spec_action())
            .when(crate::policies::ContextPredicate::Contains("previous proposal rejected: ".into())),
    ]);
    assert!(matches!(gen_spec(&ws, &st, None, &PredicateRegistry::new(), &mut p).unwrap(), SpecOutcome::Ready(_)));
    assert!(p.is_finished());

    let mut p = ScriptedPolicy::from_steps(vec![
        ScriptStep::new(Role::Delegator, bad_spec()),
        ScriptStep::new(Role::Delegator, bad_spec()),
    ]);
    match gen_spec(&ws, &st, None, &PredicateRegistry::new(), &mut p).unwrap() {
        SpecOutcome::Rejected { issues } => assert!(issues.contains("df_missing"), "{issues}"),
        other => panic!("{other:?}"),
    }
    assert!(p.is_finished());
}

#[test]
fn unknown_named_predicate_rejects_the_spec() {
    let ws = fixture_workspace();
    let returns =
        vec![ReturnField::new("x", TypeAnnotation::any()).with_condition(crate::schema::ValidationCondition::Named("nope".into()))];
    let action = PolicyAction::SpecProposal { directive: "d".into(), inputs: vec![], returns };
    let mut p = ScriptedPolicy::from_steps(vec![
        ScriptStep::new(Role::Delegator, action.clone()),
        ScriptStep::new(Role::Delegator, action),
    ]);
    assert!(matches!(
        gen_spec(&ws, &subtask(&ws), None, &PredicateRegistry::new(), &mut p).unwrap(),
        SpecOutcome::Rejected { .. }
    ));
}

#[test]
fn retry_context_and_directive_carry_the_refinement() {
    let ws = fixture_workspace();
    let prior = Prior {
        diagnostics: failed(fixture::SUBTASK_ID).diagnostics.unwrap(),
        refined_directive: "Use exchange_rates[\"EUR\"] for the conversion.".into(),
    };
    let mut p = ScriptedPolicy::from_steps(vec![ScriptStep::new(Role::Delegator, fixture::spec_action()).when(
        crate::policies::ContextPredicate::All(vec![
            crate::policies::ContextPredicate::Contains("previous failure (budget_exhausted): runtime: x".into()),
            crate::policies::ContextPredicate::Contains("refined directive: Use exchange_rates".into()),
        ]),
    )]);
    let SpecOutcome::Ready(spec) = gen_spec(&ws, &subtask(&ws), Some(&prior), &PredicateRegistry::new(), &mut p).unwrap()
    else {
        panic!()
    };
    assert!(spec.directive.ends_with("\nRefinement: Use exchange_rates[\"EUR\"] for the conversion."));
    assert_eq!(spec.inputs[0].annotation, TypeAnnotation::table(847, 12));
    assert!(spec.inputs[0].sample.is_some());
}

#[test]
fn decompose_rejects_an_empty_task() {
    let ws = Workspace::new("  ", WorkspaceConfig::default());
    assert!(matches!(decompose(&ws, &mut never_called()), Err(AgentError::EmptyTask)));
}

#[test]
fn metered_counts_characters_by_role() {
    let mut inner = FnPolicy(|_: Role, _: &str, _: &[ActionKind]| Ok(code("x")));
    let mut m = Metered::new(&mut inner);
    m.propose(Role::Delegator, "héllo", &[ActionKind::Code]).unwrap();
    m.propose(Role::Coder, "abc", &[ActionKind::Code]).unwrap();
    assert_eq!((m.delegator_chars, m.coder_chars, m.calls), (5, 3, 2));
    assert_eq!(m.take_pending(), 5);
    assert_eq!(m.take_pending(), 0);
    m.count_all_roles = true;
    m.propose(Role::Coder, "abcd", &[ActionKind::Code]).unwrap();
    assert_eq!(m.take_pending(), 4);
}
