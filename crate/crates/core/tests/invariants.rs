//! Randomized checks of the engine's end-to-end invariants against scripted scenarios.

use std::collections::BTreeMap;

use delegator_core::agents::{ActionKind, Policy, PolicyAction, PolicyError, Role};
use delegator_core::protocol::conformance::{
    mask_notes, oracle, ExpectedOutcome, Outcome, ReplanChoice, Scenario, ScenarioPolicy, REPLAN_CHOICES,
    SCENARIO_TASK,
};
use delegator_core::protocol::{Budgets, Engine, EngineConfig, Escalation, Mode, RunReport};
use delegator_core::sandbox::SandboxFactory;
use delegator_core::workspace::JournalKind;
use proptest::prelude::*;

/// Records every context the engine shows to either role.
struct Spy<P> {
    inner: P,
    delegator: Vec<String>,
    coder: Vec<String>,
}

impl<P: Policy> Policy for Spy<P> {
    fn propose(&mut self, role: Role, context: &str, expected: &[ActionKind]) -> Result<PolicyAction, PolicyError> {
        match role {
            Role::Delegator => self.delegator.push(context.to_string()),
            Role::Coder => self.coder.push(context.to_string()),
        }
        self.inner.propose(role, context, expected)
    }
}

fn outcome() -> impl Strategy<Value = Outcome> {
    prop_oneof![Just(Outcome::S), Just(Outcome::FR), Just(Outcome::FU)]
}

prop_compose! {
    fn scenario()(
        strict in any::<bool>(),
        retries in 0u32..=3,
        iterations in 1u32..=3,
        replans in 0u32..=3,
        dispatch_rounds in prop_oneof![Just(100u32), 1u32..=8],
        subtasks in prop::collection::vec(prop::collection::vec(outcome(), 0..=4), 0..=5),
        menu in prop::collection::vec(prop::sample::select(REPLAN_CHOICES.to_vec()), 0..=3),
    ) -> Scenario {
        Scenario {
            escalation: if strict { Escalation::StrictAlg1 } else { Escalation::EscalateToReplan },
            budgets: Budgets { retries, iterations, dispatch_rounds, replans },
            subtasks: subtasks.into_iter().enumerate().map(|(i, s)| (format!("s{}", i + 1), s)).collect(),
            replans: menu,
        }
    }
}

fn run(s: &Scenario, mode: Mode, verbose: Option<String>) -> (RunReport, Spy<ScenarioPolicy>, SandboxFactory) {
    let factory = SandboxFactory::builtin();
    let config = EngineConfig { budgets: s.budgets, escalation: s.escalation, mode, journal_path: None };
    let engine = Engine::new(config, factory.clone());
    let mut policy = ScenarioPolicy::new(s.clone());
    policy.verbose = verbose;
    let mut spy = Spy { inner: policy, delegator: vec![], coder: vec![] };
    let report = engine.run(SCENARIO_TASK, BTreeMap::new(), &mut spy);
    (report, spy, factory)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn engine_agrees_with_the_oracle(s in scenario()) {
        let expected = oracle(&s);
        let (report, _, factory) = run(&s, Mode::Full, None);
        prop_assert!(report.error.is_none(), "{s}: {:?}", report.error);
        prop_assert_eq!(ExpectedOutcome::of(&report.outcome), Some(expected.outcome));
        prop_assert_eq!(&report.events, &expected.events);
        prop_assert!(report.stats.check_budgets(&s.budgets).is_ok(), "{:?}", report.stats);
        prop_assert_eq!(factory.tracker().live(), 0);
        report.workspace.audit_commits().unwrap();
    }

    #[test]
    fn sandbox_output_never_reaches_the_delegator(s in scenario(), tag in "[A-Z]{6}[0-9]{6}") {
        let sentinel = format!("SENTINEL-{tag}");
        let (report, spy, _) = run(&s, Mode::Full, Some(sentinel.clone()));
        // Output only shows up in a Coder context once a session gets a second turn.
        if report.stats.max_session_iterations > 1 {
            prop_assert!(spy.coder.iter().any(|c| c.contains(&sentinel)), "sentinel never printed");
        }
        for ctx in &spy.delegator {
            prop_assert!(!ctx.contains(&sentinel), "leaked into delegator context:\n{ctx}");
        }
        for e in report.workspace.journal().entries() {
            if matches!(e.kind, JournalKind::SpecIssued | JournalKind::ResultReceived) {
                prop_assert!(!e.payload.contains(&sentinel), "leaked into {:?}", e.kind);
            }
        }
    }

    #[test]
    fn planning_context_ignores_coder_iterations(mut s in scenario(), k in 2u32..=4) {
        s.budgets.iterations = 1;
        let (one, spy_one, _) = run(&s, Mode::Full, None);
        s.budgets.iterations = k;
        let (many, spy_many, _) = run(&s, Mode::Full, None);
        prop_assert_eq!(ExpectedOutcome::of(&one.outcome), ExpectedOutcome::of(&many.outcome));
        prop_assert_eq!(&one.events, &many.events);
        let masked = |v: &[String]| v.iter().map(|c| mask_notes(c)).collect::<Vec<_>>();
        prop_assert_eq!(masked(&spy_one.delegator), masked(&spy_many.delegator));
        prop_assert_eq!(
            mask_notes(&one.workspace.planning_context()),
            mask_notes(&many.workspace.planning_context())
        );
    }
}

#[test]
fn split_replans_commit_both_halves() {
    let s = Scenario {
        escalation: Escalation::EscalateToReplan,
        budgets: Budgets { retries: 0, iterations: 1, dispatch_rounds: 100, replans: 1 },
        subtasks: vec![("s1".into(), vec![Outcome::FU])],
        replans: vec![ReplanChoice::Split],
    };
    let (report, _, _) = run(&s, Mode::Full, None);
    assert!(report.workspace.resolve("out_s1_r1a").is_ok());
    assert!(report.workspace.resolve("out_s1_r1b").is_ok());
}

#[test]
fn free_text_handoff_carries_sandbox_output_upward() {
    // The detector above would notice: without the typed workspace the transcript reaches the Delegator.
    let s = Scenario {
        escalation: Escalation::EscalateToReplan,
        budgets: Budgets { retries: 0, iterations: 2, dispatch_rounds: 100, replans: 0 },
        subtasks: vec![("s1".into(), vec![Outcome::S]), ("s2".into(), vec![Outcome::S])],
        replans: vec![],
    };
    let sentinel = "SENTINEL-FREETEXT".to_string();
    let (_, spy, _) = run(&s, Mode::NoEpss, Some(sentinel.clone()));
    assert!(spy.delegator.iter().any(|c| c.contains(&sentinel)));
    let (_, spy, _) = run(&s, Mode::Full, Some(sentinel.clone()));
    assert!(!spy.delegator.iter().any(|c| c.contains(&sentinel)));
}
