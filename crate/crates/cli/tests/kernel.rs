//! The `delegator kernel` subprocess executor, driven through the same
//! black-box contract as the in-process interpreter.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use delegator_core::fixture;
use delegator_core::sandbox::contract::{run_contract, run_program, EQUIVALENCE_PROGRAMS};
use delegator_core::sandbox::{KernelSettings, SandboxError, SandboxFactory};
use delegator_core::schema::Value;

fn kernel(timeout: Duration) -> SandboxFactory {
    SandboxFactory::kernel(KernelSettings {
        command: vec![env!("CARGO_BIN_EXE_delegator").into(), "kernel".into()],
        timeout,
    })
}

fn alive(pid: u32) -> bool {
    // A reaped process disappears; a zombie would still be listed, so check its state too.
    match std::fs::read_to_string(format!("/proc/{pid}/stat")) {
        Ok(stat) => !stat.split_whitespace().nth(2).is_some_and(|s| s == "Z"),
        Err(_) => false,
    }
}

#[test]
fn kernel_passes_the_executor_contract() {
    let factory = kernel(Duration::from_secs(30));
    for check in run_contract(&factory) {
        assert!(check.result.is_ok(), "{}: {:?}", check.name, check.result);
    }
    assert_eq!(factory.tracker().live(), 0);
}

#[test]
fn kernel_and_builtin_agree_cell_by_cell() {
    let builtin = SandboxFactory::builtin();
    let kernel = kernel(Duration::from_secs(30));
    for program in EQUIVALENCE_PROGRAMS {
        let a = run_program(&builtin, program).unwrap();
        let b = run_program(&kernel, program).unwrap();
        assert_eq!(a, b, "{program:?}");
    }
}

#[test]
fn fixture_inputs_survive_the_wire() {
    let factory = kernel(Duration::from_secs(30));
    let mut session = factory.spawn(fixture::inputs()).unwrap();
    for cell in fixture::CELLS {
        let out = session.execute_cell(cell).unwrap();
        assert!(out.error.is_none(), "{cell}: {:?}", out.error);
    }
    let values = session.extract_artifacts(&fixture::returns()).unwrap();
    assert_eq!(values["df_clean"], Value::Table(fixture::expected_clean()));
    session.dispose();
}

#[test]
fn disposed_kernel_process_is_gone() {
    let factory = kernel(Duration::from_secs(30));
    let mut session = factory.spawn(BTreeMap::new()).unwrap();
    let pid = session.process_id().expect("kernel sessions have a process");
    assert!(alive(pid));
    session.execute_cell("let a = 1").unwrap();
    session.dispose();
    assert!(!alive(pid), "kernel {pid} still running after dispose");
    assert!(matches!(session.execute_cell("print a"), Err(SandboxError::Disposed(_))));
    assert_eq!(factory.tracker().live(), 0);
}

#[test]
fn crashing_kernel_is_an_infrastructure_error() {
    let factory = SandboxFactory::kernel(KernelSettings {
        command: vec!["sh".into(), "-c".into(), "exit 3".into()],
        timeout: Duration::from_secs(5),
    });
    let err = factory.spawn(BTreeMap::new()).unwrap_err();
    assert!(err.is_infrastructure(), "{err:?}");
    assert_eq!(factory.tracker().live(), 0);
}

#[test]
fn kernel_killed_mid_session_is_an_infrastructure_error() {
    let factory = kernel(Duration::from_secs(30));
    let mut session = factory.spawn(BTreeMap::new()).unwrap();
    session.execute_cell("let a = 1").unwrap();
    let pid = session.process_id().unwrap();
    let status = Command::new("kill").args(["-9", &pid.to_string()]).status().unwrap();
    assert!(status.success());
    let started = Instant::now();
    let err = session.execute_cell("print a").unwrap_err();
    assert!(err.is_infrastructure(), "{err:?}");
    assert!(started.elapsed() < Duration::from_secs(30));
    session.dispose();
    assert_eq!(factory.tracker().live(), 0);
}

#[test]
fn silent_kernel_times_out() {
    let factory = SandboxFactory::kernel(KernelSettings {
        command: vec!["sleep".into(), "60".into()],
        timeout: Duration::from_millis(300),
    });
    let started = Instant::now();
    let err = factory.spawn(BTreeMap::new()).unwrap_err();
    assert!(matches!(err, SandboxError::Timeout { .. }), "{err:?}");
    assert!(started.elapsed() < Duration::from_secs(10));
    assert_eq!(factory.tracker().live(), 0);
}

#[test]
fn kernel_binary_exits_cleanly_on_eof() {
    let out = Command::new(env!("CARGO_BIN_EXE_delegator")).arg("kernel").stdin(std::process::Stdio::null()).output().unwrap();
    assert!(out.status.success());
    assert!(Path::new(env!("CARGO_BIN_EXE_delegator")).exists());
}
