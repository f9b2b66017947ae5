//! Out-of-process executor speaking line-delimited canonical JSON.
//!
//! Each request is one line `{"op", "session_id", "payload"}` and gets exactly
//! one response line, either `{"ok":true,"payload":...}` or
//! `{"ok":false,"error":{"kind","message"}}`. A code error inside a cell is a
//! successful response whose [`CellOutcome`] carries the error; `ok:false` is
//! reserved for protocol and executor faults.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{cellscript, Backend, CellOutcome, Extracted, KernelSettings, SandboxError};
use crate::schema::{from_json, from_json_value, to_canonical_string, Value};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
/// How long a disposed kernel gets to exit on its own before it is killed.
pub const DISPOSE_GRACE: Duration = Duration::from_millis(500);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelOp {
    Spawn,
    Exec,
    Extract,
    Dispose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRequest {
    pub op: KernelOp,
    pub session_id: String,
    #[serde(default)]
    pub payload: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelFault {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelResponse {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<KernelFault>,
}

impl KernelResponse {
    fn ok(payload: serde_json::Value) -> Self {
        Self { ok: true, payload: Some(payload), error: None }
    }

    fn fault(kind: &str, message: impl Into<String>) -> Self {
        Self { ok: false, payload: None, error: Some(KernelFault { kind: kind.into(), message: message.into() }) }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SpawnPayload {
    pub inputs: BTreeMap<String, Value>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExecPayload {
    pub code: String,
    pub cell_index: u32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExtractPayload {
    pub names: Vec<String>,
}

/// Serves the protocol with one CellScript namespace per session id until `input` closes.
///
/// Malformed lines get an error response and the loop keeps going.
pub fn serve<R: BufRead, W: Write>(input: R, mut output: W) -> io::Result<()> {
    let mut sessions: HashMap<String, BTreeMap<String, Value>> = HashMap::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match from_json::<KernelRequest>(line.as_bytes()) {
            Ok(request) => handle(&mut sessions, request),
            Err(e) => KernelResponse::fault("malformed", e.to_string()),
        };
        let text = to_canonical_string(&response).map_err(|e| io::Error::other(e.to_string()))?;
        writeln!(output, "{text}")?;
        output.flush()?;
    }
    Ok(())
}

fn handle(sessions: &mut HashMap<String, BTreeMap<String, Value>>, req: KernelRequest) -> KernelResponse {
    let encode = |v: Result<serde_json::Value, serde_json::Error>| match v {
        Ok(v) => KernelResponse::ok(v),
        Err(e) => KernelResponse::fault("internal", e.to_string()),
    };
    match req.op {
        KernelOp::Spawn => {
            if sessions.contains_key(&req.session_id) {
                return KernelResponse::fault("session_exists", format!("session {} already exists", req.session_id));
            }
            match from_json_value::<SpawnPayload>(req.payload, "payload") {
                Ok(p) => {
                    sessions.insert(req.session_id, p.inputs);
                    KernelResponse::ok(serde_json::Value::Null)
                }
                Err(e) => KernelResponse::fault("malformed", e.to_string()),
            }
        }
        KernelOp::Dispose => {
            sessions.remove(&req.session_id);
            KernelResponse::ok(serde_json::Value::Null)
        }
        KernelOp::Exec | KernelOp::Extract => {
            let Some(ns) = sessions.get_mut(&req.session_id) else {
                return KernelResponse::fault("unknown_session", format!("no session {}", req.session_id));
            };
            if req.op == KernelOp::Exec {
                match from_json_value::<ExecPayload>(req.payload, "payload") {
                    Ok(p) => encode(serde_json::to_value(cellscript::eval_cell(ns, &p.code, p.cell_index))),
                    Err(e) => KernelResponse::fault("malformed", e.to_string()),
                }
            } else {
                match from_json_value::<ExtractPayload>(req.payload, "payload") {
                    Ok(p) => {
                        let mut out = Extracted::default();
                        for name in p.names {
                            match ns.get(&name) {
                                Some(v) => {
                                    out.values.insert(name, v.clone());
                                }
                                None => out.missing.push(name),
                            }
                        }
                        encode(serde_json::to_value(out))
                    }
                    Err(e) => KernelResponse::fault("malformed", e.to_string()),
                }
            }
        }
    }
}

/// A session backed by its own kernel process.
pub struct KernelBackend {
    session_id: String,
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<io::Result<String>>,
    timeout: Duration,
    broken: bool,
}

impl KernelBackend {
    pub fn launch(
        settings: &KernelSettings,
        session_id: &str,
        inputs: BTreeMap<String, Value>,
    ) -> Result<Self, SandboxError> {
        let (program, args) = settings
            .command
            .split_first()
            .ok_or_else(|| SandboxError::Infrastructure("no kernel command configured".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| SandboxError::Infrastructure(format!("cannot start kernel `{program}`: {e}")))?;
        let stdout = child.stdout.take().expect("stdout is piped");
        let stdin = child.stdin.take();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        let mut backend = Self {
            session_id: session_id.to_string(),
            child,
            stdin,
            lines: rx,
            timeout: settings.timeout,
            broken: false,
        };
        let payload = serde_json::to_value(SpawnPayload { inputs })
            .map_err(|e| SandboxError::Infrastructure(e.to_string()))?;
        if let Err(e) = backend.request(KernelOp::Spawn, payload) {
            backend.dispose();
            return Err(e);
        }
        Ok(backend)
    }

    fn request(&mut self, op: KernelOp, payload: serde_json::Value) -> Result<serde_json::Value, SandboxError> {
        let op_name = format!("{op:?}").to_lowercase();
        if self.broken {
            return Err(SandboxError::Infrastructure("kernel connection is broken".into()));
        }
        let line = to_canonical_string(&KernelRequest { op, session_id: self.session_id.clone(), payload })
            .map_err(|e| SandboxError::Infrastructure(e.to_string()))?;
        let stdin = self.stdin.as_mut().ok_or_else(|| SandboxError::Infrastructure("kernel stdin closed".into()))?;
        if let Err(e) = writeln!(stdin, "{line}").and_then(|_| stdin.flush()) {
            self.broken = true;
            return Err(SandboxError::Infrastructure(format!("kernel write failed: {e}")));
        }
        let reply = match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(reply)) => reply,
            Ok(Err(e)) => {
                self.broken = true;
                return Err(SandboxError::Infrastructure(format!("kernel read failed: {e}")));
            }
            Err(RecvTimeoutError::Timeout) => {
                self.broken = true;
                return Err(SandboxError::Timeout { op: op_name, timeout: self.timeout });
            }
            Err(RecvTimeoutError::Disconnected) => {
                self.broken = true;
                let status = self.child.try_wait().ok().flatten();
                return Err(SandboxError::Infrastructure(match status {
                    Some(s) => format!("kernel exited ({s}) during `{op_name}`"),
                    None => format!("kernel closed its output during `{op_name}`"),
                }));
            }
        };
        let response: KernelResponse = from_json(reply.as_bytes()).map_err(|e| {
            self.broken = true;
            SandboxError::Infrastructure(format!("unreadable kernel response: {e}"))
        })?;
        if response.ok {
            Ok(response.payload.unwrap_or(serde_json::Value::Null))
        } else {
            let fault = response.error.unwrap_or(KernelFault { kind: "unknown".into(), message: String::new() });
            Err(SandboxError::Infrastructure(format!("kernel {}: {}", fault.kind, fault.message)))
        }
    }
}

impl Backend for KernelBackend {
    fn execute_cell(&mut self, code: &str, cell_index: u32) -> Result<CellOutcome, SandboxError> {
        let payload = serde_json::to_value(ExecPayload { code: code.to_string(), cell_index })
            .map_err(|e| SandboxError::Infrastructure(e.to_string()))?;
        let reply = self.request(KernelOp::Exec, payload)?;
        from_json_value(reply, "payload").map_err(|e| SandboxError::Infrastructure(e.to_string()))
    }

    fn extract(&mut self, names: &[String]) -> Result<Extracted, SandboxError> {
        let payload = serde_json::to_value(ExtractPayload { names: names.to_vec() })
            .map_err(|e| SandboxError::Infrastructure(e.to_string()))?;
        let reply = self.request(KernelOp::Extract, payload)?;
        from_json_value(reply, "payload").map_err(|e| SandboxError::Unconvertible {
            name: names.join(", "),
            reason: e.to_string(),
        })
    }

    fn dispose(&mut self) {
        if !self.broken {
            let saved = self.timeout;
            self.timeout = DISPOSE_GRACE;
            if let Err(e) = self.request(KernelOp::Dispose, serde_json::Value::Null) {
                log::debug!("kernel dispose request for {} failed: {e}", self.session_id);
            }
            self.timeout = saved;
        }
        self.stdin = None;
        let deadline = Instant::now() + DISPOSE_GRACE;
        loop {
            match self.child.try_wait() {
                Ok(Some(_)) => return,
                Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(5)),
                _ => break,
            }
        }
        if let Err(e) = self.child.kill() {
            log::warn!("could not kill kernel for {}: {e}", self.session_id);
        }
        if let Err(e) = self.child.wait() {
            log::warn!("could not reap kernel for {}: {e}", self.session_id);
        }
    }

    fn process_id(&self) -> Option<u32> {
        Some(self.child.id())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exchange(lines: &[&str]) -> Vec<KernelResponse> {
        let input = lines.join("\n");
        let mut out = Vec::new();
        serve(input.as_bytes(), &mut out).unwrap();
        String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    #[test]
    fn spawn_exec_extract() {
        let r = exchange(&[
            r#"{"op":"spawn","session_id":"a","payload":{"inputs":{}}}"#,
            r#"{"op":"exec","session_id":"a","payload":{"code":"let x = 2 + 3","cell_index":0}}"#,
            r#"{"op":"extract","session_id":"a","payload":{"names":["x","y"]}}"#,
        ]);
        assert!(r.iter().all(|r| r.ok));
        let ex: Extracted = serde_json::from_value(r[2].payload.clone().unwrap()).unwrap();
        assert_eq!(ex.values["x"], Value::Int(5));
        assert_eq!(ex.missing, ["y"]);
    }

    #[test]
    fn code_errors_are_ok_responses() {
        let r = exchange(&[
            r#"{"op":"spawn","session_id":"a","payload":{"inputs":{}}}"#,
            r#"{"op":"exec","session_id":"a","payload":{"code":"fail \"boom\"","cell_index":0}}"#,
        ]);
        assert!(r[1].ok);
        let outcome: CellOutcome = serde_json::from_value(r[1].payload.clone().unwrap()).unwrap();
        assert_eq!(outcome.error.unwrap().message, "boom");
    }

    #[test]
    fn malformed_lines_do_not_stop_the_loop() {
        let r = exchange(&[
            "not json",
            r#"{"op":"launch","session_id":"a"}"#,
            r#"{"op":"spawn","session_id":"a","payload":{"inputs":{}}}"#,
        ]);
        assert_eq!(r.len(), 3);
        assert!(!r[0].ok && !r[1].ok && r[2].ok);
        assert_eq!(r[0].error.as_ref().unwrap().kind, "malformed");
    }

    #[test]
    fn sessions_in_one_process_do_not_share_names() {
        let r = exchange(&[
            r#"{"op":"spawn","session_id":"a","payload":{"inputs":{}}}"#,
            r#"{"op":"spawn","session_id":"b","payload":{"inputs":{}}}"#,
            r#"{"op":"exec","session_id":"a","payload":{"code":"let secret = 1","cell_index":0}}"#,
            r#"{"op":"exec","session_id":"b","payload":{"code":"print secret","cell_index":0}}"#,
            r#"{"op":"dispose","session_id":"a"}"#,
            r#"{"op":"exec","session_id":"a","payload":{"code":"print 1","cell_index":1}}"#,
        ]);
        let outcome: CellOutcome = serde_json::from_value(r[3].payload.clone().unwrap()).unwrap();
        assert_eq!(outcome.error.unwrap().kind, super::super::CellErrorKind::Name);
        assert!(r[4].ok);
        assert_eq!(r[5].error.as_ref().unwrap().kind, "unknown_session");
    }

    #[test]
    fn responses_are_canonical() {
        let input = r#"{"session_id":"a","op":"spawn","payload":{"inputs":{}}}"#;
        let mut out = Vec::new();
        serve(input.as_bytes(), &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "{\"ok\":true,\"payload\":null}\n");
    }
}
