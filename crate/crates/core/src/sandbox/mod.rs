//! Ephemeral execution sessions.
//!
//! A [`SandboxSession`] starts with exactly its input bindings, runs cells in
//! its own namespace and keeps their outcomes in a private log. Only the
//! values named by a return schema leave the session, via
//! [`SandboxSession::extract_artifacts`]. Sessions are disposed exactly once,
//! explicitly or on drop, and every spawn and disposal is counted by a shared
//! [`ResourceTracker`].

pub mod cellscript;
pub mod contract;
pub mod kernel;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{check_identifier, ReturnField, Value};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutorKind {
    #[default]
    Builtin,
    Kernel,
}

impl fmt::Display for ExecutorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExecutorKind::Builtin => "builtin",
            ExecutorKind::Kernel => "kernel",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellErrorKind {
    Parse,
    /// Reference to an undefined name or function.
    Name,
    Runtime,
    /// Raised by the cell itself with `fail`.
    UserFail,
}

impl CellErrorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CellErrorKind::Parse => "parse",
            CellErrorKind::Name => "name",
            CellErrorKind::Runtime => "runtime",
            CellErrorKind::UserFail => "user_fail",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellError {
    pub kind: CellErrorKind,
    pub message: String,
}

/// What one cell did. A failed cell may still carry stdout written before the error.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub cell_index: u32,
    pub stdout: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<CellError>,
    pub defined_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SandboxError {
    #[error("session {0} is disposed")]
    Disposed(String),
    #[error("invalid input binding `{name}`: {reason}")]
    InvalidInput { name: String, reason: String },
    #[error("executor failure: {0}")]
    Infrastructure(String),
    #[error("executor did not answer `{op}` within {timeout:?}")]
    Timeout { op: String, timeout: Duration },
    #[error("missing return bindings: {}", missing.join(", "))]
    Missing { missing: Vec<String> },
    #[error("binding `{name}` cannot be extracted: {reason}")]
    Unconvertible { name: String, reason: String },
}

impl SandboxError {
    /// True when the executor itself failed, as opposed to the task code.
    pub fn is_infrastructure(&self) -> bool {
        matches!(self, SandboxError::Infrastructure(_) | SandboxError::Timeout { .. })
    }
}

/// Values read back from a session: found bindings plus the names that were not defined.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Extracted {
    pub values: BTreeMap<String, Value>,
    pub missing: Vec<String>,
}

/// One executor's view of a single session namespace.
pub trait Backend: Send {
    fn execute_cell(&mut self, code: &str, cell_index: u32) -> Result<CellOutcome, SandboxError>;
    fn extract(&mut self, names: &[String]) -> Result<Extracted, SandboxError>;
    /// Releases the namespace and any process behind it. Called at most once.
    fn dispose(&mut self);
    fn process_id(&self) -> Option<u32> {
        None
    }
}

/// In-process CellScript namespace.
#[derive(Debug, Default)]
pub struct BuiltinBackend {
    namespace: BTreeMap<String, Value>,
}

impl BuiltinBackend {
    pub fn new(inputs: BTreeMap<String, Value>) -> Self {
        Self { namespace: inputs }
    }
}

impl Backend for BuiltinBackend {
    fn execute_cell(&mut self, code: &str, cell_index: u32) -> Result<CellOutcome, SandboxError> {
        Ok(cellscript::eval_cell(&mut self.namespace, code, cell_index))
    }

    fn extract(&mut self, names: &[String]) -> Result<Extracted, SandboxError> {
        let mut out = Extracted::default();
        for name in names {
            match self.namespace.get(name) {
                Some(v) => {
                    out.values.insert(name.clone(), v.clone());
                }
                None => out.missing.push(name.clone()),
            }
        }
        Ok(out)
    }

    fn dispose(&mut self) {
        self.namespace = BTreeMap::new();
    }
}

/// Counts sessions spawned and disposed, shared by every factory clone.
#[derive(Debug, Default)]
pub struct ResourceTracker {
    spawned: AtomicU64,
    disposed: AtomicU64,
}

impl ResourceTracker {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn sessions_spawned(&self) -> u64 {
        self.spawned.load(Ordering::SeqCst)
    }

    pub fn sessions_disposed(&self) -> u64 {
        self.disposed.load(Ordering::SeqCst)
    }

    pub fn live(&self) -> u64 {
        self.sessions_spawned() - self.sessions_disposed()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSettings {
    /// Program and arguments launching a kernel that speaks the line protocol.
    pub command: Vec<String>,
    #[serde(with = "crate::serde_secs")]
    pub timeout: Duration,
}

impl Default for KernelSettings {
    fn default() -> Self {
        Self { command: Vec::new(), timeout: kernel::DEFAULT_TIMEOUT }
    }
}

/// Creates sessions of one executor kind; clones share ids and the tracker.
#[derive(Debug, Clone)]
pub struct SandboxFactory {
    kind: ExecutorKind,
    kernel: KernelSettings,
    tracker: Arc<ResourceTracker>,
    next_id: Arc<AtomicU64>,
    debug: bool,
}

impl SandboxFactory {
    pub fn builtin() -> Self {
        Self::new(ExecutorKind::Builtin, KernelSettings::default())
    }

    pub fn kernel(settings: KernelSettings) -> Self {
        Self::new(ExecutorKind::Kernel, settings)
    }

    pub fn new(kind: ExecutorKind, kernel: KernelSettings) -> Self {
        Self { kind, kernel, tracker: ResourceTracker::new(), next_id: Arc::new(AtomicU64::new(0)), debug: false }
    }

    pub fn with_tracker(mut self, tracker: Arc<ResourceTracker>) -> Self {
        self.tracker = tracker;
        self
    }

    /// Keeps cell logs readable through [`SandboxSession::debug_cell_log`].
    pub fn with_debug_log(mut self, on: bool) -> Self {
        self.debug = on;
        self
    }

    pub fn kind(&self) -> ExecutorKind {
        self.kind
    }

    pub fn tracker(&self) -> &Arc<ResourceTracker> {
        &self.tracker
    }

    /// A fresh session whose namespace holds exactly `inputs`.
    pub fn spawn(&self, inputs: BTreeMap<String, Value>) -> Result<SandboxSession, SandboxError> {
        for (name, value) in &inputs {
            check_identifier(name)
                .map_err(|reason| SandboxError::InvalidInput { name: name.clone(), reason })?;
            value
                .check(name)
                .map_err(|e| SandboxError::InvalidInput { name: name.clone(), reason: e.message })?;
        }
        let session_id = format!("session-{}", self.next_id.fetch_add(1, Ordering::SeqCst));
        let backend: Box<dyn Backend> = match self.kind {
            ExecutorKind::Builtin => Box::new(BuiltinBackend::new(inputs)),
            ExecutorKind::Kernel => Box::new(kernel::KernelBackend::launch(&self.kernel, &session_id, inputs)?),
        };
        self.tracker.spawned.fetch_add(1, Ordering::SeqCst);
        log::debug!("spawned {session_id} ({})", self.kind);
        Ok(SandboxSession {
            session_id,
            kind: self.kind,
            backend,
            cell_log: Vec::new(),
            disposed: false,
            tracker: Arc::clone(&self.tracker),
            debug: self.debug,
        })
    }
}

pub struct SandboxSession {
    session_id: String,
    kind: ExecutorKind,
    backend: Box<dyn Backend>,
    cell_log: Vec<CellOutcome>,
    disposed: bool,
    tracker: Arc<ResourceTracker>,
    debug: bool,
}

impl fmt::Debug for SandboxSession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SandboxSession")
            .field("session_id", &self.session_id)
            .field("kind", &self.kind)
            .field("cells", &self.cell_log.len())
            .field("disposed", &self.disposed)
            .finish()
    }
}

impl SandboxSession {
    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn executor_kind(&self) -> ExecutorKind {
        self.kind
    }

    pub fn is_disposed(&self) -> bool {
        self.disposed
    }

    pub fn cells_executed(&self) -> usize {
        self.cell_log.len()
    }

    /// Cells that ended in a code error (not infrastructure failures).
    pub fn error_cells(&self) -> usize {
        self.cell_log.iter().filter(|c| c.error.is_some()).count()
    }

    /// OS process id of the kernel behind this session, if any.
    pub fn process_id(&self) -> Option<u32> {
        self.backend.process_id()
    }

    fn live(&self) -> Result<(), SandboxError> {
        if self.disposed {
            Err(SandboxError::Disposed(self.session_id.clone()))
        } else {
            Ok(())
        }
    }

    pub fn execute_cell(&mut self, code: &str) -> Result<CellOutcome, SandboxError> {
        self.live()?;
        let outcome = self.backend.execute_cell(code, self.cell_log.len() as u32)?;
        self.cell_log.push(outcome.clone());
        Ok(outcome)
    }

    /// Reads each return binding. Missing names are reported, never invented.
    pub fn extract_artifacts(&mut self, returns: &[ReturnField]) -> Result<BTreeMap<String, Value>, SandboxError> {
        self.live()?;
        let names: Vec<String> = returns.iter().map(|r| r.name.clone()).collect();
        let extracted = self.backend.extract(&names)?;
        if !extracted.missing.is_empty() {
            return Err(SandboxError::Missing { missing: extracted.missing });
        }
        for (name, value) in &extracted.values {
            value
                .check(name)
                .map_err(|e| SandboxError::Unconvertible { name: name.clone(), reason: e.message })?;
        }
        Ok(extracted.values)
    }

    pub fn debug_cell_log(&self) -> Option<&[CellOutcome]> {
        (self.debug && !self.disposed).then_some(self.cell_log.as_slice())
    }

    /// Discards the namespace and log. Idempotent.
    pub fn dispose(&mut self) {
        if self.disposed {
            return;
        }
        self.disposed = true;
        self.backend.dispose();
        self.cell_log = Vec::new();
        self.tracker.disposed.fetch_add(1, Ordering::SeqCst);
        log::debug!("disposed {}", self.session_id);
    }
}

impl Drop for SandboxSession {
    fn drop(&mut self) {
        self.dispose();
    }
}
