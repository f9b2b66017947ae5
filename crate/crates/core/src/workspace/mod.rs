//! The persistent orchestration layer.
//!
//! Holds the task statement, the plan with per-subtask status, committed
//! typed artifacts and the progress journal. Only the protocol engine holds a
//! `&mut Workspace`; sandboxes receive cloned snapshots of resolved values.

mod journal;
mod staging;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{
    encode_message, to_canonical_string, validate_result, CoderResult, Decision, Diagnostics, Message,
    PredicateRegistry, ReplanEdit, ReturnField, SchemaError, Specification, SubTaskId, SubTaskSeed,
    TypeAnnotation, ValidationCondition, Value,
};

pub use journal::{
    context_proxy, read_jsonl, verify_chain, ChainError, Journal, JournalEntry, JournalKind,
    GENESIS_HASH,
};
pub use staging::StagingArea;

/// Default cap, in bytes, for each subtask block and each artifact block of the planning context.
pub const DEFAULT_BLOCK_CAP: usize = 1024;

/// `produced_by` of artifacts seeded from the task environment rather than a Coder.
pub const ENVIRONMENT: &str = "environment";

const TRUNCATION_MARK: &str = "…[truncated]";

/// Leading line of a free-text handoff that reports success.
pub const FREE_TEXT_SUCCESS: &str = "status: success";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubTaskStatus {
    Pending,
    InProgress,
    Done,
    Failed,
}

impl SubTaskStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SubTaskStatus::Pending => "pending",
            SubTaskStatus::InProgress => "in_progress",
            SubTaskStatus::Done => "done",
            SubTaskStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubTask {
    pub id: SubTaskId,
    pub title: String,
    pub directive_seed: String,
    pub status: SubTaskStatus,
    pub retry_count: u32,
    pub order_index: u32,
}

impl SubTask {
    fn from_seed(seed: SubTaskSeed, order_index: u32) -> Self {
        Self {
            id: seed.id,
            title: seed.title,
            directive_seed: seed.directive_seed,
            status: SubTaskStatus::Pending,
            retry_count: 0,
            order_index,
        }
    }

    pub fn seed(&self) -> SubTaskSeed {
        SubTaskSeed {
            id: self.id.clone(),
            title: self.title.clone(),
            directive_seed: self.directive_seed.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub subtasks: Vec<SubTask>,
    pub replan_count: u32,
}

impl Plan {
    pub fn from_seeds(seeds: Vec<SubTaskSeed>) -> Self {
        let subtasks = seeds
            .into_iter()
            .enumerate()
            .map(|(i, seed)| SubTask::from_seed(seed, i as u32))
            .collect();
        Self { subtasks, replan_count: 0 }
    }

    pub fn check(&self) -> Result<(), WorkspaceError> {
        let mut ids = BTreeSet::new();
        let mut last: Option<u32> = None;
        for st in &self.subtasks {
            if !ids.insert(&st.id) {
                return Err(WorkspaceError::DuplicateSubTask(st.id.clone()));
            }
            if last.is_some_and(|prev| st.order_index <= prev) {
                return Err(WorkspaceError::OrderNotIncreasing(st.id.clone()));
            }
            last = Some(st.order_index);
        }
        Ok(())
    }

    pub fn get(&self, id: &SubTaskId) -> Option<&SubTask> {
        self.subtasks.iter().find(|s| &s.id == id)
    }

    fn get_mut(&mut self, id: &SubTaskId) -> Result<&mut SubTask, WorkspaceError> {
        self.subtasks
            .iter_mut()
            .find(|s| &s.id == id)
            .ok_or_else(|| WorkspaceError::UnknownSubTask(id.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommittedArtifact {
    pub name: String,
    pub value: Value,
    pub annotation: TypeAnnotation,
    pub produced_by: SubTaskId,
    pub committed_at: u64,
}

#[derive(Debug, Error)]
pub enum WorkspaceError {
    #[error("a plan is already active")]
    PlanAlreadySet,
    #[error("no plan has been set")]
    NoPlan,
    #[error("duplicate subtask id `{0}`")]
    DuplicateSubTask(SubTaskId),
    #[error("order index of `{0}` is not strictly increasing")]
    OrderNotIncreasing(SubTaskId),
    #[error("unknown subtask `{0}`")]
    UnknownSubTask(SubTaskId),
    #[error("subtask `{id}` cannot move from {from} to {to}")]
    InvalidTransition { id: SubTaskId, from: &'static str, to: &'static str },
    #[error("only successful results can be committed")]
    CommitOfFailedResult,
    #[error("result does not satisfy its return schema: {0}")]
    CommitInvalid(String),
    #[error("unresolved artifact `{0}`")]
    UnresolvedArtifact(String),
    #[error("replan must replace its target with at least one subtask")]
    EmptyReplacement,
    #[error("replan budget of {budget} exhausted")]
    ReplanExhausted { budget: u32 },
    #[error("subtask `{0}` is already done and cannot be replanned")]
    ReplanTargetDone(SubTaskId),
    #[error("retry budget of {budget} exhausted for `{id}`")]
    RetryExhausted { id: SubTaskId, budget: u32 },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("journal write failed: {0}")]
    Journal(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct WorkspaceConfig {
    pub retry_budget: u32,
    pub replan_budget: u32,
    /// Byte cap for each subtask and artifact block in `planning_context`; `None` disables it.
    pub block_cap: Option<usize>,
}

impl Default for WorkspaceConfig {
    fn default() -> Self {
        Self { retry_budget: 3, replan_budget: 3, block_cap: Some(DEFAULT_BLOCK_CAP) }
    }
}

#[derive(Debug)]
pub struct Workspace {
    task: String,
    plan: Option<Plan>,
    artifacts: BTreeMap<String, CommittedArtifact>,
    journal: Journal,
    commit_seq: u64,
    notes: BTreeMap<SubTaskId, String>,
    config: WorkspaceConfig,
}

impl Workspace {
    pub fn new(task: impl Into<String>, config: WorkspaceConfig) -> Self {
        Self::with_journal(task, config, Journal::new())
    }

    pub fn with_journal(task: impl Into<String>, config: WorkspaceConfig, journal: Journal) -> Self {
        Self {
            task: task.into(),
            plan: None,
            artifacts: BTreeMap::new(),
            journal,
            commit_seq: 0,
            notes: BTreeMap::new(),
            config,
        }
    }

    pub fn task(&self) -> &str {
        &self.task
    }

    pub fn config(&self) -> &WorkspaceConfig {
        &self.config
    }

    pub fn plan(&self) -> Option<&Plan> {
        self.plan.as_ref()
    }

    pub fn journal(&self) -> &Journal {
        &self.journal
    }

    pub fn journal_mut(&mut self) -> &mut Journal {
        &mut self.journal
    }

    pub fn artifacts(&self) -> &BTreeMap<String, CommittedArtifact> {
        &self.artifacts
    }

    pub fn subtask(&self, id: &SubTaskId) -> Option<&SubTask> {
        self.plan.as_ref().and_then(|p| p.get(id))
    }

    /// Places an environment-provided artifact into the store before planning starts.
    pub fn seed_artifact(&mut self, name: impl Into<String>, value: Value) -> Result<(), WorkspaceError> {
        let name = name.into();
        crate::schema::check_identifier(&name)
            .map_err(|_| WorkspaceError::UnresolvedArtifact(name.clone()))?;
        value.check(&name).map_err(SchemaError::from)?;
        let annotation = TypeAnnotation::infer(&value);
        self.journal.append(
            JournalKind::Committed,
            Some(SubTaskId::new(ENVIRONMENT)),
            format!("seeded {name}: {annotation}"),
        )?;
        self.insert_artifact(name, value, annotation, SubTaskId::new(ENVIRONMENT));
        Ok(())
    }

    fn insert_artifact(
        &mut self,
        name: String,
        value: Value,
        annotation: TypeAnnotation,
        produced_by: SubTaskId,
    ) -> Option<CommittedArtifact> {
        self.commit_seq += 1;
        let artifact = CommittedArtifact {
            name: name.clone(),
            value,
            annotation,
            produced_by,
            committed_at: self.commit_seq,
        };
        self.artifacts.insert(name, artifact)
    }

    pub fn set_plan(&mut self, plan: Plan) -> Result<(), WorkspaceError> {
        if self.plan.is_some() {
            return Err(WorkspaceError::PlanAlreadySet);
        }
        plan.check()?;
        let seeds: Vec<SubTaskSeed> = plan.subtasks.iter().map(SubTask::seed).collect();
        self.journal.append(JournalKind::PlanSet, None, to_canonical_string(&seeds)?)?;
        self.plan = Some(plan);
        Ok(())
    }

    /// Lowest-`order_index` subtask still `Pending`.
    pub fn next_pending(&self) -> Option<&SubTask> {
        self.plan
            .as_ref()?
            .subtasks
            .iter()
            .filter(|s| s.status == SubTaskStatus::Pending)
            .min_by_key(|s| s.order_index)
    }

    fn transition(&mut self, id: &SubTaskId, to: SubTaskStatus) -> Result<(), WorkspaceError> {
        let plan = self.plan.as_mut().ok_or(WorkspaceError::NoPlan)?;
        let st = plan.get_mut(id)?;
        let allowed = matches!(
            (st.status, to),
            (SubTaskStatus::Pending, SubTaskStatus::InProgress)
                | (SubTaskStatus::InProgress, SubTaskStatus::Done)
                | (SubTaskStatus::InProgress, SubTaskStatus::Failed)
        );
        if !allowed {
            return Err(WorkspaceError::InvalidTransition {
                id: id.clone(),
                from: st.status.as_str(),
                to: to.as_str(),
            });
        }
        st.status = to;
        Ok(())
    }

    pub fn mark_in_progress(&mut self, id: &SubTaskId) -> Result<(), WorkspaceError> {
        self.transition(id, SubTaskStatus::InProgress)
    }

    /// Marks a subtask failed and journals the diagnostics.
    pub fn mark_failed(&mut self, id: &SubTaskId, diagnostics: &Diagnostics) -> Result<(), WorkspaceError> {
        self.transition(id, SubTaskStatus::Failed)?;
        self.journal.append(JournalKind::Failure, Some(id.clone()), to_canonical_string(diagnostics)?)?;
        Ok(())
    }

    /// Journals a terminal failure without changing subtask status.
    pub fn record_failure(&mut self, id: &SubTaskId, diagnostics: &Diagnostics) -> Result<(), WorkspaceError> {
        self.journal.append(JournalKind::Failure, Some(id.clone()), to_canonical_string(diagnostics)?)?;
        Ok(())
    }

    pub fn record_spec(&mut self, spec: &Specification) -> Result<(), WorkspaceError> {
        let bytes = encode_message(&Message::Specification(spec.clone()))?;
        let payload = String::from_utf8(bytes).expect("canonical JSON is UTF-8");
        self.journal.append(JournalKind::SpecIssued, Some(spec.subtask_id.clone()), payload)?;
        Ok(())
    }

    /// Journals a typed result and keeps its summary as the subtask's latest note.
    pub fn record_result(&mut self, result: &CoderResult) -> Result<(), WorkspaceError> {
        let bytes = encode_message(&Message::Result(result.clone()))?;
        let payload = String::from_utf8(bytes).expect("canonical JSON is UTF-8");
        self.journal.append(JournalKind::ResultReceived, Some(result.subtask_id.clone()), payload)?;
        let note = match &result.diagnostics {
            None => format!("success: {}", result.summary),
            Some(d) => format!(
                "fail ({}): {} | failed operation: {} | {}",
                d.kind.as_str(),
                d.root_cause,
                d.failed_operation,
                result.summary
            ),
        };
        self.notes.insert(result.subtask_id.clone(), note);
        Ok(())
    }

    /// Journals an untyped, free-text handoff (used only by the no-EPSS ablation).
    pub fn record_free_text_result(&mut self, id: &SubTaskId, text: String) -> Result<(), WorkspaceError> {
        self.journal.append(JournalKind::ResultReceived, Some(id.clone()), text.clone())?;
        self.notes.insert(id.clone(), text);
        Ok(())
    }

    pub fn record_retry(&mut self, id: &SubTaskId, decision: &Decision) -> Result<u32, WorkspaceError> {
        let budget = self.config.retry_budget;
        let plan = self.plan.as_mut().ok_or(WorkspaceError::NoPlan)?;
        let st = plan.get_mut(id)?;
        if st.retry_count >= budget {
            return Err(WorkspaceError::RetryExhausted { id: id.clone(), budget });
        }
        st.retry_count += 1;
        let count = st.retry_count;
        let bytes = encode_message(&Message::Decision(decision.clone()))?;
        self.journal.append(
            JournalKind::Retry,
            Some(id.clone()),
            String::from_utf8(bytes).expect("canonical JSON is UTF-8"),
        )?;
        Ok(count)
    }

    /// Commits a validated successful result: stores each artifact and marks the subtask done.
    ///
    /// Name collisions overwrite the earlier artifact; the journal records the supersession.
    pub fn commit(
        &mut self,
        result: &CoderResult,
        returns: &[ReturnField],
        staging: &StagingArea,
        registry: &PredicateRegistry,
    ) -> Result<Vec<String>, WorkspaceError> {
        if !result.is_success() {
            return Err(WorkspaceError::CommitOfFailedResult);
        }
        let report = validate_result(result, returns, |r| staging.get(&r.handle), registry)?;
        if !report.is_valid() {
            return Err(WorkspaceError::CommitInvalid(report.describe()));
        }
        let mut staged = Vec::with_capacity(result.artifacts.len());
        for (name, reference) in &result.artifacts {
            let value = staging
                .get(&reference.handle)
                .ok_or_else(|| WorkspaceError::UnresolvedArtifact(name.clone()))?
                .clone();
            let mut annotation = TypeAnnotation::infer(&value);
            if let Some(field) = returns.iter().find(|f| &f.name == name) {
                for condition in &field.conditions {
                    if let ValidationCondition::NoNullsInColumn(column) = condition {
                        annotation = annotation.with_no_nulls(column.clone());
                    }
                }
            }
            staged.push((name.clone(), value, annotation));
        }
        self.transition(&result.subtask_id, SubTaskStatus::Done)?;
        let mut lines = Vec::new();
        let mut names = Vec::new();
        for (name, value, annotation) in staged {
            let line_head = format!("{name}: {annotation}");
            if let Some(old) = self.insert_artifact(name.clone(), value, annotation, result.subtask_id.clone()) {
                lines.push(format!(
                    "{line_head} (supersedes commit {} by {})",
                    old.committed_at, old.produced_by
                ));
            } else {
                lines.push(line_head);
            }
            names.push(name);
        }
        self.journal.append(JournalKind::Committed, Some(result.subtask_id.clone()), lines.join("\n"))?;
        Ok(names)
    }

    /// Commits artifacts without schema validation (no-EPSS and single-agent ablations).
    pub fn commit_unchecked(
        &mut self,
        id: &SubTaskId,
        values: BTreeMap<String, Value>,
    ) -> Result<Vec<String>, WorkspaceError> {
        self.transition(id, SubTaskStatus::Done)?;
        let mut lines = Vec::new();
        for (name, value) in values {
            let annotation = TypeAnnotation::infer(&value);
            lines.push(format!("{name}: {annotation}"));
            self.insert_artifact(name, value, annotation, id.clone());
        }
        self.journal.append(JournalKind::Committed, Some(id.clone()), lines.join("\n"))?;
        Ok(lines)
    }

    pub fn resolve(&self, name: &str) -> Result<(&Value, &TypeAnnotation), WorkspaceError> {
        self.artifacts
            .get(name)
            .map(|a| (&a.value, &a.annotation))
            .ok_or_else(|| WorkspaceError::UnresolvedArtifact(name.to_string()))
    }

    pub fn visible_annotations(&self) -> BTreeMap<String, TypeAnnotation> {
        self.artifacts.iter().map(|(k, a)| (k.clone(), a.annotation.clone())).collect()
    }

    pub fn replans_remaining(&self) -> u32 {
        let used = self.plan.as_ref().map_or(0, |p| p.replan_count);
        self.config.replan_budget.saturating_sub(used)
    }

    /// Replaces the target subtask with the edit's replacement list and renumbers the plan.
    pub fn splice_replan(&mut self, decision: &Decision, edit: &ReplanEdit) -> Result<(), WorkspaceError> {
        if edit.replacement.is_empty() {
            return Err(WorkspaceError::EmptyReplacement);
        }
        let bytes = encode_message(&Message::Decision(decision.clone()))?;
        let budget = self.config.replan_budget;
        let plan = self.plan.as_mut().ok_or(WorkspaceError::NoPlan)?;
        if plan.replan_count >= budget {
            return Err(WorkspaceError::ReplanExhausted { budget });
        }
        let position = plan
            .subtasks
            .iter()
            .position(|s| s.id == edit.target)
            .ok_or_else(|| WorkspaceError::UnknownSubTask(edit.target.clone()))?;
        if plan.subtasks[position].status == SubTaskStatus::Done {
            return Err(WorkspaceError::ReplanTargetDone(edit.target.clone()));
        }
        let mut ids: BTreeSet<&SubTaskId> =
            plan.subtasks.iter().filter(|s| s.id != edit.target).map(|s| &s.id).collect();
        for seed in &edit.replacement {
            if !ids.insert(&seed.id) {
                return Err(WorkspaceError::DuplicateSubTask(seed.id.clone()));
            }
        }
        let replacement: Vec<SubTask> =
            edit.replacement.iter().cloned().map(|seed| SubTask::from_seed(seed, 0)).collect();
        plan.subtasks.splice(position..=position, replacement);
        for (i, st) in plan.subtasks.iter_mut().enumerate() {
            st.order_index = i as u32;
        }
        plan.replan_count += 1;
        self.journal.append(
            JournalKind::Replan,
            Some(edit.target.clone()),
            String::from_utf8(bytes).expect("canonical JSON is UTF-8"),
        )?;
        Ok(())
    }

    fn cap(&self, block: String) -> String {
        match self.config.block_cap {
            Some(cap) if block.len() > cap => {
                let keep = cap.saturating_sub(TRUNCATION_MARK.len() + 1);
                let mut end = keep;
                while !block.is_char_boundary(end) {
                    end -= 1;
                }
                format!("{}{TRUNCATION_MARK}\n", &block[..end])
            }
            _ => block,
        }
    }

    /// The Delegator's compact planning state.
    ///
    /// Task statement, one block per subtask (title, status, retries, latest
    /// note) and one block per artifact (name, annotation, preview). Each block
    /// is capped at `block_cap` bytes, so the rendering is O(n) in the plan and
    /// artifact count regardless of how many cells any Coder executed.
    pub fn planning_context(&self) -> String {
        let mut out = format!("# Task\n{}\n", self.task);
        if let Some(plan) = self.plan.as_ref().filter(|p| !p.subtasks.is_empty()) {
            out.push_str("\n# Plan\n");
            for st in &plan.subtasks {
                let mut block = format!(
                    "- [{}] {} ({}, retries {})\n",
                    st.id,
                    st.title,
                    st.status.as_str(),
                    st.retry_count
                );
                if let Some(note) = self.notes.get(&st.id) {
                    let _ = writeln!(block, "  last: {note}");
                }
                out.push_str(&self.cap(block));
            }
        }
        if !self.artifacts.is_empty() {
            out.push_str("\n# Artifacts\n");
            for artifact in self.artifacts.values() {
                let preview = artifact.value.preview().to_string().replace('\n', "\n    ");
                let block = format!(
                    "- {}: {} (from {})\n    {}\n",
                    artifact.name, artifact.annotation, artifact.produced_by, preview
                );
                out.push_str(&self.cap(block));
            }
        }
        out
    }

    /// Every commit is preceded by a successful result for the same subtask.
    pub fn audit_commits(&self) -> Result<(), String> {
        let mut succeeded = BTreeSet::new();
        for entry in self.journal.entries() {
            let Some(id) = entry.subtask_id.as_ref() else { continue };
            match entry.kind {
                JournalKind::ResultReceived
                    if entry.payload.contains(r#""status":"success""#)
                        || entry.payload.starts_with(FREE_TEXT_SUCCESS) =>
                {
                    succeeded.insert(id.clone());
                }
                JournalKind::Committed if id.as_str() != ENVIRONMENT && !succeeded.contains(id) => {
                    return Err(format!("commit {} for `{id}` has no prior successful result", entry.seq));
                }
                _ => {}
            }
        }
        for artifact in self.artifacts.values() {
            if artifact.produced_by.as_str() != ENVIRONMENT && !succeeded.contains(&artifact.produced_by) {
                return Err(format!("artifact `{}` has no successful producer", artifact.name));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
