//! Append-only progress journal with a SHA-256 hash chain.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::schema::{to_canonical_bytes, to_canonical_string, SubTaskId};

pub const GENESIS_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JournalKind {
    PlanSet,
    SpecIssued,
    ResultReceived,
    Committed,
    Retry,
    Replan,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    pub kind: JournalKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtask_id: Option<SubTaskId>,
    /// Encoded message or summary text.
    pub payload: String,
    /// Characters of delegator-role context consumed since the previous entry.
    #[serde(default)]
    pub context_chars: u64,
    /// Wall-clock milliseconds; excluded from the hash.
    #[serde(default)]
    pub recorded_at_ms: u64,
    pub prev_hash: String,
    pub hash: String,
}

#[derive(Serialize)]
struct Hashed<'a> {
    seq: u64,
    kind: JournalKind,
    subtask_id: &'a Option<SubTaskId>,
    payload: &'a str,
    context_chars: u64,
    prev_hash: &'a str,
}

impl JournalEntry {
    pub fn compute_hash(&self) -> String {
        let view = Hashed {
            seq: self.seq,
            kind: self.kind,
            subtask_id: &self.subtask_id,
            payload: &self.payload,
            context_chars: self.context_chars,
            prev_hash: &self.prev_hash,
        };
        let bytes = to_canonical_bytes(&view).expect("journal entries always serialize");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChainError {
    #[error("entry {index}: sequence number {found} is not greater than {previous}")]
    Sequence { index: usize, previous: u64, found: u64 },
    #[error("entry {index}: prev_hash does not match the preceding entry")]
    Link { index: usize },
    #[error("entry {index}: hash does not match contents")]
    Tampered { index: usize },
}

/// Verifies sequence monotonicity and the hash chain of a journal.
pub fn verify_chain(entries: &[JournalEntry]) -> Result<(), ChainError> {
    let mut prev_hash = GENESIS_HASH.to_string();
    let mut prev_seq: Option<u64> = None;
    for (index, entry) in entries.iter().enumerate() {
        if let Some(previous) = prev_seq {
            if entry.seq <= previous {
                return Err(ChainError::Sequence { index, previous, found: entry.seq });
            }
        }
        if entry.prev_hash != prev_hash {
            return Err(ChainError::Link { index });
        }
        if entry.compute_hash() != entry.hash {
            return Err(ChainError::Tampered { index });
        }
        prev_hash = entry.hash.clone();
        prev_seq = Some(entry.seq);
    }
    Ok(())
}

/// Sum of delegator context characters recorded in a journal.
pub fn context_proxy(entries: &[JournalEntry]) -> u64 {
    entries.iter().map(|e| e.context_chars).sum()
}

pub fn read_jsonl(path: &Path) -> io::Result<Vec<JournalEntry>> {
    let reader = BufReader::new(File::open(path)?);
    let mut entries = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(
            serde_json::from_str(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?,
        );
    }
    Ok(entries)
}

#[derive(Debug, Default)]
pub struct Journal {
    entries: Vec<JournalEntry>,
    pending_context_chars: u64,
    sink: Option<File>,
}

impl Journal {
    pub fn new() -> Self {
        Self::default()
    }

    /// A journal that also appends every entry as one canonical JSON line to `path`.
    pub fn with_file(path: &Path) -> io::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let sink = File::create(path)?;
        Ok(Self { sink: Some(sink), ..Self::default() })
    }

    pub fn entries(&self) -> &[JournalEntry] {
        &self.entries
    }

    pub fn last_hash(&self) -> &str {
        self.entries.last().map_or(GENESIS_HASH, |e| e.hash.as_str())
    }

    pub fn add_context_chars(&mut self, chars: u64) {
        self.pending_context_chars += chars;
    }

    /// Delegator context recorded so far, including chars not yet attached to an entry.
    pub fn total_context_chars(&self) -> u64 {
        context_proxy(&self.entries) + self.pending_context_chars
    }

    pub fn append(
        &mut self,
        kind: JournalKind,
        subtask_id: Option<SubTaskId>,
        payload: String,
    ) -> io::Result<&JournalEntry> {
        let seq = self.entries.last().map_or(0, |e| e.seq + 1);
        let recorded_at_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or_default();
        let mut entry = JournalEntry {
            seq,
            kind,
            subtask_id,
            payload,
            context_chars: std::mem::take(&mut self.pending_context_chars),
            recorded_at_ms,
            prev_hash: self.last_hash().to_string(),
            hash: String::new(),
        };
        entry.hash = entry.compute_hash();
        if let Some(sink) = self.sink.as_mut() {
            let line = to_canonical_string(&entry).expect("journal entries always serialize");
            writeln!(sink, "{line}")?;
            sink.flush()?;
        }
        self.entries.push(entry);
        Ok(self.entries.last().expect("just pushed"))
    }

    /// Attaches any trailing context characters to a final record-keeping entry.
    pub fn flush_context(&mut self) -> io::Result<()> {
        if self.pending_context_chars > 0 {
            if let Some(last) = self.entries.last() {
                let kind = last.kind;
                let subtask = last.subtask_id.clone();
                self.append(kind, subtask, "context".into())?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Journal {
        let mut j = Journal::new();
        j.append(JournalKind::PlanSet, None, "plan".into()).unwrap();
        j.add_context_chars(10);
        j.append(JournalKind::SpecIssued, Some("s1".into()), "spec".into()).unwrap();
        j.append(JournalKind::ResultReceived, Some("s1".into()), "res".into()).unwrap();
        j
    }

    #[test]
    fn chain_verifies_and_detects_mutation() {
        let j = sample();
        assert!(verify_chain(j.entries()).is_ok());
        assert_eq!(context_proxy(j.entries()), 10);

        let mut tampered = j.entries().to_vec();
        tampered[1].payload = "other".into();
        assert_eq!(verify_chain(&tampered), Err(ChainError::Tampered { index: 1 }));

        let mut dropped = j.entries().to_vec();
        dropped.remove(1);
        assert!(verify_chain(&dropped).is_err());
    }

    #[test]
    fn timestamps_do_not_affect_hash() {
        let j = sample();
        let mut e = j.entries()[0].clone();
        e.recorded_at_ms += 1000;
        assert_eq!(e.compute_hash(), e.hash);
    }

    #[test]
    fn file_sink_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/journal.jsonl");
        let mut j = Journal::with_file(&path).unwrap();
        j.append(JournalKind::PlanSet, None, "p".into()).unwrap();
        j.append(JournalKind::Failure, Some("s".into()), "f".into()).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, j.entries());
        assert!(verify_chain(&back).is_ok());
    }
}
