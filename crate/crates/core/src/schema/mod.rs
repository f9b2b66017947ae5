//! Domain types, canonical wire encoding and schema validation.
//!
//! Every message crossing the orchestration/execution boundary is one of
//! [`Specification`], [`CoderResult`] or [`Decision`], wrapped in [`Message`].
//! The wire form is canonical JSON: object keys sorted, no insignificant
//! whitespace, UTF-8. Encoding the same message twice yields identical bytes.

mod annotation;
mod message;
mod validate;
mod value;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub use annotation::{ColumnConstraint, Kind, Shape, TypeAnnotation, ValidationCondition};
pub use message::{
    ArtifactRef, CoderResult, Decision, Diagnostics, FailureKind, InputBinding, Message, ReplanEdit,
    ReturnField, Specification, Status, SubTaskId, SubTaskSeed, Verdict,
};
pub use validate::{
    check_condition, validate_result, validate_specification, validate_values, BindingCheck, Issue,
    PredicateRegistry, ValidationReport,
};
pub use value::{Table, Value, FLOAT_TOLERANCE, PREVIEW_CHARS, PREVIEW_ROWS};

/// A type invariant violated at `path` (e.g. `body.inputs[1].name`).
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{path}: {message}")]
pub struct InvariantError {
    pub path: String,
    pub message: String,
}

impl InvariantError {
    pub fn new(path: &str, message: impl Into<String>) -> Self {
        Self { path: path.to_string(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("invariant violated at {0}")]
    Invariant(#[from] InvariantError),
    #[error("malformed message at {path}: {message}")]
    Decode { path: String, message: String },
    #[error("unknown named predicate `{0}`")]
    UnknownPredicate(String),
    #[error("only successful results are schema-validated")]
    NotSuccess,
    #[error("encoding failed: {0}")]
    Encode(String),
}

const RESERVED: &[&str] = &["let", "print", "fail", "true", "false", "null"];

/// Identifiers valid in the sandbox language: `[A-Za-z_][A-Za-z0-9_]*`, not a keyword.
pub fn check_identifier(name: &str) -> Result<(), String> {
    let mut chars = name.chars();
    match chars.next() {
        None => return Err("identifier is empty".into()),
        Some(c) if !(c.is_ascii_alphabetic() || c == '_') => {
            return Err("identifier must start with a letter or underscore".into())
        }
        _ => {}
    }
    if !chars.all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err("identifier may only contain letters, digits and underscores".into());
    }
    if RESERVED.contains(&name) {
        return Err(format!("`{name}` is a reserved word"));
    }
    Ok(())
}

/// Canonical JSON bytes for any serializable value.
pub fn to_canonical_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, SchemaError> {
    // Routing through `serde_json::Value` sorts every object by key.
    let tree = serde_json::to_value(value).map_err(|e| SchemaError::Encode(e.to_string()))?;
    serde_json::to_vec(&tree).map_err(|e| SchemaError::Encode(e.to_string()))
}

pub fn to_canonical_string<T: Serialize>(value: &T) -> Result<String, SchemaError> {
    to_canonical_bytes(value).map(|b| String::from_utf8(b).expect("serde_json emits UTF-8"))
}

/// Deserializes JSON, reporting the field path of the first structural error.
pub fn from_json<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, SchemaError> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|e| SchemaError::Decode {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    de.end().map_err(|e| SchemaError::Decode { path: ".".into(), message: e.to_string() })?;
    Ok(value)
}

pub fn encode_message(msg: &Message) -> Result<Vec<u8>, SchemaError> {
    msg.check()?;
    to_canonical_bytes(msg)
}

/// Deserializes an already-parsed JSON tree, prefixing error paths with `prefix`.
pub fn from_json_value<T: DeserializeOwned>(
    value: serde_json::Value,
    prefix: &str,
) -> Result<T, SchemaError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let inner = e.path().to_string();
        let path = if inner == "." { prefix.to_string() } else { format!("{prefix}.{inner}") };
        SchemaError::Decode { path, message: e.inner().to_string() }
    })
}

pub fn decode_message(bytes: &[u8]) -> Result<Message, SchemaError> {
    let raw: serde_json::Value = from_json(bytes)?;
    let serde_json::Value::Object(mut envelope) = raw else {
        return Err(SchemaError::Decode { path: ".".into(), message: "expected an object".into() });
    };
    if let Some(extra) = envelope.keys().find(|k| *k != "body" && *k != "message") {
        return Err(SchemaError::Decode { path: extra.clone(), message: "unknown field".into() });
    }
    let tag = match envelope.remove("message") {
        Some(serde_json::Value::String(tag)) => tag,
        _ => {
            return Err(SchemaError::Decode {
                path: "message".into(),
                message: "expected a message kind string".into(),
            })
        }
    };
    let body = envelope.remove("body").ok_or_else(|| SchemaError::Decode {
        path: "body".into(),
        message: "missing field".into(),
    })?;
    let msg = match tag.as_str() {
        "specification" => Message::Specification(from_json_value(body, "body")?),
        "result" => Message::Result(from_json_value(body, "body")?),
        "decision" => Message::Decision(from_json_value(body, "body")?),
        other => {
            return Err(SchemaError::Decode {
                path: "message".into(),
                message: format!("unknown message kind `{other}`"),
            })
        }
    };
    msg.check()?;
    Ok(msg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn identifiers() {
        assert!(check_identifier("df_raw").is_ok());
        assert!(check_identifier("_x1").is_ok());
        assert!(check_identifier("1x").is_err());
        assert!(check_identifier("a-b").is_err());
        assert!(check_identifier("let").is_err());
        assert!(check_identifier("").is_err());
    }

    #[test]
    fn canonical_json_sorts_keys_without_whitespace() {
        let result = CoderResult::success(SubTaskId::new("s1"), BTreeMap::new(), "done");
        let bytes = encode_message(&Message::Result(result)).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(
            text,
            r#"{"body":{"artifacts":{},"status":"success","subtask_id":"s1","summary":"done"},"message":"result"}"#
        );
    }

    #[test]
    fn success_with_diagnostics_is_rejected_at_decode() {
        let raw = br#"{"message":"result","body":{"subtask_id":"s","status":"success","artifacts":{},"summary":"","diagnostics":{"kind":"reported","root_cause":"x","failed_operation":"y"}}}"#;
        let err = decode_message(raw).unwrap_err();
        match err {
            SchemaError::Invariant(e) => assert_eq!(e.path, "body.diagnostics"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn structural_errors_carry_field_paths() {
        let raw = br#"{"message":"specification","body":{"subtask_id":"s","directive":"d","inputs":[{"name":"x","artifact_name":"x","annotation":{"kind":"tabel"}}]}}"#;
        match decode_message(raw).unwrap_err() {
            SchemaError::Decode { path, .. } => assert!(path.contains("inputs[0].annotation.kind"), "{path}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn retry_without_directive_is_rejected() {
        let d = Decision { verdict: Verdict::Retry { refined_directive: " ".into() }, rationale: String::new() };
        assert!(encode_message(&Message::Decision(d)).is_err());
    }

    #[test]
    fn empty_replan_is_rejected() {
        let d = Decision {
            verdict: Verdict::Replan { edit: ReplanEdit { target: "s2".into(), replacement: vec![] } },
            rationale: String::new(),
        };
        assert!(Message::Decision(d).check().is_err());
    }
}
