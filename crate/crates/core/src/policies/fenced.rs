//! The structured-output convention: one fenced block of canonical JSON.

use crate::agents::PolicyAction;
use crate::schema::{from_json, to_canonical_string};

const FENCE: &str = "```";

pub fn print_action(action: &PolicyAction) -> String {
    let json = to_canonical_string(action).expect("policy actions always serialize");
    format!("{FENCE}json\n{json}\n{FENCE}")
}

/// Parses the first fenced block in `text` as an action.
///
/// The block runs from an opening fence line (optionally tagged `json`) to the
/// next line consisting only of a fence; JSON strings cannot contain a raw
/// newline, so backticks inside string values never end the block early.
pub fn parse_action(text: &str) -> Result<PolicyAction, String> {
    let mut lines = text.lines();
    loop {
        let line = lines.next().ok_or("no fenced block found")?;
        let trimmed = line.trim();
        if let Some(tag) = trimmed.strip_prefix(FENCE) {
            if tag.is_empty() || tag.eq_ignore_ascii_case("json") {
                break;
            }
        }
    }
    let mut body = String::new();
    let mut closed = false;
    for line in lines {
        if line.trim() == FENCE {
            closed = true;
            break;
        }
        body.push_str(line);
        body.push('\n');
    }
    if !closed {
        return Err("fenced block is not closed".into());
    }
    let action: PolicyAction = from_json(body.trim().as_bytes()).map_err(|e| e.to_string())?;
    action.check().map_err(|e| e.to_string())?;
    Ok(action)
}
