//! Policies: where actions come from.
//!
//! [`ScriptedPolicy`] replays recorded actions and fails loudly on divergence,
//! [`LlmPolicy`] asks a chat-completions endpoint, and [`fenced`] is the text
//! format both sides of the model boundary use.

pub mod fenced;
mod llm;
mod scripted;

pub use llm::{LlmConfig, LlmPolicy};
pub use scripted::{ContextPredicate, FnPolicy, Script, ScriptStep, ScriptedPolicy};
