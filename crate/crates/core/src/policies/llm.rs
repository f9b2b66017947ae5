//! A policy backed by an OpenAI-compatible chat-completions endpoint.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::fenced::parse_action;
use crate::agents::{ActionKind, Policy, PolicyAction, PolicyError, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the API key; empty sends no auth header.
    pub api_key_env: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(with = "crate::serde_secs")]
    pub timeout: Duration,
    pub transport_attempts: u32,
    #[serde(with = "crate::serde_secs")]
    pub backoff_initial: Duration,
    /// Appends every exchange to this file when set.
    pub debug_log: Option<PathBuf>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model: "default".into(),
            api_key_env: String::new(),
            temperature: 0.0,
            max_tokens: 2048,
            timeout: Duration::from_secs(120),
            transport_attempts: 3,
            backoff_initial: Duration::from_secs(1),
            debug_log: None,
        }
    }
}

const DELEGATOR_PROMPT: &str = "You are the Delegator. You plan an analysis task, write a typed \
specification for each subtask, and assess the results your Coders report. You never see code or \
execution output.";

const CODER_PROMPT: &str = "You are a Coder. You solve one specification by writing CellScript \
cells in a fresh session, one cell per turn, until every return binding exists and validates. \
CellScript has `let name = expr`, `print expr` and `fail \"text\"`; builtins are table, len, rows, \
cols, dedupe_by, drop_null_rows, fill_forward and scale_column.";

const FORMAT_PROMPT: &str = "Answer with exactly one fenced ```json block holding one action object. \
Shapes: {\"plan_proposal\":{\"subtasks\":[{\"id\":..,\"title\":..,\"directive_seed\":..}]}}, \
{\"spec_proposal\":{\"directive\":..,\"inputs\":[names],\"returns\":[{\"name\":..,\"annotation\":{\"kind\":..},\"conditions\":[]}]}}, \
{\"code\":{\"code\":..}}, {\"result_report\":{\"summary\":..,\"diagnostics\":null}}, \
{\"verdict\":{\"decision\":{\"verdict\":\"proceed\"|{\"retry\":{\"refined_directive\":..}}|{\"replan\":{\"edit\":{\"target\":..,\"replacement\":[seeds]}}},\"rationale\":..}}}.";

pub struct LlmPolicy {
    config: LlmConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    transport_retries: u32,
    reparses: u32,
}

impl LlmPolicy {
    pub fn new(config: LlmConfig) -> Result<Self, PolicyError> {
        let api_key = if config.api_key_env.is_empty() {
            None
        } else {
            Some(std::env::var(&config.api_key_env).map_err(|_| {
                PolicyError::Config(format!("environment variable {} is not set", config.api_key_env))
            })?)
        };
        if config.transport_attempts == 0 {
            return Err(PolicyError::Config("transport_attempts must be at least 1".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| PolicyError::Config(e.to_string()))?;
        Ok(Self { config, client, api_key, transport_retries: 0, reparses: 0 })
    }

    /// Transport attempts beyond the first, summed over all calls.
    pub fn transport_retries(&self) -> u32 {
        self.transport_retries
    }

    /// Calls that needed the reparse request.
    pub fn reparses(&self) -> u32 {
        self.reparses
    }

    fn log(&self, role: Role, prompt: &str, reply: &str) {
        let Some(path) = &self.config.debug_log else { return };
        let entry = json!({"role": role, "prompt": prompt, "reply": reply});
        if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(path) {
            let _ = writeln!(f, "{entry}");
        }
    }

    fn complete_once(&self, messages: &serde_json::Value) -> Result<String, String> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
            "messages": messages,
        });
        let mut req = self.client.post(url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("HTTP {status}"));
        }
        let value: serde_json::Value = resp.json().map_err(|e| e.to_string())?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| "response has no choices[0].message.content".to_string())
    }

    fn complete(&mut self, messages: &serde_json::Value) -> Result<String, PolicyError> {
        let mut backoff = self.config.backoff_initial;
        let mut last = String::new();
        for attempt in 1..=self.config.transport_attempts {
            match self.complete_once(messages) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!("completion attempt {attempt} failed: {e}");
                    last = e;
                    if attempt < self.config.transport_attempts {
                        self.transport_retries += 1;
                        std::thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(PolicyError::Transport { attempts: self.config.transport_attempts, message: last })
    }
}

fn interpret(reply: &str, expected: &[ActionKind]) -> Result<PolicyAction, String> {
    let action = parse_action(reply)?;
    if !expected.contains(&action.kind()) {
        let wanted: Vec<&str> = expected.iter().map(|k| k.as_str()).collect();
        return Err(format!("got a {} action, expected one of [{}]", action.kind(), wanted.join(", ")));
    }
    Ok(action)
}

impl Policy for LlmPolicy {
    fn propose(&mut self, role: Role, context: &str, expected: &[ActionKind]) -> Result<PolicyAction, PolicyError> {
        let persona = match role {
            Role::Delegator => DELEGATOR_PROMPT,
            Role::Coder => CODER_PROMPT,
        };
        let wanted: Vec<&str> = expected.iter().map(|k| k.as_str()).collect();
        let system = format!("{persona}\n\n{FORMAT_PROMPT}\nAllowed now: {}.", wanted.join(", "));
        let mut messages = vec![json!({"role": "system", "content": system}), json!({"role": "user", "content": context})];

        let reply = self.complete(&serde_json::Value::from(messages.clone()))?;
        self.log(role, context, &reply);
        let err = match interpret(&reply, expected) {
            Ok(action) => return Ok(action),
            Err(e) => e,
        };
        self.reparses += 1;
        messages.push(json!({"role": "assistant", "content": reply}));
        messages.push(json!({
            "role": "user",
            "content": format!("That answer could not be used: {err}. Reply again with one fenced json block.")
        }));
        let reply = self.complete(&serde_json::Value::from(messages))?;
        self.log(role, "(reparse)", &reply);
        interpret(&reply, expected).map_err(PolicyError::Unparseable)
    }
}
