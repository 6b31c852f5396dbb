//! Deterministic scripted backend for tests and fixtures.
//!
//! Rules are evaluated in order against the phase of the call and the
//! content of the latest message; the first match fires (at most one per
//! call). Unmatched calls get a documented inert response so a fixture that
//! drifts fails loudly instead of hanging.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::Deserialize;

use super::provider::{Provider, ProviderError};
use super::types::{
    CallContext, CompletionRequest, CompletionResponse, Message, ToolCall, Usage,
};
use crate::store::Phase;

/// Text returned when no rule matches.
pub const NO_RULE_MATCHED: &str = "no rule matched";

/// One scripted behavior.
#[derive(Debug, Clone, Deserialize)]
pub struct ScriptRule {
    /// Fire only for this phase; `None` matches any phase.
    #[serde(default)]
    pub phase: Option<Phase>,
    /// Substring that must appear in the latest message; empty matches all.
    #[serde(default)]
    pub matcher: String,
    pub response: ScriptedResponse,
    /// When true the rule fires at most once.
    #[serde(default)]
    pub consume_once: bool,
}

/// The canned completion a rule produces.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct ScriptedResponse {
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub tool_calls: Vec<ScriptedToolCall>,
    /// Reported usage; absent charges the model's flat estimate.
    #[serde(default)]
    pub usage: Option<Usage>,
}

impl ScriptedResponse {
    pub fn text(text: impl Into<String>) -> Self {
        ScriptedResponse {
            text: text.into(),
            ..Default::default()
        }
    }

    pub fn tool(name: impl Into<String>, arguments: serde_json::Value) -> Self {
        ScriptedResponse {
            tool_calls: vec![ScriptedToolCall {
                name: name.into(),
                arguments,
            }],
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct ScriptedToolCall {
    pub name: String,
    #[serde(default = "empty_args")]
    pub arguments: serde_json::Value,
}

fn empty_args() -> serde_json::Value {
    serde_json::json!({})
}

struct RuleState {
    rule: ScriptRule,
    consumed: bool,
}

/// Provider that answers from the rule set. Counts calls so tests can check
/// audit completeness against it.
pub struct ScriptedProvider {
    rules: Mutex<Vec<RuleState>>,
    calls: AtomicU64,
}

impl ScriptedProvider {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        ScriptedProvider {
            rules: Mutex::new(
                rules
                    .into_iter()
                    .map(|rule| RuleState {
                        rule,
                        consumed: false,
                    })
                    .collect(),
            ),
            calls: AtomicU64::new(0),
        }
    }

    /// Load rules from a JSON file (an array of rule objects).
    pub fn from_rules_file(path: &std::path::Path) -> Result<Self, String> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| format!("could not read rules file {}: {e}", path.display()))?;
        let rules: Vec<ScriptRule> = serde_json::from_str(&raw)
            .map_err(|e| format!("bad rules file {}: {e}", path.display()))?;
        Ok(ScriptedProvider::new(rules))
    }

    /// Number of completions served so far.
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn inert() -> CompletionResponse {
        CompletionResponse {
            message: Message::assistant(NO_RULE_MATCHED, vec![]),
            usage: None,
            finish_reason: "stop".to_string(),
        }
    }
}

impl Provider for ScriptedProvider {
    fn complete(
        &self,
        ctx: &CallContext,
        _model: &str,
        request: &CompletionRequest,
    ) -> Result<CompletionResponse, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let latest = request
            .messages
            .last()
            .map(|m| m.content.as_str())
            .unwrap_or("");

        let mut rules = self.rules.lock().expect("script rules poisoned");
        for state in rules.iter_mut() {
            if state.rule.consume_once && state.consumed {
                continue;
            }
            if let Some(phase) = state.rule.phase {
                if phase != ctx.phase {
                    continue;
                }
            }
            if !state.rule.matcher.is_empty() && !latest.contains(&state.rule.matcher) {
                continue;
            }
            if state.rule.consume_once {
                state.consumed = true;
            }
            let response = &state.rule.response;
            let tool_calls: Vec<ToolCall> = response
                .tool_calls
                .iter()
                .enumerate()
                .map(|(i, c)| ToolCall {
                    id: format!("call-{}", i + 1),
                    name: c.name.clone(),
                    arguments: c.arguments.clone(),
                })
                .collect();
            let finish_reason = if tool_calls.is_empty() {
                "stop"
            } else {
                "tool_calls"
            };
            return Ok(CompletionResponse {
                message: Message::assistant(response.text.clone(), tool_calls),
                usage: response.usage,
                finish_reason: finish_reason.to_string(),
            });
        }
        Ok(Self::inert())
    }
}
