//! Provider abstraction and the HTTP adapter.
//!
//! All providers speak one chat-completion-with-tools contract. The HTTP
//! adapter posts the documented JSON shape to a configured endpoint with a
//! bearer credential read from the environment variable named in config;
//! credentials never live in config files or logs.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;
use thiserror::Error;

use super::types::{CallContext, CompletionRequest, CompletionResponse, Message, ToolCall, Usage};

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("timeout: {0}")]
    Timeout(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("http {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    Malformed(String),
}

/// One model backend. Implementations must be deterministic given the same
/// request when used in tests (the scripted provider is; HTTP is not).
pub trait Provider: Send + Sync {
    fn complete(
        &self,
        ctx: &CallContext,
        model: &str,
        request: &CompletionRequest,
    ) -> Result<CompletionResponse, ProviderError>;
}

/// Chat-completions HTTP adapter.
pub struct HttpProvider {
    base_url: String,
    credential_env: Option<String>,
    timeout: Duration,
}

impl HttpProvider {
    pub fn new(base_url: String, credential_env: Option<String>, timeout: Duration) -> Self {
        HttpProvider {
            base_url,
            credential_env,
            timeout,
        }
    }

    fn wire_request(&self, model: &str, request: &CompletionRequest) -> serde_json::Value {
        let messages: Vec<serde_json::Value> = request
            .messages
            .iter()
            .map(|m| {
                let mut obj = json!({
                    "role": match m.role {
                        super::types::MessageRole::System => "system",
                        super::types::MessageRole::User => "user",
                        super::types::MessageRole::Assistant => "assistant",
                        super::types::MessageRole::Tool => "tool",
                    },
                    "content": m.content,
                });
                if !m.tool_calls.is_empty() {
                    obj["tool_calls"] = m
                        .tool_calls
                        .iter()
                        .map(|c| {
                            json!({
                                "id": c.id,
                                "type": "function",
                                "function": {
                                    "name": c.name,
                                    "arguments": c.arguments.to_string(),
                                },
                            })
                        })
                        .collect();
                }
                if let Some(id) = &m.tool_call_id {
                    obj["tool_call_id"] = json!(id);
                }
                obj
            })
            .collect();

        let mut body = json!({
            "model": model,
            "messages": messages,
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_tokens,
        });
        if !request.tools.is_empty() {
            body["tools"] = request
                .tools
                .iter()
                .map(|t| {
                    json!({
                        "type": "function",
                        "function": {
                            "name": t.name,
                            "description": t.description,
                            "parameters": t.parameters,
                        },
                    })
                })
                .collect();
        }
        body
    }
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Debug, Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Debug, Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    tool_calls: Vec<WireToolCall>,
}

#[derive(Debug, Deserialize)]
struct WireToolCall {
    id: String,
    function: WireFunction,
}

#[derive(Debug, Deserialize)]
struct WireFunction {
    name: String,
    arguments: String,
}

#[derive(Debug, Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl Provider for HttpProvider {
    fn complete(
        &self,
        _ctx: &CallContext,
        model: &str,
        request: &CompletionRequest,
    ) -> Result<CompletionResponse, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;

        let mut call = client
            .post(&self.base_url)
            .json(&self.wire_request(model, request));
        if let Some(var) = &self.credential_env {
            if let Ok(credential) = std::env::var(var) {
                call = call.bearer_auth(credential);
            }
        }

        let reply = call.send().map_err(|e| {
            if e.is_timeout() {
                ProviderError::Timeout(e.to_string())
            } else {
                ProviderError::Transport(e.to_string())
            }
        })?;

        let status = reply.status();
        let body = reply
            .text()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        if status.as_u16() == 429 {
            return Err(ProviderError::RateLimited(body));
        }
        if !status.is_success() {
            return Err(ProviderError::Http {
                status: status.as_u16(),
                body,
            });
        }

        let wire: WireResponse =
            serde_json::from_str(&body).map_err(|e| ProviderError::Malformed(e.to_string()))?;
        let choice = wire
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| ProviderError::Malformed("no choices".to_string()))?;

        let tool_calls = choice
            .message
            .tool_calls
            .into_iter()
            .map(|c| {
                let arguments = serde_json::from_str(&c.function.arguments)
                    .unwrap_or(serde_json::Value::String(c.function.arguments));
                ToolCall {
                    id: c.id,
                    name: c.function.name,
                    arguments,
                }
            })
            .collect();

        Ok(CompletionResponse {
            message: Message::assistant(choice.message.content.unwrap_or_default(), tool_calls),
            usage: wire.usage.map(|u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            }),
            finish_reason: choice.finish_reason.unwrap_or_else(|| "stop".to_string()),
        })
    }
}
