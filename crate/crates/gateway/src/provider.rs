use std::time::Duration;

use async_trait::async_trait;
use serde_json::{json, Value};
use thiserror::Error;
use trialcensus_core::prompts::PromptFamily;

use crate::config::ProviderConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionRequest {
    pub pmid: String,
    pub prompt_id: String,
    pub family: PromptFamily,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionResponse {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ProviderError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Decode(String),
    #[error("provider misconfigured: {0}")]
    Config(String),
}

impl ProviderError {
    /// Only failures that a resend can fix.
    pub fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Transport(_) => true,
            ProviderError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }

    pub fn status(&self) -> Option<u16> {
        match self {
            ProviderError::Status { status, .. } => Some(*status),
            _ => None,
        }
    }
}

#[async_trait]
pub trait Provider: Send + Sync {
    fn model_id(&self) -> &str;

    async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError>;
}

/// Rough token count for providers that do not report usage.
pub fn approx_tokens(text: &str) -> u64 {
    text.chars().count().div_ceil(4) as u64
}

/// Chat-completion style JSON over HTTP.
pub struct HttpProvider {
    client: reqwest::Client,
    config: ProviderConfig,
    api_key: Option<String>,
}

impl HttpProvider {
    pub fn new(config: ProviderConfig) -> Result<Self, ProviderError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| ProviderError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.request_timeout_secs))
            .build()
            .map_err(|e| ProviderError::Config(e.to_string()))?;
        Ok(Self {
            client,
            config,
            api_key,
        })
    }

    pub fn request_body(&self, request: &CompletionRequest) -> Value {
        json!({
            "model": self.config.model_id,
            "messages": [{ "role": "user", "content": request.prompt }],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_output_tokens,
        })
    }

    fn decode(&self, request: &CompletionRequest, body: &Value) -> Result<CompletionResponse, ProviderError> {
        let wire = &self.config.wire;
        let text = body
            .pointer(&wire.content_pointer)
            .and_then(Value::as_str)
            .ok_or_else(|| ProviderError::Decode(format!("no string at {}", wire.content_pointer)))?
            .to_string();
        let count = |ptr: &str| body.pointer(ptr).and_then(Value::as_u64);
        Ok(CompletionResponse {
            input_tokens: count(&wire.input_tokens_pointer).unwrap_or_else(|| approx_tokens(&request.prompt)),
            output_tokens: count(&wire.output_tokens_pointer).unwrap_or_else(|| approx_tokens(&text)),
            text,
        })
    }
}

#[async_trait]
impl Provider for HttpProvider {
    fn model_id(&self) -> &str {
        &self.config.model_id
    }

    async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        let mut builder = self
            .client
            .post(&self.config.endpoint)
            .json(&self.request_body(request));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .await
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .await
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(ProviderError::Status {
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            });
        }
        let body: Value = serde_json::from_str(&text).map_err(|e| ProviderError::Decode(e.to_string()))?;
        self.decode(request, &body)
    }
}
