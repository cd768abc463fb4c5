//! Provider-agnostic batch annotation: prompts go out, completions come back
//! and land in a content-addressed cache that makes reruns free.

pub mod cache;
pub mod config;
pub mod dispatch;
pub mod mock;
pub mod provider;

use thiserror::Error;

pub use cache::{cache_key, CompletionCache, CompletionCacheEntry};
pub use config::{calibrate_input_tokens, estimate_cost, ProviderConfig};
pub use dispatch::{annotate_batch, BatchManifest, BatchOutcome, Completion, RecordFailure};
pub use mock::{MockGold, MockProvider};
pub use provider::{HttpProvider, Provider, ProviderError};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid provider config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("record {0} has no abstract")]
    MissingAbstract(String),
    #[error("pmid {0} appears twice in the batch")]
    DuplicatePmid(String),
    #[error("cache line {line}: {message}")]
    CacheFormat { line: usize, message: String },
    #[error("dispatch task failed: {0}")]
    Task(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
