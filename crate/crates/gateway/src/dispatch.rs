//! Bounded-concurrency batch dispatch with a token bucket, retries and a
//! budget that reserves before it spends.

use std::collections::HashSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::Utc;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tokio::task::JoinSet;
use trialcensus_core::corpus::PublicationRecord;
use trialcensus_core::prompts::PromptTemplate;

use crate::cache::{cache_key, sha256_hex, CompletionCache, CompletionCacheEntry};
use crate::config::ProviderConfig;
use crate::provider::{approx_tokens, CompletionRequest, Provider, ProviderError};
use crate::GatewayError;

/// Classic token bucket; `acquire` waits until a token is available.
pub struct TokenBucket {
    rate_per_sec: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(requests_per_minute: u32, burst: usize) -> Self {
        let capacity = burst.max(1) as f64;
        Self {
            rate_per_sec: requests_per_minute as f64 / 60.0,
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    pub async fn acquire(&self) {
        loop {
            let wait = {
                let mut s = self.state.lock();
                let now = Instant::now();
                s.0 = (s.0 + now.duration_since(s.1).as_secs_f64() * self.rate_per_sec).min(self.capacity);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return;
                }
                (1.0 - s.0) / self.rate_per_sec
            };
            tokio::time::sleep(Duration::from_secs_f64(wait)).await;
        }
    }
}

/// Spend so far plus reservations for requests still in flight.
#[derive(Debug)]
pub struct SpendLedger {
    cap: f64,
    state: Mutex<LedgerState>,
}

#[derive(Debug, Default, Clone, Copy)]
struct LedgerState {
    spent: f64,
    reserved: f64,
}

impl SpendLedger {
    pub fn new(cap: f64, already_spent: f64) -> Self {
        Self {
            cap,
            state: Mutex::new(LedgerState {
                spent: already_spent,
                reserved: 0.0,
            }),
        }
    }

    /// Reserves `estimate` if it fits under the cap.
    pub fn reserve(&self, estimate: f64) -> bool {
        let mut s = self.state.lock();
        if s.spent + s.reserved + estimate > self.cap {
            return false;
        }
        s.reserved += estimate;
        true
    }

    pub fn settle(&self, estimate: f64, actual: f64) {
        let mut s = self.state.lock();
        s.reserved = (s.reserved - estimate).max(0.0);
        s.spent += actual;
    }

    pub fn release(&self, estimate: f64) {
        self.settle(estimate, 0.0);
    }

    pub fn spent(&self) -> f64 {
        self.state.lock().spent
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub pmid: String,
    pub raw: String,
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFailure {
    pub pmid: String,
    pub status: Option<u16>,
    pub message: String,
    pub attempts: u32,
}

/// Enough to resume: everything not in `completions` is either a recorded
/// failure or still pending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub model_id: String,
    pub prompt_id: String,
    pub prompt_body_digest: String,
    pub requested: usize,
    pub cache_hits: usize,
    pub completed: usize,
    pub failed: Vec<RecordFailure>,
    pub pending: Vec<String>,
    pub budget_stop: bool,
    pub network_calls: usize,
    pub spent_this_batch: f64,
    pub spent_total: f64,
    pub budget_cap: f64,
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    /// Input order; cache hits and fresh completions alike.
    pub completions: Vec<Completion>,
    pub manifest: BatchManifest,
}

impl BatchOutcome {
    pub fn is_complete(&self) -> bool {
        self.manifest.failed.is_empty() && self.manifest.pending.is_empty()
    }
}

enum Outcome {
    Done(usize, String, f64),
    Failed(usize, RecordFailure),
}

struct Shared {
    provider: Arc<dyn Provider>,
    cache: Arc<CompletionCache>,
    ledger: Arc<SpendLedger>,
    bucket: TokenBucket,
    config: ProviderConfig,
    calls: Mutex<usize>,
}

impl Shared {
    async fn run(&self, index: usize, key: String, req: CompletionRequest, estimate: f64) -> Outcome {
        let retry = &self.config.retry;
        let mut attempt = 0;
        let result = loop {
            attempt += 1;
            self.bucket.acquire().await;
            *self.calls.lock() += 1;
            match self.provider.complete(&req).await {
                Err(e) if e.is_retryable() && attempt < retry.max_attempts => {
                    log::debug!("pmid {} attempt {attempt}: {e}; retrying", req.pmid);
                    tokio::time::sleep(Duration::from_millis(retry.backoff_ms(attempt))).await;
                }
                other => break other,
            }
        };
        let fail = |e: ProviderError| {
            self.ledger.release(estimate);
            Outcome::Failed(
                index,
                RecordFailure {
                    pmid: req.pmid.clone(),
                    status: e.status(),
                    message: e.to_string(),
                    attempts: attempt,
                },
            )
        };
        match result {
            Ok(resp) => {
                let cost = self.config.cost_of(resp.input_tokens, resp.output_tokens);
                let entry = CompletionCacheEntry {
                    key,
                    model_id: self.config.model_id.clone(),
                    prompt_id: req.prompt_id.clone(),
                    pmid: req.pmid.clone(),
                    raw: resp.text,
                    input_tokens: resp.input_tokens,
                    output_tokens: resp.output_tokens,
                    cost,
                    timestamp: Utc::now(),
                };
                match self.cache.insert(entry) {
                    Ok(stored) => {
                        self.ledger.settle(estimate, cost);
                        Outcome::Done(index, stored.raw, cost)
                    }
                    Err(e) => fail(ProviderError::Decode(format!("cache write failed: {e}"))),
                }
            }
            Err(e) => fail(e),
        }
    }
}

/// Annotates `records` with `template`. Cache hits never touch the provider;
/// every fresh response is cached before this returns. Provider errors and
/// an exhausted budget are reported in the manifest, not as `Err`.
pub async fn annotate_batch(
    records: &[PublicationRecord],
    template: &PromptTemplate,
    provider: Arc<dyn Provider>,
    cache: Arc<CompletionCache>,
    config: &ProviderConfig,
) -> Result<BatchOutcome, GatewayError> {
    let problems = config.problems();
    if !problems.is_empty() {
        return Err(GatewayError::Config(problems));
    }
    if provider.model_id() != config.model_id {
        return Err(GatewayError::Config(vec![format!(
            "model_id: config says {} but provider is {}",
            config.model_id,
            provider.model_id()
        )]));
    }
    let mut seen = HashSet::new();
    let mut prompts = Vec::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.pmid.as_str()) {
            return Err(GatewayError::DuplicatePmid(r.pmid.clone()));
        }
        let text = r
            .abstract_str()
            .ok_or_else(|| GatewayError::MissingAbstract(r.pmid.clone()))?;
        prompts.push(template.render_text(text));
    }

    let body_digest = sha256_hex(template.content().as_bytes());
    let ledger = Arc::new(SpendLedger::new(config.budget_cap, cache.total_cost()));
    let spent_before = ledger.spent();
    let shared = Arc::new(Shared {
        provider,
        cache: Arc::clone(&cache),
        ledger: Arc::clone(&ledger),
        bucket: TokenBucket::new(config.requests_per_minute, config.max_in_flight),
        config: config.clone(),
        calls: Mutex::new(0),
    });

    let mut slots: Vec<Option<Completion>> = vec![None; records.len()];
    let mut misses = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let key = cache_key(&config.model_id, &template.id, &body_digest, &r.pmid);
        match cache.get(&key) {
            Some(hit) => {
                slots[i] = Some(Completion {
                    pmid: r.pmid.clone(),
                    raw: hit.raw,
                    cached: true,
                })
            }
            None => misses.push((i, key)),
        }
    }
    let cache_hits = records.len() - misses.len();

    let semaphore = Arc::new(Semaphore::new(config.max_in_flight));
    let mut tasks = JoinSet::new();
    let mut pending = Vec::new();
    let mut budget_stop = false;
    let mut misses = misses.into_iter();
    for (i, key) in misses.by_ref() {
        let permit = Arc::clone(&semaphore)
            .acquire_owned()
            .await
            .expect("semaphore never closed");
        let estimate = config.cost_of(approx_tokens(&prompts[i]), config.max_output_tokens as u64);
        if !ledger.reserve(estimate) {
            log::warn!(
                "budget cap {:.2} reached after {:.2} spent; stopping dispatch",
                ledger.cap(),
                ledger.spent()
            );
            budget_stop = true;
            pending.push(records[i].pmid.clone());
            break;
        }
        let req = CompletionRequest {
            pmid: records[i].pmid.clone(),
            prompt_id: template.id.clone(),
            family: template.family,
            prompt: std::mem::take(&mut prompts[i]),
        };
        let shared = Arc::clone(&shared);
        tasks.spawn(async move {
            let out = shared.run(i, key, req, estimate).await;
            drop(permit);
            out
        });
    }
    pending.extend(misses.map(|(i, _)| records[i].pmid.clone()));

    let mut failed = Vec::new();
    let mut spent_this_batch = 0.0;
    let mut fresh: Vec<(usize, f64)> = Vec::new();
    while let Some(joined) = tasks.join_next().await {
        match joined.map_err(|e| GatewayError::Task(e.to_string()))? {
            Outcome::Done(i, raw, cost) => {
                fresh.push((i, cost));
                slots[i] = Some(Completion {
                    pmid: records[i].pmid.clone(),
                    raw,
                    cached: false,
                });
            }
            Outcome::Failed(i, f) => failed.push((i, f)),
        }
    }
    // Completion order is racy; sum and report in input order.
    fresh.sort_by_key(|&(i, _)| i);
    for (_, c) in &fresh {
        spent_this_batch += c;
    }
    failed.sort_by_key(|(i, _)| *i);

    let completions: Vec<Completion> = slots.into_iter().flatten().collect();
    let network_calls = *shared.calls.lock();
    let manifest = BatchManifest {
        model_id: config.model_id.clone(),
        prompt_id: template.id.clone(),
        prompt_body_digest: body_digest,
        requested: records.len(),
        cache_hits,
        completed: completions.len(),
        failed: failed.into_iter().map(|(_, f)| f).collect(),
        pending,
        budget_stop,
        network_calls,
        spent_this_batch,
        spent_total: spent_before + spent_this_batch,
        budget_cap: config.budget_cap,
    };
    Ok(BatchOutcome { completions, manifest })
}
