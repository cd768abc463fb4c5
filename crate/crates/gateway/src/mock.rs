//! Seeded stand-in for a paid model: flips gold labels at configured rates
//! and answers in the shape each prompt family asks for.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use trialcensus_core::labels::ExclusionReason;
use trialcensus_core::prompts::PromptFamily;

use crate::provider::{approx_tokens, CompletionRequest, CompletionResponse, Provider, ProviderError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockGold {
    pub include: bool,
    pub reason: Option<ExclusionReason>,
}

/// Call counters and fault injection, shared with the test that built the
/// provider.
#[derive(Debug, Default)]
pub struct MockHooks {
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    failures: Mutex<HashMap<String, (u16, Option<usize>)>>,
}

impl MockHooks {
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Highest number of concurrently outstanding calls seen.
    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    /// Fail the next `times` calls for `pmid` with `status`.
    pub fn fail_times(&self, pmid: &str, status: u16, times: usize) {
        self.failures.lock().insert(pmid.to_string(), (status, Some(times)));
    }

    /// Fail every call for `pmid` with `status`.
    pub fn fail_always(&self, pmid: &str, status: u16) {
        self.failures.lock().insert(pmid.to_string(), (status, None));
    }

    fn injected(&self, pmid: &str) -> Option<u16> {
        let mut f = self.failures.lock();
        let (status, left) = f.get_mut(pmid)?;
        let status = *status;
        match left {
            None => Some(status),
            Some(0) => None,
            Some(n) => {
                *n -= 1;
                Some(status)
            }
        }
    }
}

pub struct MockProvider {
    model_id: String,
    seed: u64,
    tpr: f64,
    fpr: f64,
    gold: Arc<BTreeMap<String, MockGold>>,
    latency: Duration,
    fixed_usage: Option<(u64, u64)>,
    hooks: Arc<MockHooks>,
}

impl MockProvider {
    /// Panics unless both rates lie in [0, 1].
    pub fn new(seed: u64, tpr: f64, fpr: f64, gold: BTreeMap<String, MockGold>) -> Self {
        assert!((0.0..=1.0).contains(&tpr), "tpr must lie in [0, 1]");
        assert!((0.0..=1.0).contains(&fpr), "fpr must lie in [0, 1]");
        Self {
            model_id: "mock".into(),
            seed,
            tpr,
            fpr,
            gold: Arc::new(gold),
            latency: Duration::ZERO,
            fixed_usage: None,
            hooks: Arc::new(MockHooks::default()),
        }
    }

    pub fn from_verdicts(seed: u64, tpr: f64, fpr: f64, gold: &BTreeMap<String, bool>) -> Self {
        let gold = gold
            .iter()
            .map(|(k, &include)| {
                let reason = (!include).then_some(ExclusionReason::Other);
                (k.clone(), MockGold { include, reason })
            })
            .collect();
        Self::new(seed, tpr, fpr, gold)
    }

    pub fn with_model_id(mut self, id: impl Into<String>) -> Self {
        self.model_id = id.into();
        self
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    /// Report these token counts instead of the character estimate.
    pub fn with_fixed_usage(mut self, input_tokens: u64, output_tokens: u64) -> Self {
        self.fixed_usage = Some((input_tokens, output_tokens));
        self
    }

    pub fn hooks(&self) -> Arc<MockHooks> {
        Arc::clone(&self.hooks)
    }

    /// The mock's include decision for (prompt, pmid). Depends only on the
    /// seed and these two strings, never on call order. Unknown pmids are
    /// treated as gold excludes.
    pub fn decides_include(&self, prompt_id: &str, pmid: &str) -> bool {
        let gold = self.gold.get(pmid).is_some_and(|g| g.include);
        let u: f64 = self.rng_for(prompt_id, pmid).random();
        if gold {
            u < self.tpr
        } else {
            u < self.fpr
        }
    }

    fn rng_for(&self, prompt_id: &str, pmid: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((prompt_id.len() as u64).to_le_bytes());
        h.update(prompt_id.as_bytes());
        h.update(pmid.as_bytes());
        let d = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&d);
        ChaCha8Rng::from_seed(seed)
    }

    pub fn completion_text(&self, family: PromptFamily, prompt_id: &str, pmid: &str) -> String {
        if self.decides_include(prompt_id, pmid) {
            return "TRUE".into();
        }
        let reason = match self.gold.get(pmid) {
            Some(MockGold {
                include: false,
                reason: Some(r),
            }) => *r,
            // A false negative needs some category; draw one.
            _ => {
                let mut rng = self.rng_for(prompt_id, pmid);
                let _: f64 = rng.random();
                ExclusionReason::ALL[rng.random_range(0..ExclusionReason::ALL.len())]
            }
        };
        match family {
            PromptFamily::TrueFalse => "FALSE".into(),
            PromptFamily::Categorize => reason.display_name().into(),
            PromptFamily::Explain => format!(
                "This record does not meet the criteria. Reason: {}.",
                reason.display_name().to_lowercase()
            ),
        }
    }
}

struct InFlight<'a>(&'a MockHooks);

impl<'a> InFlight<'a> {
    fn enter(hooks: &'a MockHooks) -> Self {
        let now = hooks.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        hooks.max_in_flight.fetch_max(now, Ordering::SeqCst);
        Self(hooks)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

#[async_trait]
impl Provider for MockProvider {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        self.hooks.calls.fetch_add(1, Ordering::SeqCst);
        let _guard = InFlight::enter(&self.hooks);
        if !self.latency.is_zero() {
            tokio::time::sleep(self.latency).await;
        }
        if let Some(status) = self.hooks.injected(&request.pmid) {
            return Err(ProviderError::Status {
                status,
                body: "injected failure".into(),
            });
        }
        let text = self.completion_text(request.family, &request.prompt_id, &request.pmid);
        let (input_tokens, output_tokens) = self
            .fixed_usage
            .unwrap_or_else(|| (approx_tokens(&request.prompt), approx_tokens(&text)));
        Ok(CompletionResponse {
            text,
            input_tokens,
            output_tokens,
        })
    }
}
