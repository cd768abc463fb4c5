use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use trialcensus_core::corpus::PublicationRecord;
use trialcensus_core::prompts::{parse_completion, PromptLibrary, PromptTemplate, SynonymMap};
use trialcensus_core::synthetic::{generate, SyntheticSpec};
use trialcensus_gateway::{annotate_batch, estimate_cost, CompletionCache, MockGold, MockProvider, ProviderConfig};

fn records(n: usize) -> Vec<PublicationRecord> {
    (0..n)
        .map(|i| {
            let mut r = PublicationRecord::new(format!("{}", 500 + i));
            r.abstract_text = Some(format!("Abstract number {i} about a randomized trial."));
            r
        })
        .collect()
}

fn gold_for(rs: &[PublicationRecord]) -> BTreeMap<String, MockGold> {
    rs.iter()
        .enumerate()
        .map(|(i, r)| {
            (
                r.pmid.clone(),
                MockGold {
                    include: i % 4 == 0,
                    reason: (i % 4 != 0).then_some(trialcensus_core::ExclusionReason::Animal),
                },
            )
        })
        .collect()
}

fn template() -> PromptTemplate {
    PromptLibrary::builtin().get("1.2").unwrap().clone()
}

fn config() -> ProviderConfig {
    ProviderConfig::mock("mock")
}

#[tokio::test]
async fn second_identical_batch_makes_no_calls() {
    let rs = records(40);
    let mock = Arc::new(MockProvider::new(3, 0.9, 0.1, gold_for(&rs)));
    let cache = Arc::new(CompletionCache::in_memory());
    let first = annotate_batch(&rs, &template(), mock.clone(), cache.clone(), &config())
        .await
        .unwrap();
    assert!(first.is_complete());
    assert_eq!(mock.hooks().calls(), 40);
    assert_eq!(first.manifest.cache_hits, 0);

    let second = annotate_batch(&rs, &template(), mock.clone(), cache.clone(), &config())
        .await
        .unwrap();
    assert_eq!(mock.hooks().calls(), 40);
    assert_eq!(second.manifest.network_calls, 0);
    assert_eq!(second.manifest.cache_hits, 40);
    let raw = |o: &trialcensus_gateway::BatchOutcome| {
        o.completions
            .iter()
            .map(|c| (c.pmid.clone(), c.raw.clone()))
            .collect::<Vec<_>>()
    };
    assert_eq!(raw(&first), raw(&second));
    // Output follows input order.
    assert!(first.completions.iter().zip(&rs).all(|(c, r)| c.pmid == r.pmid));
}

#[tokio::test]
async fn cache_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.jsonl");
    let rs = records(10);
    let mock = Arc::new(MockProvider::new(3, 0.9, 0.1, gold_for(&rs)));
    {
        let cache = Arc::new(CompletionCache::open(&path).unwrap());
        annotate_batch(&rs, &template(), mock.clone(), cache, &config())
            .await
            .unwrap();
    }
    let cache = Arc::new(CompletionCache::open(&path).unwrap());
    let out = annotate_batch(&rs, &template(), mock.clone(), cache, &config())
        .await
        .unwrap();
    assert_eq!(mock.hooks().calls(), 10);
    assert!(out.completions.iter().all(|c| c.cached));
}

#[tokio::test]
async fn body_change_invalidates() {
    let rs = records(5);
    let mock = Arc::new(MockProvider::new(3, 0.9, 0.1, gold_for(&rs)));
    let cache = Arc::new(CompletionCache::in_memory());
    let t = template();
    annotate_batch(&rs, &t, mock.clone(), cache.clone(), &config())
        .await
        .unwrap();
    let edited = PromptTemplate::new(t.id.clone(), format!("{} Answer briefly.", t.body), "edited").unwrap();
    annotate_batch(&rs, &edited, mock.clone(), cache.clone(), &config())
        .await
        .unwrap();
    assert_eq!(mock.hooks().calls(), 10);
    assert_eq!(cache.len(), 10);
}

#[tokio::test]
async fn concurrency_never_exceeds_limit() {
    let rs = records(30);
    let mock = Arc::new(MockProvider::new(3, 0.9, 0.1, gold_for(&rs)).with_latency(Duration::from_millis(15)));
    let mut cfg = config();
    cfg.max_in_flight = 3;
    annotate_batch(
        &rs,
        &template(),
        mock.clone(),
        Arc::new(CompletionCache::in_memory()),
        &cfg,
    )
    .await
    .unwrap();
    let peak = mock.hooks().max_in_flight();
    assert!(peak <= 3, "peak {peak}");
    assert!(peak >= 2, "dispatch never overlapped (peak {peak})");
}

#[tokio::test]
async fn failures_are_per_record() {
    let rs = records(6);
    let mock = Arc::new(MockProvider::new(3, 0.9, 0.1, gold_for(&rs)));
    let hooks = mock.hooks();
    hooks.fail_always(&rs[1].pmid, 400);
    hooks.fail_times(&rs[2].pmid, 503, 2);
    hooks.fail_always(&rs[3].pmid, 429);
    let cache = Arc::new(CompletionCache::in_memory());
    let out = annotate_batch(&rs, &template(), mock.clone(), cache.clone(), &config())
        .await
        .unwrap();
    let failed: Vec<_> = out
        .manifest
        .failed
        .iter()
        .map(|f| (f.pmid.as_str(), f.status, f.attempts))
        .collect();
    // 4xx: no retry. 429: retried to the five-attempt limit. 503 twice: recovered.
    assert_eq!(
        failed,
        vec![(rs[1].pmid.as_str(), Some(400), 1), (rs[3].pmid.as_str(), Some(429), 5)]
    );
    assert_eq!(out.completions.len(), 4);
    assert_eq!(hooks.calls(), 3 + 1 + 3 + 5);
    assert_eq!(out.manifest.network_calls, 12);
    assert_eq!(cache.len(), 4);
    assert!(!out.is_complete());
}

#[tokio::test]
async fn budget_stop_is_clean_and_resumable() {
    let rs = records(50);
    // Every call costs (1000 * 0.03 + 10 * 0.06) / 1000 = 0.0306.
    let mock = Arc::new(MockProvider::new(3, 0.9, 0.1, gold_for(&rs)).with_fixed_usage(1000, 10));
    let mut cfg = config();
    cfg.max_in_flight = 1;
    cfg.max_output_tokens = 10;
    cfg.budget_cap = 0.5;
    let cache = Arc::new(CompletionCache::in_memory());
    let out = annotate_batch(&rs, &template(), mock.clone(), cache.clone(), &cfg)
        .await
        .unwrap();
    let m = &out.manifest;
    assert!(m.budget_stop);
    assert!(!m.pending.is_empty());
    assert_eq!(m.completed + m.pending.len(), 50);
    assert!(m.spent_total <= cfg.budget_cap + 0.0306 + 1e-12);
    assert!((m.spent_total - cache.total_cost()).abs() < 1e-12);
    let pending_before = m.pending.clone();

    // Resume with a larger cap: only the pending records are dispatched.
    cfg.budget_cap = 100.0;
    let calls_before = mock.hooks().calls();
    let out = annotate_batch(&rs, &template(), mock.clone(), cache.clone(), &cfg)
        .await
        .unwrap();
    assert!(out.is_complete());
    assert_eq!(mock.hooks().calls() - calls_before, pending_before.len());
    assert!((out.manifest.spent_total - cache.total_cost()).abs() < 1e-9);
    assert!((cache.total_cost() - 50.0 * 0.0306).abs() < 1e-9);
}

#[tokio::test]
async fn missing_abstract_rejects_whole_batch() {
    let mut rs = records(3);
    rs[1].abstract_text = None;
    let mock = Arc::new(MockProvider::new(3, 0.9, 0.1, gold_for(&rs)));
    let err = annotate_batch(
        &rs,
        &template(),
        mock.clone(),
        Arc::new(CompletionCache::in_memory()),
        &config(),
    )
    .await;
    assert!(matches!(err, Err(trialcensus_gateway::GatewayError::MissingAbstract(p)) if p == rs[1].pmid));
    assert_eq!(mock.hooks().calls(), 0);
}

fn within_3_sigma(hits: usize, n: usize, p: f64) -> bool {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (hits as f64 - mean).abs() <= 3.0 * sd
}

#[tokio::test]
async fn mock_rates_match_binomial_expectation_through_batch() {
    let mut spec = SyntheticSpec::new(1000, 17);
    spec.missing_abstract_rate = 0.0;
    let synth = generate(&spec);
    let gold = synth.gold();
    let rs: Vec<PublicationRecord> = synth.corpus.records().cloned().collect();
    let mock = Arc::new(MockProvider::from_verdicts(99, 0.934, 0.049, &gold));
    let out = annotate_batch(
        &rs,
        &template(),
        mock,
        Arc::new(CompletionCache::in_memory()),
        &config(),
    )
    .await
    .unwrap();
    let syn = SynonymMap::default();
    let (mut tp, mut fp) = (0, 0);
    for c in &out.completions {
        let include = parse_completion(template().family, &c.raw, &syn)
            .verdict
            .as_verdict()
            .is_include();
        match (gold[&c.pmid], include) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            _ => {}
        }
    }
    let p = gold.values().filter(|&&g| g).count();
    assert!(within_3_sigma(tp, p, 0.934), "tp {tp} of {p}");
    assert!(within_3_sigma(fp, 1000 - p, 0.049), "fp {fp} of {}", 1000 - p);
}

#[test]
fn mock_rates_prompt_two_reference() {
    let gold: BTreeMap<String, bool> = (0..2000).map(|i| (i.to_string(), i % 5 == 0)).collect();
    let mock = MockProvider::from_verdicts(4, 0.876, 0.162, &gold);
    let (mut tp, mut fp) = (0, 0);
    for (pmid, &g) in &gold {
        if mock.decides_include("2.0", pmid) {
            if g {
                tp += 1
            } else {
                fp += 1
            }
        }
    }
    assert!(within_3_sigma(tp, 400, 0.876), "tp {tp}");
    assert!(within_3_sigma(fp, 1600, 0.162), "fp {fp}");
}

#[test]
fn cost_reference_points() {
    let cfg = config();
    // 0.0703 per record: 2333.33... input tokens and 5 output tokens.
    let tin = (0.0703 * 1000.0 - 5.0 * 0.06) / 0.03;
    let est = estimate_cost(64_000, tin, 5.0, &cfg);
    assert!((est - 4499.2).abs() < 1e-6, "{est}");
    assert!((est - 4500.0).abs() / 4500.0 < 0.001);
}
