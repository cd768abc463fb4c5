use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use trialcensus_core::corpus::{Corpus, PublicationRecord};
use trialcensus_core::labels::{LabelStore, Split, SplitAssignment, SplitPlan};
use trialcensus_pipeline::server::{router, LabelService};

fn fixture() -> (Arc<Corpus>, SplitPlan) {
    let records: Vec<PublicationRecord> = (1..=8)
        .map(|i| {
            let mut r = PublicationRecord::new(i.to_string());
            r.title = format!("Title {i}");
            r.abstract_text = Some(format!("Abstract {i}"));
            r
        })
        .collect();
    let corpus = Corpus::from_records(records).unwrap();
    let split = |i: usize| if i <= 3 { Split::Test } else { Split::Validation };
    let plan = SplitPlan {
        assignments: (1..=6)
            .map(|i| SplitAssignment {
                pmid: i.to_string(),
                split: split(i),
            })
            .collect(),
        dropped_from_test: Vec::new(),
        backfilled: 0,
    };
    (Arc::new(corpus), plan)
}

async fn start(token: Option<&str>, lease: Duration, store: LabelStore) -> String {
    let (corpus, plan) = fixture();
    let store = store.with_known_pmids(corpus.pmids().map(str::to_string));
    let svc = Arc::new(LabelService::new(store, plan, corpus, token.map(str::to_string), lease));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(svc)).await.unwrap() });
    format!("http://{addr}")
}

async fn get(url: &str) -> (u16, Value) {
    let r = reqwest::get(url).await.unwrap();
    (r.status().as_u16(), r.json().await.unwrap())
}

async fn post(base: &str, body: Value) -> (u16, Value) {
    let r = reqwest::Client::new()
        .post(format!("{base}/labels"))
        .json(&body)
        .send()
        .await
        .unwrap();
    (r.status().as_u16(), r.json().await.unwrap())
}

#[tokio::test]
async fn queue_leases_and_progress() {
    let base = start(None, Duration::from_secs(60), LabelStore::in_memory()).await;
    let (s, a) = get(&format!("{base}/queue?labeler=ann&split=test")).await;
    assert_eq!(s, 200);
    assert_eq!(a["pmid"], "1");
    assert_eq!(a["position"], 0);
    assert_eq!(a["title"], "Title 1");
    assert_eq!(a["remaining"], 3);
    // Reload: same record. Another labeler: the next unleased one.
    assert_eq!(
        get(&format!("{base}/queue?labeler=ann&split=test")).await.1["pmid"],
        "1"
    );
    assert_eq!(
        get(&format!("{base}/queue?labeler=bob&split=test")).await.1["pmid"],
        "2"
    );

    let (s, ack) = post(&base, json!({ "pmid": "1", "verdict": "include", "labeler": "ann" })).await;
    assert_eq!(s, 200);
    assert_eq!(ack["revision"], 1);
    assert_eq!(ack["appended"], true);
    assert_eq!(
        get(&format!("{base}/queue?labeler=ann&split=test")).await.1["pmid"],
        "3"
    );

    let (_, p) = get(&format!("{base}/progress?split=test")).await;
    assert_eq!(p["n"], 1);
    assert_eq!(p["total"], 3);
    assert_eq!(p["includes"], 1);
}

#[tokio::test]
async fn queue_reports_done() {
    let base = start(None, Duration::from_secs(60), LabelStore::in_memory()).await;
    for pmid in ["1", "2", "3"] {
        let (s, _) = post(
            &base,
            json!({ "pmid": pmid, "verdict": "exclude", "reason": "animal", "labeler": "ann" }),
        )
        .await;
        assert_eq!(s, 200);
    }
    let (s, v) = get(&format!("{base}/queue?labeler=ann&split=test")).await;
    assert_eq!(s, 200);
    assert_eq!(v, json!({ "done": true, "remaining": 0 }));
    // Another labeler still has the whole split.
    assert_eq!(
        get(&format!("{base}/queue?labeler=bob&split=test")).await.1["remaining"],
        3
    );
}

#[tokio::test]
async fn expired_lease_is_reissued() {
    let base = start(None, Duration::from_millis(500), LabelStore::in_memory()).await;
    assert_eq!(
        get(&format!("{base}/queue?labeler=ann&split=test")).await.1["pmid"],
        "1"
    );
    assert_eq!(
        get(&format!("{base}/queue?labeler=bob&split=test")).await.1["pmid"],
        "2"
    );
    tokio::time::sleep(Duration::from_millis(600)).await;
    assert_eq!(
        get(&format!("{base}/queue?labeler=bob&split=test")).await.1["pmid"],
        "1"
    );
}

#[tokio::test]
async fn label_errors_map_to_status_codes() {
    let base = start(None, Duration::from_secs(60), LabelStore::in_memory()).await;
    // Exclude without a reason.
    assert_eq!(
        post(&base, json!({ "pmid": "1", "verdict": "exclude", "labeler": "a" }))
            .await
            .0,
        422
    );
    // Unknown verdict and unknown fields.
    assert_eq!(
        post(&base, json!({ "pmid": "1", "verdict": "maybe", "labeler": "a" }))
            .await
            .0,
        422
    );
    assert_eq!(
        post(
            &base,
            json!({ "pmid": "1", "verdict": "include", "labeler": "a", "x": 1 })
        )
        .await
        .0,
        422
    );
    assert_eq!(
        post(&base, json!({ "pmid": "999", "verdict": "include", "labeler": "a" }))
            .await
            .0,
        404
    );

    let first = json!({ "pmid": "1", "verdict": "include", "labeler": "a", "revision": 1 });
    assert_eq!(post(&base, first.clone()).await.0, 200);
    // Identical resend is acknowledged without a second append.
    let (s, ack) = post(&base, first).await;
    assert_eq!((s, ack["appended"].clone()), (200, json!(false)));
    let clash = json!({ "pmid": "1", "verdict": "exclude", "reason": "animal", "labeler": "a", "revision": 1 });
    assert_eq!(post(&base, clash).await.0, 409);
    // Without an explicit revision the next one is used.
    let (s, ack) = post(
        &base,
        json!({ "pmid": "1", "verdict": "exclude", "reason": "other", "labeler": "a" }),
    )
    .await;
    assert_eq!((s, ack["revision"].clone()), (200, json!(2)));
}

#[tokio::test]
async fn bearer_token_is_enforced() {
    let base = start(Some("s3cret"), Duration::from_secs(60), LabelStore::in_memory()).await;
    let client = reqwest::Client::new();
    let url = format!("{base}/progress?split=test");
    assert_eq!(client.get(&url).send().await.unwrap().status().as_u16(), 401);
    assert_eq!(
        client
            .get(&url)
            .bearer_auth("wrong")
            .send()
            .await
            .unwrap()
            .status()
            .as_u16(),
        401
    );
    assert_eq!(
        client
            .get(&url)
            .bearer_auth("s3cret")
            .send()
            .await
            .unwrap()
            .status()
            .as_u16(),
        200
    );
}

#[tokio::test]
async fn labels_persist_across_restart() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.jsonl");
    let base = start(None, Duration::from_secs(60), LabelStore::open(&path).unwrap()).await;
    assert_eq!(
        post(&base, json!({ "pmid": "4", "verdict": "include", "labeler": "a" }))
            .await
            .0,
        200
    );
    let base = start(None, Duration::from_secs(60), LabelStore::open(&path).unwrap()).await;
    let (_, p) = get(&format!("{base}/progress?split=validation")).await;
    assert_eq!(p["n"], 1);
    assert_eq!(
        get(&format!("{base}/queue?labeler=a&split=validation")).await.1["pmid"],
        "5"
    );
}
