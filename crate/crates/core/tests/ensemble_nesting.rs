mod common;

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use trialcensus_core::distill::{fit_ensemble, read_scores, write_scores, DistillError, ScoreSet};

use common::{recalibrated_log_loss, rng};

/// Four scorers of varying quality over `n` records.
pub fn fixture(r: &mut ChaCha8Rng, n: usize) -> (Vec<ScoreSet>, BTreeMap<String, bool>) {
    let gold: BTreeMap<String, bool> = (0..n).map(|i| (format!("{}", 1000 + i), r.random_bool(0.25))).collect();
    let sets = (0..4)
        .map(|k| {
            let signal = 0.4 * k as f64;
            let mut s = ScoreSet::new(format!("m{k}"));
            for (pmid, &y) in &gold {
                let z = if y { signal } else { -signal } + r.random_range(-2.0..2.0);
                s.scores.insert(pmid.clone(), 1.0 / (1.0 + (-z).exp()));
            }
            s
        })
        .collect();
    (sets, gold)
}

#[test]
fn ensemble_never_loses_to_a_recalibrated_member() {
    for seed in 0..50 {
        let (sets, gold) = fixture(&mut rng(seed), 300);
        let model = fit_ensemble(&sets, &gold).unwrap();
        let y: Vec<bool> = gold.values().copied().collect();
        let best = sets
            .iter()
            .map(|s| recalibrated_log_loss(&s.scores.values().copied().collect::<Vec<_>>(), &y))
            .fold(f64::INFINITY, f64::min);
        assert!(
            model.fit_diagnostics.log_loss <= best + 1e-6,
            "seed {seed}: ensemble {} > member {best}",
            model.fit_diagnostics.log_loss
        );
        assert!(!model.fit_diagnostics.separation_flag);
        assert_eq!(model.coefficients.len(), 4);
    }
}

#[test]
fn ensemble_input_errors() {
    let (sets, gold) = fixture(&mut rng(1), 40);
    assert!(matches!(
        fit_ensemble(&sets[..1], &gold),
        Err(DistillError::TooFewScoreSets(1))
    ));
    let mut short = sets.clone();
    short[2].scores.pop_first();
    assert!(matches!(
        fit_ensemble(&short, &gold),
        Err(DistillError::MissingScores { .. })
    ));
    let mut dup = sets.clone();
    dup[1].scorer_id = "m0".into();
    assert!(matches!(
        fit_ensemble(&dup, &gold),
        Err(DistillError::DuplicateScorer(_))
    ));
}

#[test]
fn perfectly_separating_member_is_flagged_and_finite() {
    let (mut sets, gold) = fixture(&mut rng(3), 200);
    sets[0].scores = gold
        .iter()
        .map(|(p, &y)| (p.clone(), if y { 0.8 } else { 0.3 }))
        .collect();
    let model = fit_ensemble(&sets, &gold).unwrap();
    assert!(model.fit_diagnostics.separation_flag);
    assert!(model.coefficients.values().all(|c| c.is_finite()));
    assert!(model.fit_diagnostics.log_loss < 0.05);
}

#[test]
fn score_files_written_here_read_back_exactly() {
    let (sets, _) = fixture(&mut rng(9), 100);
    let mut buf = Vec::new();
    write_scores(&mut buf, &sets[3]).unwrap();
    let back = read_scores(buf.as_slice(), "m3").unwrap();
    assert!(back.rejected.is_empty());
    assert_eq!(back.set, sets[3]);
}

#[test]
fn score_file_contract_for_external_writers() {
    // Integer pmids, spacing and exponent notation as other serializers emit them.
    let text = concat!(
        "{\"pmid\": 123, \"scorer_id\": \"enc\", \"prob\": 1e-3}\n",
        "\n",
        "{\"pmid\": \"124\", \"scorer_id\": \"enc\", \"prob\": 1}\n",
        "{\"pmid\": \"125\", \"scorer_id\": \"other\", \"prob\": 0.5}\n",
        "{\"pmid\": \"126\", \"scorer_id\": \"enc\", \"prob\": -0.1}\n",
        "{\"pmid\": \"127\", \"scorer_id\": \"enc\", \"prob\": \"0.5\"}\n",
        "not json\n",
    );
    let import = read_scores(text.as_bytes(), "enc").unwrap();
    assert_eq!(
        import.set.scores,
        BTreeMap::from([("123".to_string(), 1e-3), ("124".to_string(), 1.0)])
    );
    assert_eq!(
        import.rejected.iter().map(|r| r.line).collect::<Vec<_>>(),
        vec![4, 5, 6, 7]
    );

    let dup = "{\"pmid\": \"1\", \"scorer_id\": \"enc\", \"prob\": 0.1}\n{\"pmid\": \"1\", \"scorer_id\": \"enc\", \"prob\": 0.2}\n";
    assert!(matches!(
        read_scores(dup.as_bytes(), "enc"),
        Err(DistillError::ScoreFile { line: 2, .. })
    ));
    let no_pmid = "{\"scorer_id\": \"enc\", \"prob\": 0.1}\n";
    assert!(matches!(
        read_scores(no_pmid.as_bytes(), "enc"),
        Err(DistillError::ScoreFile { line: 1, .. })
    ));
}
