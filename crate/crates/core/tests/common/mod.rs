//! Independent brute-force reference implementations. They share no code
//! with the library beyond the data types, and favour obviousness over speed.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trialcensus_core::analytics::RegistryStudyRecord;
use trialcensus_core::corpus::{Corpus, PublicationRecord, YearWindow};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---- universe -------------------------------------------------------------

fn starts_with_ci(chars: &[char], at: usize, prefix: &str) -> bool {
    let p: Vec<char> = prefix.chars().collect();
    at + p.len() <= chars.len() && p.iter().zip(&chars[at..]).all(|(a, b)| a.eq_ignore_ascii_case(b))
}

fn four_digits(chars: &[char], at: usize) -> bool {
    at + 4 <= chars.len() && chars[at..at + 4].iter().all(|c| c.is_ascii_digit())
}

/// Prefix not glued to a preceding letter or digit, then nothing, one of
/// `:#-` (optionally followed by a space) or a single space, then 4 digits.
pub fn strict_registry_hit(text: &str, prefix: &str) -> bool {
    let chars: Vec<char> = text.chars().collect();
    (0..chars.len()).any(|i| {
        if i > 0 && chars[i - 1].is_alphanumeric() {
            return false;
        }
        if !starts_with_ci(&chars, i, prefix) {
            return false;
        }
        let j = i + prefix.chars().count();
        let mut offsets = vec![0];
        if let Some(c) = chars.get(j) {
            if ":#-".contains(*c) {
                offsets.push(1);
                if chars.get(j + 1) == Some(&' ') {
                    offsets.push(2);
                }
            } else if *c == ' ' {
                offsets.push(1);
            }
        }
        offsets.into_iter().any(|o| four_digits(&chars, j + o))
    })
}

/// Prefix followed by a letter, digit, punctuation or symbol character, or by
/// whitespace and four digits. Exact for ASCII text.
pub fn loose_registry_hit(text: &str, prefix: &str) -> bool {
    let chars: Vec<char> = text.chars().collect();
    (0..chars.len()).any(|i| {
        if !starts_with_ci(&chars, i, prefix) {
            return false;
        }
        let j = i + prefix.chars().count();
        match chars.get(j) {
            Some(c) if c.is_alphanumeric() || c.is_ascii_punctuation() => true,
            Some(c) if c.is_whitespace() => four_digits(&chars, j + 1),
            _ => false,
        }
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NaiveFlags {
    pub tags: BTreeSet<String>,
    pub prefixes: BTreeSet<String>,
    pub keywords: BTreeSet<String>,
}

impl NaiveFlags {
    pub fn any(&self) -> bool {
        !(self.tags.is_empty() && self.prefixes.is_empty() && self.keywords.is_empty())
    }
}

pub fn naive_flags(
    r: &PublicationRecord,
    tags: &[&str],
    prefixes: &[&str],
    keywords: &[&str],
    loose: bool,
) -> NaiveFlags {
    let text = r.abstract_text.clone().filter(|t| !t.trim().is_empty());
    let mut out = NaiveFlags {
        tags: BTreeSet::new(),
        prefixes: BTreeSet::new(),
        keywords: BTreeSet::new(),
    };
    for pt in &r.pubtypes {
        for t in tags {
            if pt.trim().to_lowercase() == *t {
                out.tags.insert(t.to_string());
            }
        }
    }
    if let Some(text) = text {
        for p in prefixes {
            let hit = if loose {
                loose_registry_hit(&text, p)
            } else {
                strict_registry_hit(&text, p)
            };
            if hit {
                out.prefixes.insert(p.to_string());
            }
        }
        let lower = text.to_lowercase();
        for k in keywords {
            if lower.contains(k) {
                out.keywords.insert(k.to_string());
            }
        }
    }
    out
}

// ---- evaluation -----------------------------------------------------------

/// P(score of a positive > score of a negative), ties counting one half.
pub fn brute_auc(pairs: &[(f64, bool)]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for a in pairs.iter().filter(|p| p.1) {
        for b in pairs.iter().filter(|p| !p.1) {
            den += 1.0;
            if a.0 > b.0 {
                num += 1.0;
            } else if a.0 == b.0 {
                num += 0.5;
            }
        }
    }
    num / den
}

/// Random scored fixture with both classes present; few score levels force ties.
pub fn random_pairs(rng: &mut ChaCha8Rng, n: usize, levels: u32) -> Vec<(f64, bool)> {
    loop {
        let pairs: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                let y = rng.random_bool(0.3);
                let s = (rng.random_range(0..levels) as f64 + if y { 1.5 } else { 0.0 }) / (levels as f64 + 2.0);
                (s, y)
            })
            .collect();
        if pairs.iter().any(|p| p.1) && pairs.iter().any(|p| !p.1) {
            return pairs;
        }
    }
}

/// Precision and TPR at threshold `t` (score ≥ t is positive).
pub fn rates_at(pairs: &[(f64, bool)], t: f64) -> (f64, f64) {
    let tp = pairs.iter().filter(|p| p.1 && p.0 >= t).count() as f64;
    let fp = pairs.iter().filter(|p| !p.1 && p.0 >= t).count() as f64;
    let pos = pairs.iter().filter(|p| p.1).count() as f64;
    (if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 }, tp / pos)
}

/// Mean log-loss of the best `sigmoid(a + b x)`, by one-dimensional Newton.
pub fn recalibrated_log_loss(x: &[f64], y: &[bool]) -> f64 {
    let (mut a, mut b) = (0.0f64, 0.0f64);
    let loss = |a: f64, b: f64| -> f64 {
        x.iter()
            .zip(y)
            .map(|(&xi, &yi)| {
                let z = a + b * xi;
                // log(1 + e^z) - y z, stably
                let softplus = if z > 0.0 {
                    z + (-z).exp().ln_1p()
                } else {
                    z.exp().ln_1p()
                };
                softplus - if yi { z } else { 0.0 }
            })
            .sum::<f64>()
            / x.len() as f64
    };
    for _ in 0..200 {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&xi, &yi) in x.iter().zip(y) {
            let p = 1.0 / (1.0 + (-(a + b * xi)).exp());
            let r = p - if yi { 1.0 } else { 0.0 };
            let w = p * (1.0 - p);
            ga += r;
            gb += r * xi;
            haa += w;
            hab += w * xi;
            hbb += w * xi * xi;
        }
        let det = haa * hbb - hab * hab;
        if det.abs() < 1e-300 {
            break;
        }
        let (da, db) = ((hbb * ga - hab * gb) / det, (haa * gb - hab * ga) / det);
        // Backtrack so every step decreases the loss.
        let current = loss(a, b);
        let mut step = 1.0;
        while step > 1e-12 && loss(a - step * da, b - step * db) > current {
            step /= 2.0;
        }
        a -= step * da;
        b -= step * db;
        if (step * da).abs() < 1e-12 && (step * db).abs() < 1e-12 {
            break;
        }
    }
    loss(a, b)
}

// ---- analytics ------------------------------------------------------------

/// Random citation graph: records over `window`, each citing a few earlier
/// pmids (some of which are outside the corpus).
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, window: YearWindow, trial_rate: f64) -> (Corpus, BTreeSet<String>) {
    let mut records = Vec::with_capacity(n);
    let mut trials = BTreeSet::new();
    for i in 0..n {
        let mut r = PublicationRecord::new(format!("{}", 100_000 + i));
        r.year = if rng.random_bool(0.02) {
            None
        } else {
            Some(rng.random_range(window.lo - 1..=window.hi + 1))
        };
        let cites = rng.random_range(0..6);
        for _ in 0..cites {
            let j = rng.random_range(0..n + 20);
            if j != i {
                r.cited_pmids.push(format!("{}", 100_000 + j));
            }
        }
        if rng.random_bool(trial_rate) {
            trials.insert(r.pmid.clone());
        }
        records.push(r);
    }
    (Corpus::from_records(records).unwrap(), trials)
}

/// Double loop over (citing record, cited trial).
pub fn naive_citing(
    trials: &BTreeSet<String>,
    corpus: &Corpus,
    t: i32,
    window: YearWindow,
) -> BTreeMap<i32, BTreeSet<String>> {
    let mut out = BTreeMap::new();
    for y in (window.lo + t)..=window.hi {
        let mut set = BTreeSet::new();
        for r in corpus.records() {
            if r.year != Some(y) || trials.contains(&r.pmid) {
                continue;
            }
            for c in &r.cited_pmids {
                if !trials.contains(c) {
                    continue;
                }
                let Some(cy) = corpus.get(c).and_then(|x| x.year) else {
                    continue;
                };
                if cy >= window.lo && cy <= window.hi && cy >= y - t && cy < y {
                    set.insert(r.pmid.clone());
                }
            }
        }
        out.insert(y, set);
    }
    out
}

pub fn random_registry(rng: &mut ChaCha8Rng, n: usize) -> Vec<RegistryStudyRecord> {
    const STATUS: [&str; 6] = [
        "Completed",
        "Withdrawn",
        "SUSPENDED",
        "terminated ",
        "Recruiting",
        "Unknown status",
    ];
    const TYPE: [&str; 4] = ["Interventional", "Observational", "INTERVENTIONAL", "Expanded Access"];
    const PHASE: [&str; 7] = [
        "Phase 1",
        "Phase 2/Phase 3",
        "Not Applicable",
        "N/A",
        "n/a",
        "Early Phase 1",
        "",
    ];
    (0..n)
        .map(|i| {
            let pick = |rng: &mut ChaCha8Rng, xs: &[&str]| xs[rng.random_range(0..xs.len())].to_string();
            let phase = pick(rng, &PHASE);
            RegistryStudyRecord {
                nct_id: format!("NCT{i:08}"),
                overall_status: pick(rng, &STATUS),
                study_type: pick(rng, &TYPE),
                phase: if phase.is_empty() || rng.random_bool(0.1) {
                    None
                } else {
                    Some(phase)
                },
                completion_year: rng.random_bool(0.9).then(|| rng.random_range(2005..2024)),
                posted_year: rng.random_bool(0.95).then(|| rng.random_range(2005..2024)),
            }
        })
        .collect()
}

/// Per-year counts surviving each cascade filter, filters applied in turn.
pub fn naive_audit(rows: &[RegistryStudyRecord], posted_axis: bool) -> [BTreeMap<i32, u64>; 4] {
    let keep: [&dyn Fn(&RegistryStudyRecord) -> bool; 4] = [
        &|_| true,
        &|r| {
            let s = r.overall_status.trim().to_lowercase();
            s != "withdrawn" && s != "suspended" && s != "terminated"
        },
        &|r| r.study_type.trim().to_lowercase() == "interventional",
        &|r| match &r.phase {
            None => false,
            Some(p) => {
                let p = p.trim().to_lowercase();
                !p.is_empty() && p != "not applicable" && p != "n/a"
            }
        },
    ];
    let mut out: [BTreeMap<i32, u64>; 4] = Default::default();
    for (k, series) in out.iter_mut().enumerate() {
        for r in rows {
            if !keep[..=k].iter().all(|f| f(r)) {
                continue;
            }
            let year = if posted_axis { r.posted_year } else { r.completion_year };
            if let Some(y) = year {
                *series.entry(y).or_default() += 1;
            }
        }
    }
    out
}
