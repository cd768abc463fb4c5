//! Seeded synthetic corpora with planted ground truth.
//!
//! Abstracts are bags of words drawn from a shared background vocabulary plus
//! class-specific cue words, so a linear text model can learn the planted
//! labels but not perfectly.

use std::collections::BTreeMap;

use chrono::{TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::RegistryStudyRecord;
use crate::corpus::{Corpus, PublicationRecord, YearWindow};
use crate::labels::{ExclusionReason, LabelRecord, Verdict};
use crate::universe::{DEFAULT_KEYWORDS, DEFAULT_NLM_TAGS, DEFAULT_REGISTRY_PREFIXES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_records: usize,
    pub positive_rate: f64,
    pub seed: u64,
    pub window: YearWindow,
    /// Share of records without an abstract.
    pub missing_abstract_rate: f64,
    /// Cue words per abstract; higher makes the task easier.
    pub cue_words: usize,
}

impl SyntheticSpec {
    pub fn new(n_records: usize, seed: u64) -> Self {
        Self {
            n_records,
            positive_rate: 0.112,
            seed,
            window: YearWindow { lo: 2010, hi: 2022 },
            missing_abstract_rate: 0.01,
            cue_words: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truth {
    pub include: bool,
    pub reason: Option<ExclusionReason>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub truth: BTreeMap<String, Truth>,
}

impl SyntheticCorpus {
    pub fn gold(&self) -> BTreeMap<String, bool> {
        self.truth.iter().map(|(k, t)| (k.clone(), t.include)).collect()
    }

    pub fn gold_verdicts(&self) -> BTreeMap<String, Verdict> {
        self.truth
            .iter()
            .map(|(k, t)| (k.clone(), Verdict::from_bool(t.include)))
            .collect()
    }

    /// One label per record, as a single labeler would have entered them.
    pub fn label_records(&self, labeler: &str) -> BTreeMap<String, LabelRecord> {
        let ts = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
        self.truth
            .iter()
            .map(|(pmid, t)| {
                let mut label = match t.reason {
                    None => LabelRecord::include(pmid.clone(), labeler, 1),
                    Some(r) => LabelRecord::exclude(pmid.clone(), r, labeler, 1),
                };
                label.timestamp = ts;
                (pmid.clone(), label)
            })
            .collect()
    }
}

const BACKGROUND: [&str; 40] = [
    "patients",
    "study",
    "results",
    "were",
    "with",
    "the",
    "and",
    "of",
    "in",
    "to",
    "was",
    "for",
    "a",
    "we",
    "outcome",
    "analysis",
    "data",
    "group",
    "years",
    "age",
    "compared",
    "significant",
    "associated",
    "risk",
    "clinical",
    "disease",
    "health",
    "effect",
    "level",
    "measured",
    "total",
    "mean",
    "reported",
    "primary",
    "secondary",
    "baseline",
    "follow",
    "hospital",
    "care",
    "rate",
];

const POSITIVE_CUES: [&str; 16] = [
    "placebo",
    "dose",
    "mg",
    "tablets",
    "double",
    "blind",
    "efficacy",
    "tolerability",
    "pharmacokinetics",
    "infusion",
    "arm",
    "enrolled",
    "phase",
    "drug",
    "adverse",
    "randomly",
];

fn negative_cues(reason: ExclusionReason) -> &'static [&'static str] {
    match reason {
        ExclusionReason::NoDrug => &["exercise", "surgery", "device", "diet", "supplement", "therapy"],
        ExclusionReason::MetaAnalysisOrReview => {
            &["pooled", "searched", "databases", "heterogeneity", "review", "included"]
        }
        ExclusionReason::RetrospectiveReanalysis => {
            &["retrospective", "records", "charts", "registry", "reviewed", "cohort"]
        }
        ExclusionReason::Observational => &[
            "observational",
            "survey",
            "prevalence",
            "cross",
            "sectional",
            "questionnaire",
        ],
        ExclusionReason::ProtocolNoResults => &["protocol", "will", "planned", "design", "recruit", "rationale"],
        ExclusionReason::NoHumanSubjects => &["cells", "vitro", "culture", "assay", "expression", "lines"],
        ExclusionReason::Animal => &["mice", "rats", "murine", "animals", "rodent", "mouse"],
        ExclusionReason::Other => &["simulation", "model", "economic", "cost", "policy", "framework"],
    }
}

const JOURNALS: [&str; 8] = [
    "JAMA",
    "N Engl J Med",
    "Lancet",
    "BMJ",
    "PLoS One",
    "J Clin Oncol",
    "Trials",
    "Medicine (Baltimore)",
];

const COUNTRIES: [&str; 8] = [
    "United States",
    "China",
    "Germany",
    "Japan",
    "United Kingdom",
    "France",
    "Italy",
    "Brazil",
];

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs[rng.random_range(0..xs.len())]
}

fn registry_mention<R: Rng>(rng: &mut R) -> String {
    let prefix = pick(rng, &DEFAULT_REGISTRY_PREFIXES);
    let digits: u64 = rng.random_range(0..100_000_000);
    match rng.random_range(0..5) {
        0 => format!("{prefix}{digits:08}"),
        1 => format!("{} {digits:08}", prefix.to_lowercase()),
        2 => format!("({prefix}-{digits:08})"),
        // Near misses for the strict rule.
        3 => format!("x{prefix}{digits:08}"),
        _ => format!("{prefix}: {}", digits % 1000),
    }
}

/// Generates a corpus whose pmids are `"{10_000_000 + i}"`.
pub fn generate(spec: &SyntheticSpec) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.n_records);
    let mut truth = BTreeMap::new();
    let mut by_year: BTreeMap<i32, Vec<String>> = BTreeMap::new();
    let years: Vec<i32> = spec.window.years().collect();
    for i in 0..spec.n_records {
        let pmid = format!("{}", 10_000_000 + i);
        let year = years[rng.random_range(0..years.len())];
        let include = rng.random_bool(spec.positive_rate);
        let reason = (!include).then(|| ExclusionReason::ALL[rng.random_range(0..ExclusionReason::ALL.len())]);
        let mut r = PublicationRecord::new(pmid.clone());
        r.year = Some(year);
        r.journal = pick(&mut rng, &JOURNALS).to_string();
        r.title = format!("Synthetic record {i}");

        let mut words: Vec<String> = (0..rng.random_range(25..45))
            .map(|_| pick(&mut rng, &BACKGROUND).to_string())
            .collect();
        for _ in 0..spec.cue_words {
            // Cues are noisy: a quarter come from the other class.
            let own = rng.random_bool(0.75);
            let cue = match (include, own) {
                (true, true) | (false, false) => pick(&mut rng, &POSITIVE_CUES),
                (true, false) => {
                    let decoy = ExclusionReason::ALL[rng.random_range(0..8)];
                    pick(&mut rng, negative_cues(decoy))
                }
                (false, true) => pick(&mut rng, negative_cues(reason.unwrap())),
            };
            words.push(cue.to_string());
        }
        if rng.random_bool(if include { 0.6 } else { 0.2 }) {
            words.push(pick(&mut rng, &DEFAULT_KEYWORDS).to_string());
        }
        if rng.random_bool(if include { 0.3 } else { 0.03 }) {
            words.push(registry_mention(&mut rng));
        }
        // Deterministic in-place shuffle keeps cue positions uninformative.
        for k in (1..words.len()).rev() {
            words.swap(k, rng.random_range(0..=k));
        }
        if !rng.random_bool(spec.missing_abstract_rate) {
            r.abstract_text = Some(words.join(" ") + ".");
        }

        r.pubtypes.insert("journal article".into());
        if rng.random_bool(if include { 0.7 } else { 0.15 }) {
            r.pubtypes.insert(pick(&mut rng, &DEFAULT_NLM_TAGS).to_string());
        }
        if reason == Some(ExclusionReason::MetaAnalysisOrReview) && rng.random_bool(0.5) {
            r.pubtypes.insert("review".into());
        }
        r.us_public_funding = rng.random_bool(0.2);
        if rng.random_bool(0.1) {
            r.nih_grant_ids
                .push(format!("R01 XX{:06}", rng.random_range(0..1_000_000)));
        }
        let first = pick(&mut rng, &COUNTRIES);
        let last = if rng.random_bool(0.85) {
            first
        } else {
            pick(&mut rng, &COUNTRIES)
        };
        r.author_countries = vec![Some(first.to_string())];
        if rng.random_bool(0.05) {
            r.author_countries[0] = None;
        }
        r.author_countries.push(Some(last.to_string()));

        let earlier: Vec<&String> = by_year.range(..year).flat_map(|(_, v)| v).collect();
        if !earlier.is_empty() {
            for _ in 0..rng.random_range(0..6) {
                let cited = earlier[rng.random_range(0..earlier.len())].clone();
                if !r.cited_pmids.contains(&cited) {
                    r.cited_pmids.push(cited);
                }
            }
        }
        by_year.entry(year).or_default().push(pmid.clone());
        truth.insert(pmid, Truth { include, reason });
        records.push(r);
    }
    SyntheticCorpus {
        corpus: Corpus::from_records(records).expect("synthetic pmids are unique"),
        truth,
    }
}

const STATUSES: [&str; 6] = [
    "Completed",
    "Recruiting",
    "Withdrawn",
    "Suspended",
    "Terminated",
    "Unknown status",
];
const STUDY_TYPES: [&str; 3] = ["Interventional", "Observational", "Expanded Access"];
const PHASES: [&str; 6] = ["Phase 1", "Phase 2", "Phase 3", "Phase 4", "Not Applicable", "N/A"];

/// AACT-style study rows with every field combination represented.
pub fn generate_registry(n: usize, seed: u64) -> Vec<RegistryStudyRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| RegistryStudyRecord {
            nct_id: format!("NCT{:08}", i),
            overall_status: pick(&mut rng, &STATUSES).to_string(),
            study_type: pick(&mut rng, &STUDY_TYPES).to_string(),
            phase: rng.random_bool(0.8).then(|| pick(&mut rng, &PHASES).to_string()),
            completion_year: rng.random_bool(0.9).then(|| rng.random_range(2000..=2022)),
            posted_year: rng.random_bool(0.95).then(|| rng.random_range(2000..=2022)),
        })
        .collect()
}

pub fn write_registry_csv<W: std::io::Write>(w: W, rows: &[RegistryStudyRecord]) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}
