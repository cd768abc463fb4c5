//! Hand labels, the exclusion taxonomy, split assignment and the append-only
//! label store.
//!
//! Labels are never edited in place. A later revision for the same
//! `(pmid, labeler)` supersedes earlier ones when the store is read.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::universe::UniverseFlags;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("invalid label for {pmid}: {reason}")]
    Invalid { pmid: String, reason: String },
    #[error("unknown pmid {0}")]
    UnknownPmid(String),
    #[error("label ({pmid}, {labeler}, revision {revision}) already recorded with different content")]
    Conflict {
        pmid: String,
        labeler: String,
        revision: u32,
    },
    #[error("requested {requested} records but the universe holds {available}")]
    SizesExceedUniverse { requested: usize, available: usize },
    #[error("insufficient abstract-bearing records: {split} split is short by {shortfall}")]
    InsufficientRecords { split: Split, shortfall: usize },
    #[error("label store line {line}: {message}")]
    StoreFormat { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Include,
    Exclude,
}

impl Verdict {
    pub fn is_include(self) -> bool {
        self == Verdict::Include
    }

    pub fn from_bool(include: bool) -> Self {
        if include {
            Verdict::Include
        } else {
            Verdict::Exclude
        }
    }
}

/// Exclusion reasons mirroring the inclusion criteria: human subjects,
/// prospective, interventional, drug, reporting results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    NoDrug,
    MetaAnalysisOrReview,
    RetrospectiveReanalysis,
    Observational,
    ProtocolNoResults,
    NoHumanSubjects,
    Animal,
    Other,
}

impl ExclusionReason {
    pub const ALL: [ExclusionReason; 8] = [
        ExclusionReason::NoDrug,
        ExclusionReason::MetaAnalysisOrReview,
        ExclusionReason::RetrospectiveReanalysis,
        ExclusionReason::Observational,
        ExclusionReason::ProtocolNoResults,
        ExclusionReason::NoHumanSubjects,
        ExclusionReason::Animal,
        ExclusionReason::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExclusionReason::NoDrug => "no_drug",
            ExclusionReason::MetaAnalysisOrReview => "meta_analysis_or_review",
            ExclusionReason::RetrospectiveReanalysis => "retrospective_reanalysis",
            ExclusionReason::Observational => "observational",
            ExclusionReason::ProtocolNoResults => "protocol_no_results",
            ExclusionReason::NoHumanSubjects => "no_human_subjects",
            ExclusionReason::Animal => "animal",
            ExclusionReason::Other => "other",
        }
    }

    /// Heading used in error tables.
    pub fn display_name(self) -> &'static str {
        match self {
            ExclusionReason::NoDrug => "No Drug",
            ExclusionReason::MetaAnalysisOrReview => "Meta-Analysis",
            ExclusionReason::RetrospectiveReanalysis => "Retrospective",
            ExclusionReason::Observational => "Observational",
            ExclusionReason::ProtocolNoResults => "Protocol",
            ExclusionReason::NoHumanSubjects => "No Human Subjects",
            ExclusionReason::Animal => "Animal",
            ExclusionReason::Other => "Other",
        }
    }
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExclusionReason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ExclusionReason::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown exclusion reason {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub pmid: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<ExclusionReason>,
    pub labeler: String,
    pub timestamp: DateTime<Utc>,
    pub revision: u32,
    /// Free-text note kept alongside the structured reason.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl LabelRecord {
    pub fn include(pmid: impl Into<String>, labeler: impl Into<String>, revision: u32) -> Self {
        Self {
            pmid: pmid.into(),
            verdict: Verdict::Include,
            reason: None,
            labeler: labeler.into(),
            timestamp: Utc::now(),
            revision,
            note: None,
        }
    }

    pub fn exclude(
        pmid: impl Into<String>,
        reason: ExclusionReason,
        labeler: impl Into<String>,
        revision: u32,
    ) -> Self {
        Self {
            verdict: Verdict::Exclude,
            reason: Some(reason),
            ..Self::include(pmid, labeler, revision)
        }
    }

    pub fn validate(&self) -> Result<(), LabelError> {
        let invalid = |reason: &str| LabelError::Invalid {
            pmid: self.pmid.clone(),
            reason: reason.to_string(),
        };
        if self.pmid.trim().is_empty() {
            return Err(invalid("pmid is empty"));
        }
        if self.labeler.trim().is_empty() {
            return Err(invalid("labeler is empty"));
        }
        match (self.verdict, self.reason) {
            (Verdict::Exclude, None) => Err(invalid("exclude requires a reason")),
            (Verdict::Include, Some(_)) => Err(invalid("include must not carry a reason")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| format!("unknown split {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub pmid: String,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 1082,
            validation: 1000,
            test: 1000,
        }
    }
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    /// Assignments in draw order: test, validation, train.
    pub assignments: Vec<SplitAssignment>,
    /// Drawn into the test split but dropped for lacking an abstract.
    pub dropped_from_test: Vec<String>,
    /// Replacement draws added to train and validation.
    pub backfilled: usize,
}

impl SplitPlan {
    pub fn members(&self, split: Split) -> impl Iterator<Item = &str> {
        self.assignments
            .iter()
            .filter(move |a| a.split == split)
            .map(|a| a.pmid.as_str())
    }

    pub fn split_of(&self) -> BTreeMap<&str, Split> {
        self.assignments.iter().map(|a| (a.pmid.as_str(), a.split)).collect()
    }
}

/// Draws hand-labeling splits uniformly without replacement from the universe.
///
/// The initial draw fills test, validation and train slots in that order.
/// Abstract-less draws are then dropped: test keeps the shortfall, train and
/// validation are topped up with fresh draws from the remaining pool.
pub fn assign_splits(
    flags: &[UniverseFlags],
    corpus: &Corpus,
    sizes: SplitSizes,
    seed: u64,
) -> Result<SplitPlan, LabelError> {
    let mut pool: Vec<&str> = flags
        .iter()
        .filter(|f| f.in_universe)
        .map(|f| f.pmid.as_str())
        .collect();
    pool.sort_unstable();
    pool.dedup();
    if sizes.total() > pool.len() {
        return Err(LabelError::SizesExceedUniverse {
            requested: sizes.total(),
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);

    let has_abstract = |pmid: &str| corpus.get(pmid).is_some_and(|r| r.has_abstract());
    let (test_draw, rest) = pool.split_at(sizes.test);
    let (validation_draw, rest) = rest.split_at(sizes.validation);
    let (train_draw, mut remaining) = rest.split_at(sizes.train);

    let mut assignments = Vec::with_capacity(sizes.total());
    let mut dropped_from_test = Vec::new();
    for pmid in test_draw {
        if has_abstract(pmid) {
            assignments.push(SplitAssignment {
                pmid: pmid.to_string(),
                split: Split::Test,
            });
        } else {
            dropped_from_test.push(pmid.to_string());
        }
    }

    let mut backfilled = 0;
    for (split, draw) in [(Split::Validation, validation_draw), (Split::Train, train_draw)] {
        let mut kept: Vec<&str> = draw.iter().copied().filter(|p| has_abstract(p)).collect();
        let mut shortfall = draw.len() - kept.len();
        while shortfall > 0 {
            let Some((next, tail)) = remaining.split_first() else {
                return Err(LabelError::InsufficientRecords { split, shortfall });
            };
            remaining = tail;
            if has_abstract(next) {
                kept.push(next);
                shortfall -= 1;
                backfilled += 1;
            }
        }
        assignments.extend(kept.into_iter().map(|pmid| SplitAssignment {
            pmid: pmid.to_string(),
            split,
        }));
    }

    Ok(SplitPlan {
        assignments,
        dropped_from_test,
        backfilled,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub pmid: String,
    pub labeler: String,
    pub revision: u32,
    /// False when an identical record was already stored.
    pub appended: bool,
}

/// Append-only label store, optionally backed by a JSONL file.
#[derive(Debug, Default)]
pub struct LabelStore {
    path: Option<PathBuf>,
    file: Option<File>,
    known_pmids: Option<HashSet<String>>,
    records: Vec<LabelRecord>,
    keys: BTreeMap<(String, String, u32), usize>,
}

impl LabelStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a store file and replays its contents.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LabelError> {
        let path = path.as_ref().to_path_buf();
        let mut store = Self::default();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (idx, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: LabelRecord = serde_json::from_str(&line).map_err(|e| LabelError::StoreFormat {
                    line: idx + 1,
                    message: e.to_string(),
                })?;
                record.validate().map_err(|e| LabelError::StoreFormat {
                    line: idx + 1,
                    message: e.to_string(),
                })?;
                store.insert(record)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        store.path = Some(path);
        store.file = Some(file);
        Ok(store)
    }

    /// Restricts future labels to PMIDs of a corpus.
    pub fn with_known_pmids(mut self, pmids: impl IntoIterator<Item = String>) -> Self {
        self.known_pmids = Some(pmids.into_iter().collect());
        self
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn insert(&mut self, record: LabelRecord) -> Result<bool, LabelError> {
        let key = (record.pmid.clone(), record.labeler.clone(), record.revision);
        if let Some(&idx) = self.keys.get(&key) {
            let existing = &self.records[idx];
            let same =
                existing.verdict == record.verdict && existing.reason == record.reason && existing.note == record.note;
            return if same {
                Ok(false)
            } else {
                Err(LabelError::Conflict {
                    pmid: key.0,
                    labeler: key.1,
                    revision: key.2,
                })
            };
        }
        self.keys.insert(key, self.records.len());
        self.records.push(record);
        Ok(true)
    }

    /// Validates and appends a label. Re-sending an identical
    /// `(pmid, labeler, revision)` is acknowledged without a second write.
    pub fn record_label(&mut self, label: LabelRecord) -> Result<Ack, LabelError> {
        label.validate()?;
        if let Some(known) = &self.known_pmids {
            if !known.contains(&label.pmid) {
                return Err(LabelError::UnknownPmid(label.pmid));
            }
        }
        let line = serde_json::to_string(&label).expect("label serializes");
        let ack = Ack {
            pmid: label.pmid.clone(),
            labeler: label.labeler.clone(),
            revision: label.revision,
            appended: false,
        };
        let appended = self.insert(label)?;
        if appended {
            if let Some(file) = self.file.as_mut() {
                writeln!(file, "{line}")?;
                file.flush()?;
            }
        }
        Ok(Ack { appended, ..ack })
    }

    /// Next free revision number for a `(pmid, labeler)` pair.
    pub fn next_revision(&self, pmid: &str, labeler: &str) -> u32 {
        self.records
            .iter()
            .filter(|r| r.pmid == pmid && r.labeler == labeler)
            .map(|r| r.revision + 1)
            .max()
            .unwrap_or(1)
    }

    pub fn all(&self) -> &[LabelRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Highest revision per `(pmid, labeler)`.
    pub fn effective_by_labeler(&self) -> BTreeMap<(String, String), &LabelRecord> {
        let mut out: BTreeMap<(String, String), &LabelRecord> = BTreeMap::new();
        for r in &self.records {
            let key = (r.pmid.clone(), r.labeler.clone());
            match out.get(&key) {
                Some(cur) if cur.revision >= r.revision => {}
                _ => {
                    out.insert(key, r);
                }
            }
        }
        out
    }

    /// One label per PMID: last revision wins per labeler, and among labelers
    /// the latest timestamp wins (ties broken by labeler name).
    pub fn effective_labels(&self) -> BTreeMap<String, &LabelRecord> {
        let mut out: BTreeMap<String, &LabelRecord> = BTreeMap::new();
        for ((pmid, _), r) in self.effective_by_labeler() {
            match out.get(&pmid) {
                Some(cur) if (cur.timestamp, &cur.labeler) >= (r.timestamp, &r.labeler) => {}
                _ => {
                    out.insert(pmid, r);
                }
            }
        }
        out
    }

    /// Effective labels for one labeler only.
    pub fn labeled_by(&self, labeler: &str) -> BTreeSet<String> {
        self.records
            .iter()
            .filter(|r| r.labeler == labeler)
            .map(|r| r.pmid.clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub split: Split,
    /// Split members with an effective label.
    pub n: usize,
    pub total: usize,
    pub includes: usize,
    /// `None` when nothing in the split is labeled.
    pub positive_share: Option<f64>,
    pub reason_histogram: BTreeMap<ExclusionReason, usize>,
}

pub fn label_stats(store: &LabelStore, plan: &SplitPlan, split: Split) -> LabelStats {
    let effective = store.effective_labels();
    let members: Vec<&str> = plan.members(split).collect();
    let mut stats = LabelStats {
        split,
        n: 0,
        total: members.len(),
        includes: 0,
        positive_share: None,
        reason_histogram: BTreeMap::new(),
    };
    for pmid in members {
        let Some(label) = effective.get(pmid) else {
            continue;
        };
        stats.n += 1;
        match (label.verdict, label.reason) {
            (Verdict::Include, _) => stats.includes += 1,
            (Verdict::Exclude, Some(reason)) => *stats.reason_histogram.entry(reason).or_default() += 1,
            (Verdict::Exclude, None) => {}
        }
    }
    if stats.n > 0 {
        stats.positive_share = Some(stats.includes as f64 / stats.n as f64);
    }
    stats
}

pub fn write_splits_jsonl<W: Write>(mut w: W, plan: &SplitPlan) -> io::Result<()> {
    for a in &plan.assignments {
        serde_json::to_writer(&mut w, a)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_splits_jsonl<R: BufRead>(reader: R) -> Result<SplitPlan, LabelError> {
    let mut assignments = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let a: SplitAssignment = serde_json::from_str(&line).map_err(|e| LabelError::StoreFormat {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(a.pmid.clone()) {
            return Err(LabelError::StoreFormat {
                line: idx + 1,
                message: format!("pmid {} assigned twice", a.pmid),
            });
        }
        assignments.push(a);
    }
    Ok(SplitPlan {
        assignments,
        dropped_from_test: Vec::new(),
        backfilled: 0,
    })
}
