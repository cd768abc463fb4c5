//! Candidate-universe rules: NLM publication-type tags, trial-registry
//! identifiers in abstract text, and trial-indicative keywords.
//!
//! A record is in the universe when at least one family matches. Per-family
//! tallies and the pairwise overlap table are produced by [`family_tallies`]
//! and [`overlap_report`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{self, Write};

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{window_view, Corpus, PublicationRecord, YearWindow};

pub const DEFAULT_NLM_TAGS: [&str; 18] = [
    "adaptive trial",
    "clinical conference",
    "clinical study",
    "clinical trial",
    "clinical trial protocol",
    "clinical trial, phase 1",
    "clinical trial, phase 2",
    "clinical trial, phase 3",
    "clinical trial, phase 4",
    "comparative study",
    "controlled clinical trial",
    "equivalence trial",
    "evaluation study",
    "observational study",
    "pragmatic clinical trial",
    "randomized controlled trial",
    "twin study",
    "validation study",
];

pub const DEFAULT_REGISTRY_PREFIXES: [&str; 4] = ["NCT", "EUDRACT", "ISRCTN", "ACTRN"];

pub const DEFAULT_KEYWORDS: [&str; 8] = [
    "randomized",
    "controlled trial",
    "control trial",
    "clinical trial",
    "treatment group",
    "control group",
    "intervention",
    "clinical study",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegistryMode {
    /// Prefix, at most one separator (space, `:`, `-`, `#`), then four or more digits.
    #[default]
    Strict,
    /// Prefix followed by any letter, digit or punctuation. Over-counts words
    /// such as "distinctly".
    PaperLoose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeywordMode {
    #[default]
    Substring,
    WordBoundary,
}

/// The three rule families. Tags and keywords are stored lowercase, prefixes
/// uppercase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    pub nlm_tags: BTreeSet<String>,
    pub registry_prefixes: Vec<String>,
    pub keywords: Vec<String>,
    pub match_mode: RegistryMode,
    pub keyword_mode: KeywordMode,
}

impl Default for RuleSet {
    fn default() -> Self {
        Self::new(
            DEFAULT_NLM_TAGS.iter().copied(),
            DEFAULT_REGISTRY_PREFIXES.iter().copied(),
            DEFAULT_KEYWORDS.iter().copied(),
            RegistryMode::default(),
        )
    }
}

impl RuleSet {
    pub fn new<'a>(
        tags: impl IntoIterator<Item = &'a str>,
        prefixes: impl IntoIterator<Item = &'a str>,
        keywords: impl IntoIterator<Item = &'a str>,
        match_mode: RegistryMode,
    ) -> Self {
        let mut seen = BTreeSet::new();
        let keywords = keywords
            .into_iter()
            .map(|k| k.trim().to_lowercase())
            .filter(|k| !k.is_empty() && seen.insert(k.clone()))
            .collect();
        let mut seen = BTreeSet::new();
        let registry_prefixes = prefixes
            .into_iter()
            .map(|p| p.trim().to_uppercase())
            .filter(|p| !p.is_empty() && seen.insert(p.clone()))
            .collect();
        Self {
            nlm_tags: tags.into_iter().map(normalize_tag).filter(|t| !t.is_empty()).collect(),
            registry_prefixes,
            keywords,
            match_mode,
            keyword_mode: KeywordMode::default(),
        }
    }

    pub fn with_mode(mut self, mode: RegistryMode) -> Self {
        self.match_mode = mode;
        self
    }

    pub fn with_keyword_mode(mut self, mode: KeywordMode) -> Self {
        self.keyword_mode = mode;
        self
    }

    /// Compiles the pattern tables used by the scanners.
    pub fn matcher(&self) -> RuleMatcher {
        RuleMatcher::new(self)
    }
}

fn normalize_tag(tag: &str) -> String {
    tag.trim().to_lowercase()
}

/// Compiled form of a [`RuleSet`]. Cheap to share across threads.
#[derive(Debug, Clone)]
pub struct RuleMatcher {
    rules: RuleSet,
    registry: Vec<(String, Regex)>,
    keyword_patterns: Option<Vec<Regex>>,
}

impl RuleMatcher {
    fn new(rules: &RuleSet) -> Self {
        let registry = rules
            .registry_prefixes
            .iter()
            .map(|prefix| {
                let escaped = regex::escape(prefix);
                // Strict identifiers must not be glued to a preceding letter or
                // digit, so "distinct 2019" is not read as an NCT number.
                let pattern = match rules.match_mode {
                    // One separator, optionally padded by a space ("ISRCTN: 12345").
                    RegistryMode::Strict => {
                        format!(r"(?i)(?:^|[^\p{{L}}\p{{N}}]){escaped}(?:[:#-] ?| )?[0-9]{{4}}")
                    }
                    // The space branch keeps every strict match a loose match.
                    RegistryMode::PaperLoose => {
                        format!(r"(?i){escaped}(?:[\p{{L}}\p{{N}}\p{{P}}\p{{S}}]|\s[0-9]{{4}})")
                    }
                };
                (prefix.clone(), Regex::new(&pattern).expect("registry pattern"))
            })
            .collect();
        let keyword_patterns = (rules.keyword_mode == KeywordMode::WordBoundary).then(|| {
            rules
                .keywords
                .iter()
                .map(|k| Regex::new(&format!(r"(?i)\b{}\b", regex::escape(k))).expect("keyword pattern"))
                .collect()
        });
        Self {
            rules: rules.clone(),
            registry,
            keyword_patterns,
        }
    }

    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }

    /// Case-insensitive exact match of publication types against the tag list.
    pub fn scan_nlm_tags(&self, record: &PublicationRecord) -> BTreeSet<String> {
        record
            .pubtypes
            .iter()
            .map(|t| normalize_tag(t))
            .filter(|t| self.rules.nlm_tags.contains(t))
            .collect()
    }

    pub fn scan_registry_ids(&self, record: &PublicationRecord) -> BTreeSet<String> {
        let Some(text) = record.abstract_str() else {
            return BTreeSet::new();
        };
        self.registry
            .iter()
            .filter(|(_, re)| re.is_match(text))
            .map(|(prefix, _)| prefix.clone())
            .collect()
    }

    pub fn scan_keywords(&self, record: &PublicationRecord) -> BTreeSet<String> {
        let Some(text) = record.abstract_str() else {
            return BTreeSet::new();
        };
        match &self.keyword_patterns {
            Some(patterns) => self
                .rules
                .keywords
                .iter()
                .zip(patterns)
                .filter(|(_, re)| re.is_match(text))
                .map(|(k, _)| k.clone())
                .collect(),
            None => {
                let lower = text.to_lowercase();
                self.rules
                    .keywords
                    .iter()
                    .filter(|k| lower.contains(k.as_str()))
                    .cloned()
                    .collect()
            }
        }
    }

    pub fn flags(&self, record: &PublicationRecord) -> UniverseFlags {
        UniverseFlags::new(
            record.pmid.clone(),
            self.scan_nlm_tags(record),
            self.scan_registry_ids(record),
            self.scan_keywords(record),
        )
    }
}

pub fn scan_nlm_tags(record: &PublicationRecord, rules: &RuleSet) -> BTreeSet<String> {
    rules.matcher().scan_nlm_tags(record)
}

pub fn scan_registry_ids(record: &PublicationRecord, rules: &RuleSet) -> BTreeSet<String> {
    rules.matcher().scan_registry_ids(record)
}

pub fn scan_keywords(record: &PublicationRecord, rules: &RuleSet) -> BTreeSet<String> {
    rules.matcher().scan_keywords(record)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniverseFlags {
    pub pmid: String,
    pub matched_tags: BTreeSet<String>,
    pub matched_prefixes: BTreeSet<String>,
    pub matched_keywords: BTreeSet<String>,
    pub in_universe: bool,
}

impl UniverseFlags {
    pub fn new(
        pmid: String,
        matched_tags: BTreeSet<String>,
        matched_prefixes: BTreeSet<String>,
        matched_keywords: BTreeSet<String>,
    ) -> Self {
        let in_universe = !(matched_tags.is_empty() && matched_prefixes.is_empty() && matched_keywords.is_empty());
        Self {
            pmid,
            matched_tags,
            matched_prefixes,
            matched_keywords,
            in_universe,
        }
    }

    pub fn matches(&self, family: Family) -> bool {
        match family {
            Family::NlmTag => !self.matched_tags.is_empty(),
            Family::RegistryId => !self.matched_prefixes.is_empty(),
            Family::Keyword => !self.matched_keywords.is_empty(),
        }
    }

    /// `in_universe` agrees with the union of the matched sets.
    pub fn is_consistent(&self) -> bool {
        self.in_universe == Family::ALL.iter().any(|f| self.matches(*f))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    RegistryId,
    NlmTag,
    Keyword,
}

impl Family {
    /// Row order of the overlap table.
    pub const ALL: [Family; 3] = [Family::RegistryId, Family::NlmTag, Family::Keyword];

    pub fn label(self) -> &'static str {
        match self {
            Family::RegistryId => "Registry ID",
            Family::NlmTag => "NLM tag",
            Family::Keyword => "Keyword",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyCounts {
    pub scanned: usize,
    pub nlm_tag: usize,
    pub registry_id: usize,
    pub keyword: usize,
    pub universe: usize,
}

impl FamilyCounts {
    pub fn of(&self, family: Family) -> usize {
        match family {
            Family::NlmTag => self.nlm_tag,
            Family::RegistryId => self.registry_id,
            Family::Keyword => self.keyword,
        }
    }

    fn add(&mut self, flags: &UniverseFlags) {
        self.scanned += 1;
        self.nlm_tag += usize::from(flags.matches(Family::NlmTag));
        self.registry_id += usize::from(flags.matches(Family::RegistryId));
        self.keyword += usize::from(flags.matches(Family::Keyword));
        self.universe += usize::from(flags.in_universe);
    }
}

#[derive(Debug, Clone)]
pub struct UniverseBuild {
    pub flags: Vec<UniverseFlags>,
    pub summary: FamilyCounts,
}

/// Flags every in-window record, in PMID order.
pub fn build_universe(corpus: &Corpus, rules: &RuleSet, window: YearWindow) -> UniverseBuild {
    let matcher = rules.matcher();
    let view = window_view(corpus, window);
    let records: Vec<&PublicationRecord> = view.records().collect();
    let flags: Vec<UniverseFlags> = records.par_iter().map(|r| matcher.flags(r)).collect();
    let mut summary = FamilyCounts::default();
    for f in &flags {
        summary.add(f);
    }
    log::info!(
        "universe: {} scanned, {} nlm tag, {} registry id, {} keyword, {} in union",
        summary.scanned,
        summary.nlm_tag,
        summary.registry_id,
        summary.keyword,
        summary.universe
    );
    UniverseBuild { flags, summary }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub family: Family,
    /// `None` for the family's own total.
    pub sub_family: Option<Family>,
    pub count: usize,
}

/// Family totals followed by each pairwise intersection, in the layout
/// "records with any X" / "that have any Y".
pub fn overlap_report(flags: &[UniverseFlags]) -> Vec<OverlapRow> {
    let mut rows = Vec::with_capacity(9);
    for family in Family::ALL {
        let with_family: Vec<&UniverseFlags> = flags.iter().filter(|f| f.matches(family)).collect();
        rows.push(OverlapRow {
            family,
            sub_family: None,
            count: with_family.len(),
        });
        for other in Family::ALL.into_iter().filter(|o| *o != family) {
            rows.push(OverlapRow {
                family,
                sub_family: Some(other),
                count: with_family.iter().filter(|f| f.matches(other)).count(),
            });
        }
    }
    rows
}

/// Per-item tallies: how many records matched each tag, prefix and keyword.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyTallies {
    pub tags: BTreeMap<String, usize>,
    pub prefixes: BTreeMap<String, usize>,
    pub keywords: BTreeMap<String, usize>,
    pub summary: FamilyCounts,
}

pub fn family_tallies(flags: &[UniverseFlags], rules: &RuleSet) -> FamilyTallies {
    let mut out = FamilyTallies {
        tags: rules.nlm_tags.iter().map(|t| (t.clone(), 0)).collect(),
        prefixes: rules.registry_prefixes.iter().map(|p| (p.clone(), 0)).collect(),
        keywords: rules.keywords.iter().map(|k| (k.clone(), 0)).collect(),
        summary: FamilyCounts::default(),
    };
    for f in flags {
        out.summary.add(f);
        for t in &f.matched_tags {
            *out.tags.entry(t.clone()).or_default() += 1;
        }
        for p in &f.matched_prefixes {
            *out.prefixes.entry(p.clone()).or_default() += 1;
        }
        for k in &f.matched_keywords {
            *out.keywords.entry(k.clone()).or_default() += 1;
        }
    }
    out
}

/// TSV with one section per table: tag, registry and keyword frequencies, then
/// the overlap rows. Shares are percentages of scanned records.
pub fn write_report_tsv<W: Write>(mut w: W, tallies: &FamilyTallies, overlaps: &[OverlapRow]) -> io::Result<()> {
    let n = tallies.summary.scanned;
    let pct = |c: usize| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 };
    writeln!(w, "table\titem\tfrequency\tpercent")?;
    for (name, map) in [
        ("nlm_tag", &tallies.tags),
        ("registry_id", &tallies.prefixes),
        ("keyword", &tallies.keywords),
    ] {
        for (item, count) in map {
            writeln!(w, "{name}\t{item}\t{count}\t{:.2}", pct(*count))?;
        }
    }
    writeln!(w, "summary\tscanned\t{n}\t100.00")?;
    writeln!(
        w,
        "summary\tuniverse\t{}\t{:.2}",
        tallies.summary.universe,
        pct(tallies.summary.universe)
    )?;
    writeln!(w)?;
    writeln!(w, "records_with_any\tthat_have_any\tcount")?;
    for row in overlaps {
        let sub = row.sub_family.map(|f| f.label()).unwrap_or("");
        writeln!(w, "{}\t{}\t{}", row.family.label(), sub, row.count)?;
    }
    Ok(())
}
