//! Trend analytics over the classified census: year counts, citing samples,
//! leading journals, citation distributions, funding shares, geography,
//! meta-analysis flags and the registry audit.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, PublicationRecord, YearWindow};
use crate::distill::ScoreSet;
use crate::eval::{OperatingPoint, PointName};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("citing window must be within [2, 6] years, got {0}")]
    WindowOutOfRange(u32),
    #[error("registry file line {line}: {message}")]
    Registry { line: u64, message: String },
    #[error("anchor years {from} > {to}")]
    AnchorOrder { from: i32, to: i32 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type YearSeries = BTreeMap<i32, u64>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CensusSample {
    pub stringency: PointName,
    pub source: String,
    pub pmids: BTreeSet<String>,
}

/// Census samples at each operating point from one score set. Thresholds
/// nest, so conservative ⊆ moderate ⊆ liberal whenever their thresholds are
/// ordered.
pub fn census_samples(scores: &ScoreSet, points: &[OperatingPoint]) -> Vec<CensusSample> {
    points
        .iter()
        .map(|p| CensusSample {
            stringency: p.name,
            source: scores.scorer_id.clone(),
            pmids: scores
                .scores
                .iter()
                .filter(|(_, &prob)| prob >= p.threshold)
                .map(|(pmid, _)| pmid.clone())
                .collect(),
        })
        .collect()
}

/// Per-year counts over the window; years without records are zero.
/// Sample pmids missing from the corpus or outside the window are ignored.
pub fn counts_by_year(sample: &BTreeSet<String>, corpus: &Corpus, window: YearWindow) -> YearSeries {
    let mut series: YearSeries = window.years().map(|y| (y, 0)).collect();
    for pmid in sample {
        if let Some(y) = corpus.get(pmid).and_then(|r| r.year) {
            if let Some(c) = series.get_mut(&y) {
                *c += 1;
            }
        }
    }
    series
}

/// Percent change relative to the first year; absent where the base is zero.
pub fn normalize_growth(series: &YearSeries) -> BTreeMap<i32, Option<f64>> {
    let base = series.values().next().copied().unwrap_or(0);
    series
        .iter()
        .map(|(&y, &c)| (y, (base > 0).then(|| pct_change(base, c))))
        .collect()
}

pub fn pct_change(from: u64, to: u64) -> f64 {
    (to as f64 - from as f64) / from as f64 * 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CitingSampleSpec {
    pub window_years: u32,
    pub exclude_trials: bool,
}

impl CitingSampleSpec {
    pub fn new(window_years: u32) -> Result<Self, AnalyticsError> {
        if !(2..=6).contains(&window_years) {
            return Err(AnalyticsError::WindowOutOfRange(window_years));
        }
        Ok(Self {
            window_years,
            exclude_trials: true,
        })
    }
}

/// For publication year `y`, the non-trial records citing at least one
/// trial published in `[y - t, y - 1]`. Years are reported only when the
/// whole look-back window lies inside `window`.
pub fn build_citing_sample(
    trials: &BTreeSet<String>,
    corpus: &Corpus,
    spec: CitingSampleSpec,
    window: YearWindow,
) -> BTreeMap<i32, BTreeSet<String>> {
    let t = spec.window_years as i32;
    let first = window.lo + t;
    let mut out: BTreeMap<i32, BTreeSet<String>> = (first..=window.hi).map(|y| (y, BTreeSet::new())).collect();
    let trial_year = |pmid: &str| -> Option<i32> {
        if !trials.contains(pmid) {
            return None;
        }
        corpus.get(pmid).and_then(|r| r.year).filter(|&y| window.contains(y))
    };
    for record in corpus.records() {
        let Some(y) = record.year else { continue };
        let Some(bucket) = out.get_mut(&y) else { continue };
        if spec.exclude_trials && trials.contains(&record.pmid) {
            continue;
        }
        let cites = record
            .cited_pmids
            .iter()
            .filter_map(|c| trial_year(c))
            .any(|ty| ty >= y - t && ty < y);
        if cites {
            bucket.insert(record.pmid.clone());
        }
    }
    out
}

pub const DEFAULT_TRUNK_JOURNALS: [&str; 2] = ["JAMA", "N Engl J Med"];

fn same_journal(a: &str, b: &str) -> bool {
    a.trim().eq_ignore_ascii_case(b.trim())
}

/// Citation tallies from trunk-journal records (published inside the window)
/// to the journals of the records they cite.
pub fn trunk_citation_tallies(corpus: &Corpus, trunk: &[String], window: YearWindow) -> BTreeMap<String, u64> {
    let mut tally: BTreeMap<String, u64> = BTreeMap::new();
    let mut trunk_records = 0usize;
    for r in corpus.records() {
        let j = r.journal.as_str();
        if !trunk.iter().any(|t| same_journal(t, j)) || !r.year.is_some_and(|y| window.contains(y)) {
            continue;
        }
        trunk_records += 1;
        for cited in &r.cited_pmids {
            if let Some(cj) = corpus.get(cited).map(|c| c.journal.trim()).filter(|j| !j.is_empty()) {
                *tally.entry(cj.trim().to_string()).or_default() += 1;
            }
        }
    }
    if trunk_records == 0 {
        log::warn!(
            "no records from trunk journals {trunk:?} inside {}..={}",
            window.lo,
            window.hi
        );
    }
    tally
}

/// Journals receiving at least `min_citations` trunk citations.
pub fn leading_journals(corpus: &Corpus, trunk: &[String], min_citations: u64, window: YearWindow) -> BTreeSet<String> {
    trunk_citation_tallies(corpus, trunk, window)
        .into_iter()
        .filter(|&(_, c)| c >= min_citations)
        .map(|(j, _)| j)
        .collect()
}

fn in_leading(record: &PublicationRecord, leading: &BTreeSet<String>) -> bool {
    leading.iter().any(|l| same_journal(l, &record.journal))
}

/// Citations to each sample record from leading-journal records published in
/// the `t` years after it (`[y + 1, y + t]`).
pub fn leading_citation_counts(
    sample: &BTreeSet<String>,
    corpus: &Corpus,
    leading: &BTreeSet<String>,
    t: u32,
) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for pmid in sample {
        let Some(y) = corpus.get(pmid).and_then(|r| r.year) else {
            continue;
        };
        let count = corpus
            .citing(pmid)
            .filter_map(|c| corpus.get(c))
            .filter(|c| c.year.is_some_and(|cy| cy > y && cy <= y + t as i32) && in_leading(c, leading))
            .count() as u64;
        out.insert(pmid.clone(), count);
    }
    out
}

/// Percentiles 10, 11, ..., 99 and 99.9.
pub fn default_quantile_grid() -> Vec<f64> {
    (10..=99).map(f64::from).chain([99.9]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountSummary {
    pub n: usize,
    pub zero_share: f64,
    /// Nearest-rank quantiles of the positive counts; absent if none.
    pub quantiles: Option<Vec<(f64, u64)>>,
}

/// Nearest-rank quantile of a sorted slice.
pub fn nearest_rank(sorted: &[u64], q: f64) -> u64 {
    // The epsilon keeps products like 0.7 * 10 from rounding up a rank.
    let rank = (q * sorted.len() as f64 / 100.0 - 1e-9).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn summarize_counts(counts: &[u64], grid: &[f64]) -> Option<CountSummary> {
    if counts.is_empty() {
        return None;
    }
    let mut positive: Vec<u64> = counts.iter().copied().filter(|&c| c > 0).collect();
    positive.sort_unstable();
    let zeros = counts.len() - positive.len();
    Some(CountSummary {
        n: counts.len(),
        zero_share: zeros as f64 / counts.len() as f64,
        quantiles: (!positive.is_empty()).then(|| grid.iter().map(|&q| (q, nearest_rank(&positive, q))).collect()),
    })
}

pub fn citation_quantiles(
    sample: &BTreeSet<String>,
    corpus: &Corpus,
    leading: &BTreeSet<String>,
    t: u32,
    grid: &[f64],
) -> BTreeMap<i32, CountSummary> {
    let counts = leading_citation_counts(sample, corpus, leading, t);
    let mut by_year: BTreeMap<i32, Vec<u64>> = BTreeMap::new();
    for (pmid, c) in counts {
        if let Some(y) = corpus.get(&pmid).and_then(|r| r.year) {
            by_year.entry(y).or_default().push(c);
        }
    }
    by_year
        .into_iter()
        .filter_map(|(y, cs)| summarize_counts(&cs, grid).map(|s| (y, s)))
        .collect()
}

pub fn is_funded(record: &PublicationRecord) -> bool {
    record.us_public_funding || !record.nih_grant_ids.is_empty()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FundingShares {
    pub n: usize,
    pub public_funding_share: f64,
    pub ever_cited_by_leading_share: f64,
    /// Share cited among funded records; absent when none are funded.
    pub cited_given_funded_share: Option<f64>,
}

pub fn funding_and_citation_shares(
    sample: &BTreeSet<String>,
    corpus: &Corpus,
    leading: &BTreeSet<String>,
    t: u32,
) -> BTreeMap<i32, FundingShares> {
    let counts = leading_citation_counts(sample, corpus, leading, t);
    // (n, funded, cited, funded and cited)
    let mut acc: BTreeMap<i32, [usize; 4]> = BTreeMap::new();
    for (pmid, c) in &counts {
        let r = corpus.get(pmid).expect("counted records resolve");
        let y = r.year.expect("counted records have a year");
        let a = acc.entry(y).or_default();
        let funded = is_funded(r);
        let cited = *c > 0;
        a[0] += 1;
        a[1] += funded as usize;
        a[2] += cited as usize;
        a[3] += (funded && cited) as usize;
    }
    acc.into_iter()
        .map(|(y, [n, funded, cited, both])| {
            (
                y,
                FundingShares {
                    n,
                    public_funding_share: funded as f64 / n as f64,
                    ever_cited_by_leading_share: cited as f64 / n as f64,
                    cited_given_funded_share: (funded > 0).then(|| both as f64 / funded as f64),
                },
            )
        })
        .collect()
}

pub const UNKNOWN_COUNTRY: &str = "unknown";
pub const REST_OF_WORLD: &str = "rest_of_world";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryOptions {
    /// Treat records whose first and last author countries differ as unknown.
    pub require_first_last_agreement: bool,
    /// Countries with fewer records than this in the later anchor year are
    /// pooled into rest-of-world in the growth table.
    pub floor: u64,
    pub from_year: i32,
    pub to_year: i32,
}

impl Default for CountryOptions {
    fn default() -> Self {
        Self {
            require_first_last_agreement: false,
            floor: 200,
            from_year: 2013,
            to_year: 2019,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthRow {
    pub country: String,
    pub from: u64,
    pub to: u64,
    pub abs_change: i64,
    /// Absent when the base count is zero.
    pub pct_change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryTrends {
    pub counts: BTreeMap<String, YearSeries>,
    pub growth: Vec<GrowthRow>,
}

pub fn record_country(record: &PublicationRecord, require_agreement: bool) -> String {
    let first = record.first_author_country().map(str::trim).filter(|c| !c.is_empty());
    match first {
        None => UNKNOWN_COUNTRY.to_string(),
        Some(c) if require_agreement => {
            let last = record.last_author_country().map(str::trim);
            if last.is_some_and(|l| l.eq_ignore_ascii_case(c)) {
                c.to_string()
            } else {
                UNKNOWN_COUNTRY.to_string()
            }
        }
        Some(c) => c.to_string(),
    }
}

pub fn growth_row(country: impl Into<String>, from: u64, to: u64) -> GrowthRow {
    GrowthRow {
        country: country.into(),
        from,
        to,
        abs_change: to as i64 - from as i64,
        pct_change: (from > 0).then(|| pct_change(from, to)),
    }
}

pub fn country_trends(
    sample: &BTreeSet<String>,
    corpus: &Corpus,
    opts: &CountryOptions,
) -> Result<CountryTrends, AnalyticsError> {
    if opts.from_year > opts.to_year {
        return Err(AnalyticsError::AnchorOrder {
            from: opts.from_year,
            to: opts.to_year,
        });
    }
    let mut counts: BTreeMap<String, YearSeries> = BTreeMap::new();
    for pmid in sample {
        let Some(r) = corpus.get(pmid) else { continue };
        let Some(y) = r.year else { continue };
        *counts
            .entry(record_country(r, opts.require_first_last_agreement))
            .or_default()
            .entry(y)
            .or_default() += 1;
    }
    let at = |s: &YearSeries, y: i32| s.get(&y).copied().unwrap_or(0);
    let mut growth = Vec::new();
    let (mut rest_from, mut rest_to, mut pooled) = (0, 0, false);
    for (country, series) in &counts {
        let (from, to) = (at(series, opts.from_year), at(series, opts.to_year));
        if country != UNKNOWN_COUNTRY && to < opts.floor {
            rest_from += from;
            rest_to += to;
            pooled = true;
        } else {
            growth.push(growth_row(country.clone(), from, to));
        }
    }
    if pooled {
        growth.push(growth_row(REST_OF_WORLD, rest_from, rest_to));
    }
    Ok(CountryTrends { counts, growth })
}

pub const META_ANALYSIS_PHRASES: [&str; 15] = [
    "meta-analysis",
    "metaanalysis",
    "metaanalyses",
    "systematic review",
    "systematic reviews",
    "systematically review",
    "systematic search",
    "review of published data",
    "literature review",
    "literature search",
    "search of databases",
    "review all literature",
    "reviewed all literature",
    "narrative review",
    "systemic review",
];

pub const LITERATURE_DATABASES: [&str; 6] = [
    "medline",
    "embase",
    "cinahl",
    "pubmed",
    "cochrane central register of controlled trials",
    "biomedcentral",
];

pub const META_ANALYSIS_PUBTYPES: [&str; 3] = ["meta-analysis", "systematic review", "review"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaMethod {
    Keyword,
    NlmTag,
}

/// Keyword rule: any listed phrase, or at least two listed databases, as a
/// case-insensitive substring of the abstract.
pub fn is_meta_analysis_text(text: &str) -> bool {
    let lower = text.to_lowercase();
    META_ANALYSIS_PHRASES.iter().any(|p| lower.contains(p))
        || LITERATURE_DATABASES.iter().filter(|d| lower.contains(*d)).count() >= 2
}

pub fn flag_meta_analyses<'a>(
    records: impl IntoIterator<Item = &'a PublicationRecord>,
    method: MetaMethod,
) -> BTreeSet<String> {
    records
        .into_iter()
        .filter(|r| match method {
            MetaMethod::Keyword => r.abstract_str().is_some_and(is_meta_analysis_text),
            MetaMethod::NlmTag => r.pubtypes.iter().any(|t| META_ANALYSIS_PUBTYPES.contains(&t.as_str())),
        })
        .map(|r| r.pmid.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryStudyRecord {
    pub nct_id: String,
    pub overall_status: String,
    pub study_type: String,
    #[serde(default, deserialize_with = "empty_as_none")]
    pub phase: Option<String>,
    #[serde(default, deserialize_with = "empty_as_none_i32")]
    pub completion_year: Option<i32>,
    #[serde(default, deserialize_with = "empty_as_none_i32")]
    pub posted_year: Option<i32>,
}

fn empty_as_none<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<String>, D::Error> {
    let s: Option<String> = Option::deserialize(d)?;
    Ok(s.map(|s| s.trim().to_string()).filter(|s| !s.is_empty()))
}

fn empty_as_none_i32<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<i32>, D::Error> {
    match empty_as_none(d)? {
        None => Ok(None),
        Some(s) => s.parse().map(Some).map_err(serde::de::Error::custom),
    }
}

const DROPPED_STATUSES: [&str; 3] = ["withdrawn", "suspended", "terminated"];

/// Cascade stage a study survives to: 1 = all, ..., 4 = has a phase.
pub fn audit_stage(r: &RegistryStudyRecord) -> usize {
    if DROPPED_STATUSES
        .iter()
        .any(|s| r.overall_status.trim().eq_ignore_ascii_case(s))
    {
        return 1;
    }
    if !r.study_type.trim().eq_ignore_ascii_case("interventional") {
        return 2;
    }
    match r.phase.as_deref().map(str::trim) {
        Some(p) if !p.is_empty() && !p.eq_ignore_ascii_case("not applicable") && !p.eq_ignore_ascii_case("n/a") => 4,
        _ => 3,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditSeries {
    /// Index k holds cascade stage k + 1.
    pub by_completion_year: [YearSeries; 4],
    pub by_posted_year: [YearSeries; 4],
}

impl AuditSeries {
    /// Series k ≥ series k + 1 at every year, on both axes.
    pub fn is_monotone(&self) -> bool {
        [&self.by_completion_year, &self.by_posted_year].iter().all(|axis| {
            axis.windows(2)
                .all(|w| w[1].iter().all(|(y, &c)| w[0].get(y).copied().unwrap_or(0) >= c))
        })
    }
}

pub fn registry_audit(records: &[RegistryStudyRecord]) -> AuditSeries {
    let mut out = AuditSeries {
        by_completion_year: Default::default(),
        by_posted_year: Default::default(),
    };
    for r in records {
        let stage = audit_stage(r);
        for (year, axis) in [
            (r.completion_year, &mut out.by_completion_year),
            (r.posted_year, &mut out.by_posted_year),
        ] {
            let Some(y) = year else { continue };
            for series in axis.iter_mut().take(stage) {
                *series.entry(y).or_default() += 1;
            }
        }
    }
    out
}

pub fn read_registry_csv<R: Read>(reader: R) -> Result<Vec<RegistryStudyRecord>, AnalyticsError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let rec: RegistryStudyRecord = row.map_err(|e| AnalyticsError::Registry {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Year-indexed TSV with one column per named series.
pub fn write_year_table<W: Write>(mut w: W, columns: &[(&str, &YearSeries)]) -> io::Result<()> {
    let years: BTreeSet<i32> = columns.iter().flat_map(|(_, s)| s.keys().copied()).collect();
    write!(w, "year")?;
    for (name, _) in columns {
        write!(w, "\t{name}")?;
    }
    writeln!(w)?;
    for y in years {
        write!(w, "{y}")?;
        for (_, s) in columns {
            write!(w, "\t{}", s.get(&y).copied().unwrap_or(0))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_audit_tsv<W: Write>(mut w: W, audit: &AuditSeries) -> io::Result<()> {
    let names = ["all", "active", "interventional", "phased"];
    let mut cols: Vec<(String, &YearSeries)> = Vec::new();
    for (axis, series) in [
        ("completion", &audit.by_completion_year),
        ("posted", &audit.by_posted_year),
    ] {
        for (name, s) in names.iter().zip(series.iter()) {
            cols.push((format!("{axis}_{name}"), s));
        }
    }
    let refs: Vec<(&str, &YearSeries)> = cols.iter().map(|(n, s)| (n.as_str(), *s)).collect();
    write_year_table(&mut w, &refs)
}

fn fmt_share(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// One row per year: n, zero share, then one column per grid quantile
/// (`NA` when the year has no cited record).
pub fn write_quantiles_tsv<W: Write>(mut w: W, summary: &BTreeMap<i32, CountSummary>, grid: &[f64]) -> io::Result<()> {
    write!(w, "year\tn\tzero_share")?;
    for q in grid {
        write!(w, "\tq{q}")?;
    }
    writeln!(w)?;
    for (y, s) in summary {
        write!(w, "{y}\t{}\t{}", s.n, s.zero_share)?;
        for (i, _) in grid.iter().enumerate() {
            let v = s.quantiles.as_ref().map(|qs| qs[i].1.to_string());
            write!(w, "\t{}", v.as_deref().unwrap_or("NA"))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_funding_tsv<W: Write>(mut w: W, shares: &BTreeMap<i32, FundingShares>) -> io::Result<()> {
    writeln!(
        w,
        "year\tn\tpublic_funding_share\tever_cited_by_leading_share\tcited_given_funded_share"
    )?;
    for (y, s) in shares {
        writeln!(
            w,
            "{y}\t{}\t{}\t{}\t{}",
            s.n,
            s.public_funding_share,
            s.ever_cited_by_leading_share,
            fmt_share(s.cited_given_funded_share)
        )?;
    }
    Ok(())
}

/// Year-indexed counts with one column per country.
pub fn write_country_counts_tsv<W: Write>(w: W, trends: &CountryTrends) -> io::Result<()> {
    let cols: Vec<(&str, &YearSeries)> = trends.counts.iter().map(|(c, s)| (c.as_str(), s)).collect();
    write_year_table(w, &cols)
}

pub fn write_growth_tsv<W: Write>(mut w: W, trends: &CountryTrends) -> io::Result<()> {
    writeln!(w, "country\tfrom\tto\tabs_change\tpct_change")?;
    for g in &trends.growth {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            g.country,
            g.from,
            g.to,
            g.abs_change,
            fmt_share(g.pct_change)
        )?;
    }
    Ok(())
}
