//! Publication records, MEDLINE XML ingestion and the JSONL interchange format.
//!
//! A [`Corpus`] is immutable once built. It keeps records keyed by PMID and a
//! reverse-citation index (cited PMID -> citing PMIDs) that is the exact
//! transpose of every record's `cited_pmids`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use quick_xml::events::Event;
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_YEAR: i32 = 1900;
pub const MAX_YEAR: i32 = 2100;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed XML at byte {offset}: {message}")]
    Xml { offset: u64, message: String },
    #[error("duplicate pmid {pmid} on lines {first_line} and {second_line}")]
    DuplicatePmid {
        pmid: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("duplicate pmid {0}")]
    DuplicateRecord(String),
    #[error("invalid record {pmid:?}: {reason}")]
    InvalidRecord { pmid: String, reason: String },
    #[error("invalid year window: {lo} > {hi}")]
    InvalidWindow { lo: i32, hi: i32 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One indexed publication.
///
/// Field names are the JSONL interchange keys; `abstract` is a Rust keyword so
/// the field is `abstract_text` in code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PublicationRecord {
    pub pmid: String,
    #[serde(default)]
    pub year: Option<i32>,
    #[serde(default)]
    pub title: String,
    #[serde(rename = "abstract", default)]
    pub abstract_text: Option<String>,
    #[serde(default)]
    pub journal: String,
    #[serde(default)]
    pub pubtypes: BTreeSet<String>,
    #[serde(default)]
    pub us_public_funding: bool,
    #[serde(default)]
    pub nih_grant_ids: Vec<String>,
    /// Byline order, first author first. `None` where no country resolved.
    #[serde(default)]
    pub author_countries: Vec<Option<String>>,
    /// Absent citation data is stored as an empty list.
    #[serde(default)]
    pub cited_pmids: Vec<String>,
}

impl PublicationRecord {
    pub fn new(pmid: impl Into<String>) -> Self {
        Self {
            pmid: pmid.into(),
            year: None,
            title: String::new(),
            abstract_text: None,
            journal: String::new(),
            pubtypes: BTreeSet::new(),
            us_public_funding: false,
            nih_grant_ids: Vec::new(),
            author_countries: Vec::new(),
            cited_pmids: Vec::new(),
        }
    }

    /// Abstract text when present and non-blank. Only these records are
    /// eligible for classification.
    pub fn abstract_str(&self) -> Option<&str> {
        self.abstract_text.as_deref().filter(|text| !text.trim().is_empty())
    }

    pub fn has_abstract(&self) -> bool {
        self.abstract_str().is_some()
    }

    /// Record-level country: the first-listed author's country.
    pub fn first_author_country(&self) -> Option<&str> {
        self.author_countries.first().and_then(|c| c.as_deref())
    }

    pub fn last_author_country(&self) -> Option<&str> {
        self.author_countries.last().and_then(|c| c.as_deref())
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |reason: &str| CorpusError::InvalidRecord {
            pmid: self.pmid.clone(),
            reason: reason.to_string(),
        };
        if self.pmid.trim().is_empty() {
            return Err(invalid("pmid is empty"));
        }
        if let Some(year) = self.year {
            if !(MIN_YEAR..=MAX_YEAR).contains(&year) {
                return Err(invalid(&format!("year {year} outside [{MIN_YEAR}, {MAX_YEAR}]")));
            }
        }
        if self.cited_pmids.iter().any(|c| c == &self.pmid) {
            return Err(invalid("record cites itself"));
        }
        Ok(())
    }
}

/// Inclusive range of publication years.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct YearWindow {
    pub lo: i32,
    pub hi: i32,
}

impl YearWindow {
    pub fn new(lo: i32, hi: i32) -> Result<Self, CorpusError> {
        if lo > hi {
            return Err(CorpusError::InvalidWindow { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, year: i32) -> bool {
        (self.lo..=self.hi).contains(&year)
    }

    pub fn years(&self) -> impl Iterator<Item = i32> {
        self.lo..=self.hi
    }
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    records: BTreeMap<String, PublicationRecord>,
    reverse: BTreeMap<String, BTreeSet<String>>,
}

impl Corpus {
    pub fn from_records(records: impl IntoIterator<Item = PublicationRecord>) -> Result<Self, CorpusError> {
        let mut map = BTreeMap::new();
        for record in records {
            record.validate()?;
            if map.contains_key(&record.pmid) {
                return Err(CorpusError::DuplicateRecord(record.pmid));
            }
            map.insert(record.pmid.clone(), record);
        }
        Ok(Self::index(map))
    }

    fn index(records: BTreeMap<String, PublicationRecord>) -> Self {
        let mut reverse: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for record in records.values() {
            for cited in &record.cited_pmids {
                reverse.entry(cited.clone()).or_default().insert(record.pmid.clone());
            }
        }
        Self { records, reverse }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, pmid: &str) -> Option<&PublicationRecord> {
        self.records.get(pmid)
    }

    pub fn contains(&self, pmid: &str) -> bool {
        self.records.contains_key(pmid)
    }

    /// Records in ascending PMID order.
    pub fn records(&self) -> impl Iterator<Item = &PublicationRecord> {
        self.records.values()
    }

    pub fn pmids(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    /// PMIDs of records citing `pmid`. The cited record need not be stored.
    pub fn citing(&self, pmid: &str) -> impl Iterator<Item = &str> {
        self.reverse
            .get(pmid)
            .into_iter()
            .flat_map(|set| set.iter().map(String::as_str))
    }

    pub fn reverse_citations(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.reverse
    }

    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> io::Result<()> {
        for record in self.records.values() {
            serde_json::to_writer(&mut writer, record)?;
            writer.write_all(b"\n")?;
        }
        writer.flush()
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let file = File::create(path)?;
        self.write_jsonl(io::BufWriter::new(file))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedLine {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug)]
pub struct LoadReport {
    pub corpus: Corpus,
    pub rejected: Vec<RejectedLine>,
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<LoadReport, CorpusError> {
    let file = File::open(path)?;
    read_jsonl(BufReader::new(file))
}

/// Reads one record per line. Schema violations reject the line and loading
/// continues; a duplicate PMID aborts the load.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<LoadReport, CorpusError> {
    let mut records = BTreeMap::new();
    let mut first_seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut rejected = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PublicationRecord = match serde_json::from_str(&line) {
            Ok(record) => record,
            Err(err) => {
                rejected.push(RejectedLine {
                    line: line_no,
                    reason: err.to_string(),
                });
                continue;
            }
        };
        if let Err(err) = record.validate() {
            rejected.push(RejectedLine {
                line: line_no,
                reason: err.to_string(),
            });
            continue;
        }
        if let Some(&first_line) = first_seen.get(&record.pmid) {
            return Err(CorpusError::DuplicatePmid {
                pmid: record.pmid,
                first_line,
                second_line: line_no,
            });
        }
        first_seen.insert(record.pmid.clone(), line_no);
        records.insert(record.pmid.clone(), record);
    }

    for rejection in &rejected {
        log::warn!("line {} rejected: {}", rejection.line, rejection.reason);
    }
    Ok(LoadReport {
        corpus: Corpus::index(records),
        rejected,
    })
}

/// Records of a corpus whose publication year falls inside a window.
#[derive(Debug, Clone)]
pub struct CorpusView<'a> {
    corpus: &'a Corpus,
    window: YearWindow,
    pmids: Vec<&'a str>,
}

impl<'a> CorpusView<'a> {
    pub fn corpus(&self) -> &'a Corpus {
        self.corpus
    }

    pub fn window(&self) -> YearWindow {
        self.window
    }

    pub fn len(&self) -> usize {
        self.pmids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pmids.is_empty()
    }

    pub fn pmids(&self) -> &[&'a str] {
        &self.pmids
    }

    pub fn records(&self) -> impl Iterator<Item = &'a PublicationRecord> + '_ {
        let corpus = self.corpus;
        self.pmids.iter().filter_map(move |pmid| corpus.get(pmid))
    }
}

/// Records with a present year in `[lo, hi]`; records missing a year are dropped.
pub fn apply_year_window(corpus: &Corpus, lo: i32, hi: i32) -> Result<CorpusView<'_>, CorpusError> {
    let window = YearWindow::new(lo, hi)?;
    Ok(window_view(corpus, window))
}

pub fn window_view(corpus: &Corpus, window: YearWindow) -> CorpusView<'_> {
    let pmids = corpus
        .records()
        .filter(|r| r.year.is_some_and(|y| window.contains(y)))
        .map(|r| r.pmid.as_str())
        .collect();
    CorpusView { corpus, window, pmids }
}

#[derive(Debug, Default)]
pub struct MedlineParse {
    pub records: Vec<PublicationRecord>,
    pub skipped_without_pmid: usize,
}

#[derive(Default)]
struct ArticleBuilder {
    pmid: Option<String>,
    title: String,
    abstract_parts: Vec<String>,
    year_text: Option<String>,
    journal: String,
    pubtypes: Vec<String>,
}

impl ArticleBuilder {
    fn finish(self) -> Option<PublicationRecord> {
        let pmid = self.pmid.map(|p| p.trim().to_string()).filter(|p| !p.is_empty())?;
        let abstract_text = self
            .abstract_parts
            .iter()
            .map(|part| part.trim())
            .filter(|part| !part.is_empty())
            .collect::<Vec<_>>()
            .join(" ");
        let year = self
            .year_text
            .and_then(|y| y.trim().parse::<i32>().ok())
            .filter(|y| (MIN_YEAR..=MAX_YEAR).contains(y));
        let mut record = PublicationRecord::new(pmid);
        record.year = year;
        record.title = self.title.trim().to_string();
        record.abstract_text = (!abstract_text.is_empty()).then_some(abstract_text);
        record.journal = self.journal.trim().to_string();
        record.pubtypes = self
            .pubtypes
            .iter()
            .map(|t| t.trim().to_lowercase())
            .filter(|t| !t.is_empty())
            .collect();
        Some(record)
    }
}

/// Which field a text node inside a `PubmedArticle` feeds.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Field {
    Pmid,
    Title,
    AbstractText,
    Year,
    Journal,
    PublicationType,
}

fn field_for(path: &[String]) -> Option<Field> {
    let path: Vec<&str> = path.iter().map(String::as_str).collect();
    match path.as_slice() {
        ["MedlineCitation", "PMID"] => Some(Field::Pmid),
        ["MedlineCitation", "Article", "ArticleTitle", ..] => Some(Field::Title),
        ["MedlineCitation", "Article", "Abstract", "AbstractText", ..] => Some(Field::AbstractText),
        ["MedlineCitation", "Article", "Journal", "JournalIssue", "PubDate", "Year"] => Some(Field::Year),
        ["MedlineCitation", "MedlineJournalInfo", "MedlineTA"] => Some(Field::Journal),
        ["MedlineCitation", "Article", "PublicationTypeList", "PublicationType"] => Some(Field::PublicationType),
        _ => None,
    }
}

/// Parses the `PubmedArticle` subset this pipeline consumes.
///
/// Articles without a PMID are skipped and counted. Publication types are
/// lowercased. Multiple `AbstractText` sections are joined with a space.
pub fn parse_medline_xml(xml: &[u8]) -> Result<MedlineParse, CorpusError> {
    let mut reader = Reader::from_reader(xml);
    let mut buf = Vec::new();
    let mut stack: Vec<String> = Vec::new();
    // Depth of the open PubmedArticle element, if inside one.
    let mut article_depth: Option<usize> = None;
    let mut builder = ArticleBuilder::default();
    let mut current_field: Option<Field> = None;
    let mut out = MedlineParse::default();

    let xml_error = |reader: &Reader<&[u8]>, message: String| CorpusError::Xml {
        offset: reader.error_position(),
        message,
    };

    loop {
        let event = reader
            .read_event_into(&mut buf)
            .map_err(|e| xml_error(&reader, e.to_string()))?;
        match event {
            Event::Start(start) => {
                let name = String::from_utf8_lossy(start.name().as_ref()).into_owned();
                stack.push(name);
                if article_depth.is_none() && stack.last().map(String::as_str) == Some("PubmedArticle") {
                    article_depth = Some(stack.len());
                    builder = ArticleBuilder::default();
                }
                if let Some(depth) = article_depth {
                    current_field = field_for(&stack[depth..]);
                    if current_field == Some(Field::AbstractText) && stack.len() == depth + 4 {
                        builder.abstract_parts.push(String::new());
                    }
                    if current_field == Some(Field::PublicationType) {
                        builder.pubtypes.push(String::new());
                    }
                }
            }
            Event::End(_) => {
                let closed = stack.pop();
                if let Some(depth) = article_depth {
                    if stack.len() < depth {
                        debug_assert_eq!(closed.as_deref(), Some("PubmedArticle"));
                        match std::mem::take(&mut builder).finish() {
                            Some(record) => out.records.push(record),
                            None => out.skipped_without_pmid += 1,
                        }
                        article_depth = None;
                        current_field = None;
                    } else {
                        current_field = field_for(&stack[depth..]);
                    }
                }
            }
            Event::Empty(empty) => {
                if article_depth.is_none() && empty.name().as_ref() == b"PubmedArticle" {
                    out.skipped_without_pmid += 1;
                }
            }
            Event::Text(text) => {
                if let Some(field) = current_field {
                    let text = text.unescape().map_err(|e| xml_error(&reader, e.to_string()))?;
                    append_field(&mut builder, field, &text);
                }
            }
            Event::CData(data) => {
                if let Some(field) = current_field {
                    let text = String::from_utf8_lossy(&data.into_inner()).into_owned();
                    append_field(&mut builder, field, &text);
                }
            }
            Event::Eof => break,
            _ => {}
        }
        buf.clear();
    }

    if let Some(open) = stack.last() {
        return Err(CorpusError::Xml {
            offset: reader.buffer_position(),
            message: format!("unexpected end of input inside <{open}>"),
        });
    }
    if out.skipped_without_pmid > 0 {
        log::warn!(
            "skipped {} PubmedArticle element(s) without a PMID",
            out.skipped_without_pmid
        );
    }
    Ok(out)
}

fn append_field(builder: &mut ArticleBuilder, field: Field, text: &str) {
    match field {
        Field::Pmid => builder.pmid.get_or_insert_with(String::new).push_str(text),
        Field::Title => builder.title.push_str(text),
        Field::AbstractText => match builder.abstract_parts.last_mut() {
            Some(part) => part.push_str(text),
            None => builder.abstract_parts.push(text.to_string()),
        },
        Field::Year => builder.year_text.get_or_insert_with(String::new).push_str(text),
        Field::Journal => builder.journal.push_str(text),
        Field::PublicationType => match builder.pubtypes.last_mut() {
            Some(t) => t.push_str(text),
            None => builder.pubtypes.push(text.to_string()),
        },
    }
}
