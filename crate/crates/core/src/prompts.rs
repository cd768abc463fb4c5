//! Prompt templates, completion parsing, prompt evaluation and error tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PublicationRecord;
use crate::eval::Confusion;
use crate::labels::{ExclusionReason, LabelRecord, Verdict};

pub const PLACEHOLDER: &str = "{abstract}";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {id}: placeholder {PLACEHOLDER} appears {count} times, expected exactly once")]
    Placeholder { id: String, count: usize },
    #[error("template id {0:?} does not name a family (expected e.g. \"1.2\")")]
    BadId(String),
    #[error("duplicate template id {0}")]
    DuplicateId(String),
    #[error("unknown template id {0}")]
    UnknownId(String),
    #[error("record {0} has no abstract")]
    MissingAbstract(String),
    #[error("completion set and gold labels share no pmids")]
    EmptyIntersection,
    #[error("duplicate completion for pmid {0}")]
    DuplicateCompletion(String),
    #[error("synonym map: {0}")]
    Synonyms(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Completion shape requested by a template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum PromptFamily {
    /// TRUE / FALSE.
    TrueFalse = 1,
    /// TRUE or an exclusion category name.
    Categorize = 2,
    /// TRUE or a free-text explanation.
    Explain = 3,
}

impl TryFrom<u8> for PromptFamily {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(PromptFamily::TrueFalse),
            2 => Ok(PromptFamily::Categorize),
            3 => Ok(PromptFamily::Explain),
            _ => Err(format!("prompt family must be 1, 2 or 3, got {v}")),
        }
    }
}

impl From<PromptFamily> for u8 {
    fn from(f: PromptFamily) -> u8 {
        f as u8
    }
}

impl fmt::Display for PromptFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub family: PromptFamily,
    pub body: String,
    pub version_notes: String,
}

impl PromptTemplate {
    pub fn new(
        id: impl Into<String>,
        body: impl Into<String>,
        version_notes: impl Into<String>,
    ) -> Result<Self, PromptError> {
        let id = id.into();
        let family = id
            .split('.')
            .next()
            .and_then(|major| major.parse::<u8>().ok())
            .and_then(|major| PromptFamily::try_from(major).ok())
            .ok_or_else(|| PromptError::BadId(id.clone()))?;
        let body = body.into();
        let count = body.matches(PLACEHOLDER).count();
        if count != 1 {
            return Err(PromptError::Placeholder { id, count });
        }
        Ok(Self {
            id,
            family,
            body,
            version_notes: version_notes.into(),
        })
    }

    /// Parses an asset file: leading `## ` lines are version notes, the rest
    /// is the body (trailing newline trimmed).
    pub fn from_asset(id: impl Into<String>, text: &str) -> Result<Self, PromptError> {
        let mut notes = Vec::new();
        let mut rest = text;
        while let Some(line) = rest.strip_prefix("## ") {
            let (note, tail) = line.split_once('\n').unwrap_or((line, ""));
            notes.push(note.trim_end());
            rest = tail;
        }
        Self::new(id, rest.trim_end_matches('\n'), notes.join("\n"))
    }

    /// Digest-stable text that identifies the template content.
    pub fn content(&self) -> &str {
        &self.body
    }

    /// Substitutes the abstract verbatim; braces inside it are not re-read.
    pub fn render_text(&self, abstract_text: &str) -> String {
        let (head, tail) = self.body.split_once(PLACEHOLDER).expect("validated template");
        let mut out = String::with_capacity(head.len() + abstract_text.len() + tail.len());
        out.push_str(head);
        out.push_str(abstract_text);
        out.push_str(tail);
        out
    }
}

pub fn render_prompt(template: &PromptTemplate, record: &PublicationRecord) -> Result<String, PromptError> {
    let text = record
        .abstract_str()
        .ok_or_else(|| PromptError::MissingAbstract(record.pmid.clone()))?;
    Ok(template.render_text(text))
}

const BUILTIN_ASSETS: [(&str, &str); 8] = [
    ("1.0", include_str!("../assets/prompts/prompt_1.0.txt")),
    ("1.1", include_str!("../assets/prompts/prompt_1.1.txt")),
    ("1.2", include_str!("../assets/prompts/prompt_1.2.txt")),
    ("1.3", include_str!("../assets/prompts/prompt_1.3.txt")),
    ("2.0", include_str!("../assets/prompts/prompt_2.0.txt")),
    ("2.1", include_str!("../assets/prompts/prompt_2.1.txt")),
    ("3.0", include_str!("../assets/prompts/prompt_3.0.txt")),
    ("3.1", include_str!("../assets/prompts/prompt_3.1.txt")),
];

/// Template set keyed by id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptLibrary {
    templates: BTreeMap<String, PromptTemplate>,
}

impl PromptLibrary {
    pub fn builtin() -> Self {
        let mut lib = Self::default();
        for (id, text) in BUILTIN_ASSETS {
            lib.insert(PromptTemplate::from_asset(id, text).expect("builtin template is valid"))
                .expect("builtin ids are unique");
        }
        lib
    }

    /// Loads every `prompt_<id>.txt` in a directory.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        let mut lib = Self::default();
        for entry in entries {
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some(id) = name.strip_prefix("prompt_").and_then(|s| s.strip_suffix(".txt")) else {
                continue;
            };
            let text = fs::read_to_string(entry.path())?;
            lib.insert(PromptTemplate::from_asset(id, &text)?)?;
        }
        Ok(lib)
    }

    pub fn insert(&mut self, template: PromptTemplate) -> Result<(), PromptError> {
        if self.templates.contains_key(&template.id) {
            return Err(PromptError::DuplicateId(template.id));
        }
        self.templates.insert(template.id.clone(), template);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .get(id)
            .ok_or_else(|| PromptError::UnknownId(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

/// Normalized completion text → exclusion category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynonymMap {
    entries: BTreeMap<String, ExclusionReason>,
}

const BUILTIN_SYNONYMS: &str = include_str!("../assets/category_synonyms.toml");

impl Default for SynonymMap {
    fn default() -> Self {
        Self::from_toml(BUILTIN_SYNONYMS).expect("builtin synonym map is valid")
    }
}

impl SynonymMap {
    /// Category names (`no_drug`, "No Drug", "no drug") always resolve; the
    /// TOML adds synonyms as `reason = ["phrase", ...]`.
    pub fn from_toml(text: &str) -> Result<Self, PromptError> {
        let table: BTreeMap<String, Vec<String>> =
            toml::from_str(text).map_err(|e| PromptError::Synonyms(e.to_string()))?;
        let mut entries = BTreeMap::new();
        for reason in ExclusionReason::ALL {
            entries.insert(normalize(reason.as_str()), reason);
            entries.insert(normalize(&reason.as_str().replace('_', " ")), reason);
            entries.insert(normalize(reason.display_name()), reason);
        }
        for (key, phrases) in table {
            let reason: ExclusionReason = key.parse().map_err(PromptError::Synonyms)?;
            for phrase in phrases {
                let norm = normalize(&phrase);
                if norm.is_empty() {
                    return Err(PromptError::Synonyms(format!("empty synonym under {key}")));
                }
                if let Some(prev) = entries.insert(norm.clone(), reason) {
                    if prev != reason {
                        return Err(PromptError::Synonyms(format!(
                            "{phrase:?} maps to both {prev} and {reason}"
                        )));
                    }
                }
            }
        }
        Ok(Self { entries })
    }

    /// Exact match first, then the longest synonym that prefixes the text at a
    /// word boundary ("Animal study of ..." → animal).
    pub fn lookup(&self, text: &str) -> Option<ExclusionReason> {
        let norm = normalize(text);
        if let Some(&r) = self.entries.get(&norm) {
            return Some(r);
        }
        self.entries
            .iter()
            .filter(|(k, _)| {
                norm.strip_prefix(k.as_str())
                    .is_some_and(|rest| rest.starts_with(|c: char| !c.is_alphanumeric()))
            })
            .max_by_key(|(k, _)| k.len())
            .map(|(_, &r)| r)
    }
}

fn normalize(text: &str) -> String {
    let lower = text.trim().to_lowercase();
    lower
        .trim_matches(|c: char| !c.is_alphanumeric())
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn leading_token(text: &str) -> String {
    text.split_whitespace()
        .next()
        .unwrap_or("")
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsedVerdict {
    Include,
    Exclude,
    Unparseable,
}

impl ParsedVerdict {
    /// Metric view: unparseable counts as exclude.
    pub fn as_verdict(self) -> Verdict {
        match self {
            ParsedVerdict::Include => Verdict::Include,
            _ => Verdict::Exclude,
        }
    }

    pub fn is_parsed(self) -> bool {
        self != ParsedVerdict::Unparseable
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedCompletion {
    pub verdict: ParsedVerdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<ExclusionReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    pub raw: String,
}

impl ParsedCompletion {
    fn bare(verdict: ParsedVerdict, raw: &str) -> Self {
        Self {
            verdict,
            category: None,
            explanation: None,
            raw: raw.to_string(),
        }
    }

    /// Same parse outcome, ignoring the raw text.
    pub fn same_outcome(&self, other: &Self) -> bool {
        self.verdict == other.verdict && self.category == other.category && self.explanation == other.explanation
    }
}

/// Total: never fails; text that fits no rule is `Unparseable`.
pub fn parse_completion(family: PromptFamily, raw: &str, synonyms: &SynonymMap) -> ParsedCompletion {
    let token = leading_token(raw);
    if token == "true" {
        return ParsedCompletion::bare(ParsedVerdict::Include, raw);
    }
    match family {
        PromptFamily::TrueFalse => {
            let verdict = if token == "false" {
                ParsedVerdict::Exclude
            } else {
                ParsedVerdict::Unparseable
            };
            ParsedCompletion::bare(verdict, raw)
        }
        PromptFamily::Categorize => match synonyms.lookup(raw) {
            Some(category) => ParsedCompletion {
                category: Some(category),
                ..ParsedCompletion::bare(ParsedVerdict::Exclude, raw)
            },
            None => ParsedCompletion::bare(ParsedVerdict::Unparseable, raw),
        },
        PromptFamily::Explain => {
            let text = raw.trim();
            if text.is_empty() {
                ParsedCompletion::bare(ParsedVerdict::Unparseable, raw)
            } else {
                ParsedCompletion {
                    explanation: Some(text.to_string()),
                    ..ParsedCompletion::bare(ParsedVerdict::Exclude, raw)
                }
            }
        }
    }
}

/// Canonical completion text for a parse outcome; parsing it again yields the
/// same outcome.
pub fn render_verdict(family: PromptFamily, parsed: &ParsedCompletion) -> String {
    match (parsed.verdict, family) {
        (ParsedVerdict::Include, _) => "TRUE".into(),
        (ParsedVerdict::Exclude, PromptFamily::TrueFalse) => "FALSE".into(),
        (ParsedVerdict::Exclude, PromptFamily::Categorize) => parsed
            .category
            .map(|c| c.display_name().to_string())
            .unwrap_or_else(|| parsed.raw.clone()),
        (ParsedVerdict::Exclude, PromptFamily::Explain) => {
            parsed.explanation.clone().unwrap_or_else(|| parsed.raw.clone())
        }
        (ParsedVerdict::Unparseable, _) => parsed.raw.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEval {
    pub counts: Confusion,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    /// Shared pmids whose completion was unparseable (scored as exclude).
    pub unparseable: usize,
}

fn index_completions(
    completions: &[(String, ParsedCompletion)],
) -> Result<BTreeMap<&str, &ParsedCompletion>, PromptError> {
    let mut map = BTreeMap::new();
    for (pmid, parsed) in completions {
        if map.insert(pmid.as_str(), parsed).is_some() {
            return Err(PromptError::DuplicateCompletion(pmid.clone()));
        }
    }
    Ok(map)
}

/// TPR and FPR of parsed completions against gold verdicts over the shared pmids.
pub fn prompt_eval(
    completions: &[(String, ParsedCompletion)],
    gold: &BTreeMap<String, Verdict>,
) -> Result<PromptEval, PromptError> {
    let by_pmid = index_completions(completions)?;
    let mut counts = Confusion::default();
    let mut unparseable = 0;
    for (pmid, parsed) in &by_pmid {
        let Some(truth) = gold.get(*pmid) else {
            continue;
        };
        if !parsed.verdict.is_parsed() {
            unparseable += 1;
        }
        counts.add(parsed.verdict.as_verdict().is_include(), truth.is_include());
    }
    if counts.n() == 0 {
        return Err(PromptError::EmptyIntersection);
    }
    Ok(PromptEval {
        counts,
        tpr: counts.tpr(),
        fpr: counts.fpr(),
        unparseable,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorType {
    /// False positive, bucketed by the gold exclusion reason.
    Excluded(ExclusionReason),
    /// False negative.
    MissedTrial,
}

impl fmt::Display for ErrorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ErrorType::Excluded(r) => f.write_str(r.display_name()),
            ErrorType::MissedTrial => f.write_str("missed trial"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorTableRow {
    pub model_id: String,
    pub prompt_id: String,
    pub error_type: ErrorType,
    /// Left blank for manual annotation.
    pub sub_type: String,
    pub count: u64,
}

/// Groups disagreements with the gold labels. Rows are ordered by error type
/// and only non-zero counts are emitted.
pub fn error_table(
    model_id: &str,
    prompt_id: &str,
    completions: &[(String, ParsedCompletion)],
    gold: &BTreeMap<String, LabelRecord>,
) -> Result<Vec<ErrorTableRow>, PromptError> {
    let by_pmid = index_completions(completions)?;
    let mut groups: BTreeMap<ErrorType, u64> = BTreeMap::new();
    for (pmid, parsed) in by_pmid {
        let Some(label) = gold.get(pmid) else {
            continue;
        };
        let predicted = parsed.verdict.as_verdict();
        let kind = match (predicted, label.verdict) {
            (Verdict::Include, Verdict::Exclude) => ErrorType::Excluded(label.reason.unwrap_or(ExclusionReason::Other)),
            (Verdict::Exclude, Verdict::Include) => ErrorType::MissedTrial,
            _ => continue,
        };
        *groups.entry(kind).or_default() += 1;
    }
    Ok(groups
        .into_iter()
        .map(|(error_type, count)| ErrorTableRow {
            model_id: model_id.to_string(),
            prompt_id: prompt_id.to_string(),
            error_type,
            sub_type: String::new(),
            count,
        })
        .collect())
}

pub fn write_error_table_tsv<W: Write>(mut w: W, rows: &[ErrorTableRow]) -> io::Result<()> {
    writeln!(w, "model_id\tprompt_id\terror_type\tsub_type\tcount")?;
    for r in rows {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            r.model_id, r.prompt_id, r.error_type, r.sub_type, r.count
        )?;
    }
    Ok(())
}

/// Pmids whose completions disagree with gold, for manual inspection.
pub fn disagreements(completions: &[(String, ParsedCompletion)], gold: &BTreeMap<String, Verdict>) -> BTreeSet<String> {
    completions
        .iter()
        .filter(|(pmid, parsed)| gold.get(pmid).is_some_and(|g| *g != parsed.verdict.as_verdict()))
        .map(|(pmid, _)| pmid.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn syn() -> SynonymMap {
        SynonymMap::default()
    }

    #[test]
    fn renders_verbatim() {
        let t = PromptTemplate::new("1.0", "Q: {abstract} A:", "").unwrap();
        assert_eq!(t.render_text("X."), "Q: X. A:");
        assert_eq!(t.render_text("{abstract} {x}"), "Q: {abstract} {x} A:");
    }

    #[test]
    fn missing_abstract_and_bad_templates() {
        let t = PromptTemplate::new("1.0", "Q: {abstract}", "").unwrap();
        let r = PublicationRecord::new("9");
        assert!(matches!(render_prompt(&t, &r), Err(PromptError::MissingAbstract(_))));
        assert!(matches!(
            PromptTemplate::new("1.0", "no placeholder", ""),
            Err(PromptError::Placeholder { count: 0, .. })
        ));
        assert!(matches!(
            PromptTemplate::new("1.0", "{abstract}{abstract}", ""),
            Err(PromptError::Placeholder { count: 2, .. })
        ));
        assert!(matches!(
            PromptTemplate::new("7.0", "{abstract}", ""),
            Err(PromptError::BadId(_))
        ));
    }

    #[test]
    fn rendered_length_arithmetic() {
        let t = PromptTemplate::new("1.2", "Header text.\n\nAbstract: {abstract}\nAnswer:", "").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let len = rng.random_range(0..400);
            let text: String = (0..len).map(|_| rng.random_range(b' '..=b'~') as char).collect();
            assert_eq!(
                t.render_text(&text).len(),
                t.body.len() - PLACEHOLDER.len() + text.len()
            );
        }
    }

    #[test]
    fn builtin_library_loads() {
        let lib = PromptLibrary::builtin();
        assert_eq!(
            lib.ids().collect::<Vec<_>>(),
            ["1.0", "1.1", "1.2", "1.3", "2.0", "2.1", "3.0", "3.1"]
        );
        for id in lib.ids() {
            let t = lib.get(id).unwrap();
            assert!(!t.version_notes.is_empty());
            assert!(!t.body.starts_with("##"));
        }
        assert_eq!(lib.get("2.1").unwrap().family, PromptFamily::Categorize);
    }

    #[test]
    fn loads_directory() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("prompt_1.9.txt"), "## note\nBody {abstract}\n").unwrap();
        fs::write(dir.path().join("readme.md"), "ignored").unwrap();
        let lib = PromptLibrary::load_dir(dir.path()).unwrap();
        let t = lib.get("1.9").unwrap();
        assert_eq!(t.version_notes, "note");
        assert_eq!(t.body, "Body {abstract}");
    }

    #[test]
    fn family_one_normalization() {
        let p = parse_completion(PromptFamily::TrueFalse, " true.\n", &syn());
        assert_eq!(p.verdict, ParsedVerdict::Include);
        assert_eq!(
            parse_completion(PromptFamily::TrueFalse, "FALSE", &syn()).verdict,
            ParsedVerdict::Exclude
        );
        assert_eq!(
            parse_completion(PromptFamily::TrueFalse, "maybe", &syn()).verdict,
            ParsedVerdict::Unparseable
        );
        assert_eq!(
            parse_completion(PromptFamily::TrueFalse, "", &syn()).verdict,
            ParsedVerdict::Unparseable
        );
    }

    #[test]
    fn family_two_categories() {
        let p = parse_completion(PromptFamily::Categorize, "Animal", &syn());
        assert_eq!(
            (p.verdict, p.category),
            (ParsedVerdict::Exclude, Some(ExclusionReason::Animal))
        );
        let p = parse_completion(PromptFamily::Categorize, "meta analysis.", &syn());
        assert_eq!(p.category, Some(ExclusionReason::MetaAnalysisOrReview));
        let p = parse_completion(PromptFamily::Categorize, "No Human Subjects - cell lines only", &syn());
        assert_eq!(p.category, Some(ExclusionReason::NoHumanSubjects));
        let p = parse_completion(PromptFamily::Categorize, "banana", &syn());
        assert_eq!(p.verdict, ParsedVerdict::Unparseable);
        assert_eq!(p.category, None);
    }

    #[test]
    fn family_three_explanations() {
        let p = parse_completion(PromptFamily::Explain, "This is a meta-analysis of trials.", &syn());
        assert_eq!(p.verdict, ParsedVerdict::Exclude);
        assert_eq!(p.explanation.as_deref(), Some("This is a meta-analysis of trials."));
        assert_eq!(
            parse_completion(PromptFamily::Explain, "TRUE", &syn()).verdict,
            ParsedVerdict::Include
        );
        assert_eq!(
            parse_completion(PromptFamily::Explain, "  ", &syn()).verdict,
            ParsedVerdict::Unparseable
        );
    }

    #[test]
    fn synonym_conflicts_rejected() {
        assert!(SynonymMap::from_toml("animal = [\"x\"]\nother = [\"x\"]").is_err());
        assert!(SynonymMap::from_toml("not_a_reason = [\"x\"]").is_err());
    }

    #[test]
    fn perfect_agreement() {
        let gold: BTreeMap<String, Verdict> = [("1".into(), Verdict::Include), ("2".into(), Verdict::Exclude)].into();
        let comps = vec![
            (
                "1".to_string(),
                parse_completion(PromptFamily::TrueFalse, "TRUE", &syn()),
            ),
            (
                "2".to_string(),
                parse_completion(PromptFamily::TrueFalse, "FALSE", &syn()),
            ),
        ];
        let e = prompt_eval(&comps, &gold).unwrap();
        assert_eq!((e.tpr, e.fpr), (Some(1.0), Some(0.0)));
        assert!(matches!(
            prompt_eval(&comps, &BTreeMap::new()),
            Err(PromptError::EmptyIntersection)
        ));
    }

    fn random_fixture(seed: u64, n: usize) -> (Vec<(String, ParsedCompletion)>, BTreeMap<String, LabelRecord>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut comps = Vec::new();
        let mut gold = BTreeMap::new();
        for i in 0..n {
            let pmid = format!("{i}");
            let raw = ["TRUE", "FALSE", "dunno"][rng.random_range(0..3)];
            comps.push((pmid.clone(), parse_completion(PromptFamily::TrueFalse, raw, &syn())));
            let label = if rng.random_bool(0.3) {
                LabelRecord::include(pmid.clone(), "ann", 1)
            } else {
                LabelRecord::exclude(pmid.clone(), ExclusionReason::ALL[rng.random_range(0..8)], "ann", 1)
            };
            gold.insert(pmid, label);
        }
        (comps, gold)
    }

    #[test]
    fn eval_matches_tally() {
        let (comps, labels) = random_fixture(21, 200);
        let gold: BTreeMap<String, Verdict> = labels.iter().map(|(k, v)| (k.clone(), v.verdict)).collect();
        let e = prompt_eval(&comps, &gold).unwrap();
        let mut oracle = [[0u64; 2]; 2];
        for (pmid, c) in &comps {
            let pred = c.verdict == ParsedVerdict::Include;
            let truth = gold[pmid] == Verdict::Include;
            oracle[pred as usize][truth as usize] += 1;
        }
        assert_eq!(
            e.counts,
            Confusion::from_counts(oracle[1][1], oracle[1][0], oracle[0][0], oracle[0][1])
        );
    }

    #[test]
    fn error_rows_bucket() {
        let gold: BTreeMap<String, LabelRecord> = [
            ("1".into(), LabelRecord::exclude("1", ExclusionReason::Animal, "a", 1)),
            ("2".into(), LabelRecord::include("2", "a", 1)),
        ]
        .into();
        let comps = vec![
            (
                "1".to_string(),
                parse_completion(PromptFamily::TrueFalse, "TRUE", &syn()),
            ),
            (
                "2".to_string(),
                parse_completion(PromptFamily::TrueFalse, "FALSE", &syn()),
            ),
        ];
        let rows = error_table("m", "1.0", &comps, &gold).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(
            (rows[0].error_type, rows[0].count),
            (ErrorType::Excluded(ExclusionReason::Animal), 1)
        );
        assert_eq!((rows[1].error_type, rows[1].count), (ErrorType::MissedTrial, 1));
        assert_eq!(rows[0].error_type.to_string(), "Animal");
        let mut buf = Vec::new();
        write_error_table_tsv(&mut buf, &rows).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("m\t1.0\tmissed trial\t\t1"));
    }

    #[test]
    fn error_rows_match_group_by() {
        let (comps, gold) = random_fixture(22, 300);
        let rows = error_table("m", "p", &comps, &gold).unwrap();
        let mut oracle: BTreeMap<String, u64> = BTreeMap::new();
        for (pmid, c) in &comps {
            let pred = c.verdict == ParsedVerdict::Include;
            let g = &gold[pmid];
            if pred && g.verdict == Verdict::Exclude {
                *oracle.entry(g.reason.unwrap().display_name().to_string()).or_default() += 1;
            } else if !pred && g.verdict == Verdict::Include {
                *oracle.entry("missed trial".into()).or_default() += 1;
            }
        }
        let got: BTreeMap<String, u64> = rows.iter().map(|r| (r.error_type.to_string(), r.count)).collect();
        assert_eq!(got, oracle);
        let gold_v: BTreeMap<String, Verdict> = gold.iter().map(|(k, v)| (k.clone(), v.verdict)).collect();
        assert_eq!(
            rows.iter().map(|r| r.count).sum::<u64>() as usize,
            disagreements(&comps, &gold_v).len()
        );
    }

    fn family_strategy() -> impl Strategy<Value = PromptFamily> {
        prop_oneof![
            Just(PromptFamily::TrueFalse),
            Just(PromptFamily::Categorize),
            Just(PromptFamily::Explain)
        ]
    }

    proptest! {
        #[test]
        fn parse_is_total_and_idempotent(family in family_strategy(), raw in "\\PC{0,40}") {
            let s = syn();
            let first = parse_completion(family, &raw, &s);
            let again = parse_completion(family, &render_verdict(family, &first), &s);
            prop_assert!(first.same_outcome(&again), "{first:?} vs {again:?}");
            if family == PromptFamily::TrueFalse {
                prop_assert!(first.category.is_none() && first.explanation.is_none());
            }
        }

        #[test]
        fn family_one_round_trip(include in any::<bool>()) {
            let parsed = ParsedCompletion::bare(
                if include { ParsedVerdict::Include } else { ParsedVerdict::Exclude }, "");
            let back = parse_completion(PromptFamily::TrueFalse, &render_verdict(PromptFamily::TrueFalse, &parsed), &syn());
            prop_assert_eq!(back.verdict, parsed.verdict);
        }

        #[test]
        fn eval_permutation_invariant(seed in any::<u64>(), k in 0usize..50) {
            let (mut comps, labels) = random_fixture(seed, 50);
            let gold: BTreeMap<String, Verdict> = labels.iter().map(|(k, v)| (k.clone(), v.verdict)).collect();
            let a = prompt_eval(&comps, &gold).unwrap();
            comps.rotate_left(k);
            comps.reverse();
            let b = prompt_eval(&comps, &gold).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
