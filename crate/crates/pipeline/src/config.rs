//! Declarative run configuration. Unknown keys are errors: a misspelled rule
//! list would otherwise silently change the census.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trialcensus_core::distill::Algorithm;
use trialcensus_core::eval::OperatingPolicy;
use trialcensus_core::labels::SplitSizes;
use trialcensus_core::universe::{
    KeywordMode, RegistryMode, RuleSet, DEFAULT_KEYWORDS, DEFAULT_NLM_TAGS, DEFAULT_REGISTRY_PREFIXES,
};
use trialcensus_core::YearWindow;
use trialcensus_gateway::ProviderConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    /// Dotted key path, or empty for whole-file problems.
    pub key: String,
    pub message: String,
}

impl ConfigError {
    fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.key.is_empty() {
            f.write_str(&self.message)
        } else {
            write!(f, "{}: {}", self.key, self.message)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub universe: UniverseSection,
    #[serde(default)]
    pub splits: SplitsSection,
    #[serde(default)]
    pub labels: LabelsSection,
    #[serde(default)]
    pub provider: Option<ProviderConfig>,
    #[serde(default)]
    pub annotate: AnnotateSection,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub analytics: AnalyticsSection,
}

/// Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Input corpus: JSONL records or a MEDLINE XML file.
    pub corpus: PathBuf,
    /// Intermediate artifacts and manifests.
    #[serde(default = "default_work")]
    pub work: PathBuf,
    /// Human-facing tables and summaries.
    #[serde(default = "default_outputs")]
    pub outputs: PathBuf,
    /// Hand-label store; defaults to `<work>/labels.jsonl`.
    #[serde(default)]
    pub labels: Option<PathBuf>,
    /// Completion cache; defaults to `<work>/cache.jsonl`.
    #[serde(default)]
    pub cache: Option<PathBuf>,
    /// Planted ground truth for synthetic runs (seeds labels and the mock).
    #[serde(default)]
    pub truth: Option<PathBuf>,
    /// AACT-style registry export for the audit.
    #[serde(default)]
    pub registry: Option<PathBuf>,
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
    #[serde(default)]
    pub synonyms: Option<PathBuf>,
}

fn default_work() -> PathBuf {
    "work".into()
}

fn default_outputs() -> PathBuf {
    "out".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UniverseSection {
    pub nlm_tags: Vec<String>,
    pub registry_prefixes: Vec<String>,
    pub keywords: Vec<String>,
    pub registry_mode: RegistryMode,
    pub keyword_mode: KeywordMode,
    pub year_from: i32,
    pub year_to: i32,
}

impl Default for UniverseSection {
    fn default() -> Self {
        Self {
            nlm_tags: DEFAULT_NLM_TAGS.iter().map(|s| s.to_string()).collect(),
            registry_prefixes: DEFAULT_REGISTRY_PREFIXES.iter().map(|s| s.to_string()).collect(),
            keywords: DEFAULT_KEYWORDS.iter().map(|s| s.to_string()).collect(),
            registry_mode: RegistryMode::default(),
            keyword_mode: KeywordMode::default(),
            year_from: 2010,
            year_to: 2022,
        }
    }
}

impl UniverseSection {
    pub fn rules(&self) -> RuleSet {
        RuleSet::new(
            self.nlm_tags.iter().map(String::as_str),
            self.registry_prefixes.iter().map(String::as_str),
            self.keywords.iter().map(String::as_str),
            self.registry_mode,
        )
        .with_keyword_mode(self.keyword_mode)
    }

    pub fn window(&self) -> YearWindow {
        YearWindow {
            lo: self.year_from,
            hi: self.year_to,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitsSection {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitsSection {
    fn default() -> Self {
        let d = SplitSizes::default();
        Self {
            train: d.train,
            validation: d.validation,
            test: d.test,
        }
    }
}

impl SplitsSection {
    pub fn sizes(&self) -> SplitSizes {
        SplitSizes {
            train: self.train,
            validation: self.validation,
            test: self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelsSection {
    pub bind: String,
    /// Environment variable holding the shared bearer token; no auth if unset.
    pub token_env: Option<String>,
    pub lease_secs: u64,
    /// Labeler name used when seeding labels from planted truth.
    pub truth_labeler: String,
}

impl Default for LabelsSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8787".into(),
            token_env: None,
            lease_secs: 900,
            truth_labeler: "truth".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MockSection {
    pub tpr: f64,
    pub fpr: f64,
}

impl Default for MockSection {
    fn default() -> Self {
        Self { tpr: 0.934, fpr: 0.049 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotateSection {
    pub prompt_id: String,
    /// Records drawn from the universe (outside validation and test).
    pub n_records: usize,
    /// Nested weak-label set sizes.
    pub sizes: Vec<usize>,
    /// Also annotate the test split for prompt evaluation.
    pub evaluate_on_test: bool,
    /// Used when the provider endpoint is `mock://`.
    pub mock: MockSection,
}

impl Default for AnnotateSection {
    fn default() -> Self {
        Self {
            prompt_id: "1.2".into(),
            n_records: 64_000,
            sizes: trialcensus_core::distill::DEFAULT_SIZE_SCHEDULE.to_vec(),
            evaluate_on_test: true,
            mock: MockSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub algorithms: Vec<Algorithm>,
    /// Weak-label set to train on; the largest available when absent.
    pub train_size: Option<usize>,
    pub min_df: usize,
    pub folds: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            algorithms: vec![Algorithm::Logistic, Algorithm::NaiveBayes],
            train_size: None,
            min_df: 2,
            folds: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalScores {
    pub scorer_id: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    /// Score files from outside the pipeline, e.g. fine-tuned encoders.
    pub external: Vec<ExternalScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Score set evaluated and used for the census.
    pub scorer: String,
    pub policy: OperatingPolicy,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            scorer: "ensemble".into(),
            policy: OperatingPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyticsSection {
    /// Census stringency used for citation and country analyses.
    pub stringency: String,
    pub citing_windows: Vec<u32>,
    pub trunk_journals: Vec<String>,
    pub min_trunk_citations: u64,
    /// Years after publication counted for leading-journal citations.
    pub citation_years: u32,
    pub country_floor: u64,
    pub country_from: i32,
    pub country_to: i32,
    pub require_author_agreement: bool,
}

impl Default for AnalyticsSection {
    fn default() -> Self {
        Self {
            stringency: "moderate".into(),
            citing_windows: vec![2, 3, 4, 5, 6],
            trunk_journals: trialcensus_core::analytics::DEFAULT_TRUNK_JOURNALS
                .iter()
                .map(|s| s.to_string())
                .collect(),
            min_trunk_citations: 100,
            citation_years: 5,
            country_floor: 200,
            country_from: 2013,
            country_to: 2019,
            require_author_agreement: false,
        }
    }
}

impl PipelineConfig {
    /// Constraint checks beyond the schema; every violation is reported.
    pub fn problems(&self) -> Vec<ConfigError> {
        let mut out = Vec::new();
        let mut push = |k: &str, m: String| out.push(ConfigError::new(k, m));
        let u = &self.universe;
        if u.year_from > u.year_to {
            push(
                "universe.year_from",
                format!("{} is after year_to {}", u.year_from, u.year_to),
            );
        }
        if u.nlm_tags.is_empty() && u.registry_prefixes.is_empty() && u.keywords.is_empty() {
            push("universe", "all three rule families are empty".into());
        }
        for (k, list) in [
            ("universe.nlm_tags", &u.nlm_tags),
            ("universe.registry_prefixes", &u.registry_prefixes),
            ("universe.keywords", &u.keywords),
        ] {
            if list.iter().any(|s| s.trim().is_empty()) {
                push(k, "entries must not be blank".into());
            }
        }
        if self.splits.test == 0 || self.splits.validation == 0 {
            push("splits", "validation and test sizes must be positive".into());
        }
        if let Some(p) = &self.provider {
            for problem in p.problems() {
                let (field, msg) = problem.split_once(": ").unwrap_or(("", &problem));
                push(&format!("provider.{field}"), msg.to_string());
            }
        }
        let a = &self.annotate;
        if a.sizes.is_empty() {
            push("annotate.sizes", "must list at least one size".into());
        }
        if a.sizes.windows(2).any(|w| w[0] >= w[1]) {
            push("annotate.sizes", "must be strictly ascending".into());
        }
        if a.sizes.last().is_some_and(|&m| m > a.n_records) {
            push(
                "annotate.sizes",
                format!("largest size exceeds n_records {}", a.n_records),
            );
        }
        for (k, v) in [("annotate.mock.tpr", a.mock.tpr), ("annotate.mock.fpr", a.mock.fpr)] {
            if !(0.0..=1.0).contains(&v) {
                push(k, format!("must lie in [0, 1], got {v}"));
            }
        }
        let d = &self.distill;
        if d.algorithms.is_empty() {
            push("distill.algorithms", "must list at least one algorithm".into());
        }
        if d.folds < 2 {
            push("distill.folds", format!("need at least 2 folds, got {}", d.folds));
        }
        if let Some(t) = d.train_size {
            if !a.sizes.contains(&t) {
                push("distill.train_size", format!("{t} is not one of annotate.sizes"));
            }
        }
        let mut ids: Vec<&str> = self.ensemble.external.iter().map(|e| e.scorer_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            push("ensemble.external", "scorer ids must be unique".into());
        }
        if let Err(e) = self.eval.policy.validate() {
            push("eval.policy", e.to_string());
        }
        let an = &self.analytics;
        if !["conservative", "moderate", "liberal"].contains(&an.stringency.as_str()) {
            push(
                "analytics.stringency",
                format!("expected conservative, moderate or liberal, got {:?}", an.stringency),
            );
        }
        if an.citing_windows.iter().any(|t| !(2..=6).contains(t)) {
            push("analytics.citing_windows", "windows must lie in 2..=6".into());
        }
        if an.citation_years == 0 {
            push("analytics.citation_years", "must be positive".into());
        }
        if an.country_from > an.country_to {
            push("analytics.country_from", "is after country_to".into());
        }
        out
    }

    /// Resolves relative paths against `base`.
    pub fn resolve(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        fix(&mut paths.corpus);
        fix(&mut paths.work);
        fix(&mut paths.outputs);
        for p in [
            &mut paths.labels,
            &mut paths.cache,
            &mut paths.truth,
            &mut paths.registry,
            &mut paths.prompts_dir,
            &mut paths.synonyms,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        for e in &mut self.ensemble.external {
            fix(&mut e.path);
        }
        self
    }

    pub fn labels_path(&self) -> PathBuf {
        self.paths
            .labels
            .clone()
            .unwrap_or_else(|| self.paths.work.join("labels.jsonl"))
    }

    pub fn cache_path(&self) -> PathBuf {
        self.paths
            .cache
            .clone()
            .unwrap_or_else(|| self.paths.work.join("cache.jsonl"))
    }
}

/// A config with every optional table present, used as the key schema.
fn schema() -> toml::Table {
    let mut full = PipelineConfig {
        seed: 0,
        paths: Paths {
            corpus: "c".into(),
            work: default_work(),
            outputs: default_outputs(),
            labels: Some("l".into()),
            cache: Some("c".into()),
            truth: Some("t".into()),
            registry: Some("r".into()),
            prompts_dir: Some("p".into()),
            synonyms: Some("s".into()),
        },
        universe: Default::default(),
        splits: Default::default(),
        labels: LabelsSection {
            token_env: Some("T".into()),
            ..Default::default()
        },
        provider: Some(ProviderConfig {
            api_key_env: Some("K".into()),
            budget_cap: 1.0,
            ..ProviderConfig::mock("m")
        }),
        annotate: Default::default(),
        distill: DistillSection {
            train_size: Some(1),
            ..Default::default()
        },
        ensemble: EnsembleSection {
            external: vec![ExternalScores {
                scorer_id: "x".into(),
                path: "x".into(),
            }],
        },
        eval: Default::default(),
        analytics: Default::default(),
    };
    full.seed = 1;
    toml::Table::try_from(&full).expect("config serializes to a table")
}

fn unknown_keys(value: &toml::Value, schema: &toml::Value, prefix: &str, out: &mut Vec<ConfigError>) {
    match (value, schema) {
        (toml::Value::Table(t), toml::Value::Table(s)) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                match s.get(k) {
                    Some(sv) => unknown_keys(v, sv, &key, out),
                    None => out.push(ConfigError::new(key, "unknown key")),
                }
            }
        }
        (toml::Value::Array(items), toml::Value::Array(s)) if !s.is_empty() => {
            for (i, item) in items.iter().enumerate() {
                unknown_keys(item, &s[0], &format!("{prefix}[{i}]"), out);
            }
        }
        _ => {}
    }
}

/// Parses and checks a config text. On failure, returns every problem found:
/// all unknown keys, then the first type error or every constraint violation.
pub fn parse_config(text: &str, seed_override: Option<u64>) -> Result<PipelineConfig, Vec<ConfigError>> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| vec![ConfigError::new("", format!("not valid TOML: {}", e.message()))])?;
    if let Some(seed) = seed_override {
        let seed =
            i64::try_from(seed).map_err(|_| vec![ConfigError::new("seed", "must fit in a signed 64-bit integer")])?;
        table.insert("seed".into(), toml::Value::Integer(seed));
    }
    let mut errors = Vec::new();
    unknown_keys(
        &toml::Value::Table(table.clone()),
        &toml::Value::Table(schema()),
        "",
        &mut errors,
    );
    if !errors.is_empty() {
        return Err(errors);
    }
    let config: PipelineConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let key = e.path().to_string();
        let message = e.inner().message().to_string();
        if let Some(field) = message
            .strip_prefix("missing field `")
            .and_then(|m| m.strip_suffix('`'))
        {
            let key = if key == "." {
                field.to_string()
            } else {
                format!("{key}.{field}")
            };
            vec![ConfigError::new(key, "is mandatory")]
        } else {
            vec![ConfigError::new(key, message)]
        }
    })?;
    let problems = config.problems();
    if problems.is_empty() {
        Ok(config)
    } else {
        Err(problems)
    }
}

/// Reads, parses and resolves a config file.
pub fn validate_config(path: impl AsRef<Path>, seed_override: Option<u64>) -> Result<PipelineConfig, Vec<ConfigError>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| vec![ConfigError::new("", format!("cannot read {}: {e}", path.display()))])?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config(&text, seed_override).map(|c| c.resolve(&base))
}
