//! Step bodies and the runner that wraps them in manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use chrono::{TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use trialcensus_core::analytics::{
    build_citing_sample, census_samples, citation_quantiles, country_trends, counts_by_year, default_quantile_grid,
    flag_meta_analyses, funding_and_citation_shares, leading_journals, read_registry_csv, registry_audit,
    trunk_citation_tallies, write_audit_tsv, write_country_counts_tsv, write_funding_tsv, write_growth_tsv,
    write_quantiles_tsv, write_year_table, CensusSample, CitingSampleSpec, CountryOptions, MetaMethod, YearSeries,
};
use trialcensus_core::corpus::{self, parse_medline_xml, Corpus};
use trialcensus_core::distill::{
    assemble_weak_labels, export_scores, fit_ensemble, import_scores, train_baseline, Algorithm, DistilledModel,
    TfidfSpace, TrainOptions,
};
use trialcensus_core::eval::{
    join_scores, roc, select_operating_points, write_operating_points_tsv, write_roc_tsv, OperatingPoint,
};
use trialcensus_core::labels::{
    assign_splits, label_stats, read_splits_jsonl, write_splits_jsonl, ExclusionReason, LabelRecord, LabelStore, Split,
    SplitPlan, Verdict,
};
use trialcensus_core::prompts::{
    error_table, parse_completion, prompt_eval, write_error_table_tsv, ParsedCompletion, PromptLibrary, PromptTemplate,
    SynonymMap,
};
use trialcensus_core::universe::{build_universe, family_tallies, overlap_report, write_report_tsv, UniverseFlags};
use trialcensus_gateway::{annotate_batch, CompletionCache, HttpProvider, MockGold, MockProvider, Provider};

use crate::config::PipelineConfig;
use crate::manifest::{digest_bytes, digest_file, RunManifest, Status, Step, StepRecord};

#[derive(Debug, Error)]
pub enum StageError {
    #[error("{step} needs {upstream} to complete first")]
    MissingUpstream { step: &'static str, upstream: &'static str },
    #[error("{step} failed: {message}")]
    Failed { step: &'static str, message: String },
    #[error("manifest I/O: {0}")]
    Manifest(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Ran(StepRecord),
    Skipped(StepRecord),
    /// Dry run: whether the step would have executed.
    Planned {
        would_run: bool,
    },
}

/// One line of planted truth: `{pmid, include, reason}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRow {
    pub pmid: String,
    pub include: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<ExclusionReason>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedCompletion {
    pub pmid: String,
    pub model_id: String,
    pub prompt_id: String,
    pub parsed: ParsedCompletion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedWeakLabel {
    pub pmid: String,
    pub verdict: Verdict,
    pub model_id: String,
    pub prompt_id: String,
    /// Position in the seeded order; the set of size k is `rank < k`.
    pub rank: usize,
}

struct StepRun {
    outputs: Vec<PathBuf>,
    details: serde_json::Value,
    message: Option<String>,
}

impl StepRun {
    fn outputs(outputs: Vec<PathBuf>) -> Self {
        Self {
            outputs,
            details: serde_json::Value::Null,
            message: None,
        }
    }
}

pub struct Runner {
    cfg: PipelineConfig,
    dry_run: bool,
}

/// Fixed timestamp for labels seeded from planted truth, so reruns append
/// nothing.
fn truth_timestamp() -> chrono::DateTime<Utc> {
    Utc.with_ymd_and_hms(2000, 1, 1, 0, 0, 0).unwrap()
}

impl Runner {
    pub fn new(cfg: PipelineConfig, dry_run: bool) -> Self {
        Self { cfg, dry_run }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn manifest_dir(&self) -> PathBuf {
        self.cfg.paths.work.join("manifests")
    }

    fn work(&self, name: &str) -> PathBuf {
        self.cfg.paths.work.join(name)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.paths.outputs.join(name)
    }

    fn corpus_path(&self) -> PathBuf {
        self.work("corpus.jsonl")
    }

    fn universe_path(&self) -> PathBuf {
        self.work("universe.jsonl")
    }

    fn splits_path(&self) -> PathBuf {
        self.work("splits.jsonl")
    }

    fn score_path(&self, scorer_id: &str) -> PathBuf {
        self.work(&format!("scores/{scorer_id}.jsonl"))
    }

    fn distilled_ids(&self) -> Vec<String> {
        self.cfg.distill.algorithms.iter().map(|a| distilled_id(*a)).collect()
    }

    /// Declared inputs and the parameter digest for `step`.
    fn plan(&self, step: Step) -> Result<(Vec<PathBuf>, String)> {
        let c = &self.cfg;
        let (inputs, params): (Vec<PathBuf>, serde_json::Value) = match step {
            Step::Ingest => (vec![c.paths.corpus.clone()], json!({})),
            Step::Universe => (vec![self.corpus_path()], json!(c.universe)),
            Step::Splits => {
                let mut v = vec![self.corpus_path(), self.universe_path()];
                v.extend(c.paths.truth.clone());
                (
                    v,
                    json!({ "seed": c.seed, "splits": c.splits, "labeler": c.labels.truth_labeler }),
                )
            }
            Step::Annotate => {
                let mut v = vec![self.corpus_path(), self.universe_path(), self.splits_path()];
                let mock = c.provider.as_ref().is_some_and(|p| p.endpoint.starts_with("mock://"));
                if mock {
                    v.extend(c.paths.truth.clone());
                }
                if let Some(s) = &c.paths.synonyms {
                    v.push(s.clone());
                }
                let template = self.template()?;
                (
                    v,
                    json!({
                        "seed": c.seed,
                        "annotate": c.annotate,
                        "provider": c.provider,
                        "template": digest_bytes(template.content().as_bytes()),
                    }),
                )
            }
            Step::Distill => (
                vec![self.corpus_path(), self.universe_path(), self.work("weak_labels.jsonl")],
                json!({ "seed": c.seed, "distill": c.distill }),
            ),
            Step::Ensemble => {
                let mut v: Vec<PathBuf> = self.distilled_ids().iter().map(|id| self.score_path(id)).collect();
                v.extend(c.ensemble.external.iter().map(|e| e.path.clone()));
                v.push(self.splits_path());
                v.push(c.labels_path());
                (v, json!({ "ensemble": c.ensemble }))
            }
            Step::Eval => {
                let mut v = vec![self.score_path(&c.eval.scorer), self.splits_path(), c.labels_path()];
                let tc = self.work("test_completions.jsonl");
                if tc.exists() {
                    v.push(tc);
                }
                (v, json!({ "eval": c.eval }))
            }
            Step::Census => (
                vec![
                    self.score_path(&c.eval.scorer),
                    self.work("operating_points.json"),
                    self.corpus_path(),
                ],
                json!({ "window": c.universe.window() }),
            ),
            Step::Analytics => (
                vec![self.corpus_path(), self.universe_path(), self.work("census.json")],
                json!({ "analytics": c.analytics, "window": c.universe.window() }),
            ),
            Step::Audit => (c.paths.registry.iter().cloned().collect(), json!({})),
        };
        Ok((inputs, digest_bytes(params.to_string().as_bytes())))
    }

    fn upstream_check(&self, step: Step) -> Result<(), StageError> {
        for &up in step.upstream() {
            let complete = RunManifest::load(&self.manifest_dir(), up.stage())?
                .and_then(|m| m.steps.get(&up).cloned())
                .is_some_and(|r| r.status == Status::Complete);
            if !complete {
                return Err(StageError::MissingUpstream {
                    step: step.name(),
                    upstream: up.name(),
                });
            }
        }
        Ok(())
    }

    /// Runs `step` unless its manifest record is still current.
    pub fn run_step(&self, step: Step) -> Result<StepOutcome, StageError> {
        self.upstream_check(step)?;
        let failed = |e: anyhow::Error| StageError::Failed {
            step: step.name(),
            message: format!("{e:#}"),
        };
        let (inputs, params) = self.plan(step).map_err(failed)?;
        let dir = self.manifest_dir();
        let mut manifest = RunManifest::load(&dir, step.stage())?.unwrap_or_else(|| RunManifest::new(step.stage()));
        if let Some(prev) = manifest.steps.get(&step) {
            if prev.is_current(&params, &inputs) {
                log::info!("{}: inputs unchanged, skipping", step.name());
                return Ok(if self.dry_run {
                    StepOutcome::Planned { would_run: false }
                } else {
                    StepOutcome::Skipped(prev.clone())
                });
            }
        }
        if self.dry_run {
            return Ok(StepOutcome::Planned { would_run: true });
        }
        for p in &inputs {
            if !p.exists() {
                return Err(failed(anyhow!("declared input {} does not exist", p.display())));
            }
        }
        let started_at = Utc::now();
        let input_digests = inputs
            .iter()
            .map(|p| digest_file(p))
            .collect::<std::io::Result<Vec<_>>>()?;
        log::info!("{}: running", step.name());
        let result = self.execute(step);
        let finished_at = Utc::now();
        let record = match result {
            Ok(run) => StepRecord {
                step,
                status: Status::Complete,
                params,
                inputs: input_digests,
                outputs: run
                    .outputs
                    .iter()
                    .map(|p| digest_file(p))
                    .collect::<std::io::Result<_>>()?,
                started_at,
                finished_at,
                message: run.message,
                details: run.details,
            },
            Err(e) => {
                let (message, details) = match e.downcast::<PartialRun>() {
                    Ok(p) => (p.message, p.details),
                    Err(e) => (format!("{e:#}"), serde_json::Value::Null),
                };
                let record = StepRecord {
                    step,
                    status: Status::Failed,
                    params,
                    inputs: input_digests,
                    outputs: Vec::new(),
                    started_at,
                    finished_at,
                    message: Some(message.clone()),
                    details,
                };
                manifest.steps.insert(step, record);
                manifest.save(&dir)?;
                return Err(StageError::Failed {
                    step: step.name(),
                    message,
                });
            }
        };
        manifest.steps.insert(step, record.clone());
        manifest.save(&dir)?;
        Ok(StepOutcome::Ran(record))
    }

    /// Every step in declared order; stops at the first failure.
    pub fn run_all(&self) -> Result<Vec<(Step, StepOutcome)>, StageError> {
        let mut out: Vec<(Step, StepOutcome)> = Vec::new();
        for step in Step::ALL {
            if self.dry_run {
                // A step downstream of one that would run would run too, and
                // upstream manifests may not exist yet in a fresh tree.
                let upstream_runs = step.upstream().iter().any(|up| {
                    out.iter()
                        .any(|(s, o)| s == up && *o == StepOutcome::Planned { would_run: true })
                });
                let planned = match self.run_step(step) {
                    _ if upstream_runs => StepOutcome::Planned { would_run: true },
                    Err(StageError::MissingUpstream { .. }) => StepOutcome::Planned { would_run: true },
                    other => other?,
                };
                out.push((step, planned));
            } else {
                out.push((step, self.run_step(step)?));
            }
        }
        Ok(out)
    }

    fn execute(&self, step: Step) -> Result<StepRun> {
        std::fs::create_dir_all(&self.cfg.paths.work)?;
        std::fs::create_dir_all(&self.cfg.paths.outputs)?;
        match step {
            Step::Ingest => self.ingest(),
            Step::Universe => self.universe(),
            Step::Splits => self.splits(),
            Step::Annotate => self.annotate(),
            Step::Distill => self.distill(),
            Step::Ensemble => self.ensemble(),
            Step::Eval => self.eval(),
            Step::Census => self.census(),
            Step::Analytics => self.analytics(),
            Step::Audit => self.audit(),
        }
    }

    fn load_corpus(&self) -> Result<Corpus> {
        let report = corpus::load_jsonl(self.corpus_path()).context("reading normalized corpus")?;
        if !report.rejected.is_empty() {
            bail!("normalized corpus has {} invalid lines", report.rejected.len());
        }
        Ok(report.corpus)
    }

    fn load_flags(&self) -> Result<Vec<UniverseFlags>> {
        read_jsonl(&self.universe_path())
    }

    fn load_plan(&self) -> Result<SplitPlan> {
        Ok(read_splits_jsonl(BufReader::new(File::open(self.splits_path())?))?)
    }

    fn load_store(&self, corpus: Option<&Corpus>) -> Result<LabelStore> {
        let path = self.cfg.labels_path();
        let store = LabelStore::open(&path).with_context(|| format!("opening label store {}", path.display()))?;
        Ok(match corpus {
            Some(c) => store.with_known_pmids(c.pmids().map(str::to_string)),
            None => store,
        })
    }

    fn template(&self) -> Result<PromptTemplate> {
        let lib = match &self.cfg.paths.prompts_dir {
            Some(dir) => PromptLibrary::load_dir(dir)?,
            None => PromptLibrary::builtin(),
        };
        Ok(lib.get(&self.cfg.annotate.prompt_id)?.clone())
    }

    fn synonyms(&self) -> Result<SynonymMap> {
        Ok(match &self.cfg.paths.synonyms {
            Some(p) => SynonymMap::from_toml(&std::fs::read_to_string(p)?)?,
            None => SynonymMap::default(),
        })
    }

    /// Effective hand labels for one split, as include/exclude.
    fn split_gold(&self, store: &LabelStore, plan: &SplitPlan, split: Split) -> BTreeMap<String, bool> {
        let effective = store.effective_labels();
        plan.members(split)
            .filter_map(|p| effective.get(p).map(|l| (p.to_string(), l.verdict.is_include())))
            .collect()
    }

    fn ingest(&self) -> Result<StepRun> {
        let src = &self.cfg.paths.corpus;
        let is_xml = src.extension().is_some_and(|e| e.eq_ignore_ascii_case("xml"));
        let (corpus, rejected, skipped) = if is_xml {
            let parse = parse_medline_xml(&std::fs::read(src)?)?;
            let skipped = parse.skipped_without_pmid;
            (Corpus::from_records(parse.records)?, 0, skipped)
        } else {
            let report = corpus::load_jsonl(src)?;
            for r in report.rejected.iter().take(20) {
                log::warn!("{}:{}: {}", src.display(), r.line, r.reason);
            }
            (report.corpus, report.rejected.len(), 0)
        };
        let out = self.corpus_path();
        corpus.save_jsonl(&out)?;
        let summary = json!({
            "records": corpus.len(),
            "with_abstract": corpus.records().filter(|r| r.has_abstract()).count(),
            "rejected_lines": rejected,
            "skipped_without_pmid": skipped,
        });
        let summary_path = self.out("ingest_summary.json");
        write_json(&summary_path, &summary)?;
        Ok(StepRun::outputs(vec![out, summary_path]))
    }

    fn universe(&self) -> Result<StepRun> {
        let corpus = self.load_corpus()?;
        let rules = self.cfg.universe.rules();
        let build = build_universe(&corpus, &rules, self.cfg.universe.window());
        let flags_path = self.universe_path();
        write_jsonl(&flags_path, &build.flags)?;
        let report_path = self.out("universe_report.tsv");
        let tallies = family_tallies(&build.flags, &rules);
        write_report_tsv(
            BufWriter::new(File::create(&report_path)?),
            &tallies,
            &overlap_report(&build.flags),
        )?;
        let summary_path = self.out("universe_summary.json");
        write_json(&summary_path, &build.summary)?;
        Ok(StepRun::outputs(vec![flags_path, report_path, summary_path]))
    }

    fn splits(&self) -> Result<StepRun> {
        let corpus = self.load_corpus()?;
        let flags = self.load_flags()?;
        let plan = assign_splits(&flags, &corpus, self.cfg.splits.sizes(), self.cfg.seed)?;
        let path = self.splits_path();
        let mut w = BufWriter::new(File::create(&path)?);
        write_splits_jsonl(&mut w, &plan)?;
        drop(w);
        let summary_path = self.out("splits_summary.json");
        write_json(
            &summary_path,
            &json!({
                "sizes": Split::ALL.iter().map(|s| (s.as_str(), plan.members(*s).count())).collect::<BTreeMap<_, _>>(),
                "dropped_from_test": plan.dropped_from_test,
                "backfilled": plan.backfilled,
            }),
        )?;
        let mut message = None;
        if let Some(truth_path) = &self.cfg.paths.truth {
            let truth = read_truth(truth_path)?;
            let mut store = self.load_store(Some(&corpus))?;
            let mut appended = 0;
            for a in &plan.assignments {
                let Some(t) = truth.get(&a.pmid) else { continue };
                let labeler = self.cfg.labels.truth_labeler.as_str();
                let mut label = match (t.include, t.reason) {
                    (true, _) => LabelRecord::include(a.pmid.clone(), labeler, 1),
                    (false, r) => LabelRecord::exclude(a.pmid.clone(), r.unwrap_or(ExclusionReason::Other), labeler, 1),
                };
                label.timestamp = truth_timestamp();
                appended += usize::from(store.record_label(label)?.appended);
            }
            message = Some(format!("seeded {appended} labels from planted truth"));
        }
        let mut outputs = vec![path, summary_path];
        if self.cfg.paths.truth.is_some() {
            // The seeded store is written here; later hand labels make the
            // record stale and the rerun appends nothing.
            outputs.push(self.cfg.labels_path());
        }
        Ok(StepRun {
            outputs,
            details: serde_json::Value::Null,
            message,
        })
    }

    fn annotate(&self) -> Result<StepRun> {
        let c = &self.cfg;
        let provider_cfg = c
            .provider
            .clone()
            .ok_or_else(|| anyhow!("annotate needs a [provider] table"))?;
        let corpus = self.load_corpus()?;
        let flags = self.load_flags()?;
        let plan = self.load_plan()?;
        let held_out: BTreeSet<&str> = plan
            .members(Split::Validation)
            .chain(plan.members(Split::Test))
            .collect();
        let mut pool: Vec<&str> = flags
            .iter()
            .filter(|f| f.in_universe && !held_out.contains(f.pmid.as_str()))
            .map(|f| f.pmid.as_str())
            .filter(|p| corpus.get(p).is_some_and(|r| r.has_abstract()))
            .collect();
        pool.sort_unstable();
        pool.shuffle(&mut ChaCha8Rng::seed_from_u64(c.seed ^ ANNOTATE_STREAM));
        if pool.len() < c.annotate.n_records {
            log::warn!(
                "only {} eligible records for {} requested",
                pool.len(),
                c.annotate.n_records
            );
        }
        pool.truncate(c.annotate.n_records);
        let records: Vec<_> = pool
            .iter()
            .map(|p| corpus.get(p).expect("pool drawn from corpus").clone())
            .collect();
        let test_records: Vec<_> = if c.annotate.evaluate_on_test {
            plan.members(Split::Test)
                .filter_map(|p| corpus.get(p))
                .filter(|r| r.has_abstract())
                .cloned()
                .collect()
        } else {
            Vec::new()
        };

        let template = self.template()?;
        let provider: Arc<dyn Provider> = if provider_cfg.endpoint.starts_with("mock://") {
            let truth_path = c
                .paths
                .truth
                .as_ref()
                .ok_or_else(|| anyhow!("a mock provider needs paths.truth"))?;
            let gold = read_truth(truth_path)?
                .into_values()
                .map(|t| {
                    (
                        t.pmid,
                        MockGold {
                            include: t.include,
                            reason: t.reason,
                        },
                    )
                })
                .collect();
            Arc::new(
                MockProvider::new(c.seed, c.annotate.mock.tpr, c.annotate.mock.fpr, gold)
                    .with_model_id(provider_cfg.model_id.clone()),
            )
        } else {
            Arc::new(HttpProvider::new(provider_cfg.clone())?)
        };
        let cache = Arc::new(CompletionCache::open(c.cache_path())?);
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        let (main, test) = rt.block_on(async {
            let main = annotate_batch(&records, &template, provider.clone(), cache.clone(), &provider_cfg).await?;
            let test = if test_records.is_empty() || !main.is_complete() {
                None
            } else {
                Some(annotate_batch(&test_records, &template, provider, cache, &provider_cfg).await?)
            };
            anyhow::Ok((main, test))
        })?;
        let details = json!({ "pool": main.manifest, "test": test.as_ref().map(|t| &t.manifest) });
        let incomplete = |o: &trialcensus_gateway::BatchOutcome| !o.is_complete();
        if incomplete(&main) || test.as_ref().is_some_and(incomplete) {
            let m = &main.manifest;
            let why = if m.budget_stop {
                "budget cap reached"
            } else {
                "provider failures"
            };
            return Err(PartialRun {
                message: format!(
                    "{why}: {} completed, {} failed, {} pending; completions are cached, rerun to resume",
                    m.completed,
                    m.failed.len(),
                    m.pending.len()
                ),
                details,
            }
            .into());
        }

        let synonyms = self.synonyms()?;
        let parse = |outcome: &trialcensus_gateway::BatchOutcome| -> Vec<AnnotatedCompletion> {
            outcome
                .completions
                .iter()
                .map(|cpl| AnnotatedCompletion {
                    pmid: cpl.pmid.clone(),
                    model_id: provider_cfg.model_id.clone(),
                    prompt_id: template.id.clone(),
                    parsed: parse_completion(template.family, &cpl.raw, &synonyms),
                })
                .collect()
        };
        let completions = parse(&main);
        let completions_path = self.work("completions.jsonl");
        write_jsonl(&completions_path, &completions)?;

        let pairs: Vec<(String, ParsedCompletion)> =
            completions.iter().map(|a| (a.pmid.clone(), a.parsed.clone())).collect();
        let parsed_count = pairs.iter().filter(|(_, p)| p.verdict.is_parsed()).count();
        let sizes: Vec<usize> = c
            .annotate
            .sizes
            .iter()
            .copied()
            .filter(|&s| s <= parsed_count)
            .collect();
        if sizes.is_empty() {
            bail!(
                "only {parsed_count} parseable completions; smallest weak-label set needs {}",
                c.annotate.sizes[0]
            );
        }
        let assembly = assemble_weak_labels(&pairs, &provider_cfg.model_id, &template.id, &sizes, c.seed)?;
        let largest = assembly.sets.last().expect("non-empty schedule");
        let ranked: Vec<RankedWeakLabel> = largest
            .entries
            .iter()
            .enumerate()
            .map(|(rank, w)| RankedWeakLabel {
                pmid: w.pmid.clone(),
                verdict: w.verdict,
                model_id: w.model_id.clone(),
                prompt_id: w.prompt_id.clone(),
                rank,
            })
            .collect();
        let weak_path = self.work("weak_labels.jsonl");
        write_jsonl(&weak_path, &ranked)?;
        let sets_path = self.out("weak_label_sets.json");
        write_json(
            &sets_path,
            &json!({
                "sizes": sizes,
                "dropped_unparseable": assembly.dropped_unparseable,
                "positives": assembly.sets.iter().map(|s| s.entries.iter().filter(|w| w.verdict.is_include()).count()).collect::<Vec<_>>(),
            }),
        )?;
        let mut outputs = vec![completions_path, weak_path, sets_path];
        if let Some(test) = &test {
            let path = self.work("test_completions.jsonl");
            write_jsonl(&path, &parse(test))?;
            outputs.push(path);
        }
        let skipped = c.annotate.sizes.len() - sizes.len();
        Ok(StepRun {
            outputs,
            details,
            message: (skipped > 0).then(|| format!("{skipped} weak-label set sizes exceed the parseable completions")),
        })
    }

    fn distill(&self) -> Result<StepRun> {
        let c = &self.cfg;
        let corpus = self.load_corpus()?;
        let weak: Vec<RankedWeakLabel> = read_jsonl(&self.work("weak_labels.jsonl"))?;
        let size = c.distill.train_size.unwrap_or(weak.len());
        if size > weak.len() {
            bail!("train_size {size} exceeds the {} weak labels available", weak.len());
        }
        let train: Vec<&RankedWeakLabel> = weak.iter().filter(|w| w.rank < size).collect();
        let docs: Vec<&str> = train
            .iter()
            .map(|w| {
                corpus
                    .get(&w.pmid)
                    .and_then(|r| r.abstract_str())
                    .ok_or_else(|| anyhow!("weak label {} has no abstract in the corpus", w.pmid))
            })
            .collect::<Result<_>>()?;
        let ys: Vec<bool> = train.iter().map(|w| w.verdict.is_include()).collect();
        let space = TfidfSpace::fit(&docs, c.distill.min_df)?;
        let xs = space.transform_all(&docs);
        let flags = self.load_flags()?;
        let targets: Vec<_> = flags
            .iter()
            .filter(|f| f.in_universe)
            .filter_map(|f| corpus.get(&f.pmid))
            .filter(|r| r.has_abstract())
            .collect();
        std::fs::create_dir_all(self.work("models"))?;
        std::fs::create_dir_all(self.work("scores"))?;
        let mut outputs = Vec::new();
        let mut fits = BTreeMap::new();
        for &algorithm in &c.distill.algorithms {
            let opts = TrainOptions {
                folds: c.distill.folds,
                ..TrainOptions::new(algorithm, c.seed)
            };
            let fit = train_baseline(&xs, &ys, space.dim(), algorithm, &opts)?;
            let id = distilled_id(algorithm);
            fits.insert(id.clone(), json!({ "strength": fit.strength, "cv": fit.cv }));
            let model = DistilledModel::new(id.clone(), space.clone(), fit);
            let model_path = self.work(&format!("models/{id}.json"));
            model.save(&model_path)?;
            let scores = model.score_records(targets.iter().copied());
            let score_path = self.score_path(&id);
            export_scores(&score_path, &scores)?;
            outputs.push(model_path);
            outputs.push(score_path);
        }
        let summary_path = self.out("distill_summary.json");
        write_json(
            &summary_path,
            &json!({ "train_size": size, "vocabulary": space.dim(), "scored": targets.len(), "fits": fits }),
        )?;
        outputs.push(summary_path);
        Ok(StepRun::outputs(outputs))
    }

    fn ensemble(&self) -> Result<StepRun> {
        let c = &self.cfg;
        let mut sets = Vec::new();
        let mut rejected = BTreeMap::new();
        let members = self
            .distilled_ids()
            .into_iter()
            .map(|id| (self.score_path(&id), id))
            .chain(
                c.ensemble
                    .external
                    .iter()
                    .map(|e| (e.path.clone(), e.scorer_id.clone())),
            );
        for (path, id) in members {
            let import = import_scores(&path, &id).with_context(|| format!("importing {}", path.display()))?;
            if !import.rejected.is_empty() {
                log::warn!("{}: {} rows rejected", path.display(), import.rejected.len());
                rejected.insert(id.clone(), import.rejected.len());
            }
            sets.push(import.set);
        }
        let plan = self.load_plan()?;
        let store = self.load_store(None)?;
        let gold = self.split_gold(&store, &plan, Split::Validation);
        if gold.is_empty() {
            bail!("no hand labels on the validation split; label it (serve-labels) or configure paths.truth");
        }
        let model = fit_ensemble(&sets, &gold)?;
        let model_path = self.work("models/ensemble.json");
        write_json(&model_path, &model)?;
        let scores = model.score(&sets, "ensemble")?;
        let score_path = self.score_path("ensemble");
        export_scores(&score_path, &scores)?;
        Ok(StepRun {
            outputs: vec![model_path, score_path],
            details: if rejected.is_empty() {
                serde_json::Value::Null
            } else {
                json!({ "rejected_rows": rejected })
            },
            message: None,
        })
    }

    fn eval(&self) -> Result<StepRun> {
        let c = &self.cfg;
        let scores = import_scores(self.score_path(&c.eval.scorer), &c.eval.scorer)?.set;
        let plan = self.load_plan()?;
        let store = self.load_store(None)?;
        let gold = self.split_gold(&store, &plan, Split::Test);
        let curve = roc(&scores.scores, &gold)?;
        let roc_path = self.out("roc.tsv");
        write_roc_tsv(BufWriter::new(File::create(&roc_path)?), &curve)?;
        // Thresholds come from validation; reported rates from test.
        let validation = join_scores(&scores.scores, &self.split_gold(&store, &plan, Split::Validation))?;
        let chosen = select_operating_points(&validation, &c.eval.policy)?;
        let test = join_scores(&scores.scores, &gold)?;
        let points: Vec<OperatingPoint> = chosen.iter().map(|p| p.remeasure(&test)).collect();
        let points_path = self.work("operating_points.json");
        write_json(&points_path, &points)?;
        let points_tsv = self.out("operating_points.tsv");
        write_operating_points_tsv(BufWriter::new(File::create(&points_tsv)?), &points)?;
        let stats: Vec<_> = Split::ALL.iter().map(|&s| label_stats(&store, &plan, s)).collect();
        let summary_path = self.out("eval_summary.json");
        write_json(
            &summary_path,
            &json!({
                "scorer": c.eval.scorer,
                "auc": curve.auc,
                "positives": curve.positives,
                "negatives": curve.negatives,
                "operating_points": points,
                "operating_points_validation": chosen,
                "label_stats": stats,
            }),
        )?;
        let mut outputs = vec![roc_path, points_path, points_tsv, summary_path];

        let tc = self.work("test_completions.jsonl");
        if tc.exists() {
            let completions: Vec<AnnotatedCompletion> = read_jsonl(&tc)?;
            let effective = store.effective_labels();
            let labels: BTreeMap<String, LabelRecord> = plan
                .members(Split::Test)
                .filter_map(|p| effective.get(p).map(|l| (p.to_string(), (*l).clone())))
                .collect();
            let verdicts: BTreeMap<String, Verdict> = labels.iter().map(|(k, l)| (k.clone(), l.verdict)).collect();
            let pairs: Vec<(String, ParsedCompletion)> =
                completions.iter().map(|a| (a.pmid.clone(), a.parsed.clone())).collect();
            if let Some(first) = completions.first() {
                let pe = prompt_eval(&pairs, &verdicts)?;
                let pe_path = self.out("prompt_eval.json");
                write_json(
                    &pe_path,
                    &json!({ "model_id": first.model_id, "prompt_id": first.prompt_id, "eval": pe }),
                )?;
                let rows = error_table(&first.model_id, &first.prompt_id, &pairs, &labels)?;
                let et_path = self.out("error_table.tsv");
                write_error_table_tsv(BufWriter::new(File::create(&et_path)?), &rows)?;
                outputs.push(pe_path);
                outputs.push(et_path);
            }
        }
        Ok(StepRun::outputs(outputs))
    }

    fn census(&self) -> Result<StepRun> {
        let c = &self.cfg;
        let scores = import_scores(self.score_path(&c.eval.scorer), &c.eval.scorer)?.set;
        let points: Vec<OperatingPoint> =
            serde_json::from_reader(BufReader::new(File::open(self.work("operating_points.json"))?))?;
        let samples = census_samples(&scores, &points);
        let path = self.work("census.json");
        write_json(&path, &samples)?;
        let corpus = self.load_corpus()?;
        let window = c.universe.window();
        let series: Vec<(String, YearSeries)> = samples
            .iter()
            .map(|s| {
                (
                    s.stringency.as_str().to_string(),
                    counts_by_year(&s.pmids, &corpus, window),
                )
            })
            .collect();
        let table_path = self.out("census_by_year.tsv");
        let cols: Vec<(&str, &YearSeries)> = series.iter().map(|(n, s)| (n.as_str(), s)).collect();
        write_year_table(BufWriter::new(File::create(&table_path)?), &cols)?;
        Ok(StepRun::outputs(vec![path, table_path]))
    }

    fn analytics(&self) -> Result<StepRun> {
        let c = &self.cfg;
        let a = &c.analytics;
        let corpus = self.load_corpus()?;
        let window = c.universe.window();
        let samples: Vec<CensusSample> =
            serde_json::from_reader(BufReader::new(File::open(self.work("census.json"))?))?;
        let sample = &samples
            .iter()
            .find(|s| s.stringency.as_str() == a.stringency)
            .ok_or_else(|| anyhow!("census has no {} sample", a.stringency))?
            .pmids;

        let mut series: Vec<(String, YearSeries)> = samples
            .iter()
            .map(|s| {
                (
                    format!("census_{}", s.stringency.as_str()),
                    counts_by_year(&s.pmids, &corpus, window),
                )
            })
            .collect();
        for &t in &a.citing_windows {
            let citing = build_citing_sample(sample, &corpus, CitingSampleSpec::new(t)?, window);
            let counts: YearSeries = window
                .years()
                .map(|y| (y, citing.get(&y).map_or(0, |s| s.len() as u64)))
                .collect();
            series.push((format!("citing_t{t}"), counts));
        }
        let flags = self.load_flags()?;
        let universe: Vec<_> = flags
            .iter()
            .filter(|f| f.in_universe)
            .filter_map(|f| corpus.get(&f.pmid))
            .collect();
        for (name, method) in [
            ("meta_keyword", MetaMethod::Keyword),
            ("meta_nlm_tag", MetaMethod::NlmTag),
        ] {
            let flagged = flag_meta_analyses(universe.iter().copied(), method);
            series.push((name.to_string(), counts_by_year(&flagged, &corpus, window)));
        }
        let trends_path = self.out("trends.tsv");
        let cols: Vec<(&str, &YearSeries)> = series.iter().map(|(n, s)| (n.as_str(), s)).collect();
        write_year_table(BufWriter::new(File::create(&trends_path)?), &cols)?;

        let tallies = trunk_citation_tallies(&corpus, &a.trunk_journals, window);
        let leading = leading_journals(&corpus, &a.trunk_journals, a.min_trunk_citations, window);
        let leading_path = self.out("leading_journals.tsv");
        let mut w = BufWriter::new(File::create(&leading_path)?);
        writeln!(w, "journal\ttrunk_citations\tleading")?;
        for (j, n) in &tallies {
            writeln!(w, "{j}\t{n}\t{}", leading.contains(j))?;
        }
        w.flush()?;
        drop(w);

        let grid = default_quantile_grid();
        let quantiles = citation_quantiles(sample, &corpus, &leading, a.citation_years, &grid);
        let quantiles_path = self.out("citation_quantiles.tsv");
        write_quantiles_tsv(BufWriter::new(File::create(&quantiles_path)?), &quantiles, &grid)?;
        let funding = funding_and_citation_shares(sample, &corpus, &leading, a.citation_years);
        let funding_path = self.out("funding_shares.tsv");
        write_funding_tsv(BufWriter::new(File::create(&funding_path)?), &funding)?;
        let countries = country_trends(
            sample,
            &corpus,
            &CountryOptions {
                require_first_last_agreement: a.require_author_agreement,
                floor: a.country_floor,
                from_year: a.country_from,
                to_year: a.country_to,
            },
        )?;
        let countries_path = self.out("country_counts.tsv");
        write_country_counts_tsv(BufWriter::new(File::create(&countries_path)?), &countries)?;
        let growth_path = self.out("country_growth.tsv");
        write_growth_tsv(BufWriter::new(File::create(&growth_path)?), &countries)?;
        Ok(StepRun {
            outputs: vec![
                trends_path,
                leading_path,
                quantiles_path,
                funding_path,
                countries_path,
                growth_path,
            ],
            details: json!({ "stringency": a.stringency, "sample_size": sample.len(), "leading_journals": leading.len() }),
            message: None,
        })
    }

    fn audit(&self) -> Result<StepRun> {
        let Some(path) = &self.cfg.paths.registry else {
            return Ok(StepRun {
                outputs: Vec::new(),
                details: serde_json::Value::Null,
                message: Some("no registry export configured; nothing to audit".into()),
            });
        };
        let rows = read_registry_csv(BufReader::new(File::open(path)?))?;
        let audit = registry_audit(&rows);
        if !audit.is_monotone() {
            bail!("registry filter cascade is not monotone");
        }
        let out = self.out("registry_audit.tsv");
        write_audit_tsv(BufWriter::new(File::create(&out)?), &audit)?;
        Ok(StepRun::outputs(vec![out]))
    }
}

const ANNOTATE_STREAM: u64 = 0x616e_6e6f_7461_7465;

pub fn distilled_id(algorithm: Algorithm) -> String {
    match algorithm {
        Algorithm::Logistic => "distilled_logistic".into(),
        Algorithm::NaiveBayes => "distilled_naive_bayes".into(),
    }
}

/// A step that made progress but could not finish; its details still land
/// in the manifest.
#[derive(Debug, Error)]
#[error("{message}")]
struct PartialRun {
    message: String,
    details: serde_json::Value,
}

pub fn read_truth(path: &Path) -> Result<BTreeMap<String, TruthRow>> {
    let rows: Vec<TruthRow> = read_jsonl(path)?;
    let mut out = BTreeMap::new();
    for r in rows {
        if out.insert(r.pmid.clone(), r.clone()).is_some() {
            bail!("{}: pmid {} appears twice", path.display(), r.pmid);
        }
    }
    Ok(out)
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Used by the synthetic fixture generator.
pub fn write_truth(path: &Path, truth: &BTreeMap<String, trialcensus_core::synthetic::Truth>) -> Result<()> {
    let rows: Vec<TruthRow> = truth
        .iter()
        .map(|(pmid, t)| TruthRow {
            pmid: pmid.clone(),
            include: t.include,
            reason: t.reason,
        })
        .collect();
    write_jsonl(path, &rows)
}
