//! Stand-alone subcommands for single module operations on explicit files,
//! outside the manifest-tracked pipeline.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::{Args, Subcommand, ValueEnum};

use trialcensus_core::analytics::{
    build_citing_sample, citation_quantiles, country_trends, counts_by_year, default_quantile_grid, flag_meta_analyses,
    funding_and_citation_shares, leading_journals, read_registry_csv, registry_audit, trunk_citation_tallies,
    write_audit_tsv, write_country_counts_tsv, write_funding_tsv, write_growth_tsv, write_quantiles_tsv,
    write_year_table, CensusSample, CitingSampleSpec, CountryOptions, MetaMethod, YearSeries, DEFAULT_TRUNK_JOURNALS,
};
use trialcensus_core::corpus::{self, Corpus, YearWindow};
use trialcensus_core::distill::import_scores;
use trialcensus_core::eval::{
    join_scores, roc, select_operating_points, write_operating_points_tsv, write_roc_tsv, OperatingPolicy,
};
use trialcensus_core::labels::{read_splits_jsonl, LabelStore, Split};
use trialcensus_core::universe::{
    build_universe, family_tallies, overlap_report, write_report_tsv, KeywordMode, RegistryMode,
};
use trialcensus_core::{RuleSet, UniverseFlags};

use crate::stages::{read_jsonl, write_jsonl};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Strict,
    Loose,
}

impl From<ModeArg> for RegistryMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Strict => RegistryMode::Strict,
            ModeArg::Loose => RegistryMode::PaperLoose,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum UniverseOp {
    /// Flag every record with the default rule set.
    Build {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 2010)]
        from: i32,
        #[arg(long, default_value_t = 2022)]
        to: i32,
        #[arg(long, value_enum, default_value = "strict")]
        mode: ModeArg,
        /// Match keywords on word boundaries instead of as substrings.
        #[arg(long)]
        word_boundary: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-family counts and pairwise overlaps of a flags file.
    Report {
        #[arg(long)]
        flags: PathBuf,
        #[arg(long, value_enum, default_value = "strict")]
        mode: ModeArg,
        /// Defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalOp {
    /// ROC curve of a score file against hand labels.
    Roc {
        #[arg(long)]
        scores: PathBuf,
        /// Defaults to the scorer id on the first row.
        #[arg(long)]
        scorer_id: Option<String>,
        /// Label store JSONL; effective labels are used.
        #[arg(long)]
        labels: PathBuf,
        /// Restrict to one split of this splits file.
        #[arg(long, requires = "split")]
        splits: Option<PathBuf>,
        #[arg(long, requires = "splits")]
        split: Option<Split>,
        #[arg(long)]
        out: PathBuf,
        /// Also select and write the three operating points.
        #[arg(long)]
        points: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// One pmid per line, or a census JSON file (with --stringency).
    #[arg(long)]
    pub sample: PathBuf,
    #[arg(long, default_value = "conservative")]
    pub stringency: String,
    #[arg(long, default_value_t = 2010)]
    pub from: i32,
    #[arg(long, default_value_t = 2022)]
    pub to: i32,
    /// Defaults to standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LeadingArgs {
    #[arg(long = "trunk", default_values_t = DEFAULT_TRUNK_JOURNALS.map(String::from))]
    pub trunk: Vec<String>,
    #[arg(long, default_value_t = 100)]
    pub min_citations: u64,
}

#[derive(Debug, Subcommand)]
pub enum AnalyticsOp {
    /// Sample counts per year.
    Counts(SampleArgs),
    /// Citing-sample sizes per year for each look-back window.
    Citing {
        #[command(flatten)]
        s: SampleArgs,
        #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6")]
        windows: Vec<u32>,
    },
    /// Journals cited at least --min-citations times by the trunk journals.
    Leading {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        l: LeadingArgs,
        #[arg(long, default_value_t = 2010)]
        from: i32,
        #[arg(long, default_value_t = 2022)]
        to: i32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Leading-journal citation quantiles by publication year.
    Quantiles {
        #[command(flatten)]
        s: SampleArgs,
        #[command(flatten)]
        l: LeadingArgs,
        #[arg(long, default_value_t = 5)]
        years: u32,
    },
    /// Public-funding and leading-citation shares by year.
    Funding {
        #[command(flatten)]
        s: SampleArgs,
        #[command(flatten)]
        l: LeadingArgs,
        #[arg(long, default_value_t = 5)]
        years: u32,
    },
    /// Per-country counts; the growth table goes to --growth-out.
    Countries {
        #[command(flatten)]
        s: SampleArgs,
        #[arg(long, default_value_t = 200)]
        floor: u64,
        #[arg(long, default_value_t = 2013)]
        from_year: i32,
        #[arg(long, default_value_t = 2019)]
        to_year: i32,
        #[arg(long)]
        require_agreement: bool,
        #[arg(long)]
        growth_out: Option<PathBuf>,
    },
    /// Meta-analyses among the corpus records, by year.
    Meta {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "keyword")]
        method: MetaArg,
        #[arg(long, default_value_t = 2010)]
        from: i32,
        #[arg(long, default_value_t = 2022)]
        to: i32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Registry filter cascade from a CSV export.
    Audit {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MetaArg {
    Keyword,
    NlmTag,
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    let report = corpus::load_jsonl(path).with_context(|| format!("reading {}", path.display()))?;
    for r in report.rejected.iter().take(5) {
        log::warn!("{}:{}: {}", path.display(), r.line, r.reason);
    }
    Ok(report.corpus)
}

fn window(from: i32, to: i32) -> Result<YearWindow> {
    Ok(YearWindow::new(from, to)?)
}

/// A pmid list, or one stringency of a census JSON file.
pub fn read_sample(path: &Path, stringency: &str) -> Result<BTreeSet<String>> {
    if path.extension().is_some_and(|e| e == "json") {
        let samples: Vec<CensusSample> = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        return samples
            .into_iter()
            .find(|s| s.stringency.as_str() == stringency)
            .map(|s| s.pmids)
            .ok_or_else(|| anyhow!("{} has no {stringency} sample", path.display()));
    }
    let mut out = BTreeSet::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let pmid = line.trim();
        if !pmid.is_empty() {
            out.insert(pmid.to_string());
        }
    }
    Ok(out)
}

pub fn universe(op: &UniverseOp) -> Result<()> {
    match op {
        UniverseOp::Build {
            corpus,
            from,
            to,
            mode,
            word_boundary,
            out,
        } => {
            let corpus = load_corpus(corpus)?;
            let mut rules = RuleSet::default().with_mode((*mode).into());
            if *word_boundary {
                rules = rules.with_keyword_mode(KeywordMode::WordBoundary);
            }
            let build = build_universe(&corpus, &rules, window(*from, *to)?);
            write_jsonl(out, &build.flags)?;
            eprintln!("{}", serde_json::to_string(&build.summary)?);
        }
        UniverseOp::Report { flags, mode, out } => {
            let flags: Vec<UniverseFlags> = read_jsonl(flags)?;
            let rules = RuleSet::default().with_mode((*mode).into());
            write_report_tsv(
                sink(out.as_deref())?,
                &family_tallies(&flags, &rules),
                &overlap_report(&flags),
            )?;
        }
    }
    Ok(())
}

pub fn eval(op: &EvalOp) -> Result<()> {
    let EvalOp::Roc {
        scores,
        scorer_id,
        labels,
        splits,
        split,
        out,
        points,
    } = op;
    let id = match scorer_id {
        Some(id) => id.clone(),
        None => {
            let mut first = String::new();
            BufReader::new(File::open(scores)?).read_line(&mut first)?;
            let row: serde_json::Value = serde_json::from_str(&first).context("first score row")?;
            row["scorer_id"]
                .as_str()
                .ok_or_else(|| anyhow!("first score row has no scorer_id"))?
                .to_string()
        }
    };
    let import = import_scores(scores, &id)?;
    if !import.rejected.is_empty() {
        log::warn!("{} score rows rejected", import.rejected.len());
    }
    let store = LabelStore::open(labels)?;
    let members: Option<BTreeSet<String>> = match (splits, split) {
        (Some(path), Some(split)) => {
            let plan = read_splits_jsonl(BufReader::new(File::open(path)?))?;
            Some(plan.members(*split).map(str::to_string).collect())
        }
        _ => None,
    };
    let gold = store
        .effective_labels()
        .into_iter()
        .filter(|(p, _)| members.as_ref().is_none_or(|m| m.contains(p)))
        .map(|(p, l)| (p, l.verdict.is_include()))
        .collect();
    let curve = roc(&import.set.scores, &gold)?;
    write_roc_tsv(BufWriter::new(File::create(out)?), &curve)?;
    eprintln!(
        "auc {} ({} positives, {} negatives)",
        curve.auc, curve.positives, curve.negatives
    );
    if let Some(path) = points {
        let pairs = join_scores(&import.set.scores, &gold)?;
        let chosen = select_operating_points(&pairs, &OperatingPolicy::default())?;
        write_operating_points_tsv(BufWriter::new(File::create(path)?), &chosen)?;
    }
    Ok(())
}

pub fn analytics(op: &AnalyticsOp) -> Result<()> {
    match op {
        AnalyticsOp::Counts(s) => {
            let (corpus, sample, w) = (
                load_corpus(&s.corpus)?,
                read_sample(&s.sample, &s.stringency)?,
                window(s.from, s.to)?,
            );
            write_year_table(
                sink(s.out.as_deref())?,
                &[("count", &counts_by_year(&sample, &corpus, w))],
            )?;
        }
        AnalyticsOp::Citing { s, windows } => {
            let (corpus, sample, w) = (
                load_corpus(&s.corpus)?,
                read_sample(&s.sample, &s.stringency)?,
                window(s.from, s.to)?,
            );
            let mut cols: Vec<(String, YearSeries)> = Vec::new();
            for &t in windows {
                let citing = build_citing_sample(&sample, &corpus, CitingSampleSpec::new(t)?, w);
                cols.push((
                    format!("citing_t{t}"),
                    citing.into_iter().map(|(y, s)| (y, s.len() as u64)).collect(),
                ));
            }
            let refs: Vec<(&str, &YearSeries)> = cols.iter().map(|(n, s)| (n.as_str(), s)).collect();
            write_year_table(sink(s.out.as_deref())?, &refs)?;
        }
        AnalyticsOp::Leading {
            corpus,
            l,
            from,
            to,
            out,
        } => {
            let corpus = load_corpus(corpus)?;
            let w = window(*from, *to)?;
            let leading = leading_journals(&corpus, &l.trunk, l.min_citations, w);
            let mut o = sink(out.as_deref())?;
            writeln!(o, "journal\ttrunk_citations\tleading")?;
            for (j, n) in trunk_citation_tallies(&corpus, &l.trunk, w) {
                writeln!(o, "{j}\t{n}\t{}", leading.contains(&j))?;
            }
        }
        AnalyticsOp::Quantiles { s, l, years } => {
            let (corpus, sample, w) = (
                load_corpus(&s.corpus)?,
                read_sample(&s.sample, &s.stringency)?,
                window(s.from, s.to)?,
            );
            let leading = leading_journals(&corpus, &l.trunk, l.min_citations, w);
            let grid = default_quantile_grid();
            let q = citation_quantiles(&sample, &corpus, &leading, *years, &grid);
            write_quantiles_tsv(sink(s.out.as_deref())?, &q, &grid)?;
        }
        AnalyticsOp::Funding { s, l, years } => {
            let (corpus, sample, w) = (
                load_corpus(&s.corpus)?,
                read_sample(&s.sample, &s.stringency)?,
                window(s.from, s.to)?,
            );
            let leading = leading_journals(&corpus, &l.trunk, l.min_citations, w);
            write_funding_tsv(
                sink(s.out.as_deref())?,
                &funding_and_citation_shares(&sample, &corpus, &leading, *years),
            )?;
        }
        AnalyticsOp::Countries {
            s,
            floor,
            from_year,
            to_year,
            require_agreement,
            growth_out,
        } => {
            let (corpus, sample) = (load_corpus(&s.corpus)?, read_sample(&s.sample, &s.stringency)?);
            let opts = CountryOptions {
                require_first_last_agreement: *require_agreement,
                floor: *floor,
                from_year: *from_year,
                to_year: *to_year,
            };
            let trends = country_trends(&sample, &corpus, &opts)?;
            write_country_counts_tsv(sink(s.out.as_deref())?, &trends)?;
            if let Some(p) = growth_out {
                write_growth_tsv(sink(Some(p))?, &trends)?;
            }
        }
        AnalyticsOp::Meta {
            corpus,
            method,
            from,
            to,
            out,
        } => {
            let corpus = load_corpus(corpus)?;
            let method = match method {
                MetaArg::Keyword => MetaMethod::Keyword,
                MetaArg::NlmTag => MetaMethod::NlmTag,
            };
            let flagged = flag_meta_analyses(corpus.records(), method);
            write_year_table(
                sink(out.as_deref())?,
                &[("meta_analyses", &counts_by_year(&flagged, &corpus, window(*from, *to)?))],
            )?;
        }
        AnalyticsOp::Audit { registry, out } => {
            let rows = read_registry_csv(BufReader::new(File::open(registry)?))?;
            write_audit_tsv(sink(out.as_deref())?, &registry_audit(&rows))?;
        }
    }
    Ok(())
}
