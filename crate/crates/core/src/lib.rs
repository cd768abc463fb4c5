//! Building blocks for a census of published clinical trials.
//!
//! The crate covers the desk-scale half of the workflow:
//!
//! - [`corpus`]: publication records, MEDLINE XML ingestion, JSONL interchange
//!   and the reverse-citation index.
//! - [`universe`]: the three candidate rule families (NLM tags, registry
//!   identifiers, abstract keywords) and their overlap tables.
//! - [`labels`]: hand labels, the exclusion taxonomy and split assignment.
//! - [`prompts`]: prompt templates, completion parsing and prompt error analysis.
//! - [`distill`]: weak-label sets, TF-IDF features, linear baselines, score files
//!   and the logistic ensemble.
//! - [`eval`]: confusion counts, ROC curves and operating-point selection.
//! - [`analytics`]: yearly series, citing samples, leading journals, geography,
//!   meta-analysis flags and the registry audit.
//! - [`synthetic`]: seeded corpora with planted ground truth, used by tests and demos.
//!
//! The LLM client lives in `trialcensus-gateway`; stage orchestration and the CLI
//! live in `trialcensus-pipeline`.

pub mod analytics;
pub mod corpus;
pub mod distill;
pub mod eval;
pub mod labels;
pub mod prompts;
pub mod synthetic;
pub mod universe;

pub use corpus::{Corpus, PublicationRecord, YearWindow};
pub use labels::{ExclusionReason, LabelRecord, Split, Verdict};
pub use universe::{RuleSet, UniverseFlags};
