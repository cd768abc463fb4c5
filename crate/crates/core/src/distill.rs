//! Weak-label assembly, desk-scale distilled classifiers, score files and the
//! logistic ensemble.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{PublicationRecord, RejectedLine};
use crate::labels::Verdict;
use crate::prompts::ParsedCompletion;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("size schedule must be strictly ascending: {0:?}")]
    UnsortedSchedule(Vec<usize>),
    #[error("requested {requested} weak labels but only {available} parsed completions exist")]
    NotEnoughLabels { requested: usize, available: usize },
    #[error("duplicate completion for pmid {0}")]
    DuplicatePmid(String),
    #[error("cannot featurize an empty document set")]
    EmptyCorpus,
    #[error("need at least {folds} labeled examples, got {n}")]
    TooFewExamples { n: usize, folds: usize },
    #[error("labels contain a single class")]
    SingleClass,
    #[error("feature/label length mismatch: {features} vs {labels}")]
    LengthMismatch { features: usize, labels: usize },
    #[error("score file line {line}: {message}")]
    ScoreFile { line: usize, message: String },
    #[error("ensemble needs at least 2 score sets, got {0}")]
    TooFewScoreSets(usize),
    #[error("duplicate scorer id {0}")]
    DuplicateScorer(String),
    #[error("score set {scorer} lacks {count} training pmids (first: {first})")]
    MissingScores {
        scorer: String,
        count: usize,
        first: String,
    },
    #[error("empty design: no training labels")]
    EmptyDesign,
    #[error("rank-deficient design: score set {0} is constant over the training pmids")]
    ConstantColumn(String),
    #[error("model expects scorers {expected:?}, got {got:?}")]
    ScorerMismatch { expected: Vec<String>, got: Vec<String> },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub const DEFAULT_SIZE_SCHEDULE: [usize; 7] = [1000, 2000, 4000, 8000, 16000, 32000, 64000];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeakLabel {
    pub pmid: String,
    pub verdict: Verdict,
    pub model_id: String,
    pub prompt_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeakLabelSet {
    pub size: usize,
    pub entries: Vec<WeakLabel>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeakLabelAssembly {
    pub sets: Vec<WeakLabelSet>,
    pub dropped_unparseable: usize,
}

/// Nested weak-label sets: every set is a prefix of one seeded shuffle of the
/// parsed completions, so smaller sets are subsets of larger ones.
pub fn assemble_weak_labels(
    completions: &[(String, ParsedCompletion)],
    model_id: &str,
    prompt_id: &str,
    sizes: &[usize],
    seed: u64,
) -> Result<WeakLabelAssembly, DistillError> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DistillError::UnsortedSchedule(sizes.to_vec()));
    }
    let mut parsed: Vec<(&str, Verdict)> = Vec::with_capacity(completions.len());
    let mut seen = std::collections::HashSet::new();
    let mut dropped = 0;
    for (pmid, c) in completions {
        if !seen.insert(pmid.as_str()) {
            return Err(DistillError::DuplicatePmid(pmid.clone()));
        }
        if c.verdict.is_parsed() {
            parsed.push((pmid, c.verdict.as_verdict()));
        } else {
            dropped += 1;
        }
    }
    if let Some(&largest) = sizes.last() {
        if largest > parsed.len() {
            return Err(DistillError::NotEnoughLabels {
                requested: largest,
                available: parsed.len(),
            });
        }
    }
    parsed.sort_unstable();
    parsed.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let sets = sizes
        .iter()
        .map(|&size| WeakLabelSet {
            size,
            entries: parsed[..size]
                .iter()
                .map(|&(pmid, verdict)| WeakLabel {
                    pmid: pmid.to_string(),
                    verdict,
                    model_id: model_id.to_string(),
                    prompt_id: prompt_id.to_string(),
                })
                .collect(),
        })
        .collect();
    Ok(WeakLabelAssembly {
        sets,
        dropped_unparseable: dropped,
    })
}

/// Sparse vector as (feature index, value), indices ascending.
pub type SparseVec = Vec<(u32, f64)>;

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Frozen TF-IDF feature space: sublinear term frequency, smoothed idf,
/// L2-normalized rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfSpace {
    pub min_df: usize,
    pub vocabulary: Vec<String>,
    pub idf: Vec<f64>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl TfidfSpace {
    pub fn fit<S: AsRef<str> + Sync>(docs: &[S], min_df: usize) -> Result<Self, DistillError> {
        if docs.is_empty() {
            return Err(DistillError::EmptyCorpus);
        }
        let per_doc: Vec<Vec<String>> = docs
            .par_iter()
            .map(|d| {
                let mut toks: Vec<String> = tokenize(d.as_ref()).collect();
                toks.sort_unstable();
                toks.dedup();
                toks
            })
            .collect();
        let mut df: BTreeMap<&str, usize> = BTreeMap::new();
        for toks in &per_doc {
            for t in toks {
                *df.entry(t).or_default() += 1;
            }
        }
        let n = docs.len() as f64;
        let (vocabulary, idf): (Vec<String>, Vec<f64>) = df
            .into_iter()
            .filter(|&(_, c)| c >= min_df.max(1))
            .map(|(t, c)| (t.to_string(), ((1.0 + n) / (1.0 + c as f64)).ln() + 1.0))
            .unzip();
        let mut space = Self {
            min_df,
            vocabulary,
            idf,
            index: HashMap::new(),
        };
        space.rebuild_index();
        Ok(space)
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .vocabulary
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn dim(&self) -> usize {
        self.vocabulary.len()
    }

    /// Out-of-vocabulary tokens are ignored; a document with none left maps
    /// to the zero vector.
    pub fn transform(&self, doc: &str) -> SparseVec {
        let mut tf: BTreeMap<u32, u32> = BTreeMap::new();
        for tok in tokenize(doc) {
            if let Some(&i) = self.index.get(&tok) {
                *tf.entry(i).or_default() += 1;
            }
        }
        let mut v: SparseVec = tf
            .into_iter()
            .map(|(i, c)| (i, (1.0 + (c as f64).ln()) * self.idf[i as usize]))
            .collect();
        let norm = v.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, x) in &mut v {
                *x /= norm;
            }
        }
        v
    }

    pub fn transform_all<S: AsRef<str> + Sync>(&self, docs: &[S]) -> Vec<SparseVec> {
        docs.par_iter().map(|d| self.transform(d.as_ref())).collect()
    }
}

pub fn sparse_dot(a: &SparseVec, b: &SparseVec) -> f64 {
    let (mut i, mut j, mut s) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                s += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    s
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Log-loss of a logit against a 0/1 label.
fn logit_loss(z: f64, y: bool) -> f64 {
    softplus(z) - if y { z } else { 0.0 }
}

pub fn log_loss(probs: &[f64], labels: &[bool]) -> f64 {
    let eps = 1e-15;
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / probs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Logistic,
    NaiveBayes,
}

impl Algorithm {
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            Algorithm::Logistic => vec![1e-5, 1e-4, 1e-3, 1e-2, 1e-1],
            Algorithm::NaiveBayes => vec![0.01, 0.1, 0.5, 1.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub folds: usize,
    pub seed: u64,
    /// Regularization strengths (logistic) or smoothing values (naive Bayes).
    pub grid: Vec<f64>,
    /// Weight on positive examples; 1.0 fits raw labels.
    pub positive_weight: f64,
}

impl TrainOptions {
    pub fn new(algorithm: Algorithm, seed: u64) -> Self {
        Self {
            folds: 10,
            seed,
            grid: algorithm.default_grid(),
            positive_weight: 1.0,
        }
    }
}

/// Linear scorer over a feature space: `p = sigmoid(intercept + w·x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearScorer {
    pub intercept: f64,
    pub weights: Vec<f64>,
}

impl LinearScorer {
    pub fn logit(&self, x: &SparseVec) -> f64 {
        self.intercept + x.iter().map(|&(i, v)| self.weights[i as usize] * v).sum::<f64>()
    }

    pub fn prob(&self, x: &SparseVec) -> f64 {
        sigmoid(self.logit(x))
    }
}

struct Problem<'a> {
    xs: &'a [SparseVec],
    ys: &'a [bool],
    dim: usize,
    lambda: f64,
    positive_weight: f64,
}

impl Problem<'_> {
    fn weight(&self, y: bool) -> f64 {
        if y {
            self.positive_weight
        } else {
            1.0
        }
    }

    /// Weighted mean log-loss plus (λ/2)‖w‖²; θ = [w, b].
    fn value_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let (w, b) = theta.split_at(self.dim);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let total_w: f64 = self.ys.iter().map(|&y| self.weight(y)).sum();
        let mut loss = 0.0;
        for (x, &y) in self.xs.iter().zip(self.ys) {
            let z = b[0] + x.iter().map(|&(i, v)| w[i as usize] * v).sum::<f64>();
            let s = self.weight(y) / total_w;
            loss += s * logit_loss(z, y);
            let r = s * (sigmoid(z) - if y { 1.0 } else { 0.0 });
            for &(i, v) in x {
                grad[i as usize] += r * v;
            }
            grad[self.dim] += r;
        }
        let mut reg = 0.0;
        for i in 0..self.dim {
            reg += w[i] * w[i];
            grad[i] += self.lambda * w[i];
        }
        loss + 0.5 * self.lambda * reg
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Limited-memory BFGS with Armijo backtracking; deterministic.
fn lbfgs<F: FnMut(&[f64], &mut [f64]) -> f64>(mut f: F, x0: Vec<f64>, max_iter: usize, gtol: f64) -> Vec<f64> {
    const M: usize = 10;
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    for _ in 0..max_iter {
        if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) < gtol {
            break;
        }
        // Two-loop recursion.
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let rho = 1.0 / dot(y, s);
            let a = rho * dot(s, &d);
            d.iter_mut().zip(y).for_each(|(di, yi)| *di -= a * yi);
            alphas.push((a, rho));
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|di| *di *= gamma);
        }
        for ((s, y), (a, rho)) in s_hist.iter().zip(&y_hist).zip(alphas.into_iter().rev()) {
            let beta = rho * dot(y, &d);
            d.iter_mut().zip(s).for_each(|(di, si)| *di += (a - beta) * si);
        }
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
            s_hist.clear();
            y_hist.clear();
        }
        let mut step = if s_hist.is_empty() {
            1.0 / g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0)
        } else {
            1.0
        };
        let mut fx_new;
        let mut accepted = false;
        for _ in 0..60 {
            x_new
                .iter_mut()
                .zip(&x)
                .zip(&d)
                .for_each(|((xn, xi), di)| *xn = xi + step * di);
            fx_new = f(&x_new, &mut g_new);
            if fx_new <= fx + 1e-4 * step * slope {
                let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
                if dot(&s, &y) > 1e-16 {
                    if s_hist.len() == M {
                        s_hist.remove(0);
                        y_hist.remove(0);
                    }
                    s_hist.push(s);
                    y_hist.push(y);
                }
                std::mem::swap(&mut x, &mut x_new);
                std::mem::swap(&mut g, &mut g_new);
                let improvement = fx - fx_new;
                fx = fx_new;
                accepted = true;
                if improvement.abs() <= 1e-15 * fx.abs().max(1.0) {
                    return x;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    x
}

fn check_training_data(xs: &[SparseVec], ys: &[bool], folds: usize) -> Result<(), DistillError> {
    if xs.len() != ys.len() {
        return Err(DistillError::LengthMismatch {
            features: xs.len(),
            labels: ys.len(),
        });
    }
    if xs.len() < folds.max(2) {
        return Err(DistillError::TooFewExamples { n: xs.len(), folds });
    }
    if ys.iter().all(|&y| y) || ys.iter().all(|&y| !y) {
        return Err(DistillError::SingleClass);
    }
    Ok(())
}

/// L2-regularized logistic regression (intercept unpenalized).
pub fn fit_logistic(xs: &[SparseVec], ys: &[bool], dim: usize, lambda: f64, positive_weight: f64) -> LinearScorer {
    let problem = Problem {
        xs,
        ys,
        dim,
        lambda,
        positive_weight,
    };
    let theta = lbfgs(|t, g| problem.value_grad(t, g), vec![0.0; dim + 1], 1000, 1e-9);
    LinearScorer {
        intercept: theta[dim],
        weights: theta[..dim].to_vec(),
    }
}

/// Multinomial naive Bayes on non-negative features, expressed as a linear
/// scorer of the log posterior odds.
pub fn fit_naive_bayes(xs: &[SparseVec], ys: &[bool], dim: usize, alpha: f64, positive_weight: f64) -> LinearScorer {
    let mut mass = [vec![alpha; dim], vec![alpha; dim]];
    let mut counts = [0.0f64; 2];
    for (x, &y) in xs.iter().zip(ys) {
        let w = if y { positive_weight } else { 1.0 };
        counts[y as usize] += w;
        for &(i, v) in x {
            mass[y as usize][i as usize] += w * v;
        }
    }
    let totals = [mass[0].iter().sum::<f64>(), mass[1].iter().sum::<f64>()];
    let weights = (0..dim)
        .map(|i| (mass[1][i] / totals[1]).ln() - (mass[0][i] / totals[0]).ln())
        .collect();
    LinearScorer {
        intercept: (counts[1] / counts[0]).ln(),
        weights,
    }
}

fn fit_algorithm(
    algorithm: Algorithm,
    xs: &[SparseVec],
    ys: &[bool],
    dim: usize,
    strength: f64,
    positive_weight: f64,
) -> LinearScorer {
    match algorithm {
        Algorithm::Logistic => fit_logistic(xs, ys, dim, strength, positive_weight),
        Algorithm::NaiveBayes => fit_naive_bayes(xs, ys, dim, strength, positive_weight),
    }
}

/// Stratified fold index per example: classes are shuffled separately and
/// dealt round-robin.
pub fn stratified_folds(ys: &[bool], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; ys.len()];
    let mut offset = 0;
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..ys.len()).filter(|&i| ys[i] == class).collect();
        idx.shuffle(&mut rng);
        for (k, i) in idx.into_iter().enumerate() {
            assignment[i] = (k + offset) % folds;
        }
        offset = ys.iter().filter(|&&y| y == class).count() % folds;
    }
    assignment
}

/// Mean held-out log-loss over the folds for one hyperparameter value.
#[allow(clippy::too_many_arguments)]
pub fn cv_log_loss(
    algorithm: Algorithm,
    xs: &[SparseVec],
    ys: &[bool],
    dim: usize,
    strength: f64,
    fold_of: &[usize],
    folds: usize,
    positive_weight: f64,
) -> f64 {
    let mut losses = Vec::with_capacity(folds);
    for k in 0..folds {
        let (mut tx, mut ty, mut vx, mut vy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for i in 0..xs.len() {
            if fold_of[i] == k {
                vx.push(xs[i].clone());
                vy.push(ys[i]);
            } else {
                tx.push(xs[i].clone());
                ty.push(ys[i]);
            }
        }
        if vx.is_empty() {
            continue;
        }
        let model = fit_algorithm(algorithm, &tx, &ty, dim, strength, positive_weight);
        let probs: Vec<f64> = vx.iter().map(|x| model.prob(x)).collect();
        losses.push(log_loss(&probs, &vy));
    }
    losses.iter().sum::<f64>() / losses.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineFit {
    pub algorithm: Algorithm,
    pub strength: f64,
    /// (strength, mean held-out log-loss) for every grid value.
    pub cv: Vec<(f64, f64)>,
    pub scorer: LinearScorer,
}

/// Selects the grid value with the lowest CV log-loss (ties toward stronger
/// regularization / smoothing) and refits on all data.
pub fn train_baseline(
    xs: &[SparseVec],
    ys: &[bool],
    dim: usize,
    algorithm: Algorithm,
    opts: &TrainOptions,
) -> Result<BaselineFit, DistillError> {
    check_training_data(xs, ys, opts.folds)?;
    let fold_of = stratified_folds(ys, opts.folds, opts.seed);
    let mut grid = opts.grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let cv: Vec<(f64, f64)> = grid
        .par_iter()
        .map(|&s| {
            (
                s,
                cv_log_loss(algorithm, xs, ys, dim, s, &fold_of, opts.folds, opts.positive_weight),
            )
        })
        .collect();
    let (strength, _) = cv
        .iter()
        .copied()
        .fold(None::<(f64, f64)>, |best, (s, l)| match best {
            Some((_, bl)) if l > bl => best,
            _ => Some((s, l)),
        })
        .expect("non-empty grid");
    let scorer = fit_algorithm(algorithm, xs, ys, dim, strength, opts.positive_weight);
    Ok(BaselineFit {
        algorithm,
        strength,
        cv,
        scorer,
    })
}

/// Self-describing model file: frozen vocabulary plus coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistilledModel {
    pub format: String,
    pub scorer_id: String,
    pub algorithm: Algorithm,
    pub strength: f64,
    pub space: TfidfSpace,
    pub scorer: LinearScorer,
}

pub const MODEL_FORMAT: &str = "trialcensus-linear-v1";

impl DistilledModel {
    pub fn new(scorer_id: impl Into<String>, space: TfidfSpace, fit: BaselineFit) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            scorer_id: scorer_id.into(),
            algorithm: fit.algorithm,
            strength: fit.strength,
            space,
            scorer: fit.scorer,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DistillError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DistillError> {
        let mut model: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        model.space.rebuild_index();
        Ok(model)
    }

    pub fn score_text(&self, text: &str) -> f64 {
        self.scorer.prob(&self.space.transform(text))
    }

    /// Records without an abstract score as the empty document.
    pub fn score_records<'a>(&self, records: impl IntoIterator<Item = &'a PublicationRecord>) -> ScoreSet {
        let recs: Vec<&PublicationRecord> = records.into_iter().collect();
        let scores = recs
            .par_iter()
            .map(|r| (r.pmid.clone(), self.score_text(r.abstract_str().unwrap_or(""))))
            .collect::<Vec<_>>()
            .into_iter()
            .collect();
        ScoreSet {
            scorer_id: self.scorer_id.clone(),
            scores,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub scorer_id: String,
    pub scores: BTreeMap<String, f64>,
}

impl ScoreSet {
    pub fn new(scorer_id: impl Into<String>) -> Self {
        Self {
            scorer_id: scorer_id.into(),
            scores: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScoreRow {
    pmid: String,
    scorer_id: String,
    prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreImport {
    pub set: ScoreSet,
    pub rejected: Vec<RejectedLine>,
}

/// Reads score-file JSONL rows `{pmid, scorer_id, prob}`.
///
/// Out-of-range probabilities and rows for another scorer are rejected per
/// line; a row without a pmid or a repeated pmid fails the whole file.
pub fn read_scores<R: BufRead>(reader: R, scorer_id: &str) -> Result<ScoreImport, DistillError> {
    let mut set = ScoreSet::new(scorer_id);
    let mut rejected = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                rejected.push(RejectedLine {
                    line: lineno,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let pmid = match value.get("pmid") {
            Some(serde_json::Value::String(s)) if !s.is_empty() => s.clone(),
            Some(serde_json::Value::Number(n)) => n.to_string(),
            _ => {
                return Err(DistillError::ScoreFile {
                    line: lineno,
                    message: "missing pmid".into(),
                })
            }
        };
        let reject = |reason: String| RejectedLine { line: lineno, reason };
        let Some(prob) = value.get("prob").and_then(serde_json::Value::as_f64) else {
            rejected.push(reject("missing or non-numeric prob".into()));
            continue;
        };
        if !(0.0..=1.0).contains(&prob) {
            rejected.push(reject(format!("prob {prob} outside [0, 1]")));
            continue;
        }
        match value.get("scorer_id").and_then(serde_json::Value::as_str) {
            Some(s) if s == scorer_id => {}
            other => {
                rejected.push(reject(format!("scorer_id {other:?} does not match {scorer_id:?}")));
                continue;
            }
        }
        if set.scores.insert(pmid.clone(), prob).is_some() {
            return Err(DistillError::ScoreFile {
                line: lineno,
                message: format!("duplicate pmid {pmid}"),
            });
        }
    }
    Ok(ScoreImport { set, rejected })
}

pub fn import_scores(path: impl AsRef<Path>, scorer_id: &str) -> Result<ScoreImport, DistillError> {
    read_scores(BufReader::new(File::open(path)?), scorer_id)
}

pub fn write_scores<W: Write>(mut w: W, set: &ScoreSet) -> io::Result<()> {
    for (pmid, &prob) in &set.scores {
        let row = ScoreRow {
            pmid: pmid.clone(),
            scorer_id: set.scorer_id.clone(),
            prob,
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn export_scores(path: impl AsRef<Path>, set: &ScoreSet) -> io::Result<()> {
    write_scores(BufWriter::new(File::create(path)?), set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub log_loss: f64,
    pub n: usize,
    pub separation_flag: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub intercept: f64,
    pub coefficients: BTreeMap<String, f64>,
    pub fit_diagnostics: FitDiagnostics,
}

/// Result of a dense logistic fit `y ~ 1 + X`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFit {
    /// Intercept first, then one coefficient per column.
    pub beta: Vec<f64>,
    pub log_loss: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn dense_loss(x: &DMatrix<f64>, y: &[bool], beta: &DVector<f64>, l2: f64) -> f64 {
    let z = x * beta;
    let n = y.len() as f64;
    let data: f64 = z.iter().zip(y).map(|(&z, &y)| logit_loss(z, y)).sum::<f64>() / n;
    let penalty: f64 = beta.iter().skip(1).map(|b| b * b).sum::<f64>();
    data + 0.5 * l2 * penalty
}

/// Newton-Raphson with a pseudo-inverse step (tolerates duplicated columns)
/// and step halving. `l2` penalizes all coefficients but the intercept.
pub fn fit_dense_logistic(columns: &[Vec<f64>], y: &[bool], l2: f64) -> DenseFit {
    let n = y.len();
    let k = columns.len();
    let x = DMatrix::from_fn(n, k + 1, |i, j| if j == 0 { 1.0 } else { columns[j - 1][i] });
    let mut beta = DVector::zeros(k + 1);
    let mut loss = dense_loss(&x, y, &beta, l2);
    let yv = DVector::from_iterator(n, y.iter().map(|&b| if b { 1.0 } else { 0.0 }));
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..200 {
        iterations = it + 1;
        let p = (&x * &beta).map(sigmoid);
        let w = p.map(|p| (p * (1.0 - p)).max(1e-12));
        let mut grad = x.transpose() * (&p - &yv) / n as f64;
        let mut hess = x.transpose() * DMatrix::from_diagonal(&w) * &x / n as f64;
        for j in 1..=k {
            grad[j] += l2 * beta[j];
            hess[(j, j)] += l2;
        }
        let Ok(pinv) = hess.clone().pseudo_inverse(1e-12) else {
            break;
        };
        let step = pinv * &grad;
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..50 {
            let cand = &beta - &step * t;
            let cand_loss = dense_loss(&x, y, &cand, l2);
            if cand_loss <= loss {
                beta = cand;
                let delta = loss - cand_loss;
                loss = cand_loss;
                improved = true;
                if step.amax() * t < 1e-10 || delta < 1e-16 {
                    converged = true;
                }
                break;
            }
            t *= 0.5;
        }
        if !improved {
            converged = grad.amax() < 1e-8;
            break;
        }
        if converged {
            break;
        }
    }
    DenseFit {
        beta: beta.iter().copied().collect(),
        log_loss: loss,
        converged,
        iterations,
    }
}

/// Separation shows up as coefficients that run away or a fit that never
/// settles.
fn looks_separated(fit: &DenseFit) -> bool {
    !fit.converged || fit.beta.iter().any(|b| !b.is_finite() || b.abs() > 1e4) || fit.log_loss < 1e-9
}

pub const SEPARATION_L2: f64 = 1e-6;

/// Logistic regression of the training verdicts on the members'
/// probabilities plus an intercept.
pub fn fit_ensemble(score_sets: &[ScoreSet], gold: &BTreeMap<String, bool>) -> Result<EnsembleModel, DistillError> {
    if score_sets.len() < 2 {
        return Err(DistillError::TooFewScoreSets(score_sets.len()));
    }
    if gold.is_empty() {
        return Err(DistillError::EmptyDesign);
    }
    let mut ids = std::collections::BTreeSet::new();
    for s in score_sets {
        if !ids.insert(s.scorer_id.as_str()) {
            return Err(DistillError::DuplicateScorer(s.scorer_id.clone()));
        }
    }
    let pmids: Vec<&String> = gold.keys().collect();
    let y: Vec<bool> = gold.values().copied().collect();
    let mut columns = Vec::with_capacity(score_sets.len());
    for s in score_sets {
        let missing: Vec<&&String> = pmids.iter().filter(|p| !s.scores.contains_key(p.as_str())).collect();
        if let Some(first) = missing.first() {
            return Err(DistillError::MissingScores {
                scorer: s.scorer_id.clone(),
                count: missing.len(),
                first: (**first).clone(),
            });
        }
        let col: Vec<f64> = pmids.iter().map(|p| s.scores[p.as_str()]).collect();
        if col.iter().all(|&v| v == col[0]) {
            return Err(DistillError::ConstantColumn(s.scorer_id.clone()));
        }
        columns.push(col);
    }
    let mut fit = fit_dense_logistic(&columns, &y, 0.0);
    let separated = looks_separated(&fit);
    if separated {
        log::warn!("ensemble: separation detected, refitting with L2 {SEPARATION_L2}");
        fit = fit_dense_logistic(&columns, &y, SEPARATION_L2);
    }
    Ok(EnsembleModel {
        intercept: fit.beta[0],
        coefficients: score_sets
            .iter()
            .zip(&fit.beta[1..])
            .map(|(s, &b)| (s.scorer_id.clone(), b))
            .collect(),
        fit_diagnostics: FitDiagnostics {
            log_loss: fit.log_loss,
            n: y.len(),
            separation_flag: separated,
            iterations: fit.iterations,
        },
    })
}

impl EnsembleModel {
    pub fn scorer_ids(&self) -> Vec<String> {
        self.coefficients.keys().cloned().collect()
    }

    pub fn prob(&self, probs: &BTreeMap<&str, f64>) -> f64 {
        sigmoid(
            self.intercept
                + self
                    .coefficients
                    .iter()
                    .map(|(id, b)| b * probs[id.as_str()])
                    .sum::<f64>(),
        )
    }

    /// Scores every pmid covered by all member sets.
    pub fn score(&self, score_sets: &[ScoreSet], scorer_id: &str) -> Result<ScoreSet, DistillError> {
        let mut got: Vec<String> = score_sets.iter().map(|s| s.scorer_id.clone()).collect();
        got.sort();
        let expected = self.scorer_ids();
        if got != expected {
            return Err(DistillError::ScorerMismatch { expected, got });
        }
        let by_id: BTreeMap<&str, &ScoreSet> = score_sets.iter().map(|s| (s.scorer_id.as_str(), s)).collect();
        let first = by_id.values().next().expect("at least one member");
        let mut out = ScoreSet::new(scorer_id);
        for pmid in first.scores.keys() {
            let probs: Option<BTreeMap<&str, f64>> = by_id
                .iter()
                .map(|(id, s)| s.scores.get(pmid).map(|&p| (*id, p)))
                .collect();
            if let Some(probs) = probs {
                out.scores.insert(pmid.clone(), self.prob(&probs));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::{parse_completion, PromptFamily, SynonymMap};
    use proptest::prelude::*;
    use rand::Rng;

    fn completions(n: usize, unparseable_every: usize) -> Vec<(String, ParsedCompletion)> {
        let syn = SynonymMap::default();
        (0..n)
            .map(|i| {
                let raw = if unparseable_every > 0 && i % unparseable_every == 0 {
                    "hmm"
                } else if i % 3 == 0 {
                    "TRUE"
                } else {
                    "FALSE"
                };
                (format!("p{i}"), parse_completion(PromptFamily::TrueFalse, raw, &syn))
            })
            .collect()
    }

    #[test]
    fn weak_sets_are_nested() {
        let a = assemble_weak_labels(&completions(4, 0), "m", "1.2", &[2, 4], 1).unwrap();
        let small: Vec<_> = a.sets[0].entries.iter().map(|e| &e.pmid).collect();
        let large: Vec<_> = a.sets[1].entries.iter().map(|e| &e.pmid).collect();
        assert!(small.iter().all(|p| large.contains(p)));
        assert_eq!(
            a,
            assemble_weak_labels(&completions(4, 0), "m", "1.2", &[2, 4], 1).unwrap()
        );
    }

    #[test]
    fn weak_sets_drop_unparseable_and_check_sizes() {
        let a = assemble_weak_labels(&completions(10, 5), "m", "1.2", &[8], 1).unwrap();
        assert_eq!(a.dropped_unparseable, 2);
        assert!(matches!(
            assemble_weak_labels(&completions(10, 5), "m", "1.2", &[9], 1),
            Err(DistillError::NotEnoughLabels {
                requested: 9,
                available: 8
            })
        ));
        assert!(matches!(
            assemble_weak_labels(&completions(10, 0), "m", "1.2", &[4, 2], 1),
            Err(DistillError::UnsortedSchedule(_))
        ));
        assert_eq!(DEFAULT_SIZE_SCHEDULE[3], 8000);
    }

    #[test]
    fn tfidf_floor_and_identity() {
        let docs = ["the drug trial", "the drug trial", "a unique word"];
        let space = TfidfSpace::fit(&docs, 2).unwrap();
        assert_eq!(space.vocabulary, ["drug", "the", "trial"]);
        let v = space.transform_all(&docs);
        assert_eq!(v[0], v[1]);
        assert!(v[2].is_empty());
        assert!(matches!(
            TfidfSpace::fit::<&str>(&[], 2),
            Err(DistillError::EmptyCorpus)
        ));
    }

    #[test]
    fn tfidf_rows_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let words = ["alpha", "beta", "gamma", "delta", "drug", "trial", "mice", "placebo"];
        let docs: Vec<String> = (0..100)
            .map(|_| {
                (0..20)
                    .map(|_| words[rng.random_range(0..words.len())])
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let space = TfidfSpace::fit(&docs, 2).unwrap();
        for v in space.transform_all(&docs) {
            assert!((sparse_dot(&v, &v) - 1.0).abs() < 1e-9);
        }
    }

    fn toy_separable() -> (Vec<SparseVec>, Vec<bool>) {
        let xs = (0..20)
            .map(|i| {
                let pos = i % 2 == 0;
                let noise = (i as f64) / 40.0;
                vec![
                    (0, if pos { 1.0 } else { 0.1 } + noise),
                    (1, if pos { 0.1 } else { 1.0 } + noise),
                ]
            })
            .collect();
        let ys = (0..20).map(|i| i % 2 == 0).collect();
        (xs, ys)
    }

    #[test]
    fn separable_toy_fits_perfectly() {
        let (xs, ys) = toy_separable();
        let fit = train_baseline(
            &xs,
            &ys,
            2,
            Algorithm::Logistic,
            &TrainOptions::new(Algorithm::Logistic, 3),
        )
        .unwrap();
        let acc = xs
            .iter()
            .zip(&ys)
            .filter(|(x, &y)| (fit.scorer.prob(x) >= 0.5) == y)
            .count();
        assert_eq!(acc, 20);
        let again = train_baseline(
            &xs,
            &ys,
            2,
            Algorithm::Logistic,
            &TrainOptions::new(Algorithm::Logistic, 3),
        )
        .unwrap();
        for (a, b) in fit.scorer.weights.iter().zip(&again.scorer.weights) {
            assert!((a - b).abs() < 1e-8);
        }
        let nb = train_baseline(
            &xs,
            &ys,
            2,
            Algorithm::NaiveBayes,
            &TrainOptions::new(Algorithm::NaiveBayes, 3),
        )
        .unwrap();
        let acc = xs
            .iter()
            .zip(&ys)
            .filter(|(x, &y)| (nb.scorer.prob(x) >= 0.5) == y)
            .count();
        assert_eq!(acc, 20);
    }

    #[test]
    fn training_preconditions() {
        let (xs, _) = toy_separable();
        let ones = vec![true; 20];
        let opts = TrainOptions::new(Algorithm::Logistic, 0);
        assert!(matches!(
            train_baseline(&xs, &ones, 2, Algorithm::Logistic, &opts),
            Err(DistillError::SingleClass)
        ));
        assert!(matches!(
            train_baseline(
                &xs[..5],
                &[true, false, true, false, true],
                2,
                Algorithm::Logistic,
                &opts
            ),
            Err(DistillError::TooFewExamples { .. })
        ));
    }

    #[test]
    fn logistic_gradient_vanishes_at_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xs: Vec<SparseVec> = (0..200)
            .map(|_| (0..5u32).map(|j| (j, rng.random::<f64>())).collect())
            .collect();
        let ys: Vec<bool> = xs.iter().map(|x| x[0].1 + rng.random::<f64>() * 0.8 > 0.9).collect();
        let model = fit_logistic(&xs, &ys, 5, 1e-3, 1.0);
        let problem = Problem {
            xs: &xs,
            ys: &ys,
            dim: 5,
            lambda: 1e-3,
            positive_weight: 1.0,
        };
        let mut theta = model.weights.clone();
        theta.push(model.intercept);
        let mut g = vec![0.0; 6];
        problem.value_grad(&theta, &mut g);
        assert!(g.iter().all(|v| v.abs() < 1e-7), "{g:?}");
    }

    #[test]
    fn folds_are_stratified() {
        let ys: Vec<bool> = (0..103).map(|i| i % 9 == 0).collect();
        let f = stratified_folds(&ys, 10, 1);
        for k in 0..10 {
            let pos = (0..103).filter(|&i| f[i] == k && ys[i]).count();
            assert!((1..=2).contains(&pos));
        }
    }

    #[test]
    fn empty_document_scores_intercept() {
        let docs = ["drug trial", "drug trial", "mouse study", "mouse study"];
        let space = TfidfSpace::fit(&docs, 2).unwrap();
        let xs = space.transform_all(&docs);
        let ys = [true, true, false, false];
        let fit = train_baseline(
            &xs,
            &ys,
            space.dim(),
            Algorithm::Logistic,
            &TrainOptions {
                folds: 2,
                ..TrainOptions::new(Algorithm::Logistic, 0)
            },
        )
        .unwrap();
        let model = DistilledModel::new("lr", space, fit);
        assert_eq!(model.score_text("zzz unseen"), sigmoid(model.scorer.intercept));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        model.save(&path).unwrap();
        let back = DistilledModel::load(&path).unwrap();
        assert_eq!(back.score_text("drug trial"), model.score_text("drug trial"));
    }

    #[test]
    fn score_file_validation() {
        let text = "{\"pmid\":\"1\",\"scorer_id\":\"s\",\"prob\":0.1}\n\
                    {\"pmid\":\"2\",\"scorer_id\":\"s\",\"prob\":1.2}\n\
                    {\"pmid\":\"3\",\"scorer_id\":\"s\",\"prob\":0.9}\n\
                    {\"pmid\":\"4\",\"scorer_id\":\"s\",\"prob\":1.0}\n";
        let imp = read_scores(text.as_bytes(), "s").unwrap();
        assert_eq!(imp.set.len(), 3);
        assert_eq!(imp.rejected.len(), 1);
        assert_eq!(imp.rejected[0].line, 2);
        let dup =
            "{\"pmid\":\"1\",\"scorer_id\":\"s\",\"prob\":0.1}\n{\"pmid\":\"1\",\"scorer_id\":\"s\",\"prob\":0.2}\n";
        assert!(matches!(
            read_scores(dup.as_bytes(), "s"),
            Err(DistillError::ScoreFile { line: 2, .. })
        ));
        let no_pmid = "{\"scorer_id\":\"s\",\"prob\":0.1}\n";
        assert!(read_scores(no_pmid.as_bytes(), "s").is_err());
    }

    #[test]
    fn ensemble_hand_computed() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sets: Vec<ScoreSet> = ["a", "b"]
            .iter()
            .map(|id| ScoreSet {
                scorer_id: id.to_string(),
                scores: (0..40).map(|i| (format!("{i:02}"), rng.random::<f64>())).collect(),
            })
            .collect();
        let gold: BTreeMap<String, bool> = (0..40).map(|i| (format!("{i:02}"), rng.random_bool(0.4))).collect();
        let model = fit_ensemble(&sets, &gold).unwrap();
        let scored = model.score(&sets, "ens").unwrap();
        for i in 0..10 {
            let pmid = format!("{i:02}");
            let z = model.intercept
                + model.coefficients["a"] * sets[0].scores[&pmid]
                + model.coefficients["b"] * sets[1].scores[&pmid];
            assert!((scored.scores[&pmid] - 1.0 / (1.0 + (-z).exp())).abs() < 1e-10);
        }
    }

    #[test]
    fn ensemble_reproduces_gold_ranking() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let gold: BTreeMap<String, bool> = (0..60).map(|i| (format!("{i:02}"), rng.random_bool(0.3))).collect();
        let oracle = ScoreSet {
            scorer_id: "gold".into(),
            scores: gold
                .iter()
                .map(|(k, &v)| (k.clone(), if v { 1.0 } else { 0.0 }))
                .collect(),
        };
        let noise = ScoreSet {
            scorer_id: "noise".into(),
            scores: gold.keys().map(|k| (k.clone(), rng.random::<f64>())).collect(),
        };
        let model = fit_ensemble(&[oracle.clone(), noise.clone()], &gold).unwrap();
        assert!(model.fit_diagnostics.separation_flag);
        let scored = model.score(&[oracle, noise], "ens").unwrap();
        let min_pos = gold
            .iter()
            .filter(|g| *g.1)
            .map(|g| scored.scores[g.0])
            .fold(1.0, f64::min);
        let max_neg = gold
            .iter()
            .filter(|g| !*g.1)
            .map(|g| scored.scores[g.0])
            .fold(0.0, f64::max);
        assert!(min_pos > max_neg);
    }

    #[test]
    fn duplicated_members_match_single_calibration() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let gold: BTreeMap<String, bool> = (0..80).map(|i| (format!("{i:02}"), rng.random_bool(0.4))).collect();
        let scores: BTreeMap<String, f64> = gold
            .iter()
            .map(|(k, &y)| (k.clone(), (rng.random::<f64>() * 0.7 + if y { 0.3 } else { 0.0 })))
            .collect();
        let a = ScoreSet {
            scorer_id: "a".into(),
            scores: scores.clone(),
        };
        let b = ScoreSet {
            scorer_id: "b".into(),
            scores: scores.clone(),
        };
        let model = fit_ensemble(&[a.clone(), b.clone()], &gold).unwrap();
        let col: Vec<f64> = scores.values().copied().collect();
        let ys: Vec<bool> = gold.values().copied().collect();
        let single = fit_dense_logistic(std::slice::from_ref(&col), &ys, 0.0);
        let scored = model.score(&[a, b], "ens").unwrap();
        for (i, (pmid, &p)) in scores.iter().enumerate() {
            let expect = sigmoid(single.beta[0] + single.beta[1] * p);
            assert!((scored.scores[pmid] - expect).abs() < 1e-6, "row {i}");
        }
    }

    #[test]
    fn ensemble_errors() {
        let s = ScoreSet {
            scorer_id: "a".into(),
            scores: [("1".to_string(), 0.5)].into(),
        };
        let gold: BTreeMap<String, bool> = [("1".to_string(), true)].into();
        assert!(matches!(
            fit_ensemble(std::slice::from_ref(&s), &gold),
            Err(DistillError::TooFewScoreSets(1))
        ));
        let t = ScoreSet {
            scorer_id: "b".into(),
            scores: BTreeMap::new(),
        };
        assert!(matches!(
            fit_ensemble(&[t, s.clone()], &gold),
            Err(DistillError::MissingScores { .. })
        ));
        let u = ScoreSet {
            scorer_id: "c".into(),
            ..s.clone()
        };
        assert!(matches!(
            fit_ensemble(&[s.clone(), u.clone()], &BTreeMap::new()),
            Err(DistillError::EmptyDesign)
        ));
        assert!(matches!(
            fit_ensemble(&[s, u], &gold),
            Err(DistillError::ConstantColumn(_))
        ));
    }

    proptest! {
        #[test]
        fn score_file_round_trip(scores in proptest::collection::btree_map("[0-9]{1,8}", 0.0f64..=1.0, 0..40)) {
            let set = ScoreSet { scorer_id: "x".into(), scores };
            let mut buf = Vec::new();
            write_scores(&mut buf, &set).unwrap();
            let back = read_scores(buf.as_slice(), "x").unwrap();
            prop_assert!(back.rejected.is_empty());
            prop_assert_eq!(back.set, set);
        }

        #[test]
        fn weak_prefix_property(n in 4usize..60, seed in any::<u64>()) {
            let comps = completions(n, 0);
            let sizes = [n / 4, n / 2, n];
            prop_assume!(sizes[0] < sizes[1]);
            let a = assemble_weak_labels(&comps, "m", "p", &sizes, seed).unwrap();
            for w in a.sets.windows(2) {
                prop_assert_eq!(&w[1].entries[..w[0].size], &w[0].entries[..]);
            }
        }
    }
}
