//! Confusion matrices, ROC curves and operating-point selection.
//!
//! Classification is closed at the threshold: a record is positive iff
//! `prob >= threshold`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("scores and gold labels share no pmids")]
    EmptyIntersection,
    #[error("gold labels contain a single class ({positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("invalid policy target {name} = {value}")]
    InvalidPolicy { name: &'static str, value: f64 },
    #[error("{point} target {target} unattainable; best attainable is {best}")]
    Unattainable { point: PointName, target: f64, best: f64 },
    #[error("non-finite score for {0}")]
    NonFinite(String),
}

/// Gold labels keyed by pmid; `true` is include.
pub type Gold = BTreeMap<String, bool>;

/// Joins a score map with gold labels, keeping the shared pmids in pmid order.
pub fn join_scores(scores: &BTreeMap<String, f64>, gold: &Gold) -> Result<Vec<(f64, bool)>, EvalError> {
    let mut out = Vec::new();
    for (pmid, &prob) in scores {
        if let Some(&label) = gold.get(pmid) {
            if !prob.is_finite() {
                return Err(EvalError::NonFinite(pmid.clone()));
            }
            out.push((prob, label));
        }
    }
    if out.is_empty() {
        return Err(EvalError::EmptyIntersection);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn from_counts(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Self::default();
        for (p, a) in pairs {
            c.add(p, a);
        }
        c
    }

    pub fn n(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.fp + self.tn
    }

    fn ratio(num: u64, den: u64) -> Option<f64> {
        (den > 0).then(|| num as f64 / den as f64)
    }

    pub fn tpr(&self) -> Option<f64> {
        Self::ratio(self.tp, self.positives())
    }

    pub fn fpr(&self) -> Option<f64> {
        Self::ratio(self.fp, self.negatives())
    }

    pub fn precision(&self) -> Option<f64> {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    /// Zero when there are no true positives.
    pub fn f1(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if self.tp == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / den as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionAt {
    pub threshold: f64,
    pub counts: Confusion,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub precision: Option<f64>,
}

impl ConfusionAt {
    fn new(threshold: f64, counts: Confusion) -> Self {
        Self {
            threshold,
            counts,
            tpr: counts.tpr(),
            fpr: counts.fpr(),
            precision: counts.precision(),
        }
    }
}

pub fn confusion_pairs(pairs: &[(f64, bool)], threshold: f64) -> Confusion {
    Confusion::from_pairs(pairs.iter().map(|&(p, y)| (p >= threshold, y)))
}

pub fn confusion_at(scores: &BTreeMap<String, f64>, gold: &Gold, threshold: f64) -> Result<ConfusionAt, EvalError> {
    let pairs = join_scores(scores, gold)?;
    Ok(ConfusionAt::new(threshold, confusion_pairs(&pairs, threshold)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
    pub tp: u64,
    pub fp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Starts at threshold `+inf` (0, 0), then one point per distinct score
    /// in decreasing order; the last point is (1, 1).
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub positives: u64,
    pub negatives: u64,
}

impl RocCurve {
    /// Thresholds strictly decrease, rates never decrease, endpoints present.
    pub fn is_well_formed(&self) -> bool {
        let Some(first) = self.points.first() else {
            return false;
        };
        let last = self.points.last().unwrap();
        let monotone = self
            .points
            .windows(2)
            .all(|w| w[0].threshold > w[1].threshold && w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr);
        monotone
            && (first.fpr, first.tpr) == (0.0, 0.0)
            && (last.fpr, last.tpr) == (1.0, 1.0)
            && (0.0..=1.0).contains(&self.auc)
    }
}

pub fn roc_pairs(pairs: &[(f64, bool)]) -> Result<RocCurve, EvalError> {
    let positives = pairs.iter().filter(|p| p.1).count() as u64;
    let negatives = pairs.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass {
            positives: positives as usize,
            negatives: negatives as usize,
        });
    }
    if let Some(bad) = pairs.iter().find(|p| !p.0.is_finite()) {
        return Err(EvalError::NonFinite(bad.0.to_string()));
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
        tp: 0,
        fp: 0,
    }];
    // Twice the area in units of (1/P)(1/N), accumulated exactly in integers.
    let mut area2: u128 = 0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        let (prev_tp, prev_fp) = (tp, fp);
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - prev_fp) as u128 * (tp + prev_tp) as u128;
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
            tp,
            fp,
        });
    }
    let auc = area2 as f64 / (2.0 * positives as f64 * negatives as f64);
    Ok(RocCurve {
        points,
        auc,
        positives,
        negatives,
    })
}

pub fn roc(scores: &BTreeMap<String, f64>, gold: &Gold) -> Result<RocCurve, EvalError> {
    roc_pairs(&join_scores(scores, gold)?)
}

pub fn write_roc_tsv<W: Write>(mut w: W, curve: &RocCurve) -> io::Result<()> {
    writeln!(w, "threshold\tfpr\ttpr")?;
    for p in &curve.points {
        writeln!(w, "{}\t{}\t{}", fmt_threshold(p.threshold), p.fpr, p.tpr)?;
    }
    writeln!(w, "# auc\t{}", curve.auc)
}

fn fmt_threshold(t: f64) -> String {
    if t.is_infinite() {
        "inf".into()
    } else {
        t.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointName {
    Conservative,
    Moderate,
    Liberal,
}

impl PointName {
    pub const ALL: [PointName; 3] = [PointName::Conservative, PointName::Moderate, PointName::Liberal];

    pub fn as_str(self) -> &'static str {
        match self {
            PointName::Conservative => "conservative",
            PointName::Moderate => "moderate",
            PointName::Liberal => "liberal",
        }
    }
}

impl fmt::Display for PointName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatingPolicy {
    pub conservative_precision: f64,
    pub liberal_tpr: f64,
}

impl Default for OperatingPolicy {
    fn default() -> Self {
        Self {
            conservative_precision: 0.82,
            liberal_tpr: 0.99,
        }
    }
}

impl OperatingPolicy {
    pub fn validate(&self) -> Result<(), EvalError> {
        let ok = |v: f64| v.is_finite() && v > 0.0 && v <= 1.0;
        if !ok(self.conservative_precision) {
            return Err(EvalError::InvalidPolicy {
                name: "conservative_precision",
                value: self.conservative_precision,
            });
        }
        if !ok(self.liberal_tpr) {
            return Err(EvalError::InvalidPolicy {
                name: "liberal_tpr",
                value: self.liberal_tpr,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub name: PointName,
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub precision: f64,
    pub counts: Confusion,
}

impl OperatingPoint {
    fn at(name: PointName, threshold: f64, counts: Confusion) -> Self {
        Self {
            name,
            threshold,
            tpr: counts.tpr().unwrap_or(0.0),
            fpr: counts.fpr().unwrap_or(0.0),
            precision: counts.precision().unwrap_or(0.0),
            counts,
        }
    }

    /// Same threshold, re-measured on another split.
    pub fn remeasure(&self, pairs: &[(f64, bool)]) -> Self {
        Self::at(self.name, self.threshold, confusion_pairs(pairs, self.threshold))
    }
}

/// Chooses the three named thresholds on validation data.
///
/// Candidates are the distinct validation scores.
/// * moderate: maximal F1 (ties toward the higher threshold);
/// * conservative: the smallest threshold at or above moderate whose precision
///   reaches both the policy target and the moderate precision;
/// * liberal: the largest threshold at or below moderate whose TPR reaches the
///   policy target without exceeding the moderate precision.
///
/// Anchoring both ends at the moderate point makes the precision ordering
/// hold by construction. The liberal point always exists: at the lowest
/// score TPR is 1 and precision is the base rate, which never exceeds the
/// precision of the max-F1 point.
pub fn select_operating_points(
    pairs: &[(f64, bool)],
    policy: &OperatingPolicy,
) -> Result<[OperatingPoint; 3], EvalError> {
    policy.validate()?;
    let curve = roc_pairs(pairs)?;
    let n = pairs.len() as u64;
    let (p, neg) = (curve.positives, curve.negatives);
    // Ascending thresholds with their confusion counts.
    let cands: Vec<(f64, Confusion)> = curve.points[1..]
        .iter()
        .rev()
        .map(|pt| {
            (
                pt.threshold,
                Confusion::from_counts(pt.tp, pt.fp, neg - pt.fp, p - pt.tp),
            )
        })
        .collect();
    debug_assert!(cands.iter().all(|c| c.1.n() == n));

    let mut mod_idx = 0;
    for (i, c) in cands.iter().enumerate() {
        if c.1.f1() >= cands[mod_idx].1.f1() {
            mod_idx = i;
        }
    }
    let (t_mod, c_mod) = cands[mod_idx];
    let prec_mod = c_mod.precision().unwrap_or(0.0);

    let cons_target = policy.conservative_precision.max(prec_mod);
    let conservative = cands[mod_idx..]
        .iter()
        .find(|c| c.1.precision().is_some_and(|x| x >= cons_target))
        .ok_or_else(|| EvalError::Unattainable {
            point: PointName::Conservative,
            target: policy.conservative_precision,
            best: cands[mod_idx..]
                .iter()
                .filter_map(|c| c.1.precision())
                .fold(0.0, f64::max),
        })?;

    let liberal = cands[..=mod_idx]
        .iter()
        .rev()
        .find(|c| c.1.tpr().is_some_and(|x| x >= policy.liberal_tpr) && c.1.precision().is_some_and(|x| x <= prec_mod))
        .ok_or_else(|| EvalError::Unattainable {
            point: PointName::Liberal,
            target: policy.liberal_tpr,
            best: cands[..=mod_idx].iter().filter_map(|c| c.1.tpr()).fold(0.0, f64::max),
        })?;

    Ok([
        OperatingPoint::at(PointName::Conservative, conservative.0, conservative.1),
        OperatingPoint::at(PointName::Moderate, t_mod, c_mod),
        OperatingPoint::at(PointName::Liberal, liberal.0, liberal.1),
    ])
}

pub fn write_operating_points_tsv<W: Write>(mut w: W, points: &[OperatingPoint]) -> io::Result<()> {
    writeln!(w, "name\tthreshold\ttpr\tfpr\tprecision")?;
    for p in points {
        writeln!(w, "{}\t{}\t{}\t{}\t{}", p.name, p.threshold, p.tpr, p.fpr, p.precision)?;
    }
    Ok(())
}

/// Tie-corrected Mann-Whitney estimate of P(score⁺ > score⁻), by brute force.
pub fn mann_whitney_auc(pairs: &[(f64, bool)]) -> f64 {
    let pos: Vec<f64> = pairs.iter().filter(|p| p.1).map(|p| p.0).collect();
    let neg: Vec<f64> = pairs.iter().filter(|p| !p.1).map(|p| p.0).collect();
    let mut wins2: u128 = 0;
    for &a in &pos {
        for &b in &neg {
            wins2 += if a > b {
                2
            } else if a == b {
                1
            } else {
                0
            };
        }
    }
    wins2 as f64 / (2.0 * pos.len() as f64 * neg.len() as f64)
}
