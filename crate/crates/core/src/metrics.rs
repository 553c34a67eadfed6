//! Classification metrics and group error-rate gaps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMetric {
    #[default]
    Accuracy,
    F1,
    AucRoc,
}

impl std::str::FromStr for ObjectiveMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Self::Accuracy),
            "f1" => Ok(Self::F1),
            "auc_roc" | "auc" => Ok(Self::AucRoc),
            other => Err(Error::invalid(format!("unknown metric '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(preds: &[bool], labels: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&p, &y) in preds.iter().zip(labels) {
            match (p, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Rank-based AUC with tied scores sharing their average rank.
/// Returns 0.5 when either class is absent.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> f64 {
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return 0.5;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub group: String,
    pub n: usize,
    /// `None` when the group has no negatives.
    pub fpr: Option<f64>,
    /// `None` when the group has no positives.
    pub fnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairGap {
    pub a: String,
    pub b: String,
    pub delta_fpr: f64,
    pub delta_fnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub groups: Vec<GroupRates>,
    pub pairs: Vec<PairGap>,
    /// Sum of `delta_fpr + delta_fnr` over all pairs.
    pub total_gap: f64,
}

/// Hard FPR/FNR per group and their absolute gaps over unordered pairs.
pub fn fairness_report(preds: &[bool], labels: &[bool], groups: &[Option<String>]) -> Option<FairnessReport> {
    let mut by_group: BTreeMap<&str, (Vec<bool>, Vec<bool>)> = BTreeMap::new();
    for ((p, y), g) in preds.iter().zip(labels).zip(groups) {
        if let Some(g) = g {
            let e = by_group.entry(g.as_str()).or_default();
            e.0.push(*p);
            e.1.push(*y);
        }
    }
    if by_group.is_empty() {
        return None;
    }
    let groups: Vec<GroupRates> = by_group
        .iter()
        .map(|(g, (p, y))| {
            let c = Confusion::from_predictions(p, y);
            GroupRates {
                group: g.to_string(),
                n: p.len(),
                fpr: (c.fp + c.tn > 0).then(|| ratio(c.fp, c.fp + c.tn)),
                fnr: (c.fn_ + c.tp > 0).then(|| ratio(c.fn_, c.fn_ + c.tp)),
            }
        })
        .collect();
    let mut pairs = Vec::new();
    for i in 0..groups.len() {
        for j in (i + 1)..groups.len() {
            let gap = |a: Option<f64>, b: Option<f64>| match (a, b) {
                (Some(a), Some(b)) => (a - b).abs(),
                _ => 0.0,
            };
            pairs.push(PairGap {
                a: groups[i].group.clone(),
                b: groups[j].group.clone(),
                delta_fpr: gap(groups[i].fpr, groups[j].fpr),
                delta_fnr: gap(groups[i].fnr, groups[j].fnr),
            });
        }
    }
    let total_gap = pairs.iter().map(|p| p.delta_fpr + p.delta_fnr).sum();
    Some(FairnessReport {
        groups,
        pairs,
        total_gap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    pub auc_roc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fairness: Option<FairnessReport>,
}

impl Metrics {
    pub fn compute(scores: &[f64], preds: &[bool], labels: &[bool], groups: Option<&[Option<String>]>) -> Self {
        let c = Confusion::from_predictions(preds, labels);
        Self {
            n: labels.len(),
            accuracy: c.accuracy(),
            precision: c.precision(),
            recall: c.recall(),
            specificity: c.specificity(),
            f1: c.f1(),
            auc_roc: auc_roc(scores, labels),
            fairness: groups.and_then(|g| fairness_report(preds, labels, g)),
        }
    }

    pub fn get(&self, metric: ObjectiveMetric) -> f64 {
        match metric {
            ObjectiveMetric::Accuracy => self.accuracy,
            ObjectiveMetric::F1 => self.f1,
            ObjectiveMetric::AucRoc => self.auc_roc,
        }
    }
}

/// Anything that produces a ranking score and a hard decision per sample.
pub trait Scorer {
    /// `(score, prediction)`; the score only needs to rank samples.
    fn score(&self, sample: &Sample) -> Result<(f64, bool)>;
}

/// Metrics of `scorer` on `samples`, with group gaps when any sample has a group.
pub fn evaluate<S: Scorer + ?Sized>(scorer: &S, samples: &[Sample]) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let mut scores = Vec::with_capacity(samples.len());
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        let (score, pred) = scorer.score(s)?;
        scores.push(score);
        preds.push(pred);
    }
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    let groups: Vec<Option<String>> = samples.iter().map(|s| s.group.clone()).collect();
    let has_groups = groups.iter().any(Option::is_some);
    Ok(Metrics::compute(
        &scores,
        &preds,
        &labels,
        has_groups.then_some(groups.as_slice()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Pairwise oracle: P(score_pos > score_neg) + 0.5 P(tie).
    fn auc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_cases() {
        let labels = [false, false, true, true];
        assert_eq!(auc_roc(&[0.1, 0.2, 0.8, 0.9], &labels), 1.0);
        assert_eq!(auc_roc(&[0.9, 0.8, 0.2, 0.1], &labels), 0.0);
        assert_eq!(auc_roc(&[0.5; 4], &labels), 0.5);
        let scores = [3.0, 1.0, 2.0, 2.0, 5.0, 1.0, 0.0, 2.0];
        let labels = [true, false, true, false, true, true, false, false];
        assert_abs_diff_eq!(auc_roc(&scores, &labels), auc_pairs(&scores, &labels), epsilon = 1e-12);
        assert_eq!(auc_roc(&[0.1, 0.2], &[true, true]), 0.5);
    }

    #[test]
    fn constant_zero_predictor() {
        let labels = [true, false, true, false];
        let m = Metrics::compute(&[0.0; 4], &[false; 4], &labels, None);
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.specificity, 1.0);
        assert_eq!(m.precision, 0.0);
    }

    #[test]
    fn perfect_predictor_has_no_gap() {
        let labels = [true, false, true, false];
        let groups: Vec<Option<String>> = ["a", "a", "b", "b"].iter().map(|g| Some(g.to_string())).collect();
        let m = Metrics::compute(&[1.0, 0.0, 1.0, 0.0], &labels, &labels, Some(&groups));
        assert_eq!(m.accuracy, 1.0);
        let f = m.fairness.unwrap();
        assert_eq!(f.pairs.len(), 1);
        assert_eq!(f.total_gap, 0.0);
    }

    #[test]
    fn three_groups_three_pairs() {
        let preds = [true, false, true, true, false, false];
        let labels = [false, false, false, true, true, false];
        let groups: Vec<Option<String>> = ["a", "a", "b", "b", "c", "c"].iter().map(|g| Some(g.to_string())).collect();
        let f = fairness_report(&preds, &labels, &groups).unwrap();
        assert_eq!(f.pairs.len(), 3);
        // a: fpr 1/2, no positives; b: fpr 1, fnr 0; c: fpr 0, fnr 1
        assert_eq!(f.pairs[0].delta_fpr, 0.5);
        assert_eq!(f.pairs[0].delta_fnr, 0.0);
        assert_eq!(f.pairs[2].delta_fnr, 1.0);
        assert!(fairness_report(&preds, &labels, &vec![None; 6]).is_none());
    }
}
