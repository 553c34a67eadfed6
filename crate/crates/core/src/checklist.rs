//! The probabilistic checklist model, its discrete form and threshold search.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Modality, Sample};
use crate::error::{Error, Result};
use crate::extractors::{tangos_penalty, Attribution, Extractor, ExtractorKind, ModalitySchema};
use crate::metrics::{auc_roc, Confusion, ObjectiveMetric, Scorer};
use crate::pb::{clamp_prob, grad_unchecked, tail_unchecked};
use crate::train::{nll, nll_grad, Objective, TrainConfig, Trainable};

/// Binarization thresholds searched by [`tune_thresholds`]: 0.05, 0.10, ..., 0.95.
pub fn tau_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecklistModel {
    /// One extractor per modality, in dataset order.
    pub extractors: Vec<Extractor>,
    pub threshold: usize,
    pub tau: f64,
    /// Softmax logits of the concept weights, when weighting is enabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_logits: Option<Vec<f64>>,
}

impl ChecklistModel {
    pub fn new(extractors: Vec<Extractor>, threshold: usize, tau: f64, weighted: bool) -> Result<Self> {
        let d: usize = extractors.iter().map(Extractor::concepts).sum();
        let model = Self {
            extractors,
            threshold,
            tau,
            weight_logits: weighted.then(|| vec![0.0; d]),
        };
        model.validate()?;
        Ok(model)
    }

    /// Randomly initialised extractors with `concepts[k]` concepts for modality `k`.
    pub fn init(
        modalities: &[Modality],
        concepts: &[usize],
        kind: &ExtractorKind,
        threshold: usize,
        tau: f64,
        weighted: bool,
        seed: u64,
    ) -> Result<Self> {
        if concepts.len() != modalities.len() {
            return Err(Error::invalid(format!(
                "{} concept counts given for {} modalities",
                concepts.len(),
                modalities.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extractors = modalities
            .iter()
            .zip(concepts)
            .map(|(m, &c)| Extractor::random(kind.clone(), ModalitySchema::new(&m.name, m.dim, c), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(extractors, threshold, tau, weighted)
    }

    pub fn validate(&self) -> Result<()> {
        if self.extractors.is_empty() {
            return Err(Error::EmptyChecklist("model has no extractors".into()));
        }
        let mut names = HashSet::new();
        for e in &self.extractors {
            if !names.insert(&e.schema.name) {
                return Err(Error::schema(format!("duplicate modality '{}'", e.schema.name)));
            }
            Extractor::with_params(e.kind.clone(), e.schema.clone(), e.params.clone())?;
        }
        let d = self.d_prime();
        if self.threshold < 1 || self.threshold > d {
            return Err(Error::invalid(format!(
                "threshold {} outside 1..={d}",
                self.threshold
            )));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::invalid(format!("tau {} outside (0, 1)", self.tau)));
        }
        if let Some(v) = &self.weight_logits {
            if v.len() != d {
                return Err(Error::invalid(format!("{} weight logits for {d} concepts", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("weight logits must be finite"));
            }
        }
        Ok(())
    }

    /// Total number of concepts.
    pub fn d_prime(&self) -> usize {
        self.extractors.iter().map(Extractor::concepts).sum()
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.extractors
            .iter()
            .map(|e| Modality::new(&e.schema.name, e.schema.dim))
            .collect()
    }

    /// Fails unless `modalities` matches the extractors by name and width, in order.
    pub fn check_modalities(&self, modalities: &[Modality]) -> Result<()> {
        let mine = self.modalities();
        if mine.len() != modalities.len() {
            return Err(Error::schema(format!(
                "model has {} modalities, data has {}",
                mine.len(),
                modalities.len()
            )));
        }
        for (a, b) in mine.iter().zip(modalities) {
            if a != b {
                return Err(Error::schema(format!(
                    "model expects modality '{}' with {} features, data has '{}' with {}",
                    a.name, a.dim, b.name, b.dim
                )));
            }
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.extractors.iter().map(Extractor::dim).sum()
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        let d = self.input_dim();
        if s.features.len() != d {
            return Err(Error::schema(format!(
                "sample {} has {} features, model expects {d}",
                s.id,
                s.features.len()
            )));
        }
        Ok(())
    }

    fn slices<'a>(&self, x: &'a [f64]) -> Vec<&'a [f64]> {
        let mut out = Vec::with_capacity(self.extractors.len());
        let mut at = 0;
        for e in &self.extractors {
            out.push(&x[at..at + e.dim()]);
            at += e.dim();
        }
        out
    }

    /// Modality index and local concept index of global concept `j`.
    pub fn concept_owner(&self, j: usize) -> Option<(usize, usize)> {
        let mut start = 0;
        for (k, e) in self.extractors.iter().enumerate() {
            if j < start + e.concepts() {
                return Some((k, j - start));
            }
            start += e.concepts();
        }
        None
    }

    pub fn concept_label(&self, j: usize) -> String {
        match self.concept_owner(j) {
            Some((k, local)) => format!("{}: concept {}", self.extractors[k].schema.name, local + 1),
            None => format!("concept {}", j + 1),
        }
    }

    /// Simplex weights `W = softmax(v)`.
    pub fn weights(&self) -> Option<Vec<f64>> {
        self.weight_logits.as_ref().map(|v| {
            let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect()
        })
    }

    /// Weights as whole percentages, at least 1 each.
    pub fn integer_weights(&self) -> Option<Vec<u32>> {
        self.weights()
            .map(|w| w.iter().map(|x| ((100.0 * x).round() as u32).max(1)).collect())
    }

    /// Per-concept factor `W_j / max W`; all ones without weights.
    pub fn scales(&self) -> Vec<f64> {
        match &self.weight_logits {
            None => vec![1.0; self.d_prime()],
            Some(v) => {
                let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                v.iter().map(|x| (x - m).exp()).collect()
            }
        }
    }

    fn raw_probs(&self, s: &Sample) -> Result<Vec<f64>> {
        self.check_sample(s)?;
        let mut out = Vec::with_capacity(self.d_prime());
        for (e, x) in self.extractors.iter().zip(self.slices(&s.features)) {
            out.extend(e.extract(x)?);
        }
        Ok(out)
    }

    /// Clamped concept probabilities of all modalities, concatenated.
    pub fn concept_probs(&self, s: &Sample) -> Result<Vec<f64>> {
        Ok(self.raw_probs(s)?.into_iter().map(clamp_prob).collect())
    }

    /// Query probability for given concept probabilities.
    pub fn query_probability(&self, p: &[f64]) -> f64 {
        let q: Vec<f64> = p.iter().zip(self.scales()).map(|(p, s)| p * s).collect();
        tail_unchecked(&q, self.threshold)
    }

    /// `P(y = 1)` for one sample.
    pub fn forward(&self, s: &Sample) -> Result<f64> {
        let p = self.concept_probs(s)?;
        Ok(self.query_probability(&p))
    }

    /// `p_j > tau` at the model's own `tau`.
    pub fn binarize(&self, s: &Sample) -> Result<Vec<bool>> {
        self.binarize_at(s, self.tau)
    }

    pub fn binarize_at(&self, s: &Sample, tau: f64) -> Result<Vec<bool>> {
        Ok(self.concept_probs(s)?.into_iter().map(|p| p > tau).collect())
    }

    /// Per-modality attributions of one sample.
    pub fn attributions(&self, s: &Sample) -> Result<Vec<Attribution>> {
        self.check_sample(s)?;
        self.extractors
            .iter()
            .zip(self.slices(&s.features))
            .map(|(e, x)| e.attributions(x))
            .collect()
    }

    /// Attributions over the whole input, `d' x total_dim`; zero outside each concept's modality.
    pub fn full_attribution(&self, s: &Sample) -> Result<Attribution> {
        let parts = self.attributions(s)?;
        let mut full = Attribution::zeros(self.d_prime(), self.input_dim());
        let mut row = 0;
        let mut col = 0;
        for a in &parts {
            for j in 0..a.concepts {
                full.row_mut(row + j)[col..col + a.dim].copy_from_slice(a.row(j));
            }
            row += a.concepts;
            col += a.dim;
        }
        Ok(full)
    }
}

/// Per-sample quantities kept between the forward and backward passes.
struct Forward {
    raw: Vec<f64>,
    p: Vec<f64>,
    prob: f64,
    dprob_dq: Vec<f64>,
}

impl Trainable for ChecklistModel {
    fn params(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.extractors.iter().flat_map(|e| e.params.iter().copied()).collect();
        if let Some(v) = &self.weight_logits {
            out.extend_from_slice(v);
        }
        out
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let expected = self.extractors.iter().map(Extractor::param_count).sum::<usize>()
            + self.weight_logits.as_ref().map_or(0, Vec::len);
        if params.len() != expected {
            return Err(Error::invalid(format!(
                "{} parameters given, model has {expected}",
                params.len()
            )));
        }
        let mut at = 0;
        for e in &mut self.extractors {
            let n = e.param_count();
            e.params.copy_from_slice(&params[at..at + n]);
            at += n;
        }
        if let Some(v) = &mut self.weight_logits {
            v.copy_from_slice(&params[at..]);
        }
        Ok(())
    }

    fn objective(&self, batch: &[&Sample], cfg: &TrainConfig, anneal: f64) -> Result<Objective> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset("empty training batch".into()));
        }
        for s in batch {
            self.check_sample(s)?;
        }
        let n = batch.len() as f64;
        let scales = self.scales();
        let t = self.threshold;

        let fwd: Vec<Forward> = batch
            .par_iter()
            .map(|s| {
                let raw = self.raw_probs(s)?;
                let p: Vec<f64> = raw.iter().map(|&r| clamp_prob(r)).collect();
                let q: Vec<f64> = p.iter().zip(&scales).map(|(p, s)| p * s).collect();
                Ok(Forward {
                    prob: tail_unchecked(&q, t),
                    dprob_dq: grad_unchecked(&q, t),
                    raw,
                    p,
                })
            })
            .collect::<Result<_>>()?;

        let mut nll_mean = 0.0;
        let mut dprob: Vec<f64> = Vec::with_capacity(batch.len());
        for (f, s) in fwd.iter().zip(batch) {
            nll_mean += nll(f.prob, s.label) / n;
            dprob.push(nll_grad(f.prob, s.label) / n);
        }
        let mut penalties = Vec::new();

        let lam_fair = cfg.lambda_fair * anneal;
        if lam_fair > 0.0 {
            let probs: Vec<f64> = fwd.iter().map(|f| f.prob).collect();
            let labels: Vec<bool> = batch.iter().map(|s| s.label).collect();
            let groups: Vec<Option<String>> = batch.iter().map(|s| s.group.clone()).collect();
            if let Some(f) = soft_fairness(&probs, &labels, &groups) {
                penalties.push(("fairness", lam_fair * f.value));
                for (d, g) in dprob.iter_mut().zip(&f.grad) {
                    *d += lam_fair * g;
                }
            }
        }

        let lam_s = cfg.lambda_sparsity * anneal;
        let lam_c = cfg.lambda_correlation * anneal;
        let use_tangos = lam_s > 0.0 || lam_c > 0.0;
        // tangos_grads[k][i]: attribution gradient of modality k, sample i
        let mut tangos_grads: Vec<Vec<Attribution>> = Vec::new();
        if use_tangos {
            let mut sparsity = 0.0;
            let mut correlation = 0.0;
            for (k, e) in self.extractors.iter().enumerate() {
                let atts: Vec<Attribution> = batch
                    .par_iter()
                    .map(|s| e.attributions(self.slices(&s.features)[k]))
                    .collect::<Result<_>>()?;
                let pen = tangos_penalty(&atts, lam_s, lam_c, cfg.tangos_mode);
                sparsity += lam_s * pen.sparsity;
                correlation += lam_c * pen.correlation;
                tangos_grads.push(pen.grads);
            }
            penalties.push(("tangos_sparsity", sparsity));
            penalties.push(("tangos_correlation", correlation));
        }

        let n_params = self.extractors.iter().map(Extractor::param_count).sum::<usize>()
            + self.weight_logits.as_ref().map_or(0, Vec::len);
        let argmax = self.weight_logits.as_ref().map(|v| {
            let mut best = 0;
            for (j, x) in v.iter().enumerate() {
                if *x > v[best] {
                    best = j;
                }
            }
            best
        });
        let per_sample: Vec<Vec<f64>> = (0..batch.len())
            .into_par_iter()
            .map(|i| {
                let f = &fwd[i];
                let x = self.slices(&batch[i].features);
                // dL/dq, then dL/dp (zero where the clamp is active)
                let dq: Vec<f64> = f.dprob_dq.iter().map(|g| dprob[i] * g).collect();
                let dp: Vec<f64> = dq
                    .iter()
                    .zip(&scales)
                    .zip(f.raw.iter().zip(&f.p))
                    .map(|((d, s), (r, p))| if r == p { d * s } else { 0.0 })
                    .collect();
                let mut grad = Vec::with_capacity(n_params);
                let mut c0 = 0;
                for (k, e) in self.extractors.iter().enumerate() {
                    let up = &dp[c0..c0 + e.concepts()];
                    let g = if use_tangos {
                        e.attributions_backward(x[k], Some(up), &tangos_grads[k][i])?
                    } else {
                        e.extract_backward(x[k], up)?
                    };
                    grad.extend(g);
                    c0 += e.concepts();
                }
                if let Some(m) = argmax {
                    // q_j = exp(v_j - v_m) p_j
                    let mut gv = vec![0.0; dq.len()];
                    for j in 0..dq.len() {
                        if j != m {
                            let term = dq[j] * scales[j] * f.p[j];
                            gv[j] += term;
                            gv[m] -= term;
                        }
                    }
                    grad.extend(gv);
                }
                Ok(grad)
            })
            .collect::<Result<_>>()?;
        let mut grad = vec![0.0; n_params];
        for g in &per_sample {
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }

        let total = nll_mean + penalties.iter().map(|(_, v)| v).sum::<f64>();
        Ok(Objective {
            total,
            nll: nll_mean,
            penalties,
            grad,
        })
    }

    fn predict_proba(&self, sample: &Sample) -> Result<f64> {
        self.forward(sample)
    }
}

impl Scorer for ChecklistModel {
    /// Soft query probability, positive at 0.5 or above.
    fn score(&self, sample: &Sample) -> Result<(f64, bool)> {
        let p = self.forward(sample)?;
        Ok((p, p >= 0.5))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FairnessPenalty {
    /// Weighted penalty value.
    pub value: f64,
    /// Gradient of `value` with respect to each soft prediction.
    pub grad: Vec<f64>,
    /// Number of unordered group pairs.
    pub pairs: usize,
}

/// Sum over group pairs of `|dFPR| + |dFNR|` on soft rates, times `lambda`.
///
/// Soft FPR of a group is its mean prediction over negatives, soft FNR the
/// mean of `1 - prediction` over positives. A term is skipped when either
/// group lacks the class. Samples without a group are ignored.
pub fn fairness_penalty(
    soft_preds: &[f64],
    labels: &[bool],
    groups: &[Option<String>],
    lambda: f64,
) -> Result<FairnessPenalty> {
    if soft_preds.len() != labels.len() || labels.len() != groups.len() {
        return Err(Error::invalid("predictions, labels and groups differ in length"));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("fairness weight must be finite and >= 0"));
    }
    match soft_fairness(soft_preds, labels, groups) {
        Some(mut f) => {
            f.value *= lambda;
            f.grad.iter_mut().for_each(|g| *g *= lambda);
            Ok(f)
        }
        None => {
            log::warn!("fairness penalty needs at least two groups; returning 0");
            Ok(FairnessPenalty {
                value: 0.0,
                grad: vec![0.0; soft_preds.len()],
                pairs: 0,
            })
        }
    }
}

fn soft_fairness(preds: &[f64], labels: &[bool], groups: &[Option<String>]) -> Option<FairnessPenalty> {
    // group -> (negative indices, positive indices)
    let mut by_group: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        if let Some(g) = g {
            let e = by_group.entry(g.as_str()).or_default();
            if labels[i] {
                e.1.push(i);
            } else {
                e.0.push(i);
            }
        }
    }
    if by_group.len() < 2 {
        return None;
    }
    let mean = |idx: &[usize], f: &dyn Fn(f64) -> f64| -> Option<f64> {
        (!idx.is_empty()).then(|| idx.iter().map(|&i| f(preds[i])).sum::<f64>() / idx.len() as f64)
    };
    let entries: Vec<(&Vec<usize>, &Vec<usize>, Option<f64>, Option<f64>)> = by_group
        .values()
        .map(|(neg, pos)| (neg, pos, mean(neg, &|p| p), mean(pos, &|p| 1.0 - p)))
        .collect();
    let mut value = 0.0;
    let mut grad = vec![0.0; preds.len()];
    let mut pairs = 0;
    for a in 0..entries.len() {
        for b in (a + 1)..entries.len() {
            pairs += 1;
            let (neg_a, pos_a, fpr_a, fnr_a) = entries[a];
            let (neg_b, pos_b, fpr_b, fnr_b) = entries[b];
            if let (Some(fa), Some(fb)) = (fpr_a, fpr_b) {
                let d = fa - fb;
                value += d.abs();
                let s = sign(d);
                for &i in neg_a {
                    grad[i] += s / neg_a.len() as f64;
                }
                for &i in neg_b {
                    grad[i] -= s / neg_b.len() as f64;
                }
            }
            if let (Some(fa), Some(fb)) = (fnr_a, fnr_b) {
                let d = fa - fb;
                value += d.abs();
                let s = sign(d);
                for &i in pos_a {
                    grad[i] -= s / pos_a.len() as f64;
                }
                for &i in pos_b {
                    grad[i] += s / pos_b.len() as f64;
                }
            }
        }
    }
    Some(FairnessPenalty { value, grad, pairs })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// What an item reads from a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ItemSource {
    /// Binarized concept `index` of the model (`concept` counts within the modality).
    Concept { index: usize, concept: usize },
    /// Raw input feature `index` compared to `threshold` (`feature` counts within the modality).
    /// With `complement` the item is checked when the value is at or below the threshold.
    FeatureThreshold {
        index: usize,
        feature: usize,
        threshold: f64,
        complement: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneReason {
    NeverTrue,
    AlwaysTrue,
    NotSelected,
    SmallWeight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecklistItem {
    pub modality: String,
    pub source: ItemSource,
    pub kept: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pruned: Option<PruneReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integer_weight: Option<u32>,
    /// Fraction of training samples on which the item is checked.
    pub activation_rate: f64,
}

impl ChecklistItem {
    pub fn describe(&self) -> String {
        match &self.source {
            ItemSource::Concept { concept, .. } => format!("{}: concept {}", self.modality, concept + 1),
            ItemSource::FeatureThreshold {
                feature,
                threshold,
                complement,
                ..
            } => {
                let op = if *complement { "<=" } else { ">" };
                format!("{}[{}] {op} {threshold:.4}", self.modality, feature)
            }
        }
    }
}

/// A discrete checklist: positive when the (weighted) number of checked kept items reaches `threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecklistSpec {
    pub items: Vec<ChecklistItem>,
    pub threshold: usize,
    pub tau: f64,
    /// Number of kept items.
    pub m: usize,
}

impl ChecklistSpec {
    pub fn validate(&self) -> Result<()> {
        let kept: Vec<&ChecklistItem> = self.kept_items().collect();
        if kept.len() != self.m {
            return Err(Error::invalid(format!("m = {} but {} items are kept", self.m, kept.len())));
        }
        if self.m == 0 {
            return Err(Error::EmptyChecklist("no items survive pruning".into()));
        }
        let weighted = kept.iter().filter(|i| i.integer_weight.is_some()).count();
        if weighted != 0 && weighted != kept.len() {
            return Err(Error::invalid("either every kept item has a weight or none does"));
        }
        if kept.iter().any(|i| i.integer_weight == Some(0)) {
            return Err(Error::invalid("integer weights must be positive"));
        }
        // threshold 0 (always) and max + 1 (never) arise from pruning constant items
        let max = self.max_score();
        if self.threshold > max + 1 {
            return Err(Error::invalid(format!(
                "threshold {} exceeds the largest attainable score {max} + 1",
                self.threshold
            )));
        }
        Ok(())
    }

    pub fn kept_items(&self) -> impl Iterator<Item = &ChecklistItem> {
        self.items.iter().filter(|i| i.kept)
    }

    pub fn is_weighted(&self) -> bool {
        self.kept_items().any(|i| i.integer_weight.is_some())
    }

    /// Score with every kept item checked.
    pub fn max_score(&self) -> usize {
        self.kept_items()
            .map(|i| i.integer_weight.unwrap_or(1) as usize)
            .sum()
    }

    /// Weighted count of checked items; `c` covers the kept items in order.
    pub fn score(&self, c: &[bool]) -> Result<usize> {
        if c.len() != self.m {
            return Err(Error::invalid(format!("{} item values for {} kept items", c.len(), self.m)));
        }
        Ok(self
            .kept_items()
            .zip(c)
            .filter(|(_, &on)| on)
            .map(|(i, _)| i.integer_weight.unwrap_or(1) as usize)
            .sum())
    }

    /// Checked state of each kept item for `sample`. Concept items need the model.
    pub fn item_values(&self, model: Option<&ChecklistModel>, sample: &Sample) -> Result<Vec<bool>> {
        let needs_model = self
            .kept_items()
            .any(|i| matches!(i.source, ItemSource::Concept { .. }));
        let probs = match (needs_model, model) {
            (true, Some(m)) => Some(m.concept_probs(sample)?),
            (true, None) => return Err(Error::invalid("concept items need the trained model")),
            (false, _) => None,
        };
        self.kept_items()
            .map(|i| match &i.source {
                ItemSource::Concept { index, .. } => probs
                    .as_ref()
                    .and_then(|p| p.get(*index))
                    .map(|&p| p > self.tau)
                    .ok_or_else(|| Error::schema(format!("model has no concept {index}"))),
                ItemSource::FeatureThreshold {
                    index,
                    threshold,
                    complement,
                    ..
                } => sample
                    .features
                    .get(*index)
                    .map(|&v| (v > *threshold) != *complement)
                    .ok_or_else(|| Error::schema(format!("sample {} has no feature {index}", sample.id))),
            })
            .collect()
    }

    pub fn predict(&self, model: Option<&ChecklistModel>, sample: &Sample) -> Result<bool> {
        let c = self.item_values(model, sample)?;
        predict_discrete(self, &c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::parse(path, j.to_string()),
            other => other,
        })
    }

    /// One checkbox per kept item followed by the decision rule.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("# Checklist\n\n");
        for item in self.kept_items() {
            match item.integer_weight {
                Some(w) => writeln!(out, "- [ ] {} ({w} points)", item.describe()),
                None => writeln!(out, "- [ ] {}", item.describe()),
            }
            .expect("writing to a string");
        }
        out.push('\n');
        let rule = if self.is_weighted() {
            format!(
                "Predict positive when the checked items add up to {} points or more (of {}).",
                self.threshold,
                self.max_score()
            )
        } else {
            format!(
                "Predict positive when {} or more of the {} items are checked.",
                self.threshold, self.m
            )
        };
        out.push_str(&rule);
        out.push('\n');
        out
    }
}

/// `true` iff the weighted count of checked items reaches the threshold.
pub fn predict_discrete(spec: &ChecklistSpec, c: &[bool]) -> Result<bool> {
    Ok(spec.score(c)? >= spec.threshold)
}

/// Options of [`extract_spec_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractOptions {
    pub tau: f64,
    /// Count threshold, or score threshold for weighted models.
    pub threshold: usize,
    /// Concepts to consider; all when `None`.
    pub items: Option<Vec<usize>>,
    /// Also drop concepts that are checked on every training sample.
    pub prune_constant_true: bool,
}

/// Discrete checklist at the model's own `tau` and threshold.
///
/// Weighted models get the score threshold `ceil(T * total / d')`, the
/// weight mass of `T` average items.
pub fn extract_spec(model: &ChecklistModel, train: &[Sample], prune_constant_true: bool) -> Result<ChecklistSpec> {
    let threshold = match model.integer_weights() {
        Some(w) => {
            let total: u32 = w.iter().sum();
            (model.threshold as f64 * total as f64 / w.len() as f64).ceil() as usize
        }
        None => model.threshold,
    };
    extract_spec_with(
        model,
        train,
        &ExtractOptions {
            tau: model.tau,
            threshold,
            items: None,
            prune_constant_true,
        },
    )
}

/// Binarize on `train`, drop never-checked (and optionally always-checked)
/// concepts and lower the threshold by the weight of dropped always-checked ones.
pub fn extract_spec_with(model: &ChecklistModel, train: &[Sample], opts: &ExtractOptions) -> Result<ChecklistSpec> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("no training samples to extract a checklist from".into()));
    }
    if !(opts.tau > 0.0 && opts.tau < 1.0) {
        return Err(Error::invalid(format!("tau {} outside (0, 1)", opts.tau)));
    }
    let d = model.d_prime();
    let selected: HashSet<usize> = match &opts.items {
        Some(items) => {
            if let Some(bad) = items.iter().find(|&&j| j >= d) {
                return Err(Error::invalid(format!("item {bad} out of range for {d} concepts")));
            }
            items.iter().copied().collect()
        }
        None => (0..d).collect(),
    };
    let mut on = vec![0usize; d];
    for s in train {
        for (j, c) in model.binarize_at(s, opts.tau)?.into_iter().enumerate() {
            on[j] += c as usize;
        }
    }
    let weights = model.integer_weights();
    let mut removed_true = 0usize;
    let mut items = Vec::with_capacity(d);
    for (j, &count) in on.iter().enumerate() {
        let (k, local) = model.concept_owner(j).expect("concept index within d'");
        let weight = weights.as_ref().map(|w| w[j]);
        let pruned = if !selected.contains(&j) {
            Some(PruneReason::NotSelected)
        } else if count == 0 {
            Some(PruneReason::NeverTrue)
        } else if opts.prune_constant_true && count == train.len() {
            removed_true += weight.unwrap_or(1) as usize;
            Some(PruneReason::AlwaysTrue)
        } else {
            None
        };
        items.push(ChecklistItem {
            modality: model.extractors[k].schema.name.clone(),
            source: ItemSource::Concept { index: j, concept: local },
            kept: pruned.is_none(),
            pruned,
            integer_weight: weight,
            activation_rate: count as f64 / train.len() as f64,
        });
    }
    let m = items.iter().filter(|i| i.kept).count();
    if m == 0 {
        return Err(Error::EmptyChecklist(
            "every concept is constant on the training data at this tau".into(),
        ));
    }
    let max: usize = items
        .iter()
        .filter(|i| i.kept)
        .map(|i| i.integer_weight.unwrap_or(1) as usize)
        .sum();
    let spec = ChecklistSpec {
        items,
        threshold: opts.threshold.saturating_sub(removed_true).min(max + 1),
        tau: opts.tau,
        m,
    };
    spec.validate()?;
    Ok(spec)
}

/// Outcome of [`tune_thresholds`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSearch {
    pub tau: f64,
    pub threshold: usize,
    pub score: f64,
    /// Candidate pairs evaluated.
    pub evaluated: usize,
}

/// Grid search of `tau` and the threshold maximizing `metric` on `validation`.
///
/// Thresholds run over `1..=M` (`M` = number of considered concepts), or
/// over every attainable score for weighted models. Ties keep the smaller
/// threshold, then the smaller `tau`.
pub fn tune_thresholds(
    model: &ChecklistModel,
    validation: &[Sample],
    metric: ObjectiveMetric,
    items: Option<&[usize]>,
) -> Result<ThresholdSearch> {
    if validation.is_empty() {
        return Err(Error::EmptyDataset("no validation samples for threshold search".into()));
    }
    let d = model.d_prime();
    let items: Vec<usize> = match items {
        Some(i) => i.to_vec(),
        None => (0..d).collect(),
    };
    if items.is_empty() {
        return Err(Error::EmptyChecklist("no items to tune".into()));
    }
    if let Some(bad) = items.iter().find(|&&j| j >= d) {
        return Err(Error::invalid(format!("item {bad} out of range for {d} concepts")));
    }
    let weights: Vec<usize> = match model.integer_weights() {
        Some(w) => items.iter().map(|&j| w[j] as usize).collect(),
        None => vec![1; items.len()],
    };
    let max_threshold: usize = weights.iter().sum();
    let labels: Vec<bool> = validation.iter().map(|s| s.label).collect();
    let probs: Vec<Vec<f64>> = validation
        .iter()
        .map(|s| model.concept_probs(s))
        .collect::<Result<_>>()?;
    let grid = tau_grid();
    // scores[tau index][sample]
    let scores: Vec<Vec<usize>> = grid
        .iter()
        .map(|&tau| {
            probs
                .iter()
                .map(|p| {
                    items
                        .iter()
                        .zip(&weights)
                        .filter(|(&j, _)| p[j] > tau)
                        .map(|(_, w)| w)
                        .sum()
                })
                .collect()
        })
        .collect();
    let aucs: Vec<f64> = scores
        .iter()
        .map(|sc| {
            let f: Vec<f64> = sc.iter().map(|&v| v as f64).collect();
            auc_roc(&f, &labels)
        })
        .collect();
    let mut best: Option<ThresholdSearch> = None;
    let mut evaluated = 0;
    for t in 1..=max_threshold {
        for (ti, &tau) in grid.iter().enumerate() {
            evaluated += 1;
            let value = match metric {
                ObjectiveMetric::AucRoc => aucs[ti],
                _ => {
                    let preds: Vec<bool> = scores[ti].iter().map(|&s| s >= t).collect();
                    let c = Confusion::from_predictions(&preds, &labels);
                    if metric == ObjectiveMetric::F1 {
                        c.f1()
                    } else {
                        c.accuracy()
                    }
                }
            };
            if best.as_ref().is_none_or(|b| value > b.score) {
                best = Some(ThresholdSearch {
                    tau,
                    threshold: t,
                    score: value,
                    evaluated: 0,
                });
            }
        }
    }
    let mut best = best.expect("grid is non-empty");
    best.evaluated = evaluated;
    Ok(best)
}

/// The `per_modality` concepts of each modality with the highest mutual
/// information between their binarized value and the label on `data`.
pub fn select_informative(model: &ChecklistModel, data: &[Sample], per_modality: usize) -> Result<Vec<usize>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("no samples for item selection".into()));
    }
    let d = model.d_prime();
    // joint counts [c][y]
    let mut counts = vec![[[0usize; 2]; 2]; d];
    for s in data {
        for (j, c) in model.binarize(s)?.into_iter().enumerate() {
            counts[j][c as usize][s.label as usize] += 1;
        }
    }
    let n = data.len() as f64;
    let mi: Vec<f64> = counts
        .iter()
        .map(|t| {
            let mut total = 0.0;
            for c in 0..2 {
                for y in 0..2 {
                    let pcy = t[c][y] as f64 / n;
                    if pcy > 0.0 {
                        let pc = (t[c][0] + t[c][1]) as f64 / n;
                        let py = (t[0][y] + t[1][y]) as f64 / n;
                        total += pcy * (pcy / (pc * py)).ln();
                    }
                }
            }
            total
        })
        .collect();
    let mut chosen = Vec::new();
    let mut start = 0;
    for e in &model.extractors {
        let mut idx: Vec<usize> = (start..start + e.concepts()).collect();
        idx.sort_by(|&a, &b| mi[b].total_cmp(&mi[a]).then(a.cmp(&b)));
        chosen.extend(idx.into_iter().take(per_modality));
        start += e.concepts();
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// A discrete checklist paired with the model that supplies its concepts.
pub struct DiscreteChecklist<'a> {
    pub spec: &'a ChecklistSpec,
    pub model: Option<&'a ChecklistModel>,
}

impl Scorer for DiscreteChecklist<'_> {
    /// The weighted count of checked items is the ranking score.
    fn score(&self, sample: &Sample) -> Result<(f64, bool)> {
        let c = self.spec.item_values(self.model, sample)?;
        let score = self.spec.score(&c)?;
        Ok((score as f64, score >= self.spec.threshold))
    }
}

/// Offsets of each modality's concepts in the concatenated concept vector.
pub fn concept_offsets(model: &ChecklistModel) -> Vec<usize> {
    let mut at = 0;
    model
        .extractors
        .iter()
        .map(|e| {
            let start = at;
            at += e.concepts();
            start
        })
        .collect()
}
