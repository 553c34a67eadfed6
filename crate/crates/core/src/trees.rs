//! Soft decision trees over learned concepts and checklists of such trees.
//!
//! Concept nodes sit on layers `1..L-1`; layer `l` holds `2^(l-1)` nodes.
//! Node `(l, k)` sends a sample to `(l+1, 2k-1)` when its concept is false
//! and to `(l+1, 2k)` when true. The tree outputs the concept of the node
//! reached on layer `L-1`. Nodes are stored layer by layer, so node `(l, k)`
//! (1-based) has flat index `2^(l-1) - 1 + (k - 1)`.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::extractors::{Extractor, ExtractorKind, ModalitySchema, COSINE_EPS};
use crate::metrics::Scorer;
use crate::pb::{clamp_prob, grad_unchecked, tail_unchecked};
use crate::train::{nll, nll_grad, Objective, TrainConfig, Trainable};

/// Guard in the soft split fraction `sum(r p) / (sum(r) + SPLIT_EPS)`.
pub const SPLIT_EPS: f64 = 1e-9;

/// Largest supported depth.
pub const MAX_DEPTH: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeRegularizers {
    pub subtree: f64,
    pub final_split: f64,
    pub correlation: f64,
}

impl Default for TreeRegularizers {
    fn default() -> Self {
        Self {
            subtree: 0.1,
            final_split: 0.1,
            correlation: 0.1,
        }
    }
}

impl TreeRegularizers {
    pub fn none() -> Self {
        Self {
            subtree: 0.0,
            final_split: 0.0,
            correlation: 0.0,
        }
    }

    fn scaled(&self, a: f64) -> Self {
        Self {
            subtree: self.subtree * a,
            final_split: self.final_split * a,
            correlation: self.correlation * a,
        }
    }

    fn any(&self) -> bool {
        self.subtree > 0.0 || self.final_split > 0.0 || self.correlation > 0.0
    }
}

/// Contiguous block of the feature vector a tree reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSlice {
    pub offset: usize,
    pub dim: usize,
    /// Width of the full feature vector.
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftTree {
    pub depth: usize,
    pub input: InputSlice,
    /// One single-concept extractor per node, layer by layer.
    pub nodes: Vec<Extractor>,
    pub tau: f64,
    pub regularizers: TreeRegularizers,
}

/// Node count of a tree of depth `depth`: `2^(depth-1) - 1`.
pub fn node_count(depth: usize) -> usize {
    (1usize << (depth - 1)) - 1
}

/// Flat index of node `(layer, k)`, both 1-based.
pub fn node_index(layer: usize, k: usize) -> usize {
    (1usize << (layer - 1)) - 1 + (k - 1)
}

/// `(layer, k)` of a flat node index.
pub fn node_position(index: usize) -> (usize, usize) {
    let layer = (usize::BITS - (index + 1).leading_zeros()) as usize;
    (layer, index + 2 - (1usize << (layer - 1)))
}

/// `-pr ln pr - (1 - pr) ln(1 - pr)` with `pr` clamped.
pub fn entropy(pr: f64) -> f64 {
    let p = clamp_prob(pr);
    -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
}

fn entropy_grad(pr: f64) -> f64 {
    if pr != clamp_prob(pr) {
        0.0
    } else {
        ((1.0 - pr) / pr).ln()
    }
}

/// Soft fraction of positives among samples reaching a node.
pub fn split_probability(reach: &[f64], probs: &[f64]) -> f64 {
    let num: f64 = reach.iter().zip(probs).map(|(r, p)| r * p).sum();
    let den: f64 = reach.iter().sum();
    num / (den + SPLIT_EPS)
}

/// Per-sample node probabilities and reach probabilities, layer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TreePass {
    raw: Vec<f64>,
    pub probs: Vec<f64>,
    pub reach: Vec<f64>,
}

/// Routing of a batch: `reach[i][node]` and `probs[i][node]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftRouting {
    pub passes: Vec<TreePass>,
}

impl SoftRouting {
    pub fn reach_of(&self, node: usize) -> Vec<f64> {
        self.passes.iter().map(|p| p.reach[node]).collect()
    }

    pub fn probs_of(&self, node: usize) -> Vec<f64> {
        self.passes.iter().map(|p| p.probs[node]).collect()
    }

    pub fn split_probability(&self, node: usize) -> f64 {
        split_probability(&self.reach_of(node), &self.probs_of(node))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TreeRegValues {
    pub subtree: f64,
    pub final_split: f64,
    pub correlation: f64,
}

impl SoftTree {
    /// Random tree reading `input`; every node is a single-concept extractor of `kind`.
    pub fn init(depth: usize, input: InputSlice, kind: &ExtractorKind, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(depth, input, kind, &mut rng)
    }

    fn init_with(depth: usize, input: InputSlice, kind: &ExtractorKind, rng: &mut ChaCha8Rng) -> Result<Self> {
        check_depth(depth)?;
        let nodes = (0..node_count(depth))
            .map(|i| {
                let (l, k) = node_position(i);
                Extractor::random(kind.clone(), ModalitySchema::new(format!("node_{l}_{k}"), input.dim, 1), rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let tree = Self {
            depth,
            input,
            nodes,
            tau: 0.5,
            regularizers: TreeRegularizers::default(),
        };
        tree.validate()?;
        Ok(tree)
    }

    pub fn validate(&self) -> Result<()> {
        check_depth(self.depth)?;
        if self.nodes.len() != node_count(self.depth) {
            return Err(Error::invalid(format!(
                "depth {} needs {} nodes, found {}",
                self.depth,
                node_count(self.depth),
                self.nodes.len()
            )));
        }
        if self.input.dim == 0 || self.input.offset + self.input.dim > self.input.total {
            return Err(Error::invalid("tree input slice lies outside the feature vector"));
        }
        for n in &self.nodes {
            if n.concepts() != 1 || n.dim() != self.input.dim {
                return Err(Error::invalid("tree nodes need one concept over the tree input"));
            }
            Extractor::with_params(n.kind.clone(), n.schema.clone(), n.params.clone())?;
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::invalid(format!("tau {} outside (0, 1)", self.tau)));
        }
        for v in [
            self.regularizers.subtree,
            self.regularizers.final_split,
            self.regularizers.correlation,
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid("tree regularizer weights must be finite and >= 0"));
            }
        }
        Ok(())
    }

    fn slice<'a>(&self, s: &'a Sample) -> Result<&'a [f64]> {
        if s.features.len() != self.input.total {
            return Err(Error::schema(format!(
                "sample {} has {} features, tree expects {}",
                s.id,
                s.features.len(),
                self.input.total
            )));
        }
        Ok(&s.features[self.input.offset..self.input.offset + self.input.dim])
    }

    pub fn param_count(&self) -> usize {
        self.nodes.iter().map(Extractor::param_count).sum()
    }

    fn params_vec(&self) -> Vec<f64> {
        self.nodes.iter().flat_map(|n| n.params.iter().copied()).collect()
    }

    fn set_params_slice(&mut self, params: &[f64]) {
        let mut at = 0;
        for n in &mut self.nodes {
            let c = n.param_count();
            n.params.copy_from_slice(&params[at..at + c]);
            at += c;
        }
    }

    /// Node and reach probabilities for one sample.
    pub fn pass(&self, s: &Sample) -> Result<TreePass> {
        let x = self.slice(s)?;
        let mut raw = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            raw.push(n.extract(x)?[0]);
        }
        Ok(self.pass_from_raw(raw))
    }

    fn pass_from_raw(&self, raw: Vec<f64>) -> TreePass {
        let probs: Vec<f64> = raw.iter().map(|&r| clamp_prob(r)).collect();
        let mut reach = vec![0.0; probs.len()];
        reach[0] = 1.0;
        for l in 1..self.depth - 1 {
            for k in 1..=(1usize << (l - 1)) {
                let i = node_index(l, k);
                reach[node_index(l + 1, 2 * k - 1)] = reach[i] * (1.0 - probs[i]);
                reach[node_index(l + 1, 2 * k)] = reach[i] * probs[i];
            }
        }
        TreePass { raw, probs, reach }
    }

    fn last_layer(&self) -> std::ops::Range<usize> {
        let l = self.depth - 1;
        node_index(l, 1)..node_index(l, 1) + (1usize << (l - 1))
    }

    /// `sum_k reach(L-1, k) * p(L-1, k)`.
    pub fn output(&self, pass: &TreePass) -> f64 {
        self.last_layer().map(|i| pass.reach[i] * pass.probs[i]).sum()
    }

    /// `P(tree output = 1)` for one sample.
    pub fn forward(&self, s: &Sample) -> Result<f64> {
        Ok(self.output(&self.pass(s)?))
    }

    pub fn routing(&self, batch: &[&Sample]) -> Result<SoftRouting> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset("empty batch".into()));
        }
        Ok(SoftRouting {
            passes: batch.par_iter().map(|s| self.pass(s)).collect::<Result<_>>()?,
        })
    }

    /// Unweighted regularizer values over a batch, from soft counts.
    pub fn regularizers(&self, batch: &[&Sample]) -> Result<TreeRegValues> {
        let routing = self.routing(batch)?;
        Ok(self.reg_terms(&routing.passes, None).0)
    }

    /// Regularizer values from hard routing at `tau` and hard node decisions.
    pub fn hard_regularizers(&self, batch: &[&Sample]) -> Result<TreeRegValues> {
        let routing = self.routing(batch)?;
        let hard: Vec<TreePass> = routing
            .passes
            .iter()
            .map(|p| {
                let raw: Vec<f64> = p.probs.iter().map(|&v| if v > self.tau { 1.0 } else { 0.0 }).collect();
                self.pass_from_raw(raw)
            })
            .collect();
        Ok(self.reg_terms(&hard, None).0)
    }

    /// Regularizer values and, when `weights` is given, the weighted
    /// gradients with respect to every node probability and reach probability.
    fn reg_terms(&self, passes: &[TreePass], weights: Option<TreeRegularizers>) -> (TreeRegValues, Vec<(Vec<f64>, Vec<f64>)>) {
        let n_nodes = self.nodes.len();
        let n = passes.len();
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = match weights {
            Some(_) => vec![(vec![0.0; n_nodes], vec![0.0; n_nodes]); n],
            None => Vec::new(),
        };
        let sums: Vec<(f64, f64)> = (0..n_nodes)
            .map(|j| {
                passes
                    .iter()
                    .fold((0.0, 0.0), |(s, rp), p| (s + p.reach[j], rp + p.reach[j] * p.probs[j]))
            })
            .collect();
        let pr: Vec<f64> = sums.iter().map(|(s, rp)| rp / (s + SPLIT_EPS)).collect();
        let ent: Vec<f64> = pr.iter().map(|&p| entropy(p)).collect();
        // d(weighted reg)/d pr_j
        let mut dpr = vec![0.0; n_nodes];

        let mut values = TreeRegValues::default();
        for l in 1..self.depth.saturating_sub(1) {
            for k in 1..=(1usize << (l - 1)) {
                let a = node_index(l + 1, 2 * k - 1);
                let b = node_index(l + 1, 2 * k);
                let d = ent[a] - ent[b];
                values.subtree += d.abs();
                if let Some(w) = weights {
                    let s = w.subtree * sign(d);
                    dpr[a] += s * entropy_grad(pr[a]);
                    dpr[b] -= s * entropy_grad(pr[b]);
                }
            }
        }
        for j in self.last_layer() {
            values.final_split -= ent[j];
            if let Some(w) = weights {
                dpr[j] -= w.final_split * entropy_grad(pr[j]);
            }
        }
        // correlation of batch probability vectors between node pairs
        let pair_count = n_nodes * n_nodes.saturating_sub(1) / 2;
        if pair_count > 0 {
            let vecs: Vec<Vec<f64>> = (0..n_nodes).map(|j| passes.iter().map(|p| p.probs[j]).collect()).collect();
            let norms: Vec<f64> = vecs.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
            for a in 0..n_nodes {
                for b in (a + 1)..n_nodes {
                    let dot: f64 = vecs[a].iter().zip(&vecs[b]).map(|(x, y)| x * y).sum();
                    let den = norms[a] * norms[b] + COSINE_EPS;
                    let cos = dot / den;
                    values.correlation += cos.abs() / pair_count as f64;
                    if let Some(w) = weights {
                        let s = w.correlation * sign(cos) / pair_count as f64;
                        for i in 0..n {
                            let (va, vb) = (vecs[a][i], vecs[b][i]);
                            let mut ga = vb / den;
                            let mut gb = va / den;
                            if norms[a] > 0.0 {
                                ga -= dot / (den * den) * norms[b] * va / norms[a];
                            }
                            if norms[b] > 0.0 {
                                gb -= dot / (den * den) * norms[a] * vb / norms[b];
                            }
                            grads[i].0[a] += s * ga;
                            grads[i].0[b] += s * gb;
                        }
                    }
                }
            }
        }
        if weights.is_some() {
            for j in 0..n_nodes {
                if dpr[j] == 0.0 {
                    continue;
                }
                let den = sums[j].0 + SPLIT_EPS;
                for (i, p) in passes.iter().enumerate() {
                    grads[i].0[j] += dpr[j] * p.reach[j] / den;
                    grads[i].1[j] += dpr[j] * (p.probs[j] - pr[j]) / den;
                }
            }
        }
        (values, grads)
    }

    /// Parameter gradient for one sample given `d/d output` and extra node/reach gradients.
    fn backward(&self, x: &[f64], pass: &TreePass, dout: f64, extra: Option<&(Vec<f64>, Vec<f64>)>) -> Result<Vec<f64>> {
        let n_nodes = self.nodes.len();
        let (mut dp, mut dr) = match extra {
            Some((p, r)) => (p.clone(), r.clone()),
            None => (vec![0.0; n_nodes], vec![0.0; n_nodes]),
        };
        for j in self.last_layer() {
            dp[j] += pass.reach[j] * dout;
            dr[j] += pass.probs[j] * dout;
        }
        for l in (1..self.depth - 1).rev() {
            for k in 1..=(1usize << (l - 1)) {
                let i = node_index(l, k);
                let lo = node_index(l + 1, 2 * k - 1);
                let hi = node_index(l + 1, 2 * k);
                dr[i] += dr[lo] * (1.0 - pass.probs[i]) + dr[hi] * pass.probs[i];
                dp[i] += pass.reach[i] * (dr[hi] - dr[lo]);
            }
        }
        let mut grad = Vec::with_capacity(self.param_count());
        for (j, node) in self.nodes.iter().enumerate() {
            let up = if pass.raw[j] == pass.probs[j] { dp[j] } else { 0.0 };
            grad.extend(node.extract_backward(x, &[up])?);
        }
        Ok(grad)
    }

    /// Weighted regularizer values and parameter gradient for `batch`, with
    /// `dout[i]` the upstream gradient of sample `i`'s output.
    fn batch_gradient(&self, batch: &[&Sample], passes: &[TreePass], dout: &[f64], w: TreeRegularizers) -> Result<(TreeRegValues, Vec<f64>)> {
        let (values, extra) = if w.any() {
            self.reg_terms(passes, Some(w))
        } else {
            (TreeRegValues::default(), Vec::new())
        };
        let per_sample: Vec<Vec<f64>> = (0..batch.len())
            .into_par_iter()
            .map(|i| self.backward(self.slice(batch[i])?, &passes[i], dout[i], extra.get(i)))
            .collect::<Result<_>>()?;
        let mut grad = vec![0.0; self.param_count()];
        for g in &per_sample {
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok((values, grad))
    }

    /// Hard decision: route on binarized nodes, return the reached last-layer concept.
    pub fn predict_hard(&self, s: &Sample) -> Result<bool> {
        let pass = self.pass(s)?;
        let mut k = 1;
        for l in 1..self.depth {
            let on = pass.probs[node_index(l, k)] > self.tau;
            if l == self.depth - 1 {
                return Ok(on);
            }
            k = if on { 2 * k } else { 2 * k - 1 };
        }
        unreachable!("depth >= 2")
    }
}

fn check_depth(depth: usize) -> Result<()> {
    if !(2..=MAX_DEPTH).contains(&depth) {
        return Err(Error::invalid(format!("tree depth {depth} outside 2..={MAX_DEPTH}")));
    }
    Ok(())
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

fn push_reg_penalties(penalties: &mut Vec<(&'static str, f64)>, v: TreeRegValues, w: TreeRegularizers) {
    if w.subtree > 0.0 {
        penalties.push(("tree_subtree", w.subtree * v.subtree));
    }
    if w.final_split > 0.0 {
        penalties.push(("tree_final_split", w.final_split * v.final_split));
    }
    if w.correlation > 0.0 {
        penalties.push(("tree_correlation", w.correlation * v.correlation));
    }
}

impl Trainable for SoftTree {
    fn params(&self) -> Vec<f64> {
        self.params_vec()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "{} parameters given, tree has {}",
                params.len(),
                self.param_count()
            )));
        }
        self.set_params_slice(params);
        Ok(())
    }

    fn objective(&self, batch: &[&Sample], _cfg: &TrainConfig, anneal: f64) -> Result<Objective> {
        let routing = self.routing(batch)?;
        let n = batch.len() as f64;
        let mut nll_mean = 0.0;
        let mut dout = Vec::with_capacity(batch.len());
        for (p, s) in routing.passes.iter().zip(batch) {
            let out = self.output(p);
            nll_mean += nll(out, s.label) / n;
            dout.push(nll_grad(out, s.label) / n);
        }
        let w = self.regularizers.scaled(anneal);
        let (values, grad) = self.batch_gradient(batch, &routing.passes, &dout, w)?;
        let mut penalties = Vec::new();
        push_reg_penalties(&mut penalties, values, w);
        Ok(Objective {
            total: nll_mean + penalties.iter().map(|(_, v)| v).sum::<f64>(),
            nll: nll_mean,
            penalties,
            grad,
        })
    }

    fn predict_proba(&self, sample: &Sample) -> Result<f64> {
        self.forward(sample)
    }

    fn diagnostics(&self, data: &[Sample]) -> Result<Vec<(String, f64)>> {
        let refs: Vec<&Sample> = data.iter().collect();
        let soft = self.regularizers(&refs)?;
        let hard = self.hard_regularizers(&refs)?;
        Ok(vec![
            ("subtree_soft".into(), soft.subtree),
            ("final_split_soft".into(), soft.final_split),
            ("correlation_soft".into(), soft.correlation),
            ("subtree_hard".into(), hard.subtree),
            ("final_split_hard".into(), hard.final_split),
        ])
    }
}

impl Scorer for SoftTree {
    fn score(&self, sample: &Sample) -> Result<(f64, bool)> {
        let p = self.forward(sample)?;
        Ok((p, p >= 0.5))
    }
}

/// Hard routing at the tree's `tau`; the score is the 0/1 decision.
pub struct HardTree<'a>(pub &'a SoftTree);

impl Scorer for HardTree<'_> {
    fn score(&self, sample: &Sample) -> Result<(f64, bool)> {
        let y = self.0.predict_hard(sample)?;
        Ok((y as u8 as f64, y))
    }
}

/// A checklist whose items are tree outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecklistOfTrees {
    pub trees: Vec<SoftTree>,
    pub threshold: usize,
}

impl ChecklistOfTrees {
    pub fn new(trees: Vec<SoftTree>, threshold: usize) -> Result<Self> {
        let c = Self { trees, threshold };
        c.validate()?;
        Ok(c)
    }

    /// One tree per input slice, seeded from a single stream.
    pub fn init(depth: usize, inputs: &[InputSlice], kind: &ExtractorKind, threshold: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trees = inputs
            .iter()
            .map(|&input| SoftTree::init_with(depth, input, kind, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(trees, threshold)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trees.is_empty() {
            return Err(Error::EmptyChecklist("checklist has no trees".into()));
        }
        if self.threshold < 1 || self.threshold > self.trees.len() {
            return Err(Error::invalid(format!(
                "threshold {} outside 1..={}",
                self.threshold,
                self.trees.len()
            )));
        }
        let total = self.trees[0].input.total;
        for t in &self.trees {
            t.validate()?;
            if t.input.total != total {
                return Err(Error::invalid("trees disagree on the feature vector width"));
            }
        }
        Ok(())
    }

    pub fn tree_outputs(&self, s: &Sample) -> Result<Vec<f64>> {
        self.trees.iter().map(|t| t.forward(s)).collect()
    }

    pub fn forward(&self, s: &Sample) -> Result<f64> {
        Ok(tail_unchecked(&self.tree_outputs(s)?, self.threshold))
    }

    pub fn predict_hard(&self, s: &Sample) -> Result<bool> {
        let mut on = 0;
        for t in &self.trees {
            on += t.predict_hard(s)? as usize;
        }
        Ok(on >= self.threshold)
    }
}

impl Trainable for ChecklistOfTrees {
    fn params(&self) -> Vec<f64> {
        self.trees.iter().flat_map(SoftTree::params_vec).collect()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let expected: usize = self.trees.iter().map(SoftTree::param_count).sum();
        if params.len() != expected {
            return Err(Error::invalid(format!("{} parameters given, model has {expected}", params.len())));
        }
        let mut at = 0;
        for t in &mut self.trees {
            let c = t.param_count();
            t.set_params_slice(&params[at..at + c]);
            at += c;
        }
        Ok(())
    }

    fn objective(&self, batch: &[&Sample], _cfg: &TrainConfig, anneal: f64) -> Result<Objective> {
        let routings: Vec<SoftRouting> = self.trees.iter().map(|t| t.routing(batch)).collect::<Result<_>>()?;
        let n = batch.len() as f64;
        let mut nll_mean = 0.0;
        // dtree[t][i]: gradient with respect to tree t's output on sample i
        let mut dtree = vec![vec![0.0; batch.len()]; self.trees.len()];
        for (i, s) in batch.iter().enumerate() {
            let outs: Vec<f64> = self
                .trees
                .iter()
                .zip(&routings)
                .map(|(t, r)| clamp_prob(t.output(&r.passes[i])))
                .collect();
            let p = tail_unchecked(&outs, self.threshold);
            nll_mean += nll(p, s.label) / n;
            let g = nll_grad(p, s.label) / n;
            let raw: Vec<f64> = self.trees.iter().zip(&routings).map(|(t, r)| t.output(&r.passes[i])).collect();
            for (t, dg) in grad_unchecked(&outs, self.threshold).into_iter().enumerate() {
                dtree[t][i] = if raw[t] == outs[t] { g * dg } else { 0.0 };
            }
        }
        let mut penalties = Vec::new();
        let mut grad = Vec::new();
        let mut totals = TreeRegValues::default();
        let mut weights = TreeRegularizers::none();
        for ((t, r), d) in self.trees.iter().zip(&routings).zip(&dtree) {
            let w = t.regularizers.scaled(anneal);
            let (v, g) = t.batch_gradient(batch, &r.passes, d, w)?;
            totals.subtree += w.subtree * v.subtree;
            totals.final_split += w.final_split * v.final_split;
            totals.correlation += w.correlation * v.correlation;
            weights.subtree = weights.subtree.max(w.subtree);
            weights.final_split = weights.final_split.max(w.final_split);
            weights.correlation = weights.correlation.max(w.correlation);
            grad.extend(g);
        }
        if weights.subtree > 0.0 {
            penalties.push(("tree_subtree", totals.subtree));
        }
        if weights.final_split > 0.0 {
            penalties.push(("tree_final_split", totals.final_split));
        }
        if weights.correlation > 0.0 {
            penalties.push(("tree_correlation", totals.correlation));
        }
        Ok(Objective {
            total: nll_mean + penalties.iter().map(|(_, v)| v).sum::<f64>(),
            nll: nll_mean,
            penalties,
            grad,
        })
    }

    fn predict_proba(&self, sample: &Sample) -> Result<f64> {
        self.forward(sample)
    }
}

impl Scorer for ChecklistOfTrees {
    fn score(&self, sample: &Sample) -> Result<(f64, bool)> {
        let p = self.forward(sample)?;
        Ok((p, p >= 0.5))
    }
}

/// One node of an exported tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteNode {
    pub layer: usize,
    pub index: usize,
    /// Human-readable form of the thresholded node concept.
    pub rule: String,
    /// Fraction of training samples reaching the node (hard routing).
    pub reach_rate: f64,
    /// Fraction of those on which the rule holds.
    pub true_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteTree {
    pub depth: usize,
    pub tau: f64,
    pub nodes: Vec<DiscreteNode>,
}

/// Readable rule of a thresholded node: `sum w_f x_f + b > logit(tau)`.
fn describe_node(node: &Extractor, tau: f64, feature_names: Option<&[String]>) -> String {
    let cut = (tau / (1.0 - tau)).ln();
    match node.kind {
        ExtractorKind::LinearSigmoid => {
            let dim = node.dim();
            let (w, b) = node.params.split_at(dim);
            let mut idx: Vec<usize> = (0..dim).collect();
            idx.sort_by(|&a, &c| w[c].abs().total_cmp(&w[a].abs()).then(a.cmp(&c)));
            idx.truncate(8);
            let name = |f: usize| match feature_names {
                Some(n) => n[f].clone(),
                None => format!("x{f}"),
            };
            let terms: Vec<String> = idx.iter().map(|&f| format!("{:+.3}*{}", w[f], name(f))).collect();
            let more = if dim > 8 { " + ..." } else { "" };
            format!("{}{more} {:+.3} > {:.3}", terms.join(" "), b[0], cut)
        }
        ExtractorKind::Mlp { .. } => format!("mlp concept > {tau:.2}"),
    }
}

/// Binarized tree with per-node hard routing statistics on `train`.
pub fn extract_tree_spec(tree: &SoftTree, train: &[Sample], feature_names: Option<&[String]>) -> Result<DiscreteTree> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("no training samples to extract a tree from".into()));
    }
    if let Some(names) = feature_names {
        if names.len() != tree.input.dim {
            return Err(Error::invalid("feature names do not match the tree input"));
        }
    }
    let n_nodes = tree.nodes.len();
    let mut reached = vec![0usize; n_nodes];
    let mut truthy = vec![0usize; n_nodes];
    for s in train {
        let pass = tree.pass(s)?;
        let mut k = 1;
        for l in 1..tree.depth {
            let i = node_index(l, k);
            let on = pass.probs[i] > tree.tau;
            reached[i] += 1;
            truthy[i] += on as usize;
            k = if on { 2 * k } else { 2 * k - 1 };
        }
    }
    let nodes = (0..n_nodes)
        .map(|i| {
            let (layer, index) = node_position(i);
            DiscreteNode {
                layer,
                index,
                rule: describe_node(&tree.nodes[i], tree.tau, feature_names),
                reach_rate: reached[i] as f64 / train.len() as f64,
                true_rate: if reached[i] == 0 {
                    0.0
                } else {
                    truthy[i] as f64 / reached[i] as f64
                },
            }
        })
        .collect();
    Ok(DiscreteTree {
        depth: tree.depth,
        tau: tree.tau,
        nodes,
    })
}

impl DiscreteTree {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Nested list: each node shows its rule, then its false and true branches.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("# Decision tree\n\n");
        self.render(&mut out, 1, 1, 0);
        out
    }

    fn render(&self, out: &mut String, layer: usize, k: usize, indent: usize) {
        let node = &self.nodes[node_index(layer, k)];
        let pad = "  ".repeat(indent);
        if layer == self.depth - 1 {
            writeln!(out, "{pad}- ({layer},{k}) predict positive iff {}", node.rule).expect("string write");
            return;
        }
        writeln!(out, "{pad}- ({layer},{k}) if {}", node.rule).expect("string write");
        writeln!(out, "{pad}  - false:").expect("string write");
        self.render(out, layer + 1, 2 * k - 1, indent + 2);
        writeln!(out, "{pad}  - true:").expect("string write");
        self.render(out, layer + 1, 2 * k, indent + 2);
    }
}
