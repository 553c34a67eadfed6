//! Logistic regression and its unit-weighting checklist distillation.

use serde::{Deserialize, Serialize};

use crate::checklist::{predict_discrete, ChecklistItem, ChecklistSpec, ItemSource, PruneReason};
use crate::data::{DatasetBundle, Modality, Sample};
use crate::error::{Error, Result};
use crate::extractors::sigmoid;
use crate::metrics::Scorer;
use crate::train::{nll, nll_grad, Objective, TrainConfig, Trainable};

/// Default cut-off below which unit weighting drops a feature.
pub const DEFAULT_BETA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub modalities: Vec<Modality>,
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Training-split feature means.
    pub means: Vec<f64>,
    /// Fit on `1[x > mean]` instead of raw features.
    pub binarized: bool,
}

impl LinearModel {
    /// Zero weights; means from the training split only.
    pub fn new(data: &DatasetBundle, binarized: bool) -> Result<Self> {
        let d = data.total_dim();
        if data.train.is_empty() {
            return Err(Error::EmptyDataset("training split is empty".into()));
        }
        let mut means = vec![0.0; d];
        for s in &data.train {
            for (m, x) in means.iter_mut().zip(&s.features) {
                *m += x;
            }
        }
        let n = data.train.len() as f64;
        means.iter_mut().for_each(|m| *m /= n);
        Ok(Self {
            modalities: data.modalities.clone(),
            weights: vec![0.0; d],
            bias: 0.0,
            means,
            binarized,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let d: usize = self.modalities.iter().map(|m| m.dim).sum();
        if self.weights.len() != d || self.means.len() != d {
            return Err(Error::invalid("linear model dimensions disagree with its modalities"));
        }
        if !self.bias.is_finite() || self.weights.iter().chain(&self.means).any(|v| !v.is_finite()) {
            return Err(Error::invalid("linear model has non-finite values"));
        }
        Ok(())
    }

    fn inputs(&self, s: &Sample) -> Result<Vec<f64>> {
        if s.features.len() != self.weights.len() {
            return Err(Error::schema(format!(
                "sample {} has {} features, model expects {}",
                s.id,
                s.features.len(),
                self.weights.len()
            )));
        }
        Ok(if self.binarized {
            s.features
                .iter()
                .zip(&self.means)
                .map(|(x, m)| if x > m { 1.0 } else { 0.0 })
                .collect()
        } else {
            s.features.clone()
        })
    }

    pub fn forward(&self, s: &Sample) -> Result<f64> {
        let x = self.inputs(s)?;
        let z: f64 = self.weights.iter().zip(&x).map(|(w, x)| w * x).sum::<f64>() + self.bias;
        Ok(sigmoid(z))
    }
}

impl Trainable for LinearModel {
    fn params(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        p.push(self.bias);
        p
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.weights.len() + 1 {
            return Err(Error::invalid(format!(
                "{} parameters given, model has {}",
                params.len(),
                self.weights.len() + 1
            )));
        }
        let (w, b) = params.split_at(self.weights.len());
        self.weights.copy_from_slice(w);
        self.bias = b[0];
        Ok(())
    }

    fn objective(&self, batch: &[&Sample], _cfg: &TrainConfig, _anneal: f64) -> Result<Objective> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset("empty training batch".into()));
        }
        let n = batch.len() as f64;
        let mut grad = vec![0.0; self.weights.len() + 1];
        let mut total = 0.0;
        for s in batch {
            let x = self.inputs(s)?;
            let z: f64 = self.weights.iter().zip(&x).map(|(w, x)| w * x).sum::<f64>() + self.bias;
            let p = sigmoid(z);
            total += nll(p, s.label) / n;
            let g = nll_grad(p, s.label) * p * (1.0 - p) / n;
            for (gi, xi) in grad.iter_mut().zip(&x) {
                *gi += g * xi;
            }
            grad[self.weights.len()] += g;
        }
        Ok(Objective {
            total,
            nll: total,
            penalties: Vec::new(),
            grad,
        })
    }

    fn predict_proba(&self, sample: &Sample) -> Result<f64> {
        self.forward(sample)
    }
}

impl Scorer for LinearModel {
    fn score(&self, sample: &Sample) -> Result<(f64, bool)> {
        let p = self.forward(sample)?;
        Ok((p, p >= 0.5))
    }
}

/// Unit-weighting checklist: one item per feature with `|w| > beta`, checked
/// when the feature exceeds its training mean (or, for negative weights, when
/// it does not). The threshold maximizes validation accuracy over `1..=M`,
/// ties going to the smaller threshold.
pub fn unit_weighting(lm: &LinearModel, validation: &[Sample], beta: f64) -> Result<ChecklistSpec> {
    lm.validate()?;
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::invalid("beta must be finite and >= 0"));
    }
    let mut items = Vec::with_capacity(lm.weights.len());
    let mut global = 0;
    for m in &lm.modalities {
        for f in 0..m.dim {
            let w = lm.weights[global];
            let kept = w.abs() > beta;
            items.push(ChecklistItem {
                modality: m.name.clone(),
                source: ItemSource::FeatureThreshold {
                    index: global,
                    feature: f,
                    threshold: lm.means[global],
                    complement: w < 0.0,
                },
                kept,
                pruned: (!kept).then_some(PruneReason::SmallWeight),
                integer_weight: None,
                activation_rate: 0.0,
            });
            global += 1;
        }
    }
    let m = items.iter().filter(|i| i.kept).count();
    if m == 0 {
        return Err(Error::EmptyChecklist(format!(
            "every logistic-regression weight lies within [-{beta}, {beta}]"
        )));
    }
    let mut spec = ChecklistSpec {
        items,
        threshold: 1,
        tau: 0.5,
        m,
    };
    if validation.is_empty() {
        return Err(Error::EmptyDataset("no validation samples to choose the threshold".into()));
    }
    let values: Vec<Vec<bool>> = validation
        .iter()
        .map(|s| spec.item_values(None, s))
        .collect::<Result<_>>()?;
    let mut best = (f64::NEG_INFINITY, 1);
    for t in 1..=m {
        spec.threshold = t;
        let mut correct = 0;
        for (c, s) in values.iter().zip(validation) {
            correct += (predict_discrete(&spec, c)? == s.label) as usize;
        }
        let acc = correct as f64 / validation.len() as f64;
        if acc > best.0 {
            best = (acc, t);
        }
    }
    spec.threshold = best.1;
    spec.validate()?;
    Ok(spec)
}

/// Activation rates of each item on `train`, filled into `spec`.
pub fn annotate_activation(spec: &mut ChecklistSpec, train: &[Sample]) -> Result<()> {
    if train.is_empty() {
        return Ok(());
    }
    let kept: Vec<usize> = spec
        .items
        .iter()
        .enumerate()
        .filter(|(_, i)| i.kept)
        .map(|(j, _)| j)
        .collect();
    let mut on = vec![0usize; kept.len()];
    for s in train {
        for (k, c) in spec.item_values(None, s)?.into_iter().enumerate() {
            on[k] += c as usize;
        }
    }
    for (k, j) in kept.into_iter().enumerate() {
        spec.items[j].activation_rate = on[k] as f64 / train.len() as f64;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::evaluate;
    use crate::train::fit;
    use approx::assert_abs_diff_eq;

    fn s(id: u64, f: Vec<f64>, y: bool) -> Sample {
        Sample {
            id,
            features: f,
            label: y,
            group: None,
        }
    }

    fn bundle(train: Vec<Sample>, val: Vec<Sample>, dim: usize) -> DatasetBundle {
        let test = val.iter().map(|x| s(x.id + 10_000, x.features.clone(), x.label)).collect();
        DatasetBundle::new(vec![Modality::new("m", dim)], train, val, test).unwrap()
    }

    #[test]
    fn separable_two_points() {
        let data = bundle(
            vec![s(0, vec![1.0], true), s(1, vec![-1.0], false)],
            vec![s(2, vec![1.0], true), s(3, vec![-1.0], false)],
            1,
        );
        let mut lm = LinearModel::new(&data, false).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 0.1,
            ..Default::default()
        };
        fit(&mut lm, &data, &cfg).unwrap();
        assert_eq!(evaluate(&lm, &data.test).unwrap().accuracy, 1.0);
    }

    #[test]
    fn zero_epochs_predicts_half() {
        let data = bundle(
            vec![s(0, vec![1.0, 2.0], true), s(1, vec![-1.0, 0.5], false)],
            vec![s(2, vec![3.0, 1.0], true)],
            2,
        );
        let mut lm = LinearModel::new(&data, true).unwrap();
        fit(&mut lm, &data, &TrainConfig { epochs: 0, ..Default::default() }).unwrap();
        for x in &data.train {
            assert_eq!(lm.forward(x).unwrap(), 0.5);
        }
        assert_eq!(lm.means, vec![0.0, 1.25]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let train: Vec<Sample> = (0..8)
            .map(|i| s(i, vec![(i as f64 * 0.7).sin(), (i as f64 * 1.3).cos(), i as f64 * 0.1], i % 3 == 0))
            .collect();
        let data = bundle(train.clone(), train.iter().map(|x| s(x.id + 100, x.features.clone(), x.label)).collect(), 3);
        for binarized in [false, true] {
            let mut lm = LinearModel::new(&data, binarized).unwrap();
            lm.set_params(&[0.3, -0.8, 1.1, 0.2]).unwrap();
            let refs: Vec<&Sample> = data.train.iter().collect();
            let cfg = TrainConfig::default();
            let g = lm.objective(&refs, &cfg, 1.0).unwrap().grad;
            for i in 0..4 {
                let mut p = lm.params();
                p[i] += 1e-6;
                let mut a = lm.clone();
                a.set_params(&p).unwrap();
                p[i] -= 2e-6;
                let mut b = lm.clone();
                b.set_params(&p).unwrap();
                let fd = (a.objective(&refs, &cfg, 1.0).unwrap().total - b.objective(&refs, &cfg, 1.0).unwrap().total) / 2e-6;
                assert_abs_diff_eq!(fd, g[i], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn unit_weighting_rules() {
        let val = vec![
            s(0, vec![1.0, -1.0, 0.0], true),
            s(1, vec![-1.0, 1.0, 0.0], false),
            s(2, vec![1.0, 1.0, 0.0], false),
        ];
        let data = bundle(val.clone(), val.iter().map(|x| s(x.id + 10, x.features.clone(), x.label)).collect(), 3);
        let mut lm = LinearModel::new(&data, true).unwrap();
        lm.weights = vec![0.8, -0.6, 0.05];
        let spec = unit_weighting(&lm, &data.validation, 0.1).unwrap();
        assert_eq!(spec.m, 2);
        assert!(matches!(spec.items[0].source, ItemSource::FeatureThreshold { complement: false, .. }));
        assert!(matches!(spec.items[1].source, ItemSource::FeatureThreshold { complement: true, .. }));
        assert!(!spec.items[2].kept);
        assert!(spec.threshold >= 1 && spec.threshold <= spec.m);
        // only sample 0 has both items checked
        assert_eq!(spec.threshold, 2);

        lm.weights = vec![0.01, -0.02, 0.05];
        assert!(matches!(unit_weighting(&lm, &data.validation, 0.1), Err(Error::EmptyChecklist(_))));
    }
}
