//! Mini-batch training shared by every differentiable model in the crate.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, Sample};
use crate::error::{Error, Result};
use crate::extractors::CorrelationMode;
use crate::metrics::{auc_roc, Confusion, ObjectiveMetric};
use crate::pb::clamp_prob;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub lambda_sparsity: f64,
    pub lambda_correlation: f64,
    pub lambda_fair: f64,
    pub tangos_mode: CorrelationMode,
    pub objective_metric: ObjectiveMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-2,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            lambda_sparsity: 0.0,
            lambda_correlation: 0.0,
            lambda_fair: 0.0,
            tangos_mode: CorrelationMode::Absolute,
            objective_metric: ObjectiveMetric::Accuracy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        for (name, v) in [
            ("lambda_sparsity", self.lambda_sparsity),
            ("lambda_correlation", self.lambda_correlation),
            ("lambda_fair", self.lambda_fair),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Linear ramp of penalty weights over the first quarter of training.
    pub fn anneal(&self, epoch: usize) -> f64 {
        let ramp = (self.epochs as f64 * 0.25).ceil();
        if ramp <= 0.0 {
            1.0
        } else {
            (epoch as f64 / ramp).min(1.0)
        }
    }
}

pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.step += 1;
                let bc1 = 1.0 - self.beta1.powi(self.step);
                let bc2 = 1.0 - self.beta2.powi(self.step);
                for i in 0..params.len() {
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                    let mh = self.m[i] / bc1;
                    let vh = self.v[i] / bc2;
                    params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
                }
            }
        }
    }
}

/// Value of a training objective on one batch.
#[derive(Debug, Clone, Default)]
pub struct Objective {
    /// Mean negative log-likelihood plus every penalty.
    pub total: f64,
    pub nll: f64,
    /// Named penalty values, already weighted.
    pub penalties: Vec<(&'static str, f64)>,
    pub grad: Vec<f64>,
}

/// A model trainable by [`fit`].
pub trait Trainable {
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]) -> Result<()>;
    /// Objective and gradient on `batch`; penalty weights are multiplied by `anneal`.
    fn objective(&self, batch: &[&Sample], cfg: &TrainConfig, anneal: f64) -> Result<Objective>;
    fn predict_proba(&self, sample: &Sample) -> Result<f64>;
    /// Extra per-epoch quantities recorded in the history.
    fn diagnostics(&self, _data: &[Sample]) -> Result<Vec<(String, f64)>> {
        Ok(Vec::new())
    }
}

/// Binary cross-entropy of a probability, clamped away from 0 and 1.
pub fn nll(p: f64, label: bool) -> f64 {
    let p = clamp_prob(p);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// `d nll / d p`; zero where the clamp is active.
pub fn nll_grad(p: f64, label: bool) -> f64 {
    if p != clamp_prob(p) {
        return 0.0;
    }
    if label {
        -1.0 / p
    } else {
        1.0 / (1.0 - p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Full objective on the training split (including penalties).
    pub train_loss: f64,
    pub train_nll: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_auc: f64,
    pub extras: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl History {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == self.best_epoch)
    }

    pub fn to_csv(&self) -> String {
        let extras: Vec<&str> = self
            .records
            .first()
            .map(|r| r.extras.iter().map(|(k, _)| k.as_str()).collect())
            .unwrap_or_default();
        let mut out = String::from("epoch,train_loss,train_nll,val_loss,val_accuracy,val_auc");
        for e in &extras {
            out.push(',');
            out.push_str(e);
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}",
                r.epoch, r.train_loss, r.train_nll, r.val_loss, r.val_accuracy, r.val_auc
            ));
            for (_, v) in &r.extras {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Objective over a whole split, evaluated in batches of `cfg.batch_size`.
pub fn split_objective<M: Trainable>(model: &M, samples: &[Sample], cfg: &TrainConfig, anneal: f64) -> Result<(f64, f64)> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut total = 0.0;
    let mut nll_sum = 0.0;
    for chunk in refs.chunks(cfg.batch_size) {
        let o = model.objective(chunk, cfg, anneal)?;
        let w = chunk.len() as f64 / refs.len() as f64;
        total += o.total * w;
        nll_sum += o.nll * w;
    }
    Ok((total, nll_sum))
}

fn evaluate_epoch<M: Trainable>(
    model: &M,
    data: &DatasetBundle,
    cfg: &TrainConfig,
    epoch: usize,
    anneal: f64,
) -> Result<EpochRecord> {
    let (train_loss, train_nll) = split_objective(model, &data.train, cfg, anneal)?;
    let mut scores = Vec::with_capacity(data.validation.len());
    let mut val_loss = 0.0;
    for s in &data.validation {
        let p = model.predict_proba(s)?;
        val_loss += nll(p, s.label);
        scores.push(p);
    }
    val_loss /= data.validation.len().max(1) as f64;
    let labels: Vec<bool> = data.validation.iter().map(|s| s.label).collect();
    let preds: Vec<bool> = scores.iter().map(|&p| p >= 0.5).collect();
    Ok(EpochRecord {
        epoch,
        train_loss,
        train_nll,
        val_loss,
        val_accuracy: Confusion::from_predictions(&preds, &labels).accuracy(),
        val_auc: auc_roc(&scores, &labels),
        extras: model.diagnostics(&data.train)?,
    })
}

/// Train `model` in place and keep the parameters of the epoch with the
/// lowest validation loss. Epoch 0 is the untrained model.
pub fn fit<M: Trainable>(model: &mut M, data: &DatasetBundle, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05ee_df17);
    let mut params = model.params();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, params.len());

    let first = evaluate_epoch(model, data, cfg, 0, cfg.anneal(0))?;
    let mut best_loss = first.val_loss;
    let mut best_params = params.clone();
    let mut history = History {
        records: vec![first],
        best_epoch: 0,
    };

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let anneal = cfg.anneal(epoch - 1);
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let obj = model.objective(&batch, cfg, anneal)?;
            if !obj.total.is_finite() || obj.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: format!("objective {} (nll {})", obj.total, obj.nll),
                });
            }
            opt.step(&mut params, &obj.grad);
            model.set_params(&params)?;
        }
        let rec = evaluate_epoch(model, data, cfg, epoch, cfg.anneal(epoch))?;
        if !rec.val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
                detail: "validation loss".into(),
            });
        }
        if rec.val_loss < best_loss {
            best_loss = rec.val_loss;
            best_params.clone_from(&params);
            history.best_epoch = epoch;
        }
        history.records.push(rec);
    }
    model.set_params(&best_params)?;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anneal_ramp() {
        let cfg = TrainConfig {
            epochs: 8,
            ..Default::default()
        };
        assert_eq!(cfg.anneal(0), 0.0);
        assert_eq!(cfg.anneal(1), 0.5);
        assert_eq!(cfg.anneal(2), 1.0);
        assert_eq!(cfg.anneal(7), 1.0);
    }

    #[test]
    fn nll_values() {
        assert!((nll(0.5, true) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(nll(1.0, true) < 1e-6);
        assert!(nll(0.0, true).is_finite());
        assert_eq!(nll_grad(1.0, true), 0.0);
        assert_eq!(nll_grad(0.25, false), 1.0 / 0.75);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, 2);
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
        let mut y = vec![1.0];
        let mut sgd = Optimizer::new(OptimizerKind::Sgd, 0.25, 1);
        sgd.step(&mut y, &[2.0]);
        assert_eq!(y, vec![0.5]);
    }
}
