//! Run configuration documents.
//!
//! Every section is optional and falls back to its defaults; unknown keys are
//! rejected. Errors carry a JSON pointer to the offending key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::DEFAULT_BETA;
use crate::data::SchemaConfig;
use crate::error::{Error, Result};
use crate::extractors::{CorrelationMode, ExtractorKind};
use crate::metrics::ObjectiveMetric;
use crate::train::TrainConfig;
use crate::trees::{TreeRegularizers, MAX_DEPTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    MnistAnalog,
    Tree,
    ChecklistOfTrees,
    BiasedGroups,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::invalid(format!("unknown task '{s}'")))
    }
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::MnistAnalog => "mnist-analog",
            Task::Tree => "tree",
            Task::ChecklistOfTrees => "checklist-of-trees",
            Task::BiasedGroups => "biased-groups",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub task: Task,
    pub n: usize,
    pub seed: u64,
    pub noise_sd: f64,
    pub bias: f64,
    pub depth: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            task: Task::MnistAnalog,
            n: 5000,
            seed: 0,
            noise_sd: 0.1,
            bias: 1.0,
            depth: 3,
        }
    }
}

/// Either a dataset CSV (the crate's own layout, or any CSV plus a column
/// mapping) or a synthetic generator.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: Option<PathBuf>,
    pub schema: Option<SchemaConfig>,
    pub generate: Option<GenerateConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Checklist,
    Tree,
    ChecklistOfTrees,
    Logreg,
    UnitWeighting,
}

/// One count for every modality, or one per modality.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConceptCounts {
    Uniform(usize),
    PerModality(Vec<usize>),
}

impl Default for ConceptCounts {
    fn default() -> Self {
        ConceptCounts::Uniform(1)
    }
}

impl ConceptCounts {
    pub fn resolve(&self, modalities: usize) -> Result<Vec<usize>> {
        let counts = match self {
            ConceptCounts::Uniform(c) => vec![*c; modalities],
            ConceptCounts::PerModality(v) => {
                if v.len() != modalities {
                    return Err(Error::Config {
                        pointer: "/model/concepts".into(),
                        message: format!("{} counts for {modalities} modalities", v.len()),
                    });
                }
                v.clone()
            }
        };
        if counts.contains(&0) {
            return Err(Error::Config {
                pointer: "/model/concepts".into(),
                message: "every modality needs at least one concept".into(),
            });
        }
        Ok(counts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub concepts: ConceptCounts,
    /// Checklist threshold; `None` trains every threshold and keeps the lowest validation loss.
    pub threshold: Option<usize>,
    pub tau: f64,
    pub weighted: bool,
    pub extractor: ExtractorKind,
    /// Grid-search tau and the threshold of the exported checklist on validation data.
    pub tune: bool,
    pub objective_metric: ObjectiveMetric,
    /// Keep only this many concepts per modality, ranked by mutual information with the label.
    pub informative_per_modality: Option<usize>,
    pub prune_constant_true: bool,
    /// Logistic regression on mean-binarized features.
    pub binarize: bool,
    /// Unit-weighting cut-off.
    pub beta: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Checklist,
            concepts: ConceptCounts::default(),
            threshold: None,
            tau: 0.5,
            weighted: false,
            extractor: ExtractorKind::LinearSigmoid,
            tune: true,
            objective_metric: ObjectiveMetric::Accuracy,
            informative_per_modality: None,
            prune_constant_true: true,
            binarize: true,
            beta: DEFAULT_BETA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FairnessConfig {
    /// Group column of a mapped CSV; overrides the schema's own.
    pub group_column: Option<String>,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TangosConfig {
    pub lambda_sparsity: f64,
    pub lambda_correlation: f64,
    pub mode: CorrelationMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeConfig {
    pub depth: usize,
    pub regularizers: TreeRegularizers,
    /// Threshold of a checklist of trees.
    pub threshold: usize,
    /// Each tree of a checklist reads one modality instead of the full input.
    pub per_modality: bool,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            regularizers: TreeRegularizers::default(),
            threshold: 2,
            per_modality: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub concepts: Vec<usize>,
    /// Fairness weights to cross with `concepts`; the run's own weight when empty.
    pub lambda_fair: Vec<f64>,
    pub seeds: Vec<u64>,
    pub workers: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            concepts: vec![1, 2, 3, 4, 5],
            lambda_fair: Vec::new(),
            seeds: vec![0, 1, 2, 3, 4],
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fairness: FairnessConfig,
    pub tangos: TangosConfig,
    pub trees: TreeConfig,
    pub sweep: SweepConfig,
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{}", key.replace('~', "~0").replace('/', "~1"))),
            Segment::Enum { variant } => out.push_str(&format!("/{variant}")),
            Segment::Unknown => out.push_str("/?"),
        }
    }
    out
}

fn config_err(pointer: &str, message: impl Into<String>) -> Error {
    Error::Config {
        pointer: pointer.into(),
        message: message.into(),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            pointer: pointer_of(e.path()),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Semantic checks that serde cannot express.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.path.is_some() && d.generate.is_some() {
            return Err(config_err("/dataset", "give either 'path' or 'generate', not both"));
        }
        if d.schema.is_some() && d.path.is_none() {
            return Err(config_err("/dataset/schema", "a column mapping needs a 'path'"));
        }
        if let Some(g) = &d.generate {
            if g.n < 5 {
                return Err(config_err("/dataset/generate/n", "need at least 5 samples"));
            }
            if !(g.noise_sd >= 0.0 && g.noise_sd.is_finite()) {
                return Err(config_err("/dataset/generate/noise_sd", "must be finite and >= 0"));
            }
            if !g.bias.is_finite() {
                return Err(config_err("/dataset/generate/bias", "must be finite"));
            }
        }
        let m = &self.model;
        if !(m.tau > 0.0 && m.tau < 1.0) {
            return Err(config_err("/model/tau", "must lie in (0, 1)"));
        }
        if m.threshold == Some(0) {
            return Err(config_err("/model/threshold", "must be at least 1"));
        }
        if m.informative_per_modality == Some(0) {
            return Err(config_err("/model/informative_per_modality", "must be at least 1"));
        }
        if !(m.beta >= 0.0 && m.beta.is_finite()) {
            return Err(config_err("/model/beta", "must be finite and >= 0"));
        }
        if let ExtractorKind::Mlp { hidden } = &m.extractor {
            if hidden.contains(&0) {
                return Err(config_err("/model/extractor/mlp/hidden", "hidden layers need at least one unit"));
            }
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(config_err("/train/batch_size", "must be positive"));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(config_err("/train/learning_rate", "must be positive"));
        }
        for (ptr, v) in [
            ("/train/lambda_sparsity", t.lambda_sparsity),
            ("/train/lambda_correlation", t.lambda_correlation),
            ("/train/lambda_fair", t.lambda_fair),
            ("/fairness/lambda", self.fairness.lambda),
            ("/tangos/lambda_sparsity", self.tangos.lambda_sparsity),
            ("/tangos/lambda_correlation", self.tangos.lambda_correlation),
            ("/trees/regularizers/subtree", self.trees.regularizers.subtree),
            ("/trees/regularizers/final_split", self.trees.regularizers.final_split),
            ("/trees/regularizers/correlation", self.trees.regularizers.correlation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err(ptr, "must be finite and >= 0"));
            }
        }
        for (ptr, a, b) in [
            ("/fairness/lambda", self.fairness.lambda, t.lambda_fair),
            ("/tangos/lambda_sparsity", self.tangos.lambda_sparsity, t.lambda_sparsity),
            ("/tangos/lambda_correlation", self.tangos.lambda_correlation, t.lambda_correlation),
        ] {
            if a > 0.0 && b > 0.0 && a != b {
                return Err(config_err(ptr, "conflicts with the value under /train"));
            }
        }
        if !(2..=MAX_DEPTH).contains(&self.trees.depth) {
            return Err(config_err("/trees/depth", format!("must lie in 2..={MAX_DEPTH}")));
        }
        if self.trees.threshold == 0 {
            return Err(config_err("/trees/threshold", "must be at least 1"));
        }
        let s = &self.sweep;
        if s.concepts.is_empty() || s.concepts.contains(&0) {
            return Err(config_err("/sweep/concepts", "need at least one positive concept count"));
        }
        if s.seeds.is_empty() {
            return Err(config_err("/sweep/seeds", "need at least one seed"));
        }
        if s.workers == 0 {
            return Err(config_err("/sweep/workers", "must be positive"));
        }
        if s.lambda_fair.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(config_err("/sweep/lambda_fair", "weights must be finite and >= 0"));
        }
        Ok(())
    }

    /// Training settings with the fairness and attribution sections folded in.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if self.fairness.lambda > 0.0 {
            t.lambda_fair = self.fairness.lambda;
        }
        if self.tangos.lambda_sparsity > 0.0 {
            t.lambda_sparsity = self.tangos.lambda_sparsity;
        }
        if self.tangos.lambda_correlation > 0.0 {
            t.lambda_correlation = self.tangos.lambda_correlation;
        }
        if self.tangos.mode != CorrelationMode::default() {
            t.tangos_mode = self.tangos.mode;
        }
        t.objective_metric = self.model.objective_metric;
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_report_their_pointer() {
        let err = RunConfig::from_json(r#"{"model": {"concepts": 2, "thresh": 3}}"#).unwrap_err();
        match err {
            Error::Config { pointer, message } => {
                assert_eq!(pointer, "/model/thresh");
                assert!(message.contains("unknown field"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let err = RunConfig::from_json(r#"{"train": {"epochs": "ten"}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref pointer, .. } if pointer == "/train/epochs"), "{err:?}");
        let err = RunConfig::from_json(r#"{"sweep": {"seeds": [1, -2]}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref pointer, .. } if pointer == "/sweep/seeds/1"), "{err:?}");
    }

    #[test]
    fn semantic_errors() {
        for (doc, ptr) in [
            (r#"{"model": {"tau": 1.5}}"#, "/model/tau"),
            (r#"{"train": {"batch_size": 0}}"#, "/train/batch_size"),
            (r#"{"fairness": {"lambda": 1}, "train": {"lambda_fair": 2}}"#, "/fairness/lambda"),
            (r#"{"dataset": {"path": "x.csv", "generate": {}}}"#, "/dataset"),
            (r#"{"trees": {"depth": 1}}"#, "/trees/depth"),
        ] {
            match RunConfig::from_json(doc) {
                Err(Error::Config { pointer, .. }) => assert_eq!(pointer, ptr, "{doc}"),
                other => panic!("{doc}: {other:?}"),
            }
        }
    }

    #[test]
    fn concept_counts() {
        let cfg = RunConfig::from_json(r#"{"model": {"concepts": [1, 2]}}"#).unwrap();
        assert_eq!(cfg.model.concepts.resolve(2).unwrap(), vec![1, 2]);
        assert!(cfg.model.concepts.resolve(3).is_err());
        assert_eq!(ConceptCounts::Uniform(4).resolve(3).unwrap(), vec![4; 3]);
        let cfg = RunConfig::from_json(
            r#"{"model": {"extractor": {"mlp": {"hidden": [8]}}}, "fairness": {"lambda": 0.5}}"#,
        )
        .unwrap();
        assert_eq!(cfg.model.extractor, ExtractorKind::Mlp { hidden: vec![8] });
        assert_eq!(cfg.effective_train().lambda_fair, 0.5);
        assert_eq!("tree".parse::<Task>().unwrap(), Task::Tree);
        assert!("trees".parse::<Task>().is_err());
    }
}
