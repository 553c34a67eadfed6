//! End-to-end runs: load or generate data, train the configured model,
//! extract its discrete form and evaluate.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{annotate_activation, unit_weighting, LinearModel};
use crate::checklist::{
    extract_spec, extract_spec_with, select_informative, tune_thresholds, ChecklistModel, ChecklistSpec,
    DiscreteChecklist, ExtractOptions, ThresholdSearch,
};
use crate::config::{DatasetConfig, FairnessConfig, GenerateConfig, ModelKind, RunConfig, Task};
use crate::data::{
    gen_biased_groups, gen_checklist_of_trees_task, gen_mnist_analog, gen_tree_task, load_csv, read_dataset_csv,
    DatasetBundle, GroundTruthTree, Modality, Sample, Split,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Metrics, Scorer};
use crate::train::{fit, History, TrainConfig};
use crate::trees::{extract_tree_spec, ChecklistOfTrees, DiscreteTree, InputSlice, SoftTree};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum SavedModel {
    Checklist(ChecklistModel),
    Tree(SoftTree),
    ChecklistOfTrees(ChecklistOfTrees),
    Logreg(LinearModel),
}

impl SavedModel {
    pub fn kind(&self) -> &'static str {
        match self {
            SavedModel::Checklist(_) => "checklist",
            SavedModel::Tree(_) => "tree",
            SavedModel::ChecklistOfTrees(_) => "checklist_of_trees",
            SavedModel::Logreg(_) => "logreg",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SavedModel::Checklist(m) => m.validate(),
            SavedModel::Tree(t) => t.validate(),
            SavedModel::ChecklistOfTrees(c) => c.validate(),
            SavedModel::Logreg(l) => l.validate(),
        }
    }

    /// Refuse datasets whose layout differs from the training data.
    pub fn check_modalities(&self, modalities: &[Modality]) -> Result<()> {
        let total: usize = modalities.iter().map(|m| m.dim).sum();
        match self {
            SavedModel::Checklist(m) => m.check_modalities(modalities),
            SavedModel::Logreg(l) => {
                if l.modalities != modalities {
                    return Err(Error::schema(format!(
                        "model expects modalities {:?}, data has {:?}",
                        l.modalities, modalities
                    )));
                }
                Ok(())
            }
            SavedModel::Tree(t) => check_width(t.input.total, total),
            SavedModel::ChecklistOfTrees(c) => check_width(c.trees[0].input.total, total),
        }
    }

    fn scorer(&self) -> &dyn Scorer {
        match self {
            SavedModel::Checklist(m) => m,
            SavedModel::Tree(t) => t,
            SavedModel::ChecklistOfTrees(c) => c,
            SavedModel::Logreg(l) => l,
        }
    }
}

fn check_width(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::schema(format!("model reads {expected} features, data has {got}")));
    }
    Ok(())
}

/// Versioned on-disk model, optionally with its discrete checklist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub model: SavedModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checklist: Option<ChecklistSpec>,
}

impl ModelFile {
    pub fn new(model: SavedModel, checklist: Option<ChecklistSpec>) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            model,
            checklist,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Version {
            format_version: Option<u32>,
        }
        let v: Version = serde_json::from_str(text)?;
        match v.format_version {
            Some(MODEL_FORMAT_VERSION) => {}
            Some(other) => {
                return Err(Error::invalid(format!(
                    "model format version {other} is not supported (expected {MODEL_FORMAT_VERSION})"
                )))
            }
            None => return Err(Error::invalid("not a model file: no format_version")),
        }
        let file: ModelFile = serde_json::from_str(text)?;
        file.model.validate()?;
        if let Some(spec) = &file.checklist {
            spec.validate()?;
        }
        Ok(file)
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

    /// The discrete checklist when there is one, else the soft model.
    pub fn primary_scorer(&self) -> Box<dyn Scorer + '_> {
        match (&self.checklist, &self.model) {
            (Some(spec), SavedModel::Checklist(m)) => Box::new(DiscreteChecklist { spec, model: Some(m) }),
            (Some(spec), _) => Box::new(DiscreteChecklist { spec, model: None }),
            (None, m) => Box::new(ScorerRef(m.scorer())),
        }
    }
}

struct ScorerRef<'a>(&'a dyn Scorer);

impl Scorer for ScorerRef<'_> {
    fn score(&self, sample: &Sample) -> Result<(f64, bool)> {
        self.0.score(sample)
    }
}

pub fn generate(g: &GenerateConfig) -> Result<DatasetBundle> {
    match g.task {
        Task::MnistAnalog => gen_mnist_analog(g.n, g.noise_sd, g.seed),
        Task::Tree => gen_tree_task(g.n, g.seed, &GroundTruthTree::default_for_depth(g.depth)?),
        Task::ChecklistOfTrees => gen_checklist_of_trees_task(g.n, g.seed),
        Task::BiasedGroups => gen_biased_groups(g.n, g.bias, g.seed),
    }
}

pub fn load_dataset(cfg: &DatasetConfig, fairness: &FairnessConfig) -> Result<DatasetBundle> {
    match (&cfg.path, &cfg.schema, &cfg.generate) {
        (Some(path), Some(schema), None) => {
            let mut schema = schema.clone();
            if let Some(g) = &fairness.group_column {
                schema.group_column = Some(g.clone());
            }
            load_csv(path, &schema)
        }
        (Some(path), None, None) => read_dataset_csv(path),
        (None, None, Some(g)) => generate(g),
        _ => Err(Error::Config {
            pointer: "/dataset".into(),
            message: "give a dataset 'path' or a 'generate' block".into(),
        }),
    }
}

/// `<modality>__<j>` for every feature.
pub fn feature_names(modalities: &[Modality]) -> Vec<String> {
    modalities
        .iter()
        .flat_map(|m| (0..m.dim).map(move |j| format!("{}__{j}", m.name)))
        .collect()
}

/// One trained threshold candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCandidate {
    pub threshold: usize,
    pub val_loss: f64,
}

/// Train one checklist per threshold in `thresholds` and keep the one with the
/// lowest validation loss; ties keep the smaller threshold.
pub fn select_threshold(
    data: &DatasetBundle,
    concepts: &[usize],
    cfg: &RunConfig,
    train: &TrainConfig,
    thresholds: &[usize],
) -> Result<(ChecklistModel, History, Vec<ThresholdCandidate>)> {
    let mut best: Option<(f64, ChecklistModel, History)> = None;
    let mut candidates = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut model = ChecklistModel::init(
            &data.modalities,
            concepts,
            &cfg.model.extractor,
            t,
            cfg.model.tau,
            cfg.model.weighted,
            train.seed,
        )?;
        let history = fit(&mut model, data, train)?;
        let val_loss = history.best().map_or(f64::INFINITY, |r| r.val_loss);
        log::info!("threshold {t}: validation loss {val_loss:.5}");
        candidates.push(ThresholdCandidate { threshold: t, val_loss });
        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, model, history));
        }
    }
    let (_, model, history) = best.ok_or_else(|| Error::invalid("no threshold candidates"))?;
    Ok((model, history, candidates))
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub file: ModelFile,
    pub history: History,
    /// Validation loss per trained threshold when the threshold was searched.
    pub candidates: Vec<ThresholdCandidate>,
    pub search: Option<ThresholdSearch>,
    pub trees: Vec<DiscreteTree>,
}

pub fn train_run(cfg: &RunConfig, data: &DatasetBundle) -> Result<RunOutput> {
    let train = cfg.effective_train();
    train.validate()?;
    let mut candidates = Vec::new();
    let mut search = None;
    let mut trees = Vec::new();
    let names = feature_names(&data.modalities);
    let (file, history) = match cfg.model.kind {
        ModelKind::Checklist => {
            let concepts = cfg.model.concepts.resolve(data.modalities.len())?;
            let d: usize = concepts.iter().sum();
            let thresholds: Vec<usize> = match cfg.model.threshold {
                Some(t) if t > d => {
                    return Err(Error::Config {
                        pointer: "/model/threshold".into(),
                        message: format!("threshold {t} exceeds the {d} concepts"),
                    })
                }
                Some(t) => vec![t],
                None => (1..=d).collect(),
            };
            let (model, history, cands) = select_threshold(data, &concepts, cfg, &train, &thresholds)?;
            if thresholds.len() > 1 {
                candidates = cands;
            }
            let extracted = if cfg.model.tune {
                let items = cfg
                    .model
                    .informative_per_modality
                    .map(|k| select_informative(&model, &data.train, k))
                    .transpose()?;
                let s = tune_thresholds(&model, &data.validation, cfg.model.objective_metric, items.as_deref())?;
                let spec = extract_spec_with(
                    &model,
                    &data.train,
                    &ExtractOptions {
                        tau: s.tau,
                        threshold: s.threshold,
                        items,
                        prune_constant_true: cfg.model.prune_constant_true,
                    },
                );
                search = Some(s);
                spec
            } else {
                extract_spec(&model, &data.train, cfg.model.prune_constant_true)
            };
            let spec = match extracted {
                Ok(spec) => Some(spec),
                Err(Error::EmptyChecklist(msg)) => {
                    log::warn!("no checklist extracted: {msg}");
                    None
                }
                Err(e) => return Err(e),
            };
            (ModelFile::new(SavedModel::Checklist(model), spec), history)
        }
        ModelKind::Tree => {
            let total = data.total_dim();
            let mut tree = SoftTree::init(
                cfg.trees.depth,
                InputSlice {
                    offset: 0,
                    dim: total,
                    total,
                },
                &cfg.model.extractor,
                train.seed,
            )?;
            tree.tau = cfg.model.tau;
            tree.regularizers = cfg.trees.regularizers;
            let history = fit(&mut tree, data, &train)?;
            trees.push(extract_tree_spec(&tree, &data.train, Some(&names))?);
            (ModelFile::new(SavedModel::Tree(tree), None), history)
        }
        ModelKind::ChecklistOfTrees => {
            let total = data.total_dim();
            let inputs: Vec<InputSlice> = if cfg.trees.per_modality {
                data.modalities
                    .iter()
                    .zip(data.offsets())
                    .map(|(m, offset)| InputSlice {
                        offset,
                        dim: m.dim,
                        total,
                    })
                    .collect()
            } else {
                vec![
                    InputSlice {
                        offset: 0,
                        dim: total,
                        total
                    };
                    data.modalities.len()
                ]
            };
            let mut model = ChecklistOfTrees::init(
                cfg.trees.depth,
                &inputs,
                &cfg.model.extractor,
                cfg.trees.threshold,
                train.seed,
            )?;
            for t in &mut model.trees {
                t.tau = cfg.model.tau;
                t.regularizers = cfg.trees.regularizers;
            }
            let history = fit(&mut model, data, &train)?;
            for t in &model.trees {
                let slice = &names[t.input.offset..t.input.offset + t.input.dim];
                trees.push(extract_tree_spec(t, &data.train, Some(slice))?);
            }
            (ModelFile::new(SavedModel::ChecklistOfTrees(model), None), history)
        }
        ModelKind::Logreg | ModelKind::UnitWeighting => {
            let mut lm = LinearModel::new(data, cfg.model.binarize)?;
            let history = fit(&mut lm, data, &train)?;
            let spec = if cfg.model.kind == ModelKind::UnitWeighting {
                let mut spec = unit_weighting(&lm, &data.validation, cfg.model.beta)?;
                annotate_activation(&mut spec, &data.train)?;
                Some(spec)
            } else {
                None
            };
            (ModelFile::new(SavedModel::Logreg(lm), spec), history)
        }
    };
    Ok(RunOutput {
        file,
        history,
        candidates,
        search,
        trees,
    })
}

/// Metrics of a model file on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_kind: String,
    pub split: Split,
    /// The soft (probabilistic) model.
    pub soft: Metrics,
    /// The discrete checklist, when the file has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checklist: Option<Metrics>,
}

impl EvalReport {
    /// Checklist metrics when present, else soft-model metrics.
    pub fn primary(&self) -> &Metrics {
        self.checklist.as_ref().unwrap_or(&self.soft)
    }
}

pub fn evaluate_file(file: &ModelFile, data: &DatasetBundle, split: Split) -> Result<EvalReport> {
    file.model.check_modalities(&data.modalities)?;
    let samples = data.split(split);
    let soft = evaluate(file.model.scorer(), samples)?;
    let checklist = match &file.checklist {
        Some(_) => Some(evaluate(file.primary_scorer().as_ref(), samples)?),
        None => None,
    };
    Ok(EvalReport {
        model_kind: file.model.kind().to_string(),
        split,
        soft,
        checklist,
    })
}

/// Metrics of a standalone checklist on one split; concept items need `model`.
pub fn evaluate_spec(
    spec: &ChecklistSpec,
    model: Option<&ChecklistModel>,
    data: &DatasetBundle,
    split: Split,
) -> Result<Metrics> {
    spec.validate()?;
    if let Some(m) = model {
        m.check_modalities(&data.modalities)?;
    }
    for item in spec.kept_items() {
        if !data.modalities.iter().any(|m| m.name == item.modality) {
            return Err(Error::schema(format!(
                "checklist item '{}' refers to modality '{}', absent from the data",
                item.describe(),
                item.modality
            )));
        }
    }
    evaluate(&DiscreteChecklist { spec, model }, data.split(split))
}
