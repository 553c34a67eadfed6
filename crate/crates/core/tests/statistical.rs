//! Seed-averaged behavioural properties of trained models.

use checklearn::baselines::{unit_weighting, LinearModel, DEFAULT_BETA};
use checklearn::checklist::ChecklistModel;
use checklearn::config::{ConceptCounts, GenerateConfig, RunConfig, Task};
use checklearn::data::{gen_biased_groups, gen_mnist_analog, Split};
use checklearn::extractors::ExtractorKind;
use checklearn::metrics::evaluate;
use checklearn::run::{evaluate_file, load_dataset, train_run};
use checklearn::train::{fit, TrainConfig};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + 1e-12)
}

/// Mean |cos| between the attributions of sibling concepts on `samples`.
fn sibling_similarity(model: &ChecklistModel, samples: &[checklearn::data::Sample]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for s in samples {
        for a in model.attributions(s).unwrap() {
            for i in 0..a.concepts {
                for j in (i + 1)..a.concepts {
                    total += cosine(a.row(i), a.row(j)).abs();
                    count += 1;
                }
            }
        }
    }
    total / count as f64
}

#[test]
fn checklist_beats_unit_weighting() {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in SEEDS {
        let mut cfg = RunConfig::default();
        cfg.dataset.generate = Some(GenerateConfig {
            task: Task::MnistAnalog,
            n: 3000,
            seed,
            ..Default::default()
        });
        cfg.model.concepts = ConceptCounts::Uniform(1);
        cfg.train.epochs = 20;
        cfg.train.seed = seed;
        let data = load_dataset(&cfg.dataset, &cfg.fairness).unwrap();
        let out = train_run(&cfg, &data).unwrap();
        let ours = evaluate_file(&out.file, &data, Split::Test).unwrap().primary().accuracy;

        let mut lm = LinearModel::new(&data, true).unwrap();
        fit(&mut lm, &data, &TrainConfig { epochs: 20, seed, ..Default::default() }).unwrap();
        let spec = unit_weighting(&lm, &data.validation, DEFAULT_BETA).unwrap();
        let theirs = evaluate(&checklearn::checklist::DiscreteChecklist { spec: &spec, model: None }, &data.test)
            .unwrap()
            .accuracy;
        wins += (ours >= theirs) as usize;
        rows.push((ours, theirs));
    }
    assert!(wins >= 4, "checklist vs unit weighting accuracy per seed: {rows:?}");
}

#[test]
fn tangos_correlation_decorrelates_siblings() {
    let mut plain = Vec::new();
    let mut penalized = Vec::new();
    for seed in SEEDS {
        let data = gen_mnist_analog(1500, 0.1, seed).unwrap();
        for (lambda, out) in [(0.0, &mut plain), (1.0, &mut penalized)] {
            let mut m =
                ChecklistModel::init(&data.modalities, &[2; 4], &ExtractorKind::LinearSigmoid, 3, 0.5, false, seed)
                    .unwrap();
            let cfg = TrainConfig {
                epochs: 15,
                seed,
                lambda_correlation: lambda,
                ..Default::default()
            };
            fit(&mut m, &data, &cfg).unwrap();
            out.push(sibling_similarity(&m, &data.test));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(
        mean(&penalized) < mean(&plain),
        "sibling |cos| without {plain:?}, with {penalized:?}"
    );
}

#[test]
fn unbiased_groups_train_fair_models() {
    let mut fpr_gaps = Vec::new();
    let mut biased_gaps = Vec::new();
    for seed in SEEDS {
        for (bias, out) in [(0.0, &mut fpr_gaps), (1.0, &mut biased_gaps)] {
            // large enough that per-group test FPRs rest on ~500 negatives each
            let data = gen_biased_groups(10_000, bias, seed).unwrap();
            let mut m =
                ChecklistModel::init(&data.modalities, &[2, 1], &ExtractorKind::LinearSigmoid, 1, 0.5, false, seed)
                    .unwrap();
            fit(&mut m, &data, &TrainConfig { epochs: 30, seed, ..Default::default() }).unwrap();
            let report = evaluate(&m, &data.test).unwrap().fairness.unwrap();
            let pair = &report.pairs[0];
            out.push(if bias == 0.0 { pair.delta_fpr } else { pair.delta_fpr.max(pair.delta_fnr) });
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&fpr_gaps) < 0.05, "bias 0 FPR gaps {fpr_gaps:?}");
    assert!(mean(&biased_gaps) > 0.1, "bias 1 gaps {biased_gaps:?}");
}
