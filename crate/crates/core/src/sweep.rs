//! Grids over concept counts (and optionally fairness weights) and seeds.
//!
//! Each cell is cached under the hash of its resolved configuration, so an
//! interrupted sweep resumes where it stopped.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ConceptCounts, RunConfig, SweepConfig};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::run::{evaluate_file, load_dataset, train_run};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: String,
    pub concepts: usize,
    pub lambda_fair: f64,
    pub seed: u64,
    pub soft: Metrics,
    #[serde(default)]
    pub checklist: Option<Metrics>,
}

impl CellResult {
    fn primary(&self) -> &Metrics {
        self.checklist.as_ref().unwrap_or(&self.soft)
    }
}

/// Mean and sample standard deviation per grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub concepts: usize,
    pub lambda_fair: f64,
    pub seeds: usize,
    pub accuracy_mean: f64,
    pub accuracy_sd: f64,
    pub recall_mean: f64,
    pub recall_sd: f64,
    pub f1_mean: f64,
    pub f1_sd: f64,
    pub auc_mean: f64,
    pub auc_sd: f64,
    pub soft_accuracy_mean: f64,
    pub soft_accuracy_sd: f64,
    /// Empty when the data has no groups.
    pub fairness_gap_mean: Option<f64>,
    pub fairness_gap_sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub cells: Vec<CellResult>,
    /// Cells read back from the cache instead of trained.
    pub cached: usize,
}

/// Configuration of one grid cell. Generated datasets follow the seed.
pub fn cell_config(base: &RunConfig, concepts: usize, lambda_fair: f64, seed: u64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.sweep = SweepConfig::default();
    cfg.model.concepts = ConceptCounts::Uniform(concepts);
    cfg.train.lambda_fair = lambda_fair;
    cfg.fairness.lambda = 0.0;
    cfg.train.seed = seed;
    if let Some(g) = cfg.dataset.generate.as_mut() {
        g.seed = seed;
    }
    cfg
}

/// Hex SHA-256 of the configuration's JSON form.
pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    let json = serde_json::to_vec(cfg)?;
    let digest = Sha256::digest(&json);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn run_cell(cfg: &RunConfig, key: String, concepts: usize, lambda_fair: f64, seed: u64) -> Result<CellResult> {
    let data = load_dataset(&cfg.dataset, &cfg.fairness)?;
    let out = train_run(cfg, &data)?;
    let report = evaluate_file(&out.file, &data, Split::Test)?;
    Ok(CellResult {
        key,
        concepts,
        lambda_fair,
        seed,
        soft: report.soft,
        checklist: report.checklist,
    })
}

fn cache_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("{key}.json"))
}

fn read_cached(dir: &Path, key: &str) -> Option<CellResult> {
    let text = std::fs::read_to_string(cache_path(dir, key)).ok()?;
    let cell: CellResult = serde_json::from_str(&text).ok()?;
    (cell.key == key).then_some(cell)
}

pub fn run_sweep(base: &RunConfig, cache_dir: Option<&Path>) -> Result<SweepOutcome> {
    base.validate()?;
    let s = &base.sweep;
    let lambdas = if s.lambda_fair.is_empty() {
        vec![base.effective_train().lambda_fair]
    } else {
        s.lambda_fair.clone()
    };
    if let Some(dir) = cache_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut jobs = Vec::new();
    for &c in &s.concepts {
        for &l in &lambdas {
            for &seed in &s.seeds {
                let cfg = cell_config(base, c, l, seed);
                let key = config_hash(&cfg)?;
                jobs.push((cfg, key, c, l, seed));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(s.workers)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let results: Vec<Result<(CellResult, bool)>> = pool.install(|| {
        jobs.par_iter()
            .map(|(cfg, key, c, l, seed)| {
                if let Some(cell) = cache_dir.and_then(|d| read_cached(d, key)) {
                    log::info!("cell concepts={c} lambda={l} seed={seed}: cached");
                    return Ok((cell, true));
                }
                let cell = run_cell(cfg, key.clone(), *c, *l, *seed)?;
                log::info!(
                    "cell concepts={c} lambda={l} seed={seed}: accuracy {:.4}",
                    cell.primary().accuracy
                );
                if let Some(dir) = cache_dir {
                    let path = cache_path(dir, key);
                    std::fs::write(&path, serde_json::to_string_pretty(&cell)?).map_err(|e| Error::io(&path, e))?;
                }
                Ok((cell, false))
            })
            .collect()
    });
    let mut cells = Vec::with_capacity(results.len());
    let mut cached = 0;
    for r in results {
        let (cell, hit) = r?;
        cached += hit as usize;
        cells.push(cell);
    }
    let mut rows = Vec::new();
    for &c in &s.concepts {
        for &l in &lambdas {
            let group: Vec<&CellResult> = cells.iter().filter(|x| x.concepts == c && x.lambda_fair == l).collect();
            let col = |f: &dyn Fn(&CellResult) -> f64| mean_sd(&group.iter().map(|x| f(x)).collect::<Vec<_>>());
            let (accuracy_mean, accuracy_sd) = col(&|x| x.primary().accuracy);
            let (recall_mean, recall_sd) = col(&|x| x.primary().recall);
            let (f1_mean, f1_sd) = col(&|x| x.primary().f1);
            let (auc_mean, auc_sd) = col(&|x| x.primary().auc_roc);
            let (soft_accuracy_mean, soft_accuracy_sd) = col(&|x| x.soft.accuracy);
            let gaps: Option<Vec<f64>> = group
                .iter()
                .map(|x| x.primary().fairness.as_ref().map(|f| f.total_gap))
                .collect();
            let (fairness_gap_mean, fairness_gap_sd) = match gaps {
                Some(g) if !g.is_empty() => {
                    let (m, sd) = mean_sd(&g);
                    (Some(m), Some(sd))
                }
                _ => (None, None),
            };
            rows.push(SweepRow {
                concepts: c,
                lambda_fair: l,
                seeds: group.len(),
                accuracy_mean,
                accuracy_sd,
                recall_mean,
                recall_sd,
                f1_mean,
                f1_sd,
                auc_mean,
                auc_sd,
                soft_accuracy_mean,
                soft_accuracy_sd,
                fairness_gap_mean,
                fairness_gap_sd,
            });
        }
    }
    Ok(SweepOutcome { rows, cells, cached })
}

pub fn write_rows(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{GenerateConfig, Task};

    fn base() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.dataset.generate = Some(GenerateConfig {
            task: Task::BiasedGroups,
            n: 200,
            ..Default::default()
        });
        cfg.model.threshold = Some(1);
        cfg.train.epochs = 10;
        cfg.sweep.concepts = vec![1, 2];
        cfg.sweep.seeds = vec![0, 1];
        cfg
    }

    #[test]
    fn mean_and_sd() {
        let (m, sd) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((sd - 1.0).abs() < 1e-12);
        assert_eq!(mean_sd(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = cell_config(&base(), 1, 0.0, 0);
        assert_eq!(config_hash(&a).unwrap(), config_hash(&a.clone()).unwrap());
        assert_ne!(config_hash(&a).unwrap(), config_hash(&cell_config(&base(), 1, 0.0, 1)).unwrap());
        assert_ne!(config_hash(&a).unwrap(), config_hash(&cell_config(&base(), 1, 0.5, 0)).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 64);
    }

    #[test]
    fn resumes_from_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base();
        let first = run_sweep(&cfg, Some(dir.path())).unwrap();
        assert_eq!(first.cached, 0);
        assert_eq!(first.rows.len(), 2);
        assert!(first.rows.iter().all(|r| r.seeds == 2 && r.fairness_gap_mean.is_some()));
        // drop one cell: only it is retrained
        std::fs::remove_file(cache_path(dir.path(), &first.cells[0].key)).unwrap();
        let second = run_sweep(&cfg, Some(dir.path())).unwrap();
        assert_eq!(second.cached, 3);
        assert_eq!(second.rows, first.rows);
        let mut parallel = cfg.clone();
        parallel.sweep.workers = 3;
        assert_eq!(run_sweep(&parallel, None).unwrap().rows, first.rows);
        let csv_path = dir.path().join("rows.csv");
        write_rows(&first.rows, &csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert!(text.starts_with("concepts,lambda_fair,seeds,accuracy_mean"));
        assert_eq!(text.lines().count(), 3);
    }
}
