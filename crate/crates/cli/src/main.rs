use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use checklearn::bench::{run_bench, BenchOptions};
use checklearn::checklist::{ChecklistModel, ChecklistSpec};
use checklearn::config::{ConceptCounts, GenerateConfig, ModelKind, RunConfig, Task};
use checklearn::data::{read_dataset_csv, write_csv, DatasetBundle, Split};
use checklearn::extractors::{export_attributions, CorrelationMode};
use checklearn::run::{evaluate_file, evaluate_spec, feature_names, generate, load_dataset, train_run, ModelFile, SavedModel};
use checklearn::sweep::{run_sweep, write_rows};
use checklearn::trees::{extract_tree_spec, DiscreteTree};
use checklearn::{Error, Result};

#[derive(Parser)]
#[command(name = "checklearn", version, about = "Learn and evaluate probabilistic checklists")]
struct Cli {
    /// Directory for outputs that have no explicit path.
    #[arg(long, global = true, env = "CHECKLEARN_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,

    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset CSV and print its label rates.
    Generate(GenerateArgs),
    /// Train a model; writes the model, history, checklist and metrics.
    Train(TrainArgs),
    /// Evaluate a model or checklist file on a dataset split.
    Eval(EvalArgs),
    /// Grid over concept counts (and fairness weights) and seeds.
    Sweep(SweepArgs),
    /// Time the tail DP against enumeration.
    Bench(BenchArgs),
    /// Export the checklist, trees and concept attributions of a model.
    Export(ExportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// mnist-analog, tree, checklist-of-trees or biased-groups.
    #[arg(long)]
    task: Task,
    #[arg(long, default_value_t = 5000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    noise_sd: f64,
    /// Group shift of the biased-groups task.
    #[arg(long, default_value_t = 1.0)]
    bias: f64,
    /// Depth of the tree task's ground truth (2 or 3).
    #[arg(long, default_value_t = 3)]
    depth: usize,
    /// Output CSV; defaults to `<out-dir>/<task>-<seed>.csv`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration JSON; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset CSV written by `generate`.
    #[arg(long, conflicts_with = "task")]
    data: Option<PathBuf>,
    /// Generate the data in memory instead.
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    noise_sd: Option<f64>,
    /// checklist, tree, checklist_of_trees, logreg or unit_weighting.
    #[arg(long)]
    kind: Option<String>,
    /// Concepts per modality: one count, or a comma-separated list.
    #[arg(long)]
    concepts: Option<String>,
    /// Checklist threshold; every value is tried when unset.
    #[arg(long)]
    threshold: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    weighted: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_fair: Option<f64>,
    #[arg(long)]
    lambda_sparsity: Option<f64>,
    #[arg(long)]
    lambda_correlation: Option<f64>,
    /// Penalise signed rather than absolute attribution cosines.
    #[arg(long)]
    tangos_signed: bool,
    #[arg(long)]
    tree_depth: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Model file written by `train`.
    #[arg(long, required_unless_present = "spec")]
    model: Option<PathBuf>,
    /// Standalone checklist JSON; concept items read their values from `--model`.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Also write the metrics JSON here.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Cell cache; defaults to `<out-dir>/sweep-cache`.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    no_cache: bool,
    #[arg(long)]
    workers: Option<usize>,
    /// Results CSV; defaults to `<out-dir>/sweep.csv`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 8)]
    min_d: usize,
    #[arg(long, default_value_t = 22)]
    max_d: usize,
    #[arg(long, default_value_t = 30)]
    large_d: usize,
    /// Minimum wall time per measurement.
    #[arg(long, default_value_t = 50)]
    min_time_ms: u64,
    /// Report JSON; defaults to `<out-dir>/bench.json`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset used for tree statistics and attributions.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Skip the attribution CSV.
    #[arg(long)]
    no_attributions: bool,
}

fn config_error(pointer: &str, message: impl Into<String>) -> Error {
    Error::Config {
        pointer: pointer.into(),
        message: message.into(),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn rate_summary(data: &DatasetBundle) -> String {
    let mut out = String::new();
    for split in Split::ALL {
        let s = data.split(split);
        let pos = s.iter().filter(|x| x.label).count();
        out.push_str(&format!(
            "{:<10} n={:<6} positive rate={:.4}\n",
            split.as_str(),
            s.len(),
            pos as f64 / s.len().max(1) as f64
        ));
    }
    out.push_str(&format!("{:<10} n={:<6} positive rate={:.4}", "all", data.len(), data.positive_rate()));
    out
}

fn cmd_generate(cli: &Cli, a: &GenerateArgs) -> Result<()> {
    let g = GenerateConfig {
        task: a.task,
        n: a.n,
        seed: a.seed,
        noise_sd: a.noise_sd,
        bias: a.bias,
        depth: a.depth,
    };
    let mut cfg = RunConfig::default();
    cfg.dataset.generate = Some(g.clone());
    cfg.validate()?;
    let data = generate(&g)?;
    let path = a
        .output
        .clone()
        .unwrap_or_else(|| cli.out_dir.join(format!("{}-{}.csv", a.task.as_str(), a.seed)));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_csv(&data, &path)?;
    println!("wrote {}", path.display());
    println!("{}", rate_summary(&data));
    Ok(())
}

fn parse_kind(s: &str) -> Result<ModelKind> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| config_error("/model/kind", format!("unknown model kind '{s}'")))
}

fn parse_concepts(s: &str) -> Result<ConceptCounts> {
    let counts: std::result::Result<Vec<usize>, _> = s.split(',').map(|x| x.trim().parse()).collect();
    match counts {
        Ok(v) if v.len() == 1 => Ok(ConceptCounts::Uniform(v[0])),
        Ok(v) => Ok(ConceptCounts::PerModality(v)),
        Err(_) => Err(config_error("/model/concepts", format!("'{s}' is not a count list"))),
    }
}

fn train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &a.data {
        cfg.dataset.path = Some(p.clone());
        cfg.dataset.schema = None;
        cfg.dataset.generate = None;
    }
    if let Some(task) = a.task {
        cfg.dataset.path = None;
        cfg.dataset.schema = None;
        let g = cfg.dataset.generate.get_or_insert_with(GenerateConfig::default);
        g.task = task;
    }
    if let Some(g) = cfg.dataset.generate.as_mut() {
        if let Some(n) = a.n {
            g.n = n;
        }
        if let Some(v) = a.noise_sd {
            g.noise_sd = v;
        }
        if let Some(seed) = a.seed {
            g.seed = seed;
        }
    }
    if let Some(k) = &a.kind {
        cfg.model.kind = parse_kind(k)?;
    }
    if let Some(c) = &a.concepts {
        cfg.model.concepts = parse_concepts(c)?;
    }
    if a.threshold.is_some() {
        cfg.model.threshold = a.threshold;
    }
    if let Some(t) = a.tau {
        cfg.model.tau = t;
    }
    cfg.model.weighted |= a.weighted;
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.lambda_fair {
        cfg.train.lambda_fair = v;
        cfg.fairness.lambda = 0.0;
    }
    if let Some(v) = a.lambda_sparsity {
        cfg.train.lambda_sparsity = v;
        cfg.tangos.lambda_sparsity = 0.0;
    }
    if let Some(v) = a.lambda_correlation {
        cfg.train.lambda_correlation = v;
        cfg.tangos.lambda_correlation = 0.0;
    }
    if a.tangos_signed {
        cfg.train.tangos_mode = CorrelationMode::Signed;
        cfg.tangos.mode = CorrelationMode::Signed;
    }
    if let Some(v) = a.tree_depth {
        cfg.trees.depth = v;
    }
    cfg.validate()?;
    if cfg.dataset.path.is_none() && cfg.dataset.generate.is_none() {
        return Err(config_error("/dataset", "no dataset: pass --data, --task or a config with a dataset"));
    }
    Ok(cfg)
}

fn write_trees(dir: &Path, trees: &[DiscreteTree]) -> Result<()> {
    for (i, t) in trees.iter().enumerate() {
        let stem = if trees.len() == 1 { "tree".to_string() } else { format!("tree_{i}") };
        write_text(&dir.join(format!("{stem}.json")), &t.to_json()?)?;
        write_text(&dir.join(format!("{stem}.md")), &t.to_markdown())?;
    }
    Ok(())
}

fn write_checklist(dir: &Path, spec: &ChecklistSpec) -> Result<()> {
    write_text(&dir.join("checklist.json"), &spec.to_json()?)?;
    write_text(&dir.join("checklist.md"), &spec.to_markdown())
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let cfg = train_config(a)?;
    let data = load_dataset(&cfg.dataset, &cfg.fairness)?;
    let out = train_run(&cfg, &data)?;
    let dir = &cli.out_dir;
    create_dir(dir)?;
    write_text(&dir.join("run_config.json"), &cfg.to_json()?)?;
    out.file.save(&dir.join("model.json"))?;
    out.history.write_csv(&dir.join("history.csv"))?;
    if let Some(spec) = &out.file.checklist {
        write_checklist(dir, spec)?;
    }
    write_trees(dir, &out.trees)?;
    let validation = evaluate_file(&out.file, &data, Split::Validation)?;
    let test = evaluate_file(&out.file, &data, Split::Test)?;
    let metrics = serde_json::json!({
        "best_epoch": out.history.best_epoch,
        "threshold_candidates": out.candidates,
        "threshold_search": out.search,
        "validation": validation,
        "test": test,
    });
    write_text(&dir.join("metrics.json"), &serde_json::to_string_pretty(&metrics)?)?;
    println!("wrote model, history and metrics to {}", dir.display());
    if let Some(spec) = &out.file.checklist {
        println!("\n{}", spec.to_markdown());
    }
    let p = test.primary();
    println!(
        "test: accuracy={:.4} recall={:.4} f1={:.4} auc={:.4}",
        p.accuracy, p.recall, p.f1, p.auc_roc
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let data = read_dataset_csv(&a.data)?;
    let json = match &a.spec {
        Some(spec_path) => {
            let spec = ChecklistSpec::load(spec_path)?;
            let file = a.model.as_deref().map(ModelFile::load).transpose()?;
            let model: Option<&ChecklistModel> = match file.as_ref().map(|f| &f.model) {
                Some(SavedModel::Checklist(m)) => Some(m),
                Some(other) => {
                    return Err(Error::InvalidInput(format!(
                        "concept checklists need a checklist model, got '{}'",
                        other.kind()
                    )))
                }
                None => None,
            };
            let metrics = evaluate_spec(&spec, model, &data, a.split)?;
            serde_json::json!({ "split": a.split, "checklist": metrics })
        }
        None => {
            let path = a.model.as_ref().expect("clap requires --model without --spec");
            serde_json::to_value(evaluate_file(&ModelFile::load(path)?, &data, a.split)?)?
        }
    };
    let text = serde_json::to_string_pretty(&json)?;
    if let Some(out) = &a.output {
        write_text(out, &text)?;
    }
    println!("{text}");
    Ok(())
}

fn cmd_sweep(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(w) = a.workers {
        cfg.sweep.workers = w;
    }
    cfg.validate()?;
    let cache = (!a.no_cache).then(|| a.cache.clone().unwrap_or_else(|| cli.out_dir.join("sweep-cache")));
    let outcome = run_sweep(&cfg, cache.as_deref())?;
    let path = a.output.clone().unwrap_or_else(|| cli.out_dir.join("sweep.csv"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_rows(&outcome.rows, &path)?;
    println!(
        "{} cells ({} cached), {} rows written to {}",
        outcome.cells.len(),
        outcome.cached,
        outcome.rows.len(),
        path.display()
    );
    for r in &outcome.rows {
        println!(
            "concepts={} lambda_fair={} accuracy={:.4} ± {:.4}",
            r.concepts, r.lambda_fair, r.accuracy_mean, r.accuracy_sd
        );
    }
    Ok(())
}

fn cmd_bench(cli: &Cli, a: &BenchArgs) -> Result<()> {
    let report = run_bench(&BenchOptions {
        min_d: a.min_d,
        max_d: a.max_d,
        large_d: a.large_d,
        min_time: Duration::from_millis(a.min_time_ms),
        seed: 0,
    })?;
    let path = a.output.clone().unwrap_or_else(|| cli.out_dir.join("bench.json"));
    write_text(&path, &serde_json::to_string_pretty(&report)?)?;
    println!("{:>3} {:>14} {:>14} {:>10}", "d'", "dp s/call", "enum s/call", "ratio");
    for r in &report.rows {
        println!(
            "{:>3} {:>14.3e} {:>14.3e} {:>10.1}",
            r.d, r.dp_secs_per_call, r.enum_secs_per_call, r.ratio
        );
    }
    println!("d'={}: dp {:.3e} s/call", report.large_d, report.large_secs_per_call);
    println!("report written to {}", path.display());
    if !report.dp_faster_beyond_12 {
        return Err(Error::InvalidInput("the DP was slower than enumeration above d'=12".into()));
    }
    Ok(())
}

fn cmd_export(cli: &Cli, a: &ExportArgs) -> Result<()> {
    let file = ModelFile::load(&a.model)?;
    let data = read_dataset_csv(&a.data)?;
    file.model.check_modalities(&data.modalities)?;
    let dir = &cli.out_dir;
    create_dir(dir)?;
    if let Some(spec) = &file.checklist {
        write_checklist(dir, spec)?;
    }
    let names = feature_names(&data.modalities);
    let samples = data.split(a.split);
    let trees: Vec<DiscreteTree> = match &file.model {
        SavedModel::Tree(t) => vec![extract_tree_spec(t, samples, Some(&names))?],
        SavedModel::ChecklistOfTrees(c) => c
            .trees
            .iter()
            .map(|t| extract_tree_spec(t, samples, Some(&names[t.input.offset..t.input.offset + t.input.dim])))
            .collect::<Result<_>>()?,
        _ => Vec::new(),
    };
    write_trees(dir, &trees)?;
    if let (SavedModel::Checklist(m), false) = (&file.model, a.no_attributions) {
        let atts = samples
            .iter()
            .map(|s| Ok((s.id, m.full_attribution(s)?)))
            .collect::<Result<Vec<_>>>()?;
        export_attributions(&atts, &dir.join("attributions.csv"))?;
    }
    println!("exported {} to {}", file.model.kind(), dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(&cli, a),
        Command::Train(a) => cmd_train(&cli, a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(&cli, a),
        Command::Bench(a) => cmd_bench(&cli, a),
        Command::Export(a) => cmd_export(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
