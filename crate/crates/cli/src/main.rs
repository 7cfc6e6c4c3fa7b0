use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use m2e::clustering::{binary_metrics, kmeans, match_labels};
use m2e::datagen::{generate, SyntheticSpec};
use m2e::io::{self, load_dataset, save_dataset, Dataset};
use m2e::runner::{
    require_labels, run_cp, run_evaluate, run_fit, run_gridsearch, write_metrics, MethodChoice, RunConfig,
};
use m2e::MuPolicy;

/// Environment variable capping the number of worker threads.
const THREADS_ENV: &str = "M2E_THREADS";

#[derive(Parser, Debug)]
#[command(name = "m2e", version, about = "Multi-view multi-graph embedding and clustering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with planted clusters.
    Generate(GenerateArgs),
    /// Fit an embedding and write factors, traces and a run summary.
    Fit(DatasetArgs),
    /// Run multi-restart K-means on an embedding file.
    Cluster(ClusterArgs),
    /// Fit (or load) an embedding and score repeated clusterings against the labels.
    Evaluate(EvaluateArgs),
    /// Evaluate every weight and rank combination and rank the cells.
    Gridsearch(GridArgs),
    /// CP-ALS on a single view.
    Cp(CpArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// m2e, m2e-ds, m2e-ts or cp.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    rank: Option<usize>,
    /// View weight as `view=value` (view name or 1-based index), or a bare value for every view.
    #[arg(long = "lambda", value_name = "V=X")]
    lambdas: Vec<String>,
    /// K-means restarts.
    #[arg(long)]
    restarts: Option<usize>,
    /// Number of clusters.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Relative objective change that stops the solver.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    residual_tol: Option<f64>,
    /// Starting penalty; implies the fixed penalty policy.
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long, value_enum)]
    mu_policy: Option<MuPolicyArg>,
    #[arg(long)]
    mu_growth: Option<f64>,
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    positive_class: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum MuPolicyArg {
    Auto,
    Fixed,
}

#[derive(Args, Debug)]
struct DatasetArgs {
    /// Dataset directory or manifest file.
    dataset: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    /// Start from the dimensions of a cohort.
    #[arg(long, value_parser = ["hiv", "bp"])]
    preset: Option<String>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    nodes: Option<usize>,
    /// Comma-separated cluster sizes.
    #[arg(long, value_delimiter = ',')]
    cluster_sizes: Vec<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    jitter: Option<f64>,
}

#[derive(Args, Debug)]
struct ClusterArgs {
    /// Matrix file whose rows are clustered.
    embedding: PathBuf,
    /// Labels file to score against.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    dataset: PathBuf,
    /// Score this embedding instead of fitting one.
    #[arg(long)]
    embedding: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct GridArgs {
    dataset: PathBuf,
    /// Comma-separated weight values tried for every view.
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Vec<f64>,
    /// Comma-separated ranks.
    #[arg(long, value_delimiter = ',')]
    rank_grid: Vec<usize>,
    /// Run grids larger than the configured cell limit.
    #[arg(long)]
    allow_large: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct CpArgs {
    dataset: PathBuf,
    /// View name or 1-based index.
    #[arg(long, default_value = "1")]
    view: String,
    #[command(flatten)]
    common: Common,
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_toml_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.solver.seed = s;
        cfg.kmeans.seed = s;
        cfg.datagen.seed = s;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(m) = &common.method {
        cfg.method = m.parse()?;
    }
    if let Some(r) = common.rank {
        cfg.solver.rank = r;
    }
    if let Some(r) = common.restarts {
        cfg.kmeans.restarts = r;
    }
    if let Some(k) = common.k {
        cfg.kmeans.k = k;
    }
    if let Some(r) = common.repetitions {
        cfg.repetitions = r;
    }
    if let Some(n) = common.max_iters {
        cfg.solver.max_outer_iters = n;
    }
    if let Some(t) = common.tol {
        cfg.solver.obj_rel_tol = t;
    }
    if let Some(t) = common.residual_tol {
        cfg.solver.residual_tol = t;
    }
    if let Some(mu) = common.mu {
        cfg.solver.mu = mu;
        cfg.solver.mu_policy = MuPolicy::Fixed;
        cfg.solver.mu_max = cfg.solver.mu_max.max(mu);
    }
    if let Some(p) = common.mu_policy {
        cfg.solver.mu_policy = match p {
            MuPolicyArg::Auto => MuPolicy::Auto,
            MuPolicyArg::Fixed => MuPolicy::Fixed,
        };
    }
    if let Some(g) = common.mu_growth {
        cfg.solver.mu_growth = g;
    }
    if let Some(s) = common.inner_steps {
        cfg.solver.inner_steps = s;
    }
    if let Some(p) = common.positive_class {
        cfg.positive_class = p;
    }
    Ok(cfg)
}

fn view_index(dataset: &Dataset, key: &str) -> anyhow::Result<usize> {
    if let Some(i) = dataset.view_names().iter().position(|n| *n == key) {
        return Ok(i);
    }
    match key.parse::<usize>() {
        Ok(i) if (1..=dataset.views.len()).contains(&i) => Ok(i - 1),
        _ => bail!(
            "unknown view '{key}'; views are {:?} or 1..={}",
            dataset.view_names(),
            dataset.views.len()
        ),
    }
}

/// Resolves weights against the dataset's views and applies `--lambda` overrides.
fn bind_dataset(cfg: &mut RunConfig, dataset: &Dataset, lambdas: &[String]) -> anyhow::Result<()> {
    let v = dataset.views.len();
    if cfg.solver.lambdas.len() != v {
        cfg.solver.lambdas = cfg.solver_for(v)?.lambdas;
    }
    for spec in lambdas {
        match spec.split_once('=') {
            Some((key, value)) => {
                let x: f64 = value
                    .trim()
                    .parse()
                    .with_context(|| format!("bad weight in --lambda {spec}"))?;
                let i = view_index(dataset, key.trim())?;
                cfg.solver.lambdas[i] = x;
            }
            None => {
                let x: f64 = spec
                    .trim()
                    .parse()
                    .with_context(|| format!("bad weight in --lambda {spec}"))?;
                cfg.solver.lambdas.iter_mut().for_each(|l| *l = x);
            }
        }
    }
    cfg.validate()?;
    Ok(())
}

fn open_dataset(path: &Path, cfg: &mut RunConfig, lambdas: &[String]) -> anyhow::Result<Dataset> {
    let dataset = load_dataset(path)?;
    bind_dataset(cfg, &dataset, lambdas)?;
    Ok(dataset)
}

fn cmd_generate(args: &GenerateArgs) -> anyhow::Result<Value> {
    let mut cfg = load_config(&args.common)?;
    let mut spec = match args.preset.as_deref() {
        Some("hiv") => SyntheticSpec {
            seed: cfg.datagen.seed,
            ..SyntheticSpec::hiv_shape_preset()
        },
        Some("bp") => SyntheticSpec {
            seed: cfg.datagen.seed,
            ..SyntheticSpec::bp_shape_preset()
        },
        _ => cfg.datagen.clone(),
    };
    if let Some(v) = args.views {
        spec.views = v;
    }
    if let Some(m) = args.nodes {
        spec.nodes = m;
    }
    if !args.cluster_sizes.is_empty() {
        spec.cluster_sizes = args.cluster_sizes.clone();
    }
    if let Some(r) = args.common.rank {
        spec.rank = r;
    }
    if let Some(s) = args.separation {
        spec.separation = s;
    }
    if let Some(s) = args.noise {
        spec.noise_sigma = s;
    }
    if let Some(j) = args.jitter {
        spec.jitter = j;
    }
    cfg.datagen = spec.clone();
    let data = generate(&spec)?;
    let names: Vec<String> = (1..=spec.views).map(|v| format!("view{v}")).collect();
    let views: Vec<(&str, _)> = names.iter().map(String::as_str).zip(&data.views).collect();
    let mut metadata = BTreeMap::new();
    metadata.insert("generator".to_string(), "synthetic planted clusters".to_string());
    metadata.insert(
        "spec".to_string(),
        serde_json::to_string(&spec).context("serializing generator settings")?,
    );
    let manifest = save_dataset(&cfg.out_dir, &views, Some(&data.labels), metadata)?;
    Ok(json!({
        "command": "generate",
        "manifest": manifest,
        "spec": spec,
        "subjects": spec.subjects(),
    }))
}

fn cmd_fit(args: &DatasetArgs) -> anyhow::Result<Value> {
    let mut cfg = load_config(&args.common)?;
    let dataset = open_dataset(&args.dataset, &mut cfg, &args.common.lambdas)?;
    let outcome = run_fit(&cfg, &dataset, Some(&cfg.out_dir))?;
    let mut summary = outcome.summary;
    summary["out_dir"] = json!(cfg.out_dir);
    Ok(summary)
}

fn cmd_cluster(args: &ClusterArgs) -> anyhow::Result<Value> {
    let cfg = load_config(&args.common)?;
    cfg.validate()?;
    let points = io::read_matrix(&args.embedding)?;
    let km = kmeans(&points, &cfg.kmeans)?;
    io::write_labels(&cfg.out_dir.join("clusters.txt"), &km.labels)?;
    let mut doc = json!({
        "command": "cluster",
        "k": cfg.kmeans.k,
        "restarts": cfg.kmeans.restarts,
        "seed": cfg.kmeans.seed,
        "inertia": km.inertia,
        "best_restart": km.best_restart,
        "inertias": km.inertias,
        "labels_file": cfg.out_dir.join("clusters.txt"),
    });
    if let Some(path) = &args.labels {
        let truth = io::read_labels(path)?;
        let arity = truth.iter().copied().max().unwrap_or(0).max(cfg.kmeans.k);
        let m = match_labels(&km.labels, &truth, arity)?;
        let metrics = binary_metrics(&m.matched, &truth, cfg.positive_class)?;
        doc["metrics"] = serde_json::to_value(metrics)?;
    }
    std::fs::write(
        cfg.out_dir.join("clusters.json"),
        serde_json::to_string_pretty(&doc)? + "\n",
    )
    .context("writing clusters.json")?;
    Ok(doc)
}

fn cmd_evaluate(args: &EvaluateArgs) -> anyhow::Result<Value> {
    let mut cfg = load_config(&args.common)?;
    let dataset = open_dataset(&args.dataset, &mut cfg, &args.common.lambdas)?;
    let labels = require_labels(&dataset)?;
    let embedding = match &args.embedding {
        Some(path) => io::read_matrix(path)?,
        None => run_fit(&cfg, &dataset, Some(&cfg.out_dir))?.embedding,
    };
    let report = run_evaluate(&embedding, labels, &cfg.kmeans, cfg.repetitions, cfg.positive_class)?;
    let path = cfg.out_dir.join("metrics.json");
    write_metrics(&path, &report)?;
    Ok(json!({
        "command": "evaluate",
        "method": cfg.method.as_str(),
        "metrics_file": path,
        "accuracy": report.accuracy,
        "precision": report.precision,
        "recall": report.recall,
        "f1": report.f1,
        "warnings": report.warnings,
    }))
}

fn cmd_gridsearch(args: &GridArgs) -> anyhow::Result<Value> {
    let mut cfg = load_config(&args.common)?;
    if !args.lambda_grid.is_empty() {
        cfg.grid.lambda_grid = args.lambda_grid.clone();
    }
    if !args.rank_grid.is_empty() {
        cfg.grid.rank_grid = args.rank_grid.clone();
    }
    cfg.grid.allow_large |= args.allow_large;
    let dataset = open_dataset(&args.dataset, &mut cfg, &args.common.lambdas)?;
    let report = run_gridsearch(&cfg, &dataset, Some(&cfg.out_dir))?;
    Ok(json!({
        "command": "gridsearch",
        "cells": report.cells.len(),
        "best": report.best(),
        "out_dir": cfg.out_dir,
    }))
}

fn cmd_cp(args: &CpArgs) -> anyhow::Result<Value> {
    let mut cfg = load_config(&args.common)?;
    cfg.method = MethodChoice::Cp;
    let dataset = open_dataset(&args.dataset, &mut cfg, &args.common.lambdas)?;
    let v = view_index(&dataset, &args.view)?;
    let name = dataset.view_names()[v].to_string();
    let opts = cfg.als_options();
    let fit = run_cp(&dataset.views[v], &name, &opts, Some(&cfg.out_dir))?;
    Ok(json!({
        "command": "cp",
        "view": name,
        "rank": opts.rank,
        "iterations": fit.trace.len(),
        "converged": fit.converged,
        "final_relative_error": fit.final_error(),
        "out_dir": cfg.out_dir,
    }))
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(value) = std::env::var(THREADS_ENV) {
        let n: usize = value
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| anyhow!("{THREADS_ENV} must be a positive integer, got '{value}'"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<Value> {
    configure_threads()?;
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Cluster(a) => cmd_cluster(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Gridsearch(a) => cmd_gridsearch(a),
        Command::Cp(a) => cmd_cp(a),
    }
}

fn error_document(err: &anyhow::Error) -> Value {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<m2e::Error>())
        .map_or("error", m2e::Error::kind);
    json!({
        "error": {
            "kind": kind,
            "message": format!("{err:#}"),
        }
    })
}

fn emit(doc: &Value) {
    let text = serde_json::to_string_pretty(doc).expect("json values always serialize");
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            emit(&json!({ "error": { "kind": "usage", "message": e.to_string().trim_end() } }));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(doc) => {
            emit(&doc);
            ExitCode::SUCCESS
        }
        Err(e) => {
            emit(&error_document(&e));
            ExitCode::FAILURE
        }
    }
}
