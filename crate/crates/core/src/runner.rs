//! Experiment drivers shared by the command-line tool: fitting, clustering
//! evaluation, grid search and standalone CP, each writing plain-text
//! artifacts and a JSON summary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::clustering::{binary_metrics, kmeans, match_labels, BinaryMetrics, KMeansOptions};
use crate::cp_als::{cp_als_fit, AlsFit, AlsOptions};
use crate::datagen::SyntheticSpec;
use crate::error::{Error, Result};
use crate::io::{self, Dataset};
use crate::matrix::Matrix;
use crate::solver::{fit, M2eConfig, M2eSolution, Method};
use crate::tensor::GraphViewTensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MethodChoice {
    #[default]
    #[serde(rename = "m2e")]
    M2e,
    #[serde(rename = "m2e-ds")]
    M2eDs,
    #[serde(rename = "m2e-ts")]
    M2eTs,
    /// Independent CP-ALS per view; the embedding concatenates the subject factors.
    #[serde(rename = "cp")]
    Cp,
}

impl MethodChoice {
    pub fn solver_method(self) -> Option<Method> {
        match self {
            MethodChoice::M2e => Some(Method::Consensus),
            MethodChoice::M2eDs => Some(Method::DirectShared),
            MethodChoice::M2eTs => Some(Method::TwoStep),
            MethodChoice::Cp => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MethodChoice::Cp => "cp",
            m => m.solver_method().expect("solver method").as_str(),
        }
    }
}

impl std::str::FromStr for MethodChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "cp" {
            return Ok(MethodChoice::Cp);
        }
        Ok(match s.parse::<Method>()? {
            Method::Consensus => MethodChoice::M2e,
            Method::DirectShared => MethodChoice::M2eDs,
            Method::TwoStep => MethodChoice::M2eTs,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub lambda_grid: Vec<f64>,
    pub rank_grid: Vec<usize>,
    /// Grids above this many cells are refused unless `allow_large` is set.
    pub max_cells: usize,
    pub allow_large: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            lambda_grid: vec![1e-4, 1e-2, 1.0, 1e2, 1e4],
            rank_grid: (1..=20).collect(),
            max_cells: 10_000,
            allow_large: false,
        }
    }
}

impl GridSpec {
    pub fn cell_count(&self, views: usize) -> f64 {
        (self.lambda_grid.len() as f64).powi(views as i32) * self.rank_grid.len() as f64
    }

    pub fn validate(&self, views: usize) -> Result<()> {
        if self.lambda_grid.is_empty() || self.rank_grid.is_empty() {
            return Err(Error::InvalidArgument("grids must be non-empty".into()));
        }
        if self.lambda_grid.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument("lambda grid values must be positive".into()));
        }
        if self.rank_grid.contains(&0) {
            return Err(Error::InvalidArgument("rank grid values must be positive".into()));
        }
        let cells = self.cell_count(views);
        if cells > self.max_cells as f64 && !self.allow_large {
            return Err(Error::InvalidArgument(format!(
                "grid has {cells} cells, more than {}; pass the override to run it anyway",
                self.max_cells
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub method: MethodChoice,
    #[serde(flatten)]
    pub solver: M2eConfig,
    pub kmeans: KMeansOptions,
    /// Label treated as the positive class for precision and recall.
    pub positive_class: usize,
    /// Outer repetitions of the whole clustering procedure in evaluation.
    pub repetitions: usize,
    pub out_dir: PathBuf,
    pub grid: GridSpec,
    pub datagen: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: MethodChoice::M2e,
            solver: M2eConfig::default(),
            kmeans: KMeansOptions::default(),
            positive_class: 1,
            repetitions: 20,
            out_dir: PathBuf::from("m2e-out"),
            grid: GridSpec::default(),
            datagen: SyntheticSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        if self.kmeans.k == 0 {
            return Err(Error::InvalidArgument("kmeans.k must be at least 1".into()));
        }
        if self.kmeans.restarts == 0 || self.repetitions == 0 {
            return Err(Error::InvalidArgument(
                "restarts and repetitions must be at least 1".into(),
            ));
        }
        if self.positive_class == 0 {
            return Err(Error::InvalidArgument("positive_class must be at least 1".into()));
        }
        Ok(())
    }

    /// Adapts the view weights to the dataset: a single configured weight is
    /// repeated for every view; any other count must match exactly.
    pub fn solver_for(&self, views: usize) -> Result<M2eConfig> {
        let mut cfg = self.solver.clone();
        if cfg.lambdas.len() != views {
            if cfg.lambdas.len() == 1 || cfg.lambdas == M2eConfig::default().lambdas {
                cfg.lambdas = vec![cfg.lambdas[0]; views];
            } else {
                return Err(Error::InvalidArgument(format!(
                    "{} view weights for {views} views",
                    cfg.lambdas.len()
                )));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn als_options(&self) -> AlsOptions {
        AlsOptions {
            rank: self.solver.rank,
            max_iters: self.solver.max_outer_iters,
            rel_tol: self.solver.obj_rel_tol,
            seed: self.solver.seed,
            ..AlsOptions::default()
        }
    }
}

pub struct FitOutcome {
    /// Subject embedding handed to clustering: `F*`, or the concatenated
    /// CP subject factors.
    pub embedding: Matrix,
    pub solution: Option<M2eSolution>,
    pub cp_fits: Vec<AlsFit>,
    pub summary: Value,
}

fn hconcat(blocks: &[&Matrix]) -> Result<Matrix> {
    let rows = blocks.first().map_or(0, |b| b.rows());
    if blocks.iter().any(|b| b.rows() != rows) {
        return Err(Error::Shape("blocks have different row counts".into()));
    }
    let cols: usize = blocks.iter().map(|b| b.cols()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for b in blocks {
            data.extend_from_slice(b.row(i));
        }
    }
    Matrix::from_vec(rows, cols, data)
}

fn view_names(dataset: &Dataset) -> Vec<String> {
    dataset.view_names().into_iter().map(str::to_string).collect()
}

/// Fits the configured method and, when `out` is given, writes its artifacts.
pub fn run_fit(config: &RunConfig, dataset: &Dataset, out: Option<&Path>) -> Result<FitOutcome> {
    config.validate()?;
    let names = view_names(dataset);
    let started = Instant::now();
    let outcome = match config.method.solver_method() {
        Some(method) => {
            let cfg = config.solver_for(dataset.views.len())?;
            let initial_mu = cfg.initial_mu(&dataset.views);
            let sol = fit(&dataset.views, &cfg, method)?;
            let wall = started.elapsed().as_secs_f64();
            let summary = json!({
                "method": config.method.as_str(),
                "config": RunConfig { solver: cfg.clone(), ..config.clone() },
                "views": names,
                "subjects": dataset.subject_count(),
                "iterations": sol.iterations,
                "converged": sol.converged,
                "final_objective": sol.final_objective,
                "relative_objective": sol.relative_objective(),
                "final_residual": sol.final_residual(),
                "initial_mu": initial_mu,
                "final_mu": sol.final_mu,
                "wall_time_secs": wall,
            });
            FitOutcome {
                embedding: sol.consensus.clone(),
                solution: Some(sol),
                cp_fits: Vec::new(),
                summary,
            }
        }
        None => {
            let opts = config.als_options();
            let fits: Vec<AlsFit> = dataset
                .views
                .iter()
                .map(|v| cp_als_fit(v.tensor(), &opts))
                .collect::<Result<_>>()?;
            let subject: Vec<&Matrix> = fits.iter().map(|f| f.factors.factor(3)).collect();
            let embedding = hconcat(&subject)?;
            let wall = started.elapsed().as_secs_f64();
            let summary = json!({
                "method": "cp",
                "config": config,
                "views": names,
                "subjects": dataset.subject_count(),
                "iterations": fits.iter().map(|f| f.trace.len()).collect::<Vec<_>>(),
                "converged": fits.iter().all(|f| f.converged),
                "final_relative_error": fits.iter().map(AlsFit::final_error).collect::<Vec<_>>(),
                "wall_time_secs": wall,
            });
            FitOutcome {
                embedding,
                solution: None,
                cp_fits: fits,
                summary,
            }
        }
    };
    if let Some(dir) = out {
        write_fit_artifacts(dir, &names, &outcome)?;
    }
    Ok(outcome)
}

pub const EMBEDDING_FILE: &str = "consensus.txt";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TRACE_FILE: &str = "trace.csv";

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    io::write_text(path, &(text + "\n"))
}

fn write_fit_artifacts(dir: &Path, names: &[String], outcome: &FitOutcome) -> Result<()> {
    io::write_matrix(&dir.join(EMBEDDING_FILE), &outcome.embedding)?;
    if let Some(sol) = &outcome.solution {
        for (v, name) in names.iter().enumerate() {
            io::write_matrix(&dir.join(format!("H_{name}.txt")), &sol.node_factors[v])?;
            io::write_matrix(&dir.join(format!("F_{name}.txt")), &sol.subject_factors[v])?;
        }
        io::write_trace(
            &dir.join(TRACE_FILE),
            &["objective", "residual"],
            &[&sol.objective_trace, &sol.residual_trace],
        )?;
    }
    for (fit, name) in outcome.cp_fits.iter().zip(names) {
        write_cp_artifacts(dir, name, fit)?;
    }
    write_json(&dir.join(SUMMARY_FILE), &outcome.summary)
}

fn write_cp_artifacts(dir: &Path, name: &str, fit: &AlsFit) -> Result<()> {
    for (mode, letter) in [(1, 'A'), (2, 'B'), (3, 'C')] {
        io::write_matrix(&dir.join(format!("cp_{name}_{letter}.txt")), fit.factors.factor(mode))?;
    }
    io::write_trace(
        &dir.join(format!("cp_trace_{name}.csv")),
        &["relative_error"],
        &[&fit.trace],
    )
}

/// CP-ALS on one view, optionally writing factors and the error trace.
pub fn run_cp(view: &GraphViewTensor, name: &str, opts: &AlsOptions, out: Option<&Path>) -> Result<AlsFit> {
    let started = Instant::now();
    let fit = cp_als_fit(view.tensor(), opts)?;
    if let Some(dir) = out {
        write_cp_artifacts(dir, name, &fit)?;
        let summary = json!({
            "method": "cp",
            "view": name,
            "options": opts,
            "iterations": fit.trace.len(),
            "converged": fit.converged,
            "final_relative_error": fit.final_error(),
            "wall_time_secs": started.elapsed().as_secs_f64(),
        });
        write_json(&dir.join(SUMMARY_FILE), &summary)?;
    }
    Ok(fit)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: impl Iterator<Item = f64> + Clone) -> MeanStd {
        let n = values.clone().count().max(1) as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub subjects: usize,
    pub k: usize,
    pub restarts: usize,
    pub repetitions: usize,
    pub positive_class: usize,
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    /// Mean and spread of the per-repetition F1 scores.
    pub f1: MeanStd,
    /// `2 p̄ r̄ / (p̄ + r̄)` from the mean precision and recall.
    pub f1_of_means: f64,
    pub runs: Vec<BinaryMetrics>,
    pub warnings: Vec<String>,
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Repeats seeded multi-restart K-means on `embedding` and scores each
/// repetition against `labels`.
pub fn run_evaluate(
    embedding: &Matrix,
    labels: &[usize],
    kmeans_opts: &KMeansOptions,
    repetitions: usize,
    positive: usize,
) -> Result<MetricsReport> {
    if embedding.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "embedding has {} rows but there are {} labels",
            embedding.rows(),
            labels.len()
        )));
    }
    if repetitions == 0 {
        return Err(Error::InvalidArgument("repetitions must be at least 1".into()));
    }
    let mut warnings = Vec::new();
    let arity = labels.iter().copied().max().unwrap_or(0);
    if arity != kmeans_opts.k {
        warnings.push(format!(
            "labels have {arity} classes but K = {}; clustering with K = {}",
            kmeans_opts.k, kmeans_opts.k
        ));
    }
    let runs: Vec<BinaryMetrics> = (0..repetitions)
        .map(|r| {
            let opts = KMeansOptions {
                seed: kmeans_opts
                    .seed
                    .wrapping_add((r as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)),
                ..kmeans_opts.clone()
            };
            let km = kmeans(embedding, &opts)?;
            let m = match_labels(&km.labels, labels, arity.max(opts.k))?;
            binary_metrics(&m.matched, labels, positive)
        })
        .collect::<Result<_>>()?;
    let precision = MeanStd::of(runs.iter().map(|m| m.precision));
    let recall = MeanStd::of(runs.iter().map(|m| m.recall));
    Ok(MetricsReport {
        subjects: labels.len(),
        k: kmeans_opts.k,
        restarts: kmeans_opts.restarts,
        repetitions,
        positive_class: positive,
        accuracy: MeanStd::of(runs.iter().map(|m| m.accuracy)),
        f1: MeanStd::of(runs.iter().map(|m| m.f1)),
        f1_of_means: f1_of(precision.mean, recall.mean),
        precision,
        recall,
        runs,
        warnings,
    })
}

pub fn require_labels(dataset: &Dataset) -> Result<&[usize]> {
    dataset.labels.as_deref().ok_or_else(|| {
        Error::InvalidArgument("dataset has no labels; add a labels_file to its manifest to evaluate clustering".into())
    })
}

pub fn write_metrics(path: &Path, report: &MetricsReport) -> Result<()> {
    let value = serde_json::to_value(report).map_err(|e| Error::format(path, e.to_string()))?;
    write_json(path, &value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lambdas: Vec<f64>,
    pub rank: usize,
    pub accuracy: MeanStd,
    pub f1: MeanStd,
    pub precision: f64,
    pub recall: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    /// Cells by decreasing mean accuracy; ties keep grid order.
    pub cells: Vec<GridCell>,
    /// Accuracy against rank at the best cell's weights, one row per rank.
    pub accuracy_vs_rank: Vec<GridCell>,
    /// Accuracy over all weight combinations at the best cell's rank.
    pub accuracy_vs_lambda: Vec<GridCell>,
}

impl GridReport {
    pub fn best(&self) -> &GridCell {
        &self.cells[0]
    }
}

fn lambda_combos(grid: &[f64], views: usize) -> Vec<Vec<f64>> {
    let mut combos = vec![Vec::new()];
    for _ in 0..views {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                grid.iter().map(move |&l| {
                    let mut c = c.clone();
                    c.push(l);
                    c
                })
            })
            .collect();
    }
    combos
}

/// Evaluates every (λ₁, …, λ_V, R) combination and ranks the cells.
pub fn run_gridsearch(config: &RunConfig, dataset: &Dataset, out: Option<&Path>) -> Result<GridReport> {
    config.validate()?;
    let method = config
        .method
        .solver_method()
        .ok_or_else(|| Error::InvalidArgument("grid search needs an M2E method (m2e, m2e-ds or m2e-ts)".into()))?;
    let labels = require_labels(dataset)?;
    let v = dataset.views.len();
    config.grid.validate(v)?;
    let combos = lambda_combos(&config.grid.lambda_grid, v);
    let jobs: Vec<(Vec<f64>, usize)> = combos
        .iter()
        .flat_map(|c| config.grid.rank_grid.iter().map(move |&r| (c.clone(), r)))
        .collect();
    let evaluated: Vec<GridCell> = jobs
        .par_iter()
        .map(|(lambdas, rank)| {
            let cfg = M2eConfig {
                lambdas: lambdas.clone(),
                rank: *rank,
                ..config.solver.clone()
            };
            let sol = fit(&dataset.views, &cfg, method)?;
            let m = run_evaluate(
                &sol.consensus,
                labels,
                &config.kmeans,
                config.repetitions,
                config.positive_class,
            )?;
            Ok(GridCell {
                lambdas: lambdas.clone(),
                rank: *rank,
                accuracy: m.accuracy,
                f1: m.f1,
                precision: m.precision.mean,
                recall: m.recall.mean,
                objective: sol.final_objective,
                iterations: sol.iterations,
                converged: sol.converged,
            })
        })
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..evaluated.len()).collect();
    order.sort_by(|&a, &b| {
        evaluated[b]
            .accuracy
            .mean
            .total_cmp(&evaluated[a].accuracy.mean)
            .then(a.cmp(&b))
    });
    let cells: Vec<GridCell> = order.iter().map(|&i| evaluated[i].clone()).collect();
    let best = cells[0].clone();
    let accuracy_vs_rank = evaluated
        .iter()
        .filter(|c| c.lambdas == best.lambdas)
        .cloned()
        .collect();
    let accuracy_vs_lambda = evaluated.iter().filter(|c| c.rank == best.rank).cloned().collect();
    let report = GridReport {
        cells,
        accuracy_vs_rank,
        accuracy_vs_lambda,
    };
    if let Some(dir) = out {
        write_grid(dir, v, &report)?;
    }
    Ok(report)
}

fn grid_csv(views: usize, cells: &[GridCell]) -> String {
    let mut s = String::new();
    for i in 1..=views {
        s.push_str(&format!("lambda_{i},"));
    }
    s.push_str(
        "rank,accuracy_mean,accuracy_std,f1_mean,f1_std,precision_mean,recall_mean,objective,iterations,converged\n",
    );
    for c in cells {
        for l in &c.lambdas {
            s.push_str(&io::format_f64(*l));
            s.push(',');
        }
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            c.rank,
            io::format_f64(c.accuracy.mean),
            io::format_f64(c.accuracy.std),
            io::format_f64(c.f1.mean),
            io::format_f64(c.f1.std),
            io::format_f64(c.precision),
            io::format_f64(c.recall),
            io::format_f64(c.objective),
            c.iterations,
            c.converged
        ));
    }
    s
}

fn write_grid(dir: &Path, views: usize, report: &GridReport) -> Result<()> {
    io::write_text(&dir.join("grid.csv"), &grid_csv(views, &report.cells))?;
    io::write_text(
        &dir.join("accuracy_vs_rank.csv"),
        &grid_csv(views, &report.accuracy_vs_rank),
    )?;
    io::write_text(
        &dir.join("accuracy_vs_lambda.csv"),
        &grid_csv(views, &report.accuracy_vs_lambda),
    )?;
    let value = serde_json::to_value(report).map_err(|e| Error::format(dir, e.to_string()))?;
    write_json(&dir.join("grid.json"), &value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let text = r#"
            method = "m2e-ts"
            rank = 7
            lambdas = [0.5, 2.0]
            mu_policy = "fixed"
            [kmeans]
            restarts = 5
            [grid]
            rank_grid = [3, 4]
        "#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.method, MethodChoice::M2eTs);
        assert_eq!(cfg.solver.rank, 7);
        assert_eq!(cfg.solver.lambdas, vec![0.5, 2.0]);
        assert_eq!(cfg.kmeans.restarts, 5);
        assert_eq!(cfg.kmeans.k, 2);
        assert_eq!(cfg.grid.rank_grid, vec![3, 4]);
        assert_eq!(cfg.solver.mu, 10.0);
        let back = RunConfig::from_toml_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_method_rejected() {
        assert!(RunConfig::from_toml_str("method = \"pca\"").is_err());
        assert!("pca".parse::<MethodChoice>().is_err());
        assert_eq!("cp".parse::<MethodChoice>().unwrap(), MethodChoice::Cp);
    }

    #[test]
    fn lambda_combos_enumerate_product() {
        let c = lambda_combos(&[1.0, 2.0, 3.0], 2);
        assert_eq!(c.len(), 9);
        assert_eq!(c[0], vec![1.0, 1.0]);
        assert_eq!(c[5], vec![2.0, 3.0]);
    }

    #[test]
    fn grid_guard() {
        let g = GridSpec::default();
        assert_eq!(g.cell_count(2), 500.0);
        assert!(g.validate(2).is_ok());
        assert!(g.validate(5).is_err());
        let big = GridSpec {
            allow_large: true,
            ..GridSpec::default()
        };
        assert!(big.validate(5).is_ok());
    }

    #[test]
    fn mean_std_population() {
        let m = MeanStd::of([1.0, 3.0].into_iter());
        assert_eq!((m.mean, m.std), (2.0, 1.0));
    }

    #[test]
    fn point_masses_score_perfectly() {
        let pts = Matrix::from_fn(10, 2, |i, _| if i < 5 { 0.0 } else { 4.0 });
        let labels: Vec<usize> = (0..10).map(|i| if i < 5 { 1 } else { 2 }).collect();
        let rep = run_evaluate(&pts, &labels, &KMeansOptions::default(), 20, 1).unwrap();
        assert_eq!(rep.accuracy, MeanStd { mean: 1.0, std: 0.0 });
        assert_eq!(rep.runs.len(), 20);
        assert!(rep.warnings.is_empty());
    }
}
