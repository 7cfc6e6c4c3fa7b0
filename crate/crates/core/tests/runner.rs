use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use m2e::clustering::KMeansOptions;
use m2e::cp_als::AlsOptions;
use m2e::datagen::{generate, SyntheticSpec};
use m2e::io::{load_dataset, read_trace, save_dataset, Dataset};
use m2e::runner::{
    require_labels, run_cp, run_evaluate, run_fit, run_gridsearch, GridSpec, MethodChoice, RunConfig, EMBEDDING_FILE,
    SUMMARY_FILE, TRACE_FILE,
};
use m2e::{GraphViewTensor, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset_in(dir: &Path, spec: &SyntheticSpec) -> Dataset {
    let data = generate(spec).unwrap();
    let names: Vec<String> = (1..=spec.views).map(|v| format!("view{v}")).collect();
    let views: Vec<(&str, &GraphViewTensor)> = names.iter().map(String::as_str).zip(&data.views).collect();
    save_dataset(dir, &views, Some(&data.labels), BTreeMap::new()).unwrap();
    load_dataset(dir).unwrap()
}

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        nodes: 10,
        cluster_sizes: vec![10, 10],
        rank: 3,
        seed,
        ..SyntheticSpec::default()
    }
}

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.solver.rank = 3;
    cfg.solver.max_outer_iters = 150;
    cfg.repetitions = 3;
    cfg.kmeans.restarts = 5;
    cfg
}

#[test]
fn random_embedding_accuracy_stays_near_chance() {
    let labels: Vec<usize> = (0..40).map(|i| 1 + i / 20).collect();
    let opts = KMeansOptions::default();
    let mut total = 0.0;
    for trial in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let emb = Matrix::random_normal(40, 3, &mut rng);
        let report = run_evaluate(
            &emb,
            &labels,
            &KMeansOptions {
                seed: trial,
                ..opts.clone()
            },
            1,
            1,
        )
        .unwrap();
        total += report.accuracy.mean;
    }
    let mean = total / 100.0;
    assert!((0.45..=0.72).contains(&mean), "mean accuracy {mean}");
}

#[test]
fn per_run_f1_is_harmonic_mean_of_precision_and_recall() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset_in(dir.path(), &small_spec(1));
    let cfg = small_config();
    let fit = run_fit(&cfg, &ds, None).unwrap();
    let report = run_evaluate(&fit.embedding, require_labels(&ds).unwrap(), &cfg.kmeans, 5, 1).unwrap();
    assert_eq!(report.runs.len(), 5);
    for m in &report.runs {
        let expected = if m.precision + m.recall > 0.0 {
            2.0 * m.precision * m.recall / (m.precision + m.recall)
        } else {
            0.0
        };
        assert!((m.f1 - expected).abs() <= 1e-12);
    }
    let p = report.precision.mean;
    let r = report.recall.mean;
    assert!((report.f1_of_means - 2.0 * p * r / (p + r)).abs() <= 1e-12);
}

#[test]
fn fit_writes_artifacts_deterministically() {
    let data_dir = tempfile::tempdir().unwrap();
    let ds = dataset_in(data_dir.path(), &small_spec(2));
    let cfg = small_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let fit = run_fit(&cfg, &ds, Some(a.path())).unwrap();
    run_fit(&cfg, &ds, Some(b.path())).unwrap();
    assert_eq!(
        fs::read(a.path().join(EMBEDDING_FILE)).unwrap(),
        fs::read(b.path().join(EMBEDDING_FILE)).unwrap()
    );

    let iterations = fit.solution.as_ref().unwrap().iterations;
    let (cols, rows) = read_trace(&a.path().join(TRACE_FILE)).unwrap();
    assert_eq!(cols, vec!["objective", "residual"]);
    assert_eq!(rows[0].len(), iterations);
    for name in ["H_view1.txt", "F_view2.txt"] {
        assert!(a.path().join(name).exists(), "{name}");
    }

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path().join(SUMMARY_FILE)).unwrap()).unwrap();
    let config = &summary["config"];
    assert_eq!(summary["method"], "m2e");
    assert_eq!(summary["iterations"], iterations);
    assert_eq!(config["lambdas"], serde_json::json!([1.0, 1.0]));
    for key in [
        "mu",
        "mu_policy",
        "mu_growth",
        "inner_steps",
        "obj_rel_tol",
        "seed",
        "kmeans",
        "grid",
        "datagen",
    ] {
        assert!(!config[key].is_null(), "summary config lacks {key}");
    }
    assert!(summary["initial_mu"].as_f64().unwrap() > 0.0);
}

#[test]
fn single_cell_grid_matches_fit_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset_in(dir.path(), &small_spec(3));
    let mut cfg = small_config();
    cfg.grid = GridSpec {
        lambda_grid: vec![1.0],
        rank_grid: vec![3],
        ..GridSpec::default()
    };
    let report = run_gridsearch(&cfg, &ds, None).unwrap();
    assert_eq!(report.cells.len(), 1);

    let fit = run_fit(&cfg, &ds, None).unwrap();
    let direct = run_evaluate(
        &fit.embedding,
        require_labels(&ds).unwrap(),
        &cfg.kmeans,
        cfg.repetitions,
        cfg.positive_class,
    )
    .unwrap();
    assert_eq!(report.best().accuracy, direct.accuracy);
    assert_eq!(report.best().f1, direct.f1);
}

#[test]
fn grid_reports_cover_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset_in(dir.path(), &small_spec(4));
    let mut cfg = small_config();
    cfg.grid = GridSpec {
        lambda_grid: vec![1e-2, 1.0],
        rank_grid: vec![1, 2, 3],
        ..GridSpec::default()
    };
    let out = tempfile::tempdir().unwrap();
    let report = run_gridsearch(&cfg, &ds, Some(out.path())).unwrap();
    assert_eq!(report.cells.len(), 12);
    assert_eq!(report.accuracy_vs_rank.len(), 3);
    assert_eq!(report.accuracy_vs_lambda.len(), 4);
    let best = report.best().accuracy.mean;
    assert!(report.cells.iter().all(|c| c.accuracy.mean <= best));
    for file in [
        "grid.csv",
        "accuracy_vs_rank.csv",
        "accuracy_vs_lambda.csv",
        "grid.json",
    ] {
        assert!(out.path().join(file).exists(), "{file}");
    }
    let csv = fs::read_to_string(out.path().join("grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
    assert!(csv.starts_with("lambda_1,lambda_2,rank,"));
}

#[test]
fn grid_search_needs_labels_and_a_consensus_method() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = dataset_in(dir.path(), &small_spec(5));
    let mut cfg = small_config();
    cfg.method = MethodChoice::Cp;
    assert!(run_gridsearch(&cfg, &ds, None).is_err());
    cfg.method = MethodChoice::M2e;
    ds.labels = None;
    assert!(require_labels(&ds).is_err());
    assert!(run_gridsearch(&cfg, &ds, None).is_err());
}

#[test]
fn hiv_shaped_fit_has_monotone_trace() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        rank: 7,
        ..SyntheticSpec::hiv_shape_preset()
    };
    let ds = dataset_in(dir.path(), &spec);
    assert_eq!(ds.subject_count(), 70);
    let mut cfg = RunConfig::default();
    cfg.solver.rank = 7;
    cfg.solver.max_outer_iters = 200;
    let fit = run_fit(&cfg, &ds, None).unwrap();
    let sol = fit.solution.unwrap();
    assert_eq!(fit.embedding.shape(), (70, 7));
    assert!(sol.objective_trace.iter().all(|x| x.is_finite()));
    for w in sol.objective_trace.windows(2).skip(3) {
        assert!(w[1] <= w[0] * (1.0 + 1e-6), "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn cp_method_recovers_noiseless_views() {
    let spec = SyntheticSpec {
        noise_sigma: 0.0,
        ..small_spec(6)
    };
    let data = generate(&spec).unwrap();
    let out = tempfile::tempdir().unwrap();
    let opts = AlsOptions {
        rank: 3,
        max_iters: 2000,
        rel_tol: 1e-12,
        ..AlsOptions::default()
    };
    let fit = run_cp(&data.views[0], "view1", &opts, Some(out.path())).unwrap();
    assert!(fit.final_error() < 1e-3, "error {}", fit.final_error());
    for w in fit.trace.windows(2) {
        assert!(w[1] * w[1] <= w[0] * w[0] + 1e-10);
    }
    for file in [
        "cp_view1_A.txt",
        "cp_view1_B.txt",
        "cp_view1_C.txt",
        "cp_trace_view1.csv",
        SUMMARY_FILE,
    ] {
        assert!(out.path().join(file).exists(), "{file}");
    }
    assert!(run_cp(&data.views[0], "view1", &AlsOptions::with_rank(0), None).is_err());
}

#[test]
fn cp_fit_embedding_concatenates_subject_factors() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset_in(dir.path(), &small_spec(7));
    let mut cfg = small_config();
    cfg.method = MethodChoice::Cp;
    let fit = run_fit(&cfg, &ds, None).unwrap();
    assert_eq!(fit.cp_fits.len(), 2);
    assert_eq!(fit.embedding.shape(), (20, 6));
    assert_eq!(fit.embedding[(4, 3)], fit.cp_fits[1].factors.factor(3)[(4, 0)]);
}
