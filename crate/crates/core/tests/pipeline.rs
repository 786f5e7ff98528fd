use std::path::Path;

use rankmbo::bench::generate_task_dataset;
use rankmbo::diffnet::DenseNet;
use rankmbo::harness::{emit_report, prepare_cell_data, read_results_csv, run_pipeline, ExperimentConfig};
use rankmbo::metrics::top_k;
use rankmbo::searcher::{adapt, read_candidates};
use rankmbo::trainer::predict_dataset;

fn small_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(
        r#"
        task.name = "sphere"
        task.dim = 2
        task.samples = 300
        data.lists = 40
        data.list_len = 16
        train.epochs = 4
        train.hidden = [16, 16]
        train.losses = ["listnet", "mse"]
        search.k = 24
        search.steps = 20
        run.seeds = [0, 1, 2, 3, 4]
        "#,
    )
    .unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

fn read_matrix(path: &Path) -> Vec<Vec<f64>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.records()
        .map(|r| r.unwrap().iter().map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn sphere_grid_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let results = run_pipeline(&cfg).unwrap();
    let summary = emit_report(&results, dir.path()).unwrap();
    let rows = read_results_csv(dir.path().join("results.csv")).unwrap();
    assert_eq!(rows.len(), 10);
    for r in &results {
        let m = r.outcome.as_ref().unwrap();
        assert_eq!(m.oracle_calls, 24);
        assert!((0.0..=1.0).contains(&m.ood.aupcc));
        assert!(m.p100 >= m.p50);
    }
    assert!(summary.contains("sphere-2d listnet: 5/5 runs ok"));
    assert!(summary.contains("sphere-2d mse: 5/5 runs ok"));
    assert!(dir.path().join("summary.txt").exists());
    assert!(dir.path().join("timings.csv").exists());
}

#[test]
fn zero_steps_returns_the_top_offline_designs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.search.steps = 0;
    cfg.seeds = vec![7];
    cfg.losses.truncate(1);
    let results = run_pipeline(&cfg).unwrap();
    let task_data = generate_task_dataset(&cfg.task, cfg.data_seed).unwrap();
    let train = &task_data.train;
    let expected: Vec<Vec<f64>> = top_k(train.scores(), cfg.search.k)
        .into_iter()
        .map(|i| train.design(i).to_vec())
        .collect();
    let run_dir = dir.path().join("runs/sphere-2d-listnet-seed7");
    let found = read_candidates(run_dir.join("candidates.csv")).unwrap();
    assert_eq!(found.len(), expected.len());
    for (a, b) in found.iter().zip(&expected) {
        for (u, v) in a.iter().zip(b) {
            assert!((u - v).abs() < 1e-9, "{u} vs {v}");
        }
    }
    // noiseless task: the best candidate is the best offline point
    let best_true = task_data.train_true.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let p100 = results[0].outcome.as_ref().unwrap().p100;
    let expected_p100 = (best_true - task_data.y_min) / (task_data.y_max - task_data.y_min);
    assert!((p100 - expected_p100).abs() < 1e-9);
}

#[test]
fn checkpoint_reproduces_ood_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.seeds = vec![3];
    let results = run_pipeline(&cfg).unwrap();
    let task_data = generate_task_dataset(&cfg.task, cfg.data_seed).unwrap();
    for r in &results {
        let m = r.outcome.as_ref().unwrap();
        let net = DenseNet::load(dir.path().join(&m.checkpoint)).unwrap();
        let data = prepare_cell_data(&task_data.train, cfg.train.train_ratio, r.seed).unwrap();
        let model = adapt(net.clone(), &data.train).unwrap();
        let ood = data.stats.apply(&task_data.ood).unwrap();
        let preds = predict_dataset(&net, &ood).unwrap();
        let saved = read_matrix(
            &dir.path()
                .join(m.checkpoint.parent().unwrap())
                .join("ood_predictions.csv"),
        );
        assert_eq!(saved.len(), preds.len());
        for (row, f) in saved.iter().zip(&preds) {
            assert!((row[0] - (f - model.mu) / model.sigma).abs() < 1e-9);
        }
    }
}

#[test]
fn overrides_change_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.apply_override("train.losses=[\"ranknet\"]").unwrap();
    cfg.apply_override("run.seeds=[11]").unwrap();
    cfg.apply_override("search.rule=plain").unwrap();
    let results = run_pipeline(&cfg).unwrap();
    assert_eq!(results.len(), 1);
    assert!(dir.path().join("runs/sphere-2d-ranknet-seed11/model.ckpt").exists());
}

#[test]
fn unknown_keys_are_rejected() {
    assert!(ExperimentConfig::from_toml_str("train.epochz = 3").is_err());
    assert!(ExperimentConfig::from_toml_str("[search]\nsteps = -1").is_err());
}
