//! End-to-end flows through the harness library: sweep determinism and
//! resume, checkpoint round trips through real commands, noise-study
//! structure, and plot determinism.

use std::fs;
use std::path::PathBuf;

use chaosdnn::config::{
    DatasetConfig, ExperimentConfig, GridAxis, GridConfig, ModelConfig, TrainSettings,
};
use chaosdnn::csvio::read_csv;
use chaosdnn::datasets::load_dataset;
use chaosdnn::experiments::{clean_error, ftmle_report, noise_study, pca_states, train_once};
use chaosdnn::sweep::run_sweep;
use chaosdnn_core::data::NoiseKind;
use chaosdnn_core::models::Model;

fn tmpdir(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("chaosdnn-flow-{tag}-{}", std::process::id()));
    fs::create_dir_all(&d).unwrap();
    d
}

fn tiny_sweep_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig::Ffesn {
            reservoir: 24,
            rho: 1.0,
            density: 0.5,
            steps: 1,
            classes: 3,
        },
        dataset: DatasetConfig {
            name: "synth-clusters".into(),
            train_subset: Some(150),
            test_subset: Some(90),
        },
        train: TrainSettings {
            learning_rate: 0.05,
            max_epochs: 5,
            ..TrainSettings::default()
        },
        grid: Some(GridConfig {
            axis1: GridAxis {
                name: "rho".into(),
                values: vec![0.7, 1.3],
            },
            axis2: GridAxis {
                name: "T".into(),
                values: vec![1.0, 4.0],
            },
        }),
        trials: 1,
        seed,
        ftmle_samples: 20,
    }
}

#[test]
fn degenerate_grid_equals_direct_run() {
    let mut config = tiny_sweep_config(3);
    config.grid = Some(GridConfig {
        axis1: GridAxis {
            name: "rho".into(),
            values: vec![1.3],
        },
        axis2: GridAxis {
            name: "T".into(),
            values: vec![4.0],
        },
    });
    let (train_set, test_set) =
        load_dataset(std::path::Path::new("unused"), "synth-clusters", Some(150), Some(90), 3)
            .unwrap();
    let dir = tmpdir("degenerate");
    let grid = run_sweep(&config, &train_set, &test_set, &dir, 1, false, true).unwrap();
    assert_eq!(grid.cells.len(), 1);
    // A direct trial with the identical substreams must agree bitwise.
    let model_cfg = config
        .model
        .with_axis("rho", 1.3)
        .unwrap()
        .with_axis("T", 4.0)
        .unwrap();
    let stream = chaosdnn_core::RngStream::new(config.seed, 0)
        .substream(0)
        .substream(0);
    let mut model = model_cfg.build(train_set.features(), &stream).unwrap();
    let mut seed_draw = stream.substream(0xEE);
    let tc = config
        .train
        .to_train_config(seed_draw.next_u64())
        .unwrap();
    let history =
        chaosdnn_core::training::train(&mut model, &train_set, &test_set, &tc).unwrap();
    assert_eq!(grid.cells[0].trials[0].best_acc, history.best_acc);
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn resumed_sweep_is_bitwise_identical() {
    let config = tiny_sweep_config(5);
    let (train_set, test_set) =
        load_dataset(std::path::Path::new("unused"), "synth-clusters", Some(150), Some(90), 5)
            .unwrap();
    let dir_full = tmpdir("full");
    run_sweep(&config, &train_set, &test_set, &dir_full, 2, false, true).unwrap();

    // Interrupted run: precompute only half the cells, then resume.
    let dir_resume = tmpdir("resume");
    fs::create_dir_all(dir_resume.join("cells")).unwrap();
    for i in [0usize, 2] {
        fs::copy(
            dir_full.join(format!("cells/cell_{i:04}.json")),
            dir_resume.join(format!("cells/cell_{i:04}.json")),
        )
        .unwrap();
    }
    run_sweep(&config, &train_set, &test_set, &dir_resume, 2, true, true).unwrap();
    let a = fs::read_to_string(dir_full.join("grid.csv")).unwrap();
    let b = fs::read_to_string(dir_resume.join("grid.csv")).unwrap();
    assert_eq!(a, b, "resumed grid must match the uninterrupted one bitwise");
    let a = fs::read_to_string(dir_full.join("grid.json")).unwrap();
    let b = fs::read_to_string(dir_resume.join("grid.json")).unwrap();
    assert_eq!(a, b);
    fs::remove_dir_all(&dir_full).ok();
    fs::remove_dir_all(&dir_resume).ok();
}

#[test]
fn grid_is_rectangular_with_status_everywhere() {
    let config = tiny_sweep_config(7);
    let (train_set, test_set) =
        load_dataset(std::path::Path::new("unused"), "synth-clusters", Some(150), Some(90), 7)
            .unwrap();
    let dir = tmpdir("rect");
    let grid = run_sweep(&config, &train_set, &test_set, &dir, 2, false, true).unwrap();
    assert_eq!(grid.cells.len(), 4);
    for (i, c) in grid.cells.iter().enumerate() {
        assert_eq!(c.index, i);
        assert!(c.status == "ok" || c.status == "diverged");
        assert_eq!(c.trials.len(), 1);
    }
    // The csv parses and has every cell.
    let table = read_csv(&dir.join("grid.csv")).unwrap();
    assert_eq!(table.rows.len(), 4);
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn noise_study_continuity_and_vanishing_noise() {
    // Train a small STO model on clusters, then check the noise curve
    // endpoints and that inputs are read through the same forward path.
    let config = ExperimentConfig {
        model: ModelConfig::Csto {
            n_osc: 4,
            a_cp: 5.0,
            horizon: 5e-11,
            dt: 1e-12,
            classes: 3,
            params: Default::default(),
            conv_frontend: false,
        },
        dataset: DatasetConfig {
            name: "synth-clusters".into(),
            train_subset: Some(120),
            test_subset: Some(90),
        },
        train: TrainSettings {
            learning_rate: 0.05,
            max_epochs: 6,
            ..TrainSettings::default()
        },
        grid: None,
        trials: 1,
        seed: 13,
        ftmle_samples: 10,
    };
    let (train_set, test_set) =
        load_dataset(std::path::Path::new("unused"), "synth-clusters", Some(120), Some(90), 13)
            .unwrap();
    let outcome = train_once(&config, &train_set, &test_set, 0).unwrap();
    let clean = clean_error(&outcome.model, &test_set).unwrap();
    let points = noise_study(
        &outcome.model,
        &test_set,
        &[1e2, 1e4, 1e12],
        &[NoiseKind::Observational, NoiseKind::Dynamical],
        3,
        99,
    )
    .unwrap();
    assert_eq!(points.len(), 6);
    for p in &points {
        assert!(p.mean_error.is_finite());
        // Five-trial std is reported for every point (here three trials).
        assert!(p.std_error.is_finite());
    }
    // Vanishing noise reproduces the clean error tightly.
    for p in points.iter().filter(|p| p.sn_ratio == 1e12) {
        assert!(
            (p.mean_error - clean).abs() < 0.002,
            "kind {:?}: {} vs clean {clean}",
            p.kind,
            p.mean_error
        );
    }
}

#[test]
fn ftmle_report_linear_model_is_delta() {
    let config = ExperimentConfig {
        model: ModelConfig::Linear { classes: 3 },
        dataset: DatasetConfig {
            name: "synth-clusters".into(),
            train_subset: Some(60),
            test_subset: Some(30),
        },
        train: TrainSettings {
            max_epochs: 2,
            ..TrainSettings::default()
        },
        grid: None,
        trials: 1,
        seed: 21,
        ftmle_samples: 10,
    };
    let (train_set, test_set) =
        load_dataset(std::path::Path::new("unused"), "synth-clusters", Some(60), Some(30), 21)
            .unwrap();
    let outcome = train_once(&config, &train_set, &test_set, 0).unwrap();
    let report = ftmle_report(&outcome.model, &test_set.inputs, 8, None).unwrap();
    // One overall + one layer row per sample; all overall values equal.
    let overall: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r[1] == "overall")
        .map(|r| r[2].parse().unwrap())
        .collect();
    assert_eq!(overall.len(), 8);
    for v in &overall {
        assert!((v - overall[0]).abs() < 1e-10, "delta distribution expected");
    }
}

#[test]
fn contracting_reservoir_shrinks_total_variance() {
    // rho = 0.6, T = 15: the final-state cloud has less total variance
    // than the initial one.
    let (train_set, _) =
        load_dataset(std::path::Path::new("unused"), "synth-clusters", Some(150), Some(30), 41)
            .unwrap();
    let model = Model::Chaos(
        chaosdnn_core::models::ChaosModel::ffesn(
            2,
            40,
            0.6,
            0.5,
            15,
            3,
            &chaosdnn_core::RngStream::new(42, 0),
        )
        .unwrap(),
    );
    let initial = pca_states(&model, &train_set, false, 150).unwrap();
    let final_out = pca_states(&model, &train_set, true, 150).unwrap();
    assert!(
        final_out.total_variance < initial.total_variance,
        "final variance {} not below initial {}",
        final_out.total_variance,
        initial.total_variance
    );
}

#[test]
fn pca_initial_with_identity_readin_is_raw_input_pca() {
    // Build a chaos model whose read-in is the identity; the initial-stage
    // PCA must equal PCA of the raw inputs.
    let (train_set, _) =
        load_dataset(std::path::Path::new("unused"), "synth-clusters", Some(80), Some(30), 31)
            .unwrap();
    let mut chaos = chaosdnn_core::models::ChaosModel::ffesn(
        2,
        2,
        1.0,
        1.0,
        3,
        3,
        &chaosdnn_core::RngStream::new(31, 0),
    )
    .unwrap();
    for (i, v) in chaos.read_in.w.data_mut().iter_mut().enumerate() {
        *v = if i % 3 == 0 { 1.0 } else { 0.0 }; // 2x2 identity
    }
    let model = Model::Chaos(chaos);
    let out = pca_states(&model, &train_set, false, 80).unwrap();
    let direct = chaosdnn_core::linalg::pca(&train_set.inputs, 2).unwrap();
    for (row, i) in out.rows.iter().zip(0..) {
        let pc1: f64 = row[1].parse().unwrap();
        let expect = direct.projections.get(i, 0);
        // Component sign is arbitrary but consistent within a run.
        assert!(
            (pc1.abs() - expect.abs()).abs() < 1e-9,
            "{pc1} vs {expect}"
        );
    }
}
