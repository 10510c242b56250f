use std::fs;
use std::path::{Path, PathBuf};

use gscnn::checkpoint::Checkpoint;
use gscnn::data::{generate_dataset, load_dataset, write_dataset, DatasetSpec};
use gscnn::metrics::CropSpec;
use gscnn::train::{self, Ablation, EvalConfig, Progress, TrainConfig, CHECKPOINT_FILE};
use tempfile::TempDir;

const OUTPUTS: [&str; 5] = ["metrics.csv", "eval.csv", "classes.csv", "crop.csv", CHECKPOINT_FILE];

fn small_dataset(root: &Path) -> PathBuf {
    let spec = DatasetSpec {
        seed: 21,
        count: 10,
        height: 32,
        width: 32,
        classes: 4,
        ..DatasetSpec::default()
    };
    let dir = root.join("data");
    write_dataset(&dir, &spec, &generate_dataset(&spec).unwrap()).unwrap();
    dir
}

fn config(data: &Path, out: &Path) -> TrainConfig {
    TrainConfig {
        dataset_dir: data.to_path_buf(),
        output_dir: out.to_path_buf(),
        epochs: 3,
        batch_size: 3,
        seed: 4,
        flip: true,
        eval_every: 1,
        eval: EvalConfig {
            tolerances: vec![1.0, 3.0],
            crop: CropSpec { base_margin: 4 },
            crop_factors: vec![0, 2],
        },
        ..TrainConfig::default()
    }
}

fn read_outputs(dir: &Path) -> Vec<Vec<u8>> {
    OUTPUTS.iter().map(|f| fs::read(dir.join(f)).unwrap()).collect()
}

#[test]
fn identical_runs_write_identical_files() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    train::train(&config(&data, &a), None, |_| {}).unwrap();
    train::train(&config(&data, &b), None, |_| {}).unwrap();
    for (name, (x, y)) in OUTPUTS.iter().zip(read_outputs(&a).iter().zip(&read_outputs(&b))) {
        assert!(x == y, "{name} differs between identical runs");
    }
}

#[test]
fn different_seeds_diverge() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path());
    let mut cfg = config(&data, &tmp.path().join("a"));
    cfg.epochs = 1;
    let first = train::train(&cfg, None, |_| {}).unwrap();
    cfg.seed += 1;
    cfg.output_dir = tmp.path().join("b");
    let second = train::train(&cfg, None, |_| {}).unwrap();
    assert_ne!(first.checkpoint.to_bytes(), second.checkpoint.to_bytes());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path());
    let out = tmp.path().join("run");
    let snap = tmp.path().join("snapshot");
    let cfg = config(&data, &out);

    // Snapshot the output directory as it stood after the first epoch.
    let mut taken = false;
    train::train(&cfg, None, |p| {
        if let Progress::Step { epoch: 1, .. } = p {
            if !taken {
                fs::create_dir_all(&snap).unwrap();
                for f in fs::read_dir(&out).unwrap() {
                    let f = f.unwrap();
                    fs::copy(f.path(), snap.join(f.file_name())).unwrap();
                }
                taken = true;
            }
        }
    })
    .unwrap();
    assert!(taken);
    let straight = read_outputs(&out);

    fs::remove_dir_all(&out).unwrap();
    fs::rename(&snap, &out).unwrap();
    let ck = Checkpoint::load(&out.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.epoch, 1);
    let resumed = train::train(&cfg, Some(ck), |_| {}).unwrap();
    assert_eq!(resumed.checkpoint.epoch, 3);
    for (name, (x, y)) in OUTPUTS.iter().zip(straight.iter().zip(&read_outputs(&out))) {
        assert!(x == y, "{name} differs after resuming");
    }
}

#[test]
fn resume_rejects_a_different_recipe() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path());
    let mut cfg = config(&data, &tmp.path().join("run"));
    cfg.epochs = 1;
    let done = train::train(&cfg, None, |_| {}).unwrap();
    cfg.base_lr *= 2.0;
    let err = train::train(&cfg, Some(done.checkpoint), |_| {}).unwrap_err();
    assert!(err.to_string().contains("different configuration"), "{err}");
}

#[test]
fn baseline_evaluates_and_infers_without_boundary() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path());
    let mut cfg = config(&data, &tmp.path().join("run"));
    cfg.epochs = 1;
    cfg.ablation = Ablation::BASELINE;
    train::train(&cfg, None, |_| {}).unwrap();
    let ck = cfg.output_dir.join(CHECKPOINT_FILE);

    let report = train::evaluate(&ck, &data, &cfg.eval, false, &tmp.path().join("eval")).unwrap();
    assert_eq!(report.classes, 4);
    assert_eq!(report.crop_curve.len(), 2);
    let image = data.join("images").join("0000.ppm");
    let out = train::infer(&ck, &image).unwrap();
    assert!(out.boundary.is_none());
    assert_eq!(out.labels.dims(), (32, 32));
    assert!(out.labels.data().iter().all(|&l| l < 4));
}

#[test]
fn bypass_scores_ground_truth_perfectly() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path());
    let mut cfg = config(&data, &tmp.path().join("run"));
    cfg.epochs = 1;
    train::train(&cfg, None, |_| {}).unwrap();
    let ck = cfg.output_dir.join(CHECKPOINT_FILE);
    let report = train::evaluate(&ck, &data, &cfg.eval, true, &tmp.path().join("eval")).unwrap();
    assert_eq!(report.miou, 1.0);
    assert!(report.mean_f.iter().all(|&f| f == 1.0));
    assert_eq!(report.pixel_accuracy, 1.0);
    let csv = fs::read_to_string(tmp.path().join("eval").join("classes.csv")).unwrap();
    assert!(csv.starts_with("class,iou,f_1px,f_3px"), "{csv}");
}

#[test]
fn dataset_round_trips_through_disk() {
    let tmp = TempDir::new().unwrap();
    let spec = DatasetSpec {
        seed: 3,
        count: 4,
        height: 24,
        width: 40,
        classes: 4,
        ..DatasetSpec::default()
    };
    let samples = generate_dataset(&spec).unwrap();
    let written = write_dataset(tmp.path(), &spec, &samples).unwrap();
    let (manifest, loaded) = load_dataset(tmp.path()).unwrap();
    assert_eq!(manifest, written);
    assert_eq!(loaded.len(), 4);
    for (a, b) in samples.iter().zip(&loaded) {
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.gt_boundary, b.gt_boundary);
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.image_grad.data(), b.image_grad.data());
    }
}
