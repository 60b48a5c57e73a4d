mod common;

use std::fs;
use std::path::Path;

use resnet_elu::data::{load, Dataset, Limits};
use resnet_elu::model::checkpoint::{manifest_path, read_blob};
use resnet_elu::model::{load_checkpoint, save_checkpoint, BlockVariant, Manifest, NetworkConfig};
use resnet_elu::train::*;

fn fixture(train_per_file: usize, test: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    common::write_cifar10_fixture(dir.path(), train_per_file, test, 11);
    dir
}

fn small_run(data: &Path, variant: BlockVariant, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::new(Dataset::Cifar10, data, NetworkConfig::new(1, 10, variant).with_widths([4, 8, 8]));
    cfg.schedule.total_epochs = epochs;
    cfg.schedule.batch_size = 16;
    cfg.schedule.decay_epochs = vec![2, 3];
    cfg.schedule.seed = 5;
    cfg
}

fn csv_without_wall_time(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            f.remove(5);
            f.join(",")
        })
        .collect()
}

#[test]
fn identical_config_gives_identical_csv() {
    let data = fixture(8, 12);
    let out = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for k in 0..2 {
        let mut cfg = small_run(data.path(), BlockVariant::ConvEluConvBnNoEluAfterAdd, 3);
        let path = out.path().join(format!("run{k}.csv"));
        cfg.metrics_path = Some(path.clone());
        let outcome = run(&cfg, &mut |_| {}).unwrap();
        assert_eq!(outcome.history.len(), 3);
        csvs.push(csv_without_wall_time(&path));
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(csvs[0][0], "epoch,train_loss,train_error,test_error,lr,diverged");
    assert_eq!(csvs[0].len(), 4);
    let rows = read_metrics(&out.path().join("run0.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert_eq!(rows[0].lr, 0.1);
    assert!((rows[2].lr - 0.01).abs() < 1e-15);
    for r in &rows {
        assert!((0.0..=100.0).contains(&r.test_error) && (0.0..=100.0).contains(&r.train_error));
        assert!(!r.diverged);
    }
    let summary = Manifest::from_text(&fs::read_to_string(summary_path(&out.path().join("run0.csv"))).unwrap()).unwrap();
    assert_eq!(summary.get("normalization"), Some("mean-std"));
    assert_eq!(summary.get("final_epoch"), Some("3"));
    assert!(summary.get("best_test_error").is_some());
}

#[test]
fn checkpoints_resume_and_evaluate_exactly() {
    let data = fixture(8, 12);
    let out = tempfile::tempdir().unwrap();
    let ckpt = out.path().join("net.ckpt");

    let mut full = small_run(data.path(), BlockVariant::BaselineReluBn, 3);
    full.metrics_path = Some(out.path().join("full.csv"));
    full.checkpoint_path = Some(ckpt.clone());
    let outcome = run(&full, &mut |_| {}).unwrap();

    // the decay point at 3 coincides with the last epoch, so only epoch 2
    // gets a suffixed file
    let boundary = boundary_checkpoint_path(&ckpt, 2);
    assert!(boundary.exists() && ckpt.exists());
    assert!(!boundary_checkpoint_path(&ckpt, 3).exists());

    // eval reproduces the recorded test error
    let report = evaluate_checkpoint(&ckpt, None, data.path(), None, 7).unwrap();
    assert_eq!(Some(report.test_error), report.recorded_test_error);
    assert_eq!(report.test_error, outcome.history[2].test_error);
    assert_eq!(report.epoch, Some(3));

    // save -> load -> save is byte-identical
    let (net, manifest) = load_checkpoint(&ckpt).unwrap();
    let again = out.path().join("again.ckpt");
    save_checkpoint(&again, &net, &manifest).unwrap();
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&again).unwrap());
    assert_eq!(fs::read(manifest_path(&ckpt)).unwrap(), fs::read(manifest_path(&again)).unwrap());
    assert!(read_blob(&ckpt).unwrap().len() > net.parameter_count());

    // resuming after epoch 2 replays epoch 3 exactly, at lr_at_epoch(2)
    let mut resumed = small_run(data.path(), BlockVariant::BaselineReluBn, 3);
    let resumed_csv = out.path().join("resumed.csv");
    fs::copy(out.path().join("full.csv"), &resumed_csv).unwrap();
    resumed.metrics_path = Some(resumed_csv.clone());
    resumed.resume = Some(boundary);
    let tail = run(&resumed, &mut |_| {}).unwrap();
    assert_eq!(tail.history.len(), 1);
    assert_eq!(tail.history[0].epoch, 3);
    assert_eq!(tail.history[0].lr, resumed.schedule.lr_at_epoch(2));
    // wall time keeps counting from where the checkpoint left off
    assert!(tail.history[0].wall_seconds >= outcome.history[1].wall_seconds);
    assert_eq!(
        csv_without_wall_time(&resumed_csv),
        csv_without_wall_time(&out.path().join("full.csv"))
    );
}

#[test]
fn resume_rejects_a_different_network() {
    let data = fixture(4, 4);
    let out = tempfile::tempdir().unwrap();
    let ckpt = out.path().join("net.ckpt");
    let mut cfg = small_run(data.path(), BlockVariant::ConvEluConvElu, 1);
    cfg.checkpoint_path = Some(ckpt.clone());
    run(&cfg, &mut |_| {}).unwrap();
    let mut other = small_run(data.path(), BlockVariant::EluConvEluConv, 2);
    other.resume = Some(ckpt);
    assert!(run(&other, &mut |_| {}).is_err());
}

#[test]
fn batch_order_depends_on_seed_and_epoch_only() {
    let data = fixture(6, 6);
    let (train, _) = load(Dataset::Cifar10, data.path(), Limits::default()).unwrap();
    let order = |seed, epoch| {
        let mut rng = resnet_elu::Rng::with_stream(seed, epoch_stream(epoch));
        resnet_elu::data::batch_order(train.len(), 16, Some(&mut rng)).unwrap()
    };
    assert_eq!(order(5, 0), order(5, 0));
    assert_ne!(order(5, 0), order(5, 1));
    assert_ne!(order(5, 0), order(6, 0));
}

#[test]
fn exploding_variant_reports_divergence() {
    let data = fixture(26, 10);
    let out = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new(
        Dataset::Cifar10,
        data.path(),
        NetworkConfig::new(9, 10, BlockVariant::ConvEluConvElu).with_widths([4, 8, 8]),
    );
    cfg.schedule.total_epochs = 4;
    cfg.schedule.batch_size = 32;
    cfg.schedule.seed = 1;
    cfg.metrics_path = Some(out.path().join("a.csv"));
    let outcome = run(&cfg, &mut |_| {}).unwrap();
    assert!(outcome.diverged(), "{:?}", outcome.history);
    let rows = read_metrics(&out.path().join("a.csv")).unwrap();
    assert!(rows.last().unwrap().diverged);
    assert_eq!(rows.iter().filter(|r| r.diverged).count(), 1);
    assert_eq!(rows.len(), outcome.history.len());
}

#[test]
fn smoke_run_lowers_training_loss() {
    let data = fixture(40, 50);
    let mut cfg = RunConfig::new(
        Dataset::Cifar10,
        data.path(),
        NetworkConfig::new(1, 10, BlockVariant::ConvEluConvBnNoEluAfterAdd),
    );
    cfg.schedule.total_epochs = 10;
    cfg.schedule.batch_size = 32;
    cfg.schedule.seed = 3;
    let outcome = run(&cfg, &mut |m| println!("{}", m.csv_row())).unwrap();
    assert!(!outcome.diverged());
    let h = &outcome.history;
    assert_eq!(h.len(), 10);
    assert!(h[9].train_loss < h[0].train_loss, "{h:?}");
}
