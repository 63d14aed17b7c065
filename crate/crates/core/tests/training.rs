use std::path::Path;

use mattekit::harness::config::ExperimentConfig;
use mattekit::harness::train::{train, TrainOptions, LOSS_CSV_HEADER};

/// Three training images of 48 px cropped to 32, one held out; 3 iterations
/// per epoch and a variance step every 2 iterations.
fn small_config(out: &Path, seed: u64) -> ExperimentConfig {
    let overrides: Vec<(String, String)> = [
        ("seed", seed.to_string()),
        ("out_dir", format!("{:?}", out.display().to_string())),
        ("epochs", "3".into()),
        ("batch_size", "1".into()),
        ("data.num_fg", "4".into()),
        ("data.bgs_per_fg", "1".into()),
        ("data.size", "48".into()),
        ("data.test_fg", "1".into()),
        ("augment.crop_sizes", "[32, 48]".into()),
        ("augment.output_size", "32".into()),
        ("net.block_channels", "[2, 2, 3, 3, 3]".into()),
        ("net.aspp_out_channels", "2".into()),
        ("net.msr_channels", "2".into()),
        ("dgm.step_interval", "2".into()),
        ("dgm.sigma2_step", "0.1".into()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    ExperimentConfig::from_parts(None, &overrides).unwrap()
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn identical_config_and_seed_give_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = train(&small_config(a.path(), 4), &TrainOptions::default()).unwrap();
    train(&small_config(b.path(), 4), &TrainOptions::default()).unwrap();
    assert_eq!(ra.iterations, 9);
    for rel in [
        "csv/loss.csv",
        "checkpoints/latest.ckpt",
        "checkpoints/epoch-0002.ckpt",
        "csv/eval_final.csv",
        "metrics.json",
        "config.snapshot",
    ] {
        let snapshot_differs = rel == "config.snapshot";
        let same = read(a.path().join(rel)) == read(b.path().join(rel));
        // The snapshot records out_dir, the only intended difference.
        assert_eq!(same, !snapshot_differs, "{rel}");
    }

    let c = tempfile::tempdir().unwrap();
    train(&small_config(c.path(), 5), &TrainOptions::default()).unwrap();
    assert_ne!(
        read(a.path().join("csv/loss.csv")),
        read(c.path().join("csv/loss.csv"))
    );
}

#[test]
fn resuming_from_a_checkpoint_replays_the_trajectory() {
    let full = tempfile::tempdir().unwrap();
    let config = small_config(full.path(), 2);
    train(&config, &TrainOptions::default()).unwrap();

    let split = tempfile::tempdir().unwrap();
    let config = small_config(split.path(), 2);
    // Stop mid-way through the second epoch; the rows past the last
    // checkpoint must be dropped on resume.
    let partial = train(
        &config,
        &TrainOptions {
            stop_after: Some(5),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    assert_eq!(partial.iterations, 5);
    assert!(partial.final_.is_none());
    let resumed = train(
        &config,
        &TrainOptions {
            resume: Some(split.path().join("checkpoints/epoch-0001.ckpt")),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    assert_eq!(resumed.losses.len(), 6);
    for rel in [
        "csv/loss.csv",
        "checkpoints/latest.ckpt",
        "csv/eval_final.csv",
    ] {
        assert!(
            read(full.path().join(rel)) == read(split.path().join(rel)),
            "{rel}"
        );
    }
}

#[test]
fn loss_log_records_the_iteration_driven_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 1);
    train(
        &config,
        &TrainOptions {
            skip_eval: true,
            ..TrainOptions::default()
        },
    )
    .unwrap();
    let text = String::from_utf8(read(dir.path().join("csv/loss.csv"))).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(LOSS_CSV_HEADER));
    let mut sigmas = Vec::new();
    for (row, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let it: u64 = f[0].parse().unwrap();
        let epoch: u64 = f[1].parse().unwrap();
        assert_eq!(it, row as u64);
        assert_eq!(epoch, it / 3);
        assert_eq!(f[2].parse::<f64>().unwrap(), config.lr_at_epoch(epoch));
        let sigma2: f64 = f[3].parse().unwrap();
        // Steps every 2 iterations even though epochs are 3 long.
        assert_eq!(sigma2, 0.25 + 0.1 * (it / 2) as f64);
        assert_eq!(sigma2, config.dgm.sigma2_at(it));
        assert!(f[4].parse::<f64>().unwrap().is_finite());
        sigmas.push(sigma2);
    }
    assert_eq!(sigmas.len(), 9);
    assert!(sigmas.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn resume_rejects_a_checkpoint_from_another_network() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 1);
    train(
        &config,
        &TrainOptions {
            stop_after: Some(3),
            skip_eval: true,
            ..TrainOptions::default()
        },
    )
    .unwrap();
    let other_dir = tempfile::tempdir().unwrap();
    let mut other = small_config(other_dir.path(), 1);
    other.net.msr = false;
    let err = train(
        &other,
        &TrainOptions {
            resume: Some(dir.path().join("checkpoints/latest.ckpt")),
            skip_eval: true,
            ..TrainOptions::default()
        },
    );
    assert!(err.is_err());
}
