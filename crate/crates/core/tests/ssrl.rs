use rand::seq::SliceRandom;
use reed::credibility::{train_frozen_classifier, Stage2Config};
use reed::data::{train_test_split, BlobSpec, LabeledDataset, NoiseSpec};
use reed::harness::{build_datasets, run_stage1, ExperimentConfig};
use reed::numnet::{Dense, MlpParams};
use reed::seeded_rng;
use reed::ssrl::{train_encoder, train_encoder_on, ContrastiveConfig};

fn blobs(seed: u64) -> LabeledDataset {
    BlobSpec {
        classes: 4,
        n_per_class: 100,
        dim: 8,
        separation: 3.0,
        sigma: 1.0,
    }
    .generate(seed)
    .unwrap()
}

fn small_config() -> ContrastiveConfig {
    ContrastiveConfig {
        batch_size: 64,
        epochs: 40,
        hidden: vec![32, 32],
        projection_dim: 16,
        ..ContrastiveConfig::default()
    }
}

fn fingerprint(encoder: &[Dense], head: &[Dense]) -> u64 {
    MlpParams {
        encoder: encoder.to_vec(),
        classifier: head.to_vec(),
    }
    .fingerprint()
}

#[test]
fn encoder_is_independent_of_labels() {
    let ds = blobs(1);
    let mut shuffled = ds.y_clean.clone();
    shuffled.shuffle(&mut seeded_rng(9));
    let relabeled =
        LabeledDataset::new(ds.x.clone(), shuffled.clone(), shuffled, ds.classes).unwrap();
    let config = ContrastiveConfig {
        epochs: 3,
        ..small_config()
    };
    let (a, log_a) = train_encoder_on(&ds, &config, 4).unwrap();
    let (b, log_b) = train_encoder_on(&relabeled, &config, 4).unwrap();
    assert_eq!(
        fingerprint(&a.encoder, &a.head),
        fingerprint(&b.encoder, &b.head)
    );
    assert_eq!(log_a, log_b);
}

#[test]
fn same_seed_same_encoder_different_seed_differs() {
    let ds = blobs(2);
    let config = ContrastiveConfig {
        epochs: 2,
        ..small_config()
    };
    let (a, _) = train_encoder(&ds.x, &config, 5).unwrap();
    let (b, _) = train_encoder(&ds.x, &config, 5).unwrap();
    let (c, _) = train_encoder(&ds.x, &config, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn contrastive_loss_decreases_during_training() {
    let ds = blobs(3);
    let (_, log) = train_encoder(&ds.x, &small_config(), 7).unwrap();
    assert_eq!(log[0].epoch, 0);
    assert_eq!(log.len(), small_config().epochs + 1);
    let initial = log[0].loss;
    let tail: f64 = log[log.len() - 5..].iter().map(|e| e.loss).sum::<f64>() / 5.0;
    assert!(log.iter().all(|e| e.loss.is_finite()));
    assert!(tail < 0.95 * initial, "initial {initial}, final {tail}");
}

fn probe_accuracy(encoder: &[Dense], train: &LabeledDataset, test: &LabeledDataset) -> f64 {
    let config = Stage2Config {
        epochs: 20,
        ..Stage2Config::default()
    };
    let (_, log) = train_frozen_classifier(encoder, train, Some(test), &config, 3).unwrap();
    log.last().unwrap().test.unwrap()
}

#[test]
fn embedding_probe_beats_raw_feature_probe_on_overlapping_blobs() {
    // sigma 2 at separation 2 leaves the raw classes heavily overlapped.
    // Currently fails: with shared isotropic covariance the raw linear probe
    // is already close to the best achievable rule.
    let spec = BlobSpec {
        classes: 6,
        n_per_class: 300,
        dim: 12,
        separation: 2.0,
        sigma: 2.0,
    };
    let full = spec.generate(10).unwrap();
    let (train, test) = train_test_split(&full, 0.3, 11).unwrap();
    let (trained, _) = train_encoder(&train.x, &ContrastiveConfig::default(), 8).unwrap();
    let raw = probe_accuracy(&[], &train, &test);
    let learned = probe_accuracy(&trained.encoder, &train, &test);
    assert!(learned > raw, "raw probe {raw}, embedding probe {learned}");
}

// Reference run at the default configuration, seed 0. Measured drop is
// about 17%, short of the 30% target; left failing on purpose.
#[test]
fn default_run_cuts_contrastive_loss_by_thirty_percent() {
    let cfg = ExperimentConfig::new(0, NoiseSpec::symmetric(0.0, 0));
    let data = build_datasets(&cfg).unwrap();
    let (_, log) = run_stage1(&cfg, &data.train).unwrap();
    let initial = log[0].loss;
    let last = log.last().unwrap().loss;
    let drop = 1.0 - last / initial;
    assert!(drop >= 0.30, "initial {initial}, final {last}, drop {drop:.4}");
}
