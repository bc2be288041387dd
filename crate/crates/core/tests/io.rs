use proptest::prelude::*;
use reed::credibility::{Gmm1D, LabeledEntry, Origin, TransferredLabels};
use reed::data::NoiseSpec;
use reed::harness::ExperimentConfig;
use reed::io::{
    checkpoint_from_str, checkpoint_to_string, load_checkpoint, save_checkpoint, transfer_from_str,
    transfer_to_string, versioned_from_str, versioned_to_string, Checkpoint, TransferBody,
};
use reed::numnet::MlpParams;
use reed::{seeded_rng, Error};
use serde_json::Value;

fn checkpoint(seed: u64) -> Checkpoint {
    let params = MlpParams::init(&[3, 5, 4], &[4, 2], &mut seeded_rng(seed)).unwrap();
    let mut ckpt = Checkpoint::new(params.clone());
    ckpt.ema = Some(params);
    ckpt
}

fn edit(text: &str, f: impl FnOnce(&mut Value)) -> String {
    let mut v: Value = serde_json::from_str(text).unwrap();
    f(&mut v);
    serde_json::to_string(&v).unwrap()
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let ckpt = checkpoint(1);
    save_checkpoint(&a, &ckpt).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    assert_eq!(loaded, ckpt);
    save_checkpoint(&b, &loaded).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn mismatched_shape_metadata_is_rejected_with_the_field_named() {
    let text = checkpoint_to_string(&checkpoint(2)).unwrap();
    let bad = edit(&text, |v| {
        v["shapes"]["encoder"][1] = serde_json::json!([5, 7])
    });
    match checkpoint_from_str(&bad) {
        Err(Error::Format { field, .. }) => assert!(field.starts_with("encoder[1]"), "{field}"),
        other => panic!("expected a format error, got {other:?}"),
    }
    let bad = edit(&text, |v| {
        v["classifier"][0]["bias"].as_array_mut().unwrap().pop();
    });
    match checkpoint_from_str(&bad) {
        Err(Error::Format { field, .. }) => assert_eq!(field, "classifier[0].bias"),
        other => panic!("expected a format error, got {other:?}"),
    }
    let bad = edit(&text, |v| {
        v["encoder"][0]["weight"][2] = serde_json::json!("x")
    });
    match checkpoint_from_str(&bad) {
        Err(Error::Format { field, .. }) => assert!(field.contains("encoder[0].weight"), "{field}"),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn unknown_format_version_is_rejected() {
    let text = checkpoint_to_string(&checkpoint(3)).unwrap();
    let bad = edit(&text, |v| v["format_version"] = serde_json::json!(99));
    assert!(matches!(
        checkpoint_from_str(&bad),
        Err(Error::UnsupportedVersion { found: 99, .. })
    ));
}

#[test]
fn transfer_round_trips_the_partition_exactly() {
    let transfer = TransferredLabels {
        classes: 3,
        labeled: vec![
            LabeledEntry {
                index: 4,
                label: 2,
                origin: Origin::Kept,
            },
            LabeledEntry {
                index: 0,
                label: 1,
                origin: Origin::Corrected,
            },
        ],
        unlabeled: vec![3, 1, 2],
        tau_clean: 0.5,
        tau_right: 0.6,
    };
    let body = TransferBody {
        transfer: transfer.clone(),
        loss_gmm: Some(Gmm1D {
            means: [0.1, 0.7],
            variances: [0.01, 0.2],
            weights: [0.3, 0.7],
        }),
        confidence_gmm: None,
    };
    let text = transfer_to_string(&body).unwrap();
    let back = transfer_from_str(&text).unwrap();
    assert_eq!(back.transfer, transfer);
    assert_eq!(back.loss_gmm, body.loss_gmm);
    assert_eq!(transfer_to_string(&back).unwrap(), text);

    let overlapping = edit(&text, |v| {
        v["transfer"]["unlabeled"][0] = serde_json::json!(4)
    });
    assert!(transfer_from_str(&overlapping).is_err());
}

#[test]
fn config_requires_seed_and_rejects_unknown_fields() {
    let cfg = ExperimentConfig::new(3, NoiseSpec::symmetric(0.4, 1));
    let text = cfg.to_json().unwrap();
    assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);

    let no_seed = edit(&text, |v| {
        v.as_object_mut().unwrap().remove("seed");
    });
    assert!(ExperimentConfig::from_json(&no_seed).is_err());
    let extra = edit(&text, |v| v["stage3"]["lambda_q"] = serde_json::json!(1.0));
    match ExperimentConfig::from_json(&extra) {
        Err(Error::Format { field, .. }) => assert!(field.starts_with("stage3"), "{field}"),
        other => panic!("expected a format error, got {other:?}"),
    }
    let noise_extra = edit(&text, |v| v["noise"]["bogus"] = serde_json::json!(1));
    assert!(ExperimentConfig::from_json(&noise_extra).is_err());
}

proptest! {
    #[test]
    fn gmm_values_round_trip_bit_exactly(
        a in -1e6f64..1e6, b in -1e6f64..1e6, v1 in 1e-9f64..1e3, v2 in 1e-9f64..1e3, w in 0.0f64..1.0,
    ) {
        let g = Gmm1D { means: [a.min(b), a.max(b)], variances: [v1, v2], weights: [w, 1.0 - w] };
        let text = versioned_to_string(&g).unwrap();
        let back: Gmm1D = versioned_from_str(&text).unwrap();
        prop_assert_eq!(back, g);
        prop_assert_eq!(versioned_to_string(&back).unwrap(), text);
    }

    #[test]
    fn checkpoints_round_trip_for_any_seed(seed in any::<u64>()) {
        let ckpt = checkpoint(seed);
        let text = checkpoint_to_string(&ckpt).unwrap();
        prop_assert_eq!(checkpoint_from_str(&text).unwrap(), ckpt);
    }
}
