use proptest::prelude::*;
use rand::Rng;
use reed::credibility::{
    assess_credibility, fit_gmm_em, gmm_posterior, min_max_normalize, transfer_labels, Component,
    CredibilityScores, GmmConfig, Origin, SampleStats,
};
use reed::data::{inject_symmetric_noise_with, BlobSpec, SymmetricConvention};
use reed::harness::{train_supervised, LabelSource, SupervisedConfig};
use reed::numnet::{MlpParams, Trainable};
use reed::{seeded_rng, Error};

fn mixture(seed: u64, n: usize, a: (f64, f64), b: (f64, f64)) -> Vec<f64> {
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|_| {
            let (m, s) = if rng.random::<f64>() < 0.5 { a } else { b };
            // Box-Muller keeps this independent of the library's samplers.
            let u1: f64 = rng.random_range(f64::EPSILON..1.0);
            let u2: f64 = rng.random();
            m + s * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn em_never_decreases_likelihood_and_posteriors_are_probabilities(
        seed in 0u64..10_000,
        m1 in -2.0f64..2.0,
        gap in 0.1f64..4.0,
        s in 0.05f64..1.5,
    ) {
        let values = mixture(seed, 200, (m1, s), (m1 + gap, s * 0.7));
        let fit = fit_gmm_em(&values, &GmmConfig::default()).unwrap();
        for w in fit.log_likelihood.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
        }
        prop_assert!(fit.gmm.validate().is_ok());
        for &v in values.iter().take(20) {
            let lo = gmm_posterior(&fit.gmm, v, Component::LowMean);
            let hi = gmm_posterior(&fit.gmm, v, Component::HighMean);
            prop_assert!((0.0..=1.0).contains(&lo));
            prop_assert!((lo + hi - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn transfer_partitions_samples(seed in 0u64..10_000, n in 8usize..80, classes in 2usize..6) {
        let mut rng = seeded_rng(seed);
        let y_noisy: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let y_pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let scores = CredibilityScores {
            p_clean: (0..n).map(|_| rng.random()).collect(),
            p_right: (0..n).map(|_| rng.random()).collect(),
            losses: vec![0.0; n],
            confidences: vec![0.5; n],
        };
        let t = transfer_labels(&y_noisy, &y_pred, &scores, 0.5, 0.5, classes).unwrap();
        prop_assert!(t.validate(n).is_ok());
        for e in &t.labeled {
            match e.origin {
                Origin::Kept => {
                    prop_assert_eq!(e.label, y_noisy[e.index]);
                    prop_assert!(scores.p_clean[e.index] > 0.5);
                }
                Origin::Corrected => {
                    prop_assert_eq!(e.label, y_pred[e.index]);
                    prop_assert!(scores.p_right[e.index] > 0.5);
                }
            }
        }
        prop_assert_eq!(t.count(Origin::Kept) + t.count(Origin::Corrected), t.labeled.len());
    }

    #[test]
    fn min_max_normalize_maps_onto_unit_interval(values in prop::collection::vec(-1e3f64..1e3, 2..50)) {
        let out = min_max_normalize(&values);
        prop_assert_eq!(out.len(), values.len());
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn constant_losses_keep_everything_clean() {
    let stats = SampleStats {
        losses: vec![0.7; 30],
        confidences: vec![0.9; 30],
        y_pred: vec![1; 30],
    };
    let (scores, fits) = assess_credibility(&stats, &GmmConfig::default()).unwrap();
    assert!(fits.loss.is_none() && fits.confidence.is_none());
    assert!(scores.p_clean.iter().all(|&p| p == 1.0));
    assert!(matches!(
        fit_gmm_em(&[0.3; 10], &GmmConfig::default()),
        Err(Error::Degenerate(_))
    ));
}

#[test]
fn replacement_labels_pass_a_chi_square_uniformity_test() {
    let ds = BlobSpec {
        classes: 10,
        n_per_class: 2000,
        dim: 2,
        ..BlobSpec::default()
    }
    .generate(1)
    .unwrap();
    // With ratio 1 every label is redrawn, so y_noisy should be uniform
    // over all classes regardless of the clean label.
    let noisy = inject_symmetric_noise_with(
        &ds,
        1.0,
        SymmetricConvention::UniformOverAll,
        &mut seeded_rng(2),
    )
    .unwrap();
    let mut counts = [0usize; 10];
    for &y in &noisy.y_noisy {
        counts[y] += 1;
    }
    let expected = noisy.len() as f64 / 10.0;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 99.9th percentile of chi-square with 9 degrees of freedom.
    assert!(chi2 < 27.88, "chi-square {chi2}, counts {counts:?}");

    let excl = inject_symmetric_noise_with(
        &ds,
        1.0,
        SymmetricConvention::ExcludeTrue,
        &mut seeded_rng(3),
    )
    .unwrap();
    assert!(excl.y_clean.iter().zip(&excl.y_noisy).all(|(a, b)| a != b));
}

#[test]
fn frozen_groups_are_untouched_by_training() {
    let spec = BlobSpec {
        classes: 3,
        n_per_class: 40,
        dim: 4,
        ..BlobSpec::default()
    };
    let train = spec.generate(4).unwrap();
    let test = spec.generate(5).unwrap();
    let init = MlpParams::init(&[4, 16], &[16, 3], &mut seeded_rng(6)).unwrap();
    let config = SupervisedConfig {
        epochs: 3,
        batch_size: 16,
        ..SupervisedConfig::default()
    };
    let hash = |layers: &[reed::numnet::Dense]| {
        MlpParams {
            encoder: layers.to_vec(),
            classifier: Vec::new(),
        }
        .fingerprint()
    };

    let mut p = init.clone();
    train_supervised(
        &mut p,
        Trainable::CLASSIFIER,
        &train,
        LabelSource::Noisy,
        &test,
        &config,
        1,
    )
    .unwrap();
    assert_eq!(hash(&p.encoder), hash(&init.encoder));
    assert_ne!(hash(&p.classifier), hash(&init.classifier));

    let mut p = init.clone();
    train_supervised(
        &mut p,
        Trainable::ENCODER,
        &train,
        LabelSource::Noisy,
        &test,
        &config,
        1,
    )
    .unwrap();
    assert_eq!(hash(&p.classifier), hash(&init.classifier));
    assert_ne!(hash(&p.encoder), hash(&init.encoder));
}
