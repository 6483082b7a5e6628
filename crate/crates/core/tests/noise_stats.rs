use noisylab_core::data::{make_synthetic, NoiseSpec};
use noisylab_core::{Criterion, Split, SyntheticKind};

#[test]
fn exclude_true_corrupts_exactly_the_rounded_count() {
    let base = make_synthetic(SyntheticKind::GaussianBlobs, 2_000, 4, 10, 3).unwrap();
    let n_train = base.indices(Split::Train).len();
    for (k, rate) in [0.0, 0.2, 0.45, 0.8, 0.9, 1.0].into_iter().enumerate() {
        let ds = base.inject_noise(NoiseSpec { rate, criterion: Criterion::ExcludeTrue, seed: k as u64 }).unwrap();
        let flipped = ds.evaluation_view().corruption_mask.iter().filter(|&&m| m).count();
        assert_eq!(flipped, (rate * n_train as f64 + 0.5).floor() as usize, "rate {rate}");
    }
}

#[test]
fn include_true_fraction_is_within_four_sigma() {
    let base = make_synthetic(SyntheticKind::GaussianBlobs, 5_000, 4, 10, 4).unwrap();
    let n_train = base.indices(Split::Train).len() as f64;
    let c = base.classes() as f64;
    for rate in [0.2, 0.5, 0.8] {
        for seed in 0..10 {
            let ds = base.inject_noise(NoiseSpec { rate, criterion: Criterion::IncludeTrue, seed }).unwrap();
            let flipped = ds.evaluation_view().corruption_mask.iter().filter(|&&m| m).count() as f64;
            // selected count is fixed; each selected label survives with probability 1/C
            let selected = (rate * n_train + 0.5).floor();
            let p = (c - 1.0) / c;
            let sd = (selected * p * (1.0 - p)).sqrt();
            assert!((flipped - rate * p * n_train).abs() <= 4.0 * sd, "rate {rate} seed {seed}: {flipped}");
        }
    }
}

#[test]
fn injection_leaves_features_and_validation_alone() {
    let base = make_synthetic(SyntheticKind::ConcentricRings, 1_000, 3, 5, 9).unwrap();
    let ds = base.inject_noise(NoiseSpec { rate: 0.7, criterion: Criterion::ExcludeTrue, seed: 1 }).unwrap();
    for i in 0..base.len() {
        assert_eq!(base.features(i), ds.features(i));
        assert_eq!(base.split()[i], ds.split()[i]);
    }
    for i in ds.indices(Split::Validation) {
        assert_eq!(ds.observed_labels()[i], base.observed_labels()[i]);
        assert!(!ds.evaluation_view().corruption_mask[i]);
    }
}
