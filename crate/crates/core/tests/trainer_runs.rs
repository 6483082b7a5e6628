use std::io::Write as _;

use noisylab_core::data::{make_synthetic, NoiseSpec};
use noisylab_core::nn::Activation;
use noisylab_core::trainer::{self, read_loss_trace, write_loss_trace, write_metrics_csv, METRICS_HEADER};
use noisylab_core::{Criterion, Error, Mlp, NoisyDataset, Split, SyntheticKind, TrainPlan, Variant};

fn small(rate: f64, seed: u64) -> NoisyDataset {
    make_synthetic(SyntheticKind::GaussianBlobs, 600, 6, 4, seed)
        .unwrap()
        .inject_noise(NoiseSpec { rate, criterion: Criterion::IncludeTrue, seed })
        .unwrap()
}

fn quick_plan(v: Variant, epochs: usize) -> TrainPlan {
    let mut p = TrainPlan::desk(v, epochs, 5);
    p.batch_size = 64;
    p
}

fn model(ds: &NoisyDataset) -> Mlp {
    Mlp::new(ds.dim(), &[16, 16], ds.classes(), Activation::Relu, 5).unwrap()
}

#[test]
fn metrics_csv_is_reproducible() {
    let ds = small(0.5, 1);
    for v in [Variant::DyS, Variant::MdDyrSh] {
        let render = || {
            let plan = quick_plan(v, 7);
            let out = trainer::run(&plan, &ds, &mut model(&ds)).unwrap();
            let mut buf = Vec::new();
            write_metrics_csv(&mut buf, &plan, &ds, &out.epochs).unwrap();
            buf
        };
        let a = render();
        assert_eq!(a, render());
        let text = String::from_utf8(a).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
        assert_eq!(text.lines().count(), 8);
    }
}

#[test]
fn warmup_is_mixture_free_and_refits_use_ce() {
    let ds = small(0.4, 2);
    for v in Variant::ALL {
        let plan = quick_plan(v, 6);
        let out = trainer::run(&plan, &ds, &mut model(&ds)).unwrap();
        for e in &out.epochs {
            if e.epoch <= plan.warmup_epochs {
                assert!(!e.consulted_mixture, "{v} consulted the mixture in warm-up epoch {}", e.epoch);
            }
            assert_eq!(e.refit_objective.as_deref(), Some("CE"));
        }
        let consults = out.epochs.iter().any(|e| e.consulted_mixture);
        assert_eq!(consults, v.uses_mixture(), "{v}");
    }
}

#[test]
fn fractional_and_sparse_refit_periods() {
    let ds = small(0.3, 3);
    let mut plan = quick_plan(Variant::DyH, 6);
    plan.refit_period_epochs = 0.5;
    let out = trainer::run(&plan, &ds, &mut model(&ds)).unwrap();
    assert!(out.epochs.iter().all(|e| e.refits == 2));

    plan.refit_period_epochs = 2.0;
    let out = trainer::run(&plan, &ds, &mut model(&ds)).unwrap();
    let refits: Vec<usize> = out.epochs.iter().map(|e| e.refits).collect();
    assert_eq!(refits, vec![0, 1, 0, 1, 0, 1]);
}

#[test]
fn a_late_first_refit_is_rejected_when_the_mixture_is_needed() {
    let ds = small(0.3, 3);
    let mut plan = quick_plan(Variant::DyH, 6);
    // warm-up 2 epochs, but the first fit only after epoch 4
    plan.refit_period_epochs = 4.0;
    assert!(matches!(trainer::run(&plan, &ds, &mut model(&ds)), Err(Error::NoMixture(_))));
}

#[test]
fn divergence_is_recorded_not_raised() {
    let ds = small(0.5, 4);
    let mut plan = quick_plan(Variant::Ce, 5);
    plan.lr.initial = 1e200;
    plan.lr.drops.clear();
    let out = trainer::run(&plan, &ds, &mut model(&ds)).unwrap();
    let at = out.summary.diverged_at.expect("run should diverge");
    assert_eq!(out.epochs.len(), at);
    assert!(out.epochs.last().unwrap().mean_train_loss.is_nan());
}

#[test]
fn clean_run_without_noise_has_no_auc() {
    let ds = small(0.0, 6);
    let out = trainer::run(&quick_plan(Variant::Ce, 3), &ds, &mut model(&ds)).unwrap();
    assert!(out.epochs.iter().all(|e| e.clean_noisy_auc.is_none() && e.noisy_quartiles.is_none()));
    assert!(out.summary.best_accuracy > 0.5);
}

#[test]
fn mismatched_model_is_rejected() {
    let ds = small(0.2, 7);
    let mut m = Mlp::new(ds.dim() + 1, &[8], ds.classes(), Activation::Relu, 0).unwrap();
    assert!(matches!(trainer::run(&quick_plan(Variant::Ce, 2), &ds, &mut m), Err(Error::Shape { .. })));
}

#[test]
fn loss_trace_round_trips_and_rejects_bad_rows() {
    let ds = small(0.5, 8);
    let mut plan = quick_plan(Variant::MDyrH, 6);
    plan.trace_epochs = vec![3, 6];
    let out = trainer::run(&plan, &ds, &mut model(&ds)).unwrap();
    assert_eq!(out.trace.len(), 2 * ds.indices(Split::Train).len());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    write_loss_trace(std::fs::File::create(&path).unwrap(), &out.trace).unwrap();
    let back = read_loss_trace(&path).unwrap();
    assert_eq!(back, out.trace);

    let bad = dir.path().join("bad.csv");
    let mut f = std::fs::File::create(&bad).unwrap();
    writeln!(f, "{}", trainer::TRACE_HEADER).unwrap();
    writeln!(f, "1,0,0.5,0.2,0.1,0").unwrap();
    writeln!(f, "1,1,0.5,oops,0.1,0").unwrap();
    drop(f);
    match read_loss_trace(&bad) {
        Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (3, 4)),
        other => panic!("expected a parse error, got {other:?}"),
    }
}
