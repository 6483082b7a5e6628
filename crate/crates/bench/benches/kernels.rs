use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use noisylab_core::data::{make_synthetic, NoiseSpec};
use noisylab_core::mixture::{fit_bmm, fit_gmm};
use noisylab_core::nn::{softmax, Activation, Tape};
use noisylab_core::{trainer, BootstrapMode, Mlp, SoftTargets, SyntheticKind, Tensor, TrainPlan, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

const BATCH: usize = 128;
const DIM: usize = 16;
const CLASSES: usize = 10;

fn random_batch(rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let x: Vec<f64> = (0..BATCH * DIM).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..BATCH).map(|_| rng.random_range(0..CLASSES)).collect();
    (Tensor::matrix(BATCH, DIM, x).unwrap(), labels)
}

fn forward_backward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (x, labels) = random_batch(&mut rng);
    let mut group = c.benchmark_group("mlp");
    for hidden in [[64, 64], [256, 256]] {
        let mut model = Mlp::new(DIM, &hidden, CLASSES, Activation::Relu, 0).unwrap();
        let tag = format!("{}x{}", hidden[0], hidden[1]);
        group.bench_function(format!("forward_{tag}"), |b| b.iter(|| model.forward(&x).unwrap()));
        group.bench_function(format!("forward_backward_{tag}"), |b| {
            b.iter(|| {
                model.zero_grad();
                let mut tape = Tape::new();
                let scores = model.forward_tape(&mut tape, &x).unwrap();
                let probs = tape.softmax(scores, 1.0).unwrap();
                let targets = SoftTargets::onehot(&labels, CLASSES).unwrap();
                let loss = tape.target_ce(probs, targets).unwrap();
                tape.backward(loss, &mut model).unwrap();
            })
        });
    }
    group.finish();
}

fn bootstrap_targets(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (x, labels) = random_batch(&mut rng);
    let probs = softmax(&x.clone(), 1.0).unwrap();
    let w: Vec<f64> = (0..BATCH).map(|_| rng.random()).collect();
    let targets = noisylab_core::BatchTargets::new(labels, w, x).unwrap();
    c.bench_function("bootstrap_tempered", |b| {
        b.iter(|| noisylab_core::losses::bootstrap_loss(&probs, &targets, BootstrapMode::Tempered(0.1)).unwrap())
    });
}

fn mixture_fits(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let clean = Beta::new(2.0, 9.0).unwrap();
    let noisy = Beta::new(9.0, 3.0).unwrap();
    let obs: Vec<f64> = (0..8000)
        .map(|i| if i % 5 < 3 { clean.sample(&mut rng) } else { noisy.sample(&mut rng) })
        .map(|x: f64| x.clamp(1e-4, 1.0 - 1e-4))
        .collect();
    let mut group = c.benchmark_group("mixture");
    group.bench_function("bmm_8000x10", |b| b.iter(|| fit_bmm(&obs, 10).unwrap()));
    group.bench_function("gmm_8000x10", |b| b.iter(|| fit_gmm(&obs, 10).unwrap()));
    group.finish();
}

fn short_run(c: &mut Criterion) {
    let ds = make_synthetic(SyntheticKind::GaussianBlobs, 2000, DIM, CLASSES, 3)
        .unwrap()
        .inject_noise(NoiseSpec { rate: 0.5, criterion: noisylab_core::Criterion::IncludeTrue, seed: 3 })
        .unwrap();
    let mut group = c.benchmark_group("run_4_epochs");
    group.sample_size(10);
    for v in [Variant::Ce, Variant::MDyrH] {
        let plan = TrainPlan::desk(v, 4, 3);
        group.bench_function(format!("{v}_2000"), |b| {
            b.iter_batched(
                || Mlp::new(DIM, &[64, 64], CLASSES, Activation::Relu, 3).unwrap(),
                |mut m| trainer::run(&plan, &ds, &mut m).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, forward_backward, bootstrap_targets, mixture_fits, short_run);
criterion_main!(benches);
