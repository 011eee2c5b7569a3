use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use fcce_core::data::{self, PhantomConfig};
use fcce_core::fcm::{self, FcmConfig};
use fcce_core::loss::{self, LabelField, LossConfig, MembershipSource};
use fcce_core::nn::{Graph, Mode, Padding, ParamStore, Tensor};
use fcce_core::{seed, ClassMatrix, Model, ModelKind, UNetSpec};
use rand::Rng;

fn random(shape: &[usize], seed_value: u64) -> Tensor<f32> {
    let mut rng = seed::rng(seed_value, &[]);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut store = ParamStore::<f32>::new();
    let w = store.add("w", random(&[16, 8, 3, 3], 1));
    let b = store.add("b", random(&[16], 2));
    let x = random(&[2, 8, 32, 32], 3);

    c.bench_function("conv2d_forward_8to16_32x32", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let (wv, bv) = (g.param(&store, w), g.param(&store, b));
            black_box(g.conv2d(xi, wv, Some(bv), Padding::Same).unwrap());
        })
    });
    c.bench_function("conv2d_forward_backward_8to16_32x32", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let (wv, bv) = (g.param(&store, w), g.param(&store, b));
            let y = g.conv2d(xi, wv, Some(bv), Padding::Same).unwrap();
            let s = g.sum(y);
            store.zero_grad();
            g.backward(s, &mut store).unwrap();
        })
    });
}

fn fcm_run(c: &mut Criterion) {
    let image = data::generate_phantom(&PhantomConfig::default(), 0).unwrap();
    let cfg = FcmConfig::default();
    c.bench_function("fcm_run_32x32_c4", |bench| bench.iter(|| black_box(fcm::run(&image.intensities, &cfg).unwrap())));
}

fn fcce_loss(c: &mut Criterion) {
    let (classes, pixels) = (4, 2 * 32 * 32);
    let mut rng = seed::rng(4, &[]);
    let z = ClassMatrix::from_vec(classes, pixels, (0..classes * pixels).map(|_| rng.random_range(-3.0..3.0)).collect())
        .unwrap();
    let labels: Vec<usize> = (0..pixels).map(|_| rng.random_range(0..classes)).collect();
    let y = LabelField::from_labels(&labels, classes).unwrap();
    let cfg = LossConfig::fcce(MembershipSource::Prediction, 0.5);
    c.bench_function("fcce_loss_and_grad_c4_2048px", |bench| {
        bench.iter(|| black_box(loss::loss_and_grad(&y, &z, None, &cfg).unwrap()))
    });
}

fn train_step(c: &mut Criterion) {
    for kind in [ModelKind::UNet, ModelKind::UNetPlusPlus] {
        let mut model = Model::<f32>::build(kind, &UNetSpec::default(), false, 0).unwrap();
        let x = random(&[2, 1, 32, 32], 5);
        c.bench_function(&format!("{kind}_forward_backward_b2_32x32"), |bench| {
            bench.iter_batched(
                || seed::rng(6, &[]),
                |mut rng| {
                    let mut g = Graph::new();
                    let xi = g.input(x.clone());
                    let heads = model.forward(&mut g, xi, Mode::Train, &mut rng).unwrap();
                    let s = g.sum(heads[0]);
                    model.store.zero_grad();
                    g.backward(s, &mut model.store).unwrap();
                },
                BatchSize::SmallInput,
            )
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = conv, fcm_run, fcce_loss, train_step
}
criterion_main!(benches);
