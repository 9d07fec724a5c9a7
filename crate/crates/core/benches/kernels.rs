//! Parallel versus sequential kernels: a conv forward/backward, the
//! correlation activation, and one desk training step.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use msinet_core::data::{generate_synthetic, SyntheticConfig};
use msinet_core::exec::set_sequential;
use msinet_core::layers::{Ctx, Group, Mode};
use msinet_core::losses::{total_loss, SamConfig, SamMode};
use msinet_core::numerics::{Tape, Tensor};
use msinet_core::space::{ArchDescriptor, SpaceConfig};
use msinet_core::train::{training_labels, Model, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PATHS: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn conv(c: &mut Criterion) {
    let x = random(&[16, 16, 32, 16], 1);
    let w = random(&[32, 16, 3, 3], 2);
    let mut group = c.benchmark_group("conv2d forward+backward");
    for (name, sequential) in PATHS {
        set_sequential(sequential);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut t = Tape::new();
                let (xv, wv) = (t.leaf(&x, true), t.leaf(&w, true));
                let y = t.conv2d(xv, wv, None, 1, 1, 1).unwrap();
                let l = t.mean(y);
                t.backward(l).unwrap()
            })
        });
    }
    set_sequential(false);
    group.finish();
}

fn correlation(c: &mut Criterion) {
    let x = random(&[16, 32, 8, 4], 3);
    let mut group = c.benchmark_group("correlation_max");
    for (name, sequential) in PATHS {
        set_sequential(sequential);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut t = Tape::new();
                let xv = t.leaf(&x, true);
                let y = t.correlation_max(xv).unwrap();
                let l = t.mean(y);
                t.backward(l).unwrap()
            })
        });
    }
    set_sequential(false);
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let ds = generate_synthetic(&SyntheticConfig::default()).unwrap();
    let space = SpaceConfig::desk();
    let (items, labels) = training_labels(&ds);
    let classes = labels.iter().max().unwrap() + 1;
    let model = Model::new(&ArchDescriptor::msinet(&space), &space, classes, SamMode::PamSelf, 0).unwrap();
    let pick: Vec<usize> = (0..16).map(|k| (k / 4) * (items.len() / classes) + k % 4).collect();
    let images = ds.batch(&pick.iter().map(|&i| items[i]).collect::<Vec<_>>());
    let lab: Vec<usize> = pick.iter().map(|&i| labels[i]).collect();
    let cfg = TrainConfig::default();
    let sam = SamConfig { mode: SamMode::PamSelf, lambda: 2.0 };

    let mut group = c.benchmark_group("desk training step");
    group.sample_size(10);
    for (name, sequential) in PATHS {
        set_sequential(sequential);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut ctx = Ctx::new(&model.ps, Mode::Train, &[Group::Weight]);
                let x = ctx.tape.constant(&images);
                let out = model.net.forward(&mut ctx, x).unwrap();
                let (l, _) = total_loss(
                    &mut ctx,
                    out.embedding,
                    out.feature_map,
                    &lab,
                    &model.head,
                    cfg.margin,
                    &sam,
                    model.pam.as_ref(),
                )
                .unwrap();
                ctx.param_grads(l.total).unwrap()
            })
        });
    }
    set_sequential(false);
    group.finish();
}

criterion_group!(benches, conv, correlation, train_step);
criterion_main!(benches);
