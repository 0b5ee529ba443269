//! Measures the paths the pipeline spends its time in: convolution
//! forward/backward, whole-volume inference, one training step, and the
//! evaluation metrics.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use voxstack_core::autodiff::{init_he, Graph, Padding, Tensor};
use voxstack_core::learners::{predict, train_base, BaseLearner, BaseTrainCfg, LearnerId, TileCfg};
use voxstack_core::metrics::{connected_components, rand_fscore, surface_distances};
use voxstack_core::synthgen::{generate_item, ShapeRange, SynthSpec};
use voxstack_core::volume::LabelVolume;

fn spec(dims: (usize, usize, usize)) -> SynthSpec {
    SynthSpec {
        dims,
        spacing: (1.0, 1.0, 1.0),
        num_classes: 3,
        spheres: ShapeRange { count: (1, 2), radius: (3.0, 6.0) },
        tubes: ShapeRange { count: (1, 2), radius: (1.5, 2.5) },
        diagonal_tubes: false,
        noise_sigma: 0.3,
        intensity_means: vec![0.0, 1.0, 0.5],
        seed: 7,
    }
}

fn labels(dims: (usize, usize, usize), index: usize) -> LabelVolume {
    generate_item(&spec(dims), index).unwrap().labels
}

fn conv3d_stem(c: &mut Criterion) {
    let n = 16;
    let x = Tensor::new(vec![1, n, n, n], vec![0.5; n * n * n]).unwrap();
    let w = init_he(&[16, 1, 5, 5, 5], 3).into_param();
    let ones = vec![1.0; 16 * n * n * n];
    c.bench_function("conv3d_1to16_k5_16cube_fwd_bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xi = g.param(&x.clone().into_param());
            let wi = g.param(&w);
            let y = g.conv3d(xi, wi, 1, Padding::Same).unwrap();
            let s = g.weighted_sum(y, &ones).unwrap();
            g.backward(s).unwrap();
            g.value(s)[0]
        })
    });
}

fn base_predict(c: &mut Criterion) {
    let item = generate_item(&spec((32, 32, 32)), 5).unwrap();
    let mut plane = BaseLearner::init(LearnerId::Xy2d, 3, 11);
    plane.trained = true;
    let mut vol = BaseLearner::init(LearnerId::Vol3d, 3, 13);
    vol.trained = true;
    let tile = TileCfg { patch: 16, stride: 8 };
    c.bench_function("predict_xy2d_32cube", |b| {
        b.iter(|| predict(&plane, &item.image, tile).unwrap())
    });
    c.bench_function("predict_vol3d_32cube_tiled", |b| {
        b.iter(|| predict(&vol, &item.image, tile).unwrap())
    });
}

fn base_train_step(c: &mut Criterion) {
    let item = generate_item(&spec((24, 24, 24)), 9).unwrap();
    let items = [(&item.image, &item.labels)];
    let cfg = BaseTrainCfg {
        iters: 1,
        batch_2d: 8,
        batch_3d: 2,
        patch_3d: 16,
        base_lr: 5e-4,
        lr_power: 0.9,
        augment: true,
        seed: 21,
    };
    c.bench_function("train_step_xy2d_batch8", |b| {
        b.iter_batched(
            || BaseLearner::init(LearnerId::Xy2d, 3, 17),
            |mut l| train_base(&mut l, &items, &cfg).unwrap(),
            BatchSize::SmallInput,
        )
    });
    c.bench_function("train_step_vol3d_batch2_patch16", |b| {
        b.iter_batched(
            || BaseLearner::init(LearnerId::Vol3d, 3, 19),
            |mut l| train_base(&mut l, &items, &cfg).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn eval_metrics(c: &mut Criterion) {
    let gt = labels((32, 32, 32), 1);
    let pred = labels((32, 32, 32), 2);
    c.bench_function("surface_distances_32cube", |b| {
        b.iter(|| surface_distances(&pred, &gt, 1).unwrap())
    });
    c.bench_function("rand_fscore_components_32cube", |b| {
        b.iter(|| {
            let pp = connected_components(&pred, true);
            let gp = connected_components(&gt, true);
            rand_fscore(&pp, &gp, true).unwrap()
        })
    });
}

criterion_group!(benches, conv3d_stem, base_predict, base_train_step, eval_metrics);
criterion_main!(benches);
