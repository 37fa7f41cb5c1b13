use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use pointdet_bench::scenes;
use pointdet_core::contrastive::{variant_loss, RowLabels, TAU};
use pointdet_core::detector::{forward_train, infer, init_params, DetectorConfig, TrainImage, TrainRngs};
use pointdet_core::geometry::{roi_align, rotated_roi_align, BBox, RotatedBox};
use pointdet_core::ops::{conv2d, l2_normalize_rows};
use pointdet_core::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(&[32, 32, 32], 1.0, &mut rng);
    let k = Tensor::randn(&[3, 3, 32, 64], 0.1, &mut rng);
    let b = Tensor::zeros(&[64]);
    c.bench_function("conv2d 32x32x32 -> 64, 3x3", |bench| {
        bench.iter(|| conv2d(black_box(&x), &k, &b, 1, 1).unwrap())
    });
}

fn align(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let feat = Tensor::randn(&[16, 16, 64], 1.0, &mut rng);
    let b = BBox::new(2.3, 3.1, 11.7, 9.4).unwrap();
    let rb = RotatedBox::new(8.0, 7.0, 9.0, 4.0, 0.7).unwrap();
    c.bench_function("roi_align 7x7x64", |bench| bench.iter(|| roi_align(black_box(&feat), &b, 7).unwrap()));
    c.bench_function("rotated_roi_align 7x7x64", |bench| {
        bench.iter(|| rotated_roi_align(black_box(&feat), &rb, 7).unwrap())
    });
}

fn contrastive(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let e = l2_normalize_rows(&Tensor::randn(&[128, 16], 1.0, &mut rng)).unwrap().0;
    let y = l2_normalize_rows(&Tensor::randn(&[5, 16], 1.0, &mut rng)).unwrap().0;
    let rows = RowLabels::new((0..128).map(|i| i % 5).collect(), (0..128).map(|i| i % 5 != 4).collect()).unwrap();
    c.bench_function("contrastive loss 128 rows, D=16", |bench| {
        bench.iter(|| variant_loss(black_box(&e), &y, &rows, TAU).unwrap())
    });
}

fn detector(c: &mut Criterion) {
    let data = scenes(64, 2);
    let mut group = c.benchmark_group("detector 64px");
    group.sample_size(10);
    for (name, cfg) in [("baseline", DetectorConfig::baseline()), ("br+cr", DetectorConfig::default())] {
        let cfg = DetectorConfig { anchor_scale: 2.0, ..cfg };
        let ps = init_params(&cfg, 0).unwrap();
        group.bench_function(format!("train step {name}, batch 2"), |bench| {
            bench.iter(|| {
                let batch: Vec<TrainImage> = data.iter().map(|(im, g)| TrainImage { image: im, gts: g }).collect();
                let mut g = Graph::new(&ps);
                let (l, _) = forward_train(&mut g, &cfg, &batch, None, &mut TrainRngs::new(0)).unwrap();
                g.backward(l.total).unwrap().for_params(&g, &ps)
            })
        });
        group.bench_function(format!("inference {name}"), |bench| {
            bench.iter(|| infer(&ps, &cfg, black_box(&data[0].0)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv, align, contrastive, detector);
criterion_main!(benches);
