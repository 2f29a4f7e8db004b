use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rgbn_core::data::rasterize;
use rgbn_core::eval::{map50_95, GroundTruth, InstancePrediction};
use rgbn_core::models::build_sequential;
use rgbn_core::surgery::WeightArchive;
use rgbn_core::synth::{generate_scene, SceneSpec};
use rgbn_core::tensor::{conv2d_forward, Conv2d, Tensor};

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let layer = Conv2d::new("conv", 16, 32, 3, 1, 1, &mut rng);
    let x = Tensor::uniform(&[8, 16, 32, 32], 1.0, &mut rng);
    c.bench_function("conv2d 8x16x32x32 -> 32", |b| b.iter(|| conv2d_forward(black_box(&x), &layer).unwrap()));
}

fn raster(c: &mut Criterion) {
    let poly: Vec<[f64; 2]> = (0..24)
        .map(|k| {
            let t = std::f64::consts::TAU * k as f64 / 24.0;
            [240.0 + 120.0 * t.cos(), 180.0 + 80.0 * t.sin()]
        })
        .collect();
    c.bench_function("rasterize 24-gon on 480x360", |b| {
        b.iter(|| rasterize(black_box(&poly), 480, 360).unwrap())
    });
}

fn map(c: &mut Criterion) {
    let spec = SceneSpec::default();
    let images: Vec<(Vec<InstancePrediction>, Vec<GroundTruth>)> = (0..4)
        .map(|s| {
            let scene = generate_scene(&spec, s).unwrap();
            let (w, h) = (scene.image.width(), scene.image.height());
            let gts: Vec<GroundTruth> = scene
                .annotations
                .iter()
                .map(|a| GroundTruth {
                    mask: a.mask(w, h).unwrap(),
                    class: a.condition.class_index().unwrap(),
                })
                .collect();
            let preds = gts
                .iter()
                .enumerate()
                .map(|(i, g)| InstancePrediction {
                    mask: g.mask.clone(),
                    class: (g.class + i % 2) % 3,
                    confidence: 1.0 / (i + 1) as f64,
                })
                .collect();
            (preds, gts)
        })
        .collect();
    c.bench_function("mAP50-95 over 4 scenes", |b| b.iter(|| map50_95(black_box(&images), 3).unwrap()));
}

fn archive(c: &mut Criterion) {
    let model = build_sequential(4, 3, 64, 0).unwrap();
    let a = WeightArchive::from_model(&model);
    c.bench_function("archive round trip, sequential CNN", |b| {
        b.iter(|| WeightArchive::from_bytes(&black_box(&a).to_bytes()).unwrap())
    });
}

criterion_group!(benches, conv, raster, map, archive);
criterion_main!(benches);
