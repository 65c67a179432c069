use candle_core::DType;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use glore_mtl::glore::{GloReConfig, GloReUnit};
use glore_mtl::kernels::{conv2d, max_pool2d, resize_bilinear};
use glore_mtl::model::{ModelConfig, MultiTaskModel, Tasks};
use glore_mtl::nn::Mode;
use glore_mtl::params::{Init, ParamStore};
use glore_mtl::precision::Precision;
use glore_mtl::scenegraph::sg_metrics;
use glore_mtl::seghead::{seg_metrics, SegVariant};
use glore_mtl_bench::{noise, score_table, stripes};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn kernels(c: &mut Criterion) {
    for precision in [Precision::Fixed, Precision::Fast] {
        precision.apply();
        let dt = precision.dtype();
        let x = noise(&[1, 64, 80, 100], dt);
        let w = noise(&[64, 64, 3, 3], dt);
        let mut g = c.benchmark_group(format!("kernels/{}", precision.name()));
        g.bench_function("conv3x3_64ch_80x100", |b| {
            b.iter(|| conv2d(&x, &w, 1, 1).unwrap())
        });
        g.bench_function("maxpool3x3s2_64ch_80x100", |b| {
            b.iter(|| max_pool2d(&x, 3, 2, 1).unwrap())
        });
        g.bench_function("resize_64ch_80x100_to_320x400", |b| {
            b.iter(|| resize_bilinear(&x, 320, 400).unwrap())
        });
        g.finish();
    }
}

fn glore_unit(c: &mut Criterion) {
    Precision::Fast.apply();
    let mut store = ParamStore::new(DType::F32);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let unit = GloReUnit::new(
        &mut Init::new(&mut store, &mut rng, "glore"),
        GloReConfig::new(512, 16, 128),
    )
    .unwrap();
    let mut g = c.benchmark_group("glore");
    for (h, w) in [(10, 13), (20, 25), (40, 50)] {
        let x = noise(&[1, 512, h, w], DType::F32);
        g.bench_with_input(
            BenchmarkId::new("forward_512ch", format!("{h}x{w}")),
            &x,
            |b, x| b.iter(|| unit.forward(x, None).unwrap()),
        );
    }
    g.finish();
}

fn model_forward(c: &mut Criterion) {
    Precision::Fast.apply();
    let image = noise(&[1, 3, 160, 224], DType::F32);
    let mut g = c.benchmark_group("segmentation_forward_160x224");
    g.sample_size(10);
    for variant in [SegVariant::GR, SegVariant::MSLRGR] {
        let model = MultiTaskModel::new(
            ModelConfig {
                variant,
                ..Default::default()
            },
            DType::F32,
        )
        .unwrap();
        g.bench_function(variant.name(), |b| {
            b.iter(|| {
                model
                    .forward(&image, &[], Tasks::SEGMENTATION, Mode::Eval)
                    .unwrap()
            })
        });
    }
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let pred = stripes(320, 400, 0);
    let gt = stripes(320, 400, 1);
    let (scores, targets) = score_table(2000);
    let mut g = c.benchmark_group("metrics");
    g.bench_function("seg_320x400", |b| {
        b.iter(|| seg_metrics(&pred, &gt).unwrap())
    });
    g.bench_function("sg_2000_edges", |b| {
        b.iter(|| sg_metrics(&scores, &targets).unwrap())
    });
    g.finish();
}

criterion_group!(benches, kernels, glore_unit, model_forward, metrics);
criterion_main!(benches);
