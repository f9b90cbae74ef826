use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scnet_core::data::{generate_scene, synth_degrade, WaterType};
use scnet_core::metrics::MetricReport;
use scnet_core::tensor::grad_check;
use scnet_core::{exec, Graph, Tensor};

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", true), ("sequential", false)]
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::uniform(&[8, 16, 64, 64], -1.0, 1.0, &mut rng).unwrap();
    let w = Tensor::<f32>::uniform(&[16, 16, 3, 3], -0.3, 0.3, &mut rng).unwrap();
    let mut group = c.benchmark_group("conv2d_batch8");
    for (name, parallel) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_parallel(parallel);
            b.iter(|| {
                let g = Graph::new();
                let out = g
                    .conv2d(g.constant(x.clone()), g.constant(w.clone()), None, 1, 1)
                    .unwrap();
                let n = g.value(out).len();
                black_box(n)
            })
        });
    }
    group.finish();
}

fn bench_grad_check(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f64>::uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut rng).unwrap();
    let w = Tensor::<f64>::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng).unwrap();
    let mut group = c.benchmark_group("grad_check_conv");
    group.sample_size(10);
    for (name, parallel) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_parallel(parallel);
            b.iter(|| {
                let f = |g: &Graph<f64>, v: &[scnet_core::Var]| {
                    let y = g.conv2d(v[0], v[1], None, 1, 1)?;
                    let y = g.sigmoid(y)?;
                    g.sum(y)
                };
                black_box(grad_check(f, &[x.clone(), w.clone()], 1e-4).unwrap())
            })
        });
    }
    group.finish();
}

fn bench_metrics(c: &mut Criterion) {
    let refs: Vec<_> = (0..8).map(|i| generate_scene(128, 128, i).unwrap()).collect();
    let degraded: Vec<_> = refs
        .iter()
        .map(|r| synth_degrade(r, &WaterType::coastal_green(), 1.0, 3).unwrap())
        .collect();
    let items: Vec<_> = degraded.iter().zip(&refs).map(|(d, r)| (String::new(), d, r)).collect();
    let mut group = c.benchmark_group("metrics_8x128");
    for (name, parallel) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            exec::set_parallel(parallel);
            bench.iter(|| black_box(MetricReport::evaluate(&items).unwrap().mean_ssim()))
        });
    }
    group.finish();
}

fn bench_synthesis(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    scnet_core::data::write_scenes(&clean, 8, 64, 4).unwrap();
    let mut group = c.benchmark_group("synthesize_8x3");
    group.sample_size(10);
    for (name, parallel) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_parallel(parallel);
            b.iter(|| {
                let m =
                    scnet_core::data::make_synthetic_dataset(&clean, &WaterType::presets(), &dir.path().join("out"), 5)
                        .unwrap();
                black_box(m.len())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_conv, bench_grad_check, bench_metrics, bench_synthesis);
criterion_main!(benches);
