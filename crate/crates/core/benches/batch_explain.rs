use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xaimi::image::ImageTensor;
use xaimi::spec::ModelSpec;
use xaimi::xai::{explain, ExplanationKind};
use xaimi::zoo::Classifier;
use xaimi::Parallelism;

fn bench_explain(c: &mut Criterion) {
    let model = Classifier::build(ModelSpec::mnist_target(10).scaled(4), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let images: Vec<ImageTensor> =
        (0..128).map(|_| ImageTensor::new(32, 32, 1, (0..1024).map(|_| rng.random()).collect()).unwrap()).collect();
    let refs: Vec<&ImageTensor> = images.iter().collect();
    let classes: Vec<usize> = (0..refs.len()).map(|i| i % 10).collect();

    for kind in [ExplanationKind::GradCam, ExplanationKind::Lrp] {
        let mut group = c.benchmark_group(format!("explain_{}", kind.as_str()));
        group.sample_size(10);
        for mode in [Parallelism::Sequential, Parallelism::Rayon] {
            group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &mode| {
                b.iter(|| explain(&model, &refs, &classes, kind, mode).unwrap())
            });
        }
        group.finish();
    }
}

criterion_group!(benches, bench_explain);
criterion_main!(benches);
