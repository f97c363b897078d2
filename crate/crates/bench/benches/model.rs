use criterion::{criterion_group, criterion_main, Criterion};
use dvp_core::dct::NormMatrix;
use dvp_core::diffusion::VlbMode;
use dvp_core::model::{LadderVae, ModelConfig};
use dvp_core::{Graph, Rng, Tensor};

fn model() -> LadderVae<f32> {
    let norm = NormMatrix::new(Tensor::full(&[1, 7, 7], 2.0), "bench").unwrap();
    LadderVae::new(ModelConfig::default(), norm, &mut Rng::new(0)).unwrap()
}

fn batch(n: usize) -> Tensor<f32> {
    let mut rng = Rng::new(3);
    let v: Vec<f64> = (0..n * 784).map(|_| (rng.uniform() < 0.13) as u8 as f64).collect();
    Tensor::from_f64(&[n, 1, 28, 28], &v).unwrap()
}

fn training_step(c: &mut Criterion) {
    let m = model();
    let x = batch(50);
    let mut group = c.benchmark_group("mnist_default");
    group.sample_size(10);
    group.bench_function("forward_backward_50", |b| {
        let mut rng = Rng::new(5);
        b.iter(|| {
            let mut g = Graph::new();
            let out = m.forward_train(&mut g, &x, &mut rng, VlbMode::Stochastic).unwrap();
            g.backward(out.loss).unwrap();
            g.param_grads(m.store())
        })
    });
    group.bench_function("evaluate_full_50", |b| {
        let mut rng = Rng::new(6);
        b.iter(|| m.evaluate(&x, &mut rng, VlbMode::Full).unwrap())
    });
    group.bench_function("generate_16", |b| {
        let mut rng = Rng::new(7);
        b.iter(|| m.generate(16, 1.0, &mut rng).unwrap())
    });
    group.finish();
}

criterion_group!(benches, training_step);
criterion_main!(benches);
