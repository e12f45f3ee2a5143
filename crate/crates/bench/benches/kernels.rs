use criterion::{criterion_group, criterion_main, Criterion};
use keyvid_core::nn::stream_rng;
use keyvid_core::tensor::Tensor;

fn kernels(c: &mut Criterion) {
    let mut rng = stream_rng(0, 0);
    let a = Tensor::<f32>::randn(&[256, 256], &mut rng);
    let b = Tensor::<f32>::randn(&[256, 256], &mut rng);
    c.bench_function("matmul_256", |bch| bch.iter(|| a.matmul(&b).unwrap()));

    let x = Tensor::<f32>::randn(&[8, 32, 16, 16], &mut rng);
    let w = Tensor::<f32>::randn(&[32, 32, 3, 3], &mut rng);
    c.bench_function("conv2d_3x3_32ch_16px", |bch| bch.iter(|| x.conv2d(&w, None, 1, 1).unwrap()));
}

criterion_group!(benches, kernels);
criterion_main!(benches);
