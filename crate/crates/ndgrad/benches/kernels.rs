use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ndgrad::{par, Graph, ParamId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for (rows, k, n) in [(1024, 32, 128), (4096, 128, 32)] {
        let a = random(&[rows, k], 1);
        let b = random(&[k, n], 2);
        for (mode, on) in MODES {
            par::set_enabled(on);
            group.bench_with_input(BenchmarkId::new(mode, format!("{rows}x{k}x{n}")), &(), |bench, _| {
                bench.iter(|| {
                    let mut g = Graph::new();
                    let x = g.constant(a.clone()).unwrap();
                    let w = g.constant(b.clone()).unwrap();
                    let y = g.matmul(x, w).unwrap();
                    black_box(g.value(y).data()[0])
                })
            });
        }
    }
    group.finish();
}

fn softmax(c: &mut Criterion) {
    let mut group = c.benchmark_group("softmax");
    let a = random(&[64, 4, 16, 16], 3);
    for (mode, on) in MODES {
        par::set_enabled(on);
        group.bench_function(mode, |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let x = g.constant(a.clone()).unwrap();
                let y = g.softmax(x).unwrap();
                black_box(g.value(y).data()[0])
            })
        });
    }
    group.finish();
}

/// Forward and backward pass of a dense layer with layer norm and a
/// mean-squared loss, the shape of one transformer sub-block.
fn dense_block(c: &mut Criterion) {
    let mut group = c.benchmark_group("dense_block_backward");
    let x = random(&[64, 16, 32], 4);
    let w = random(&[32, 128], 5);
    let w2 = random(&[128, 32], 6);
    let gamma = Tensor::full(&[32], 1.0f32);
    let beta = Tensor::zeros(&[32]);
    for (mode, on) in MODES {
        par::set_enabled(on);
        group.bench_function(mode, |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let xv = g.constant(x.clone()).unwrap();
                let wv = g.param(ParamId(0), w.clone()).unwrap();
                let w2v = g.param(ParamId(1), w2.clone()).unwrap();
                let gv = g.param(ParamId(2), gamma.clone()).unwrap();
                let bv = g.param(ParamId(3), beta.clone()).unwrap();
                let h = g.layer_norm(xv, gv, bv, 1e-5).unwrap();
                let h = g.matmul(h, wv).unwrap();
                let h = g.relu(h).unwrap();
                let h = g.matmul(h, w2v).unwrap();
                let sq = g.square(h).unwrap();
                let loss = g.mean(sq).unwrap();
                black_box(g.backward(loss).unwrap().len())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, softmax, dense_block);
criterion_main!(benches);
