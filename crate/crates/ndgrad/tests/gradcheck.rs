//! Finite-difference checks for every kernel, in f64.

use ndgrad::{Graph, ParamId, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: u64 = 100;
const H: f64 = 1e-5;
const TOL: f64 = 1e-3;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Values bounded away from zero so relu kinks are never crossed.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) { mag } else { -mag }
        })
        .collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Builds `loss = sum(f(inputs) * weights)` with a fixed random weight tensor
/// and compares the autodiff gradient of every input to central differences.
fn check<B>(inputs: Vec<Tensor<f64>>, rng: &mut ChaCha8Rng, build: B)
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> (f64, Option<Tensor<f64>>, Graph<f64>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals
            .iter()
            .enumerate()
            .map(|(i, t)| g.param(ParamId(i), t.clone()).unwrap())
            .collect();
        let out = build(&mut g, &vars).unwrap();
        let shape = g.value(out).shape().to_vec();
        let w = match weights {
            Some(w) => w.clone(),
            None => Tensor::zeros(&shape),
        };
        let wv = g.constant(w.clone()).unwrap();
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum(prod).unwrap();
        (g.value(loss).item(), Some(w), g, loss)
    };

    // first pass only to learn the output shape
    let (_, w0, _, _) = eval(&inputs, None);
    let shape = w0.unwrap().shape().to_vec();
    let weights = random(rng, &shape, -1.0, 1.0);
    let (_, _, g, loss) = eval(&inputs, Some(&weights));
    let grads = g.backward(loss).unwrap();

    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(ParamId(i)).unwrap();
        for j in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            let fp = eval(&plus, Some(&weights)).0;
            let fm = eval(&minus, Some(&weights)).0;
            let numeric = (fp - fm) / (2.0 * H);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < TOL, "input {i} elem {j}: autodiff {a} vs fd {numeric}");
        }
    }
}

fn trials(mut f: impl FnMut(&mut ChaCha8Rng)) {
    for seed in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        f(&mut rng);
    }
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..5)
}

#[test]
fn matmul_shared_rhs() {
    trials(|rng| {
        let (b, m, k, n) = (dim(rng), dim(rng), dim(rng), dim(rng));
        let a = random(rng, &[b, m, k], -1.0, 1.0);
        let w = random(rng, &[k, n], -1.0, 1.0);
        check(vec![a, w], rng, |g, v| g.matmul(v[0], v[1]));
    });
}

#[test]
fn matmul_batched_transposed_rhs() {
    trials(|rng| {
        let (b, m, k, n) = (dim(rng), dim(rng), dim(rng), dim(rng));
        let a = random(rng, &[b, m, k], -1.0, 1.0);
        let w = random(rng, &[b, n, k], -1.0, 1.0);
        check(vec![a, w], rng, |g, v| g.matmul_nt(v[0], v[1]));
    });
}

#[test]
fn matmul_batched_and_shared_transposed() {
    trials(|rng| {
        let (b, m, k, n) = (dim(rng), dim(rng), dim(rng), dim(rng));
        let a = random(rng, &[b, m, k], -1.0, 1.0);
        let w = random(rng, &[b, k, n], -1.0, 1.0);
        check(vec![a.clone(), w], rng, |g, v| g.matmul(v[0], v[1]));
        let w2 = random(rng, &[n, k], -1.0, 1.0);
        check(vec![a, w2], rng, |g, v| g.matmul_nt(v[0], v[1]));
    });
}

#[test]
fn elementwise_binary() {
    trials(|rng| {
        let (r, c) = (dim(rng), dim(rng));
        let a = random(rng, &[r, c], -1.0, 1.0);
        let b = random(rng, &[r, c], -1.0, 1.0);
        let row = random(rng, &[c], -1.0, 1.0);
        check(vec![a.clone(), b.clone()], rng, |g, v| g.add(v[0], v[1]));
        check(vec![a.clone(), b.clone()], rng, |g, v| g.sub(v[0], v[1]));
        check(vec![a.clone(), b], rng, |g, v| g.mul(v[0], v[1]));
        check(vec![a.clone(), row.clone()], rng, |g, v| g.add(v[0], v[1]));
        check(vec![a, row], rng, |g, v| g.mul(v[0], v[1]));
    });
}

#[test]
fn elementwise_unary() {
    trials(|rng| {
        let shape = [dim(rng), dim(rng)];
        let x = random(rng, &shape, -2.0, 2.0);
        check(vec![x.clone()], rng, |g, v| g.scale(v[0], -1.7));
        check(vec![x.clone()], rng, |g, v| g.gelu(v[0]));
        check(vec![x], rng, |g, v| g.square(v[0]));
        check(vec![away_from_zero(rng, &shape)], rng, |g, v| g.relu(v[0]));
        check(vec![random(rng, &shape, 0.2, 3.0)], rng, |g, v| g.log(v[0]));
    });
}

#[test]
fn softmax_family() {
    trials(|rng| {
        let shape = [dim(rng), dim(rng) + 1];
        let x = random(rng, &shape, -3.0, 3.0);
        check(vec![x.clone()], rng, |g, v| g.softmax(v[0]));
        check(vec![x], rng, |g, v| g.log_softmax(v[0]));
    });
}

#[test]
fn layer_norm() {
    trials(|rng| {
        let d = dim(rng) + 1;
        let rows = dim(rng);
        let x = random(rng, &[rows, d], -2.0, 2.0);
        let gamma = random(rng, &[d], 0.5, 1.5);
        let beta = random(rng, &[d], -0.5, 0.5);
        check(vec![x, gamma, beta], rng, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
    });
}

#[test]
fn reductions() {
    trials(|rng| {
        let shape = [dim(rng), dim(rng), dim(rng)];
        let x = random(rng, &shape, -1.0, 1.0);
        let axis = rng.gen_range(0..3);
        check(vec![x.clone()], rng, |g, v| {
            let s = g.sum(v[0])?;
            g.reshape(s, &[1])
        });
        check(vec![x.clone()], rng, |g, v| {
            let s = g.mean(v[0])?;
            g.reshape(s, &[1])
        });
        check(vec![x.clone()], rng, move |g, v| g.sum_axis(v[0], axis));
        check(vec![x], rng, move |g, v| g.mean_axis(v[0], axis));
    });
}

#[test]
fn layout_ops() {
    trials(|rng| {
        let shape = [dim(rng), dim(rng), dim(rng), dim(rng)];
        let x = random(rng, &shape, -1.0, 1.0);
        check(vec![x.clone()], rng, |g, v| g.permute(v[0], &[0, 2, 1, 3]));
        check(vec![x.clone()], rng, |g, v| g.permute(v[0], &[3, 1, 0, 2]));
        let total: usize = shape.iter().product();
        check(vec![x.clone()], rng, move |g, v| g.reshape(v[0], &[total]));
        let axis = rng.gen_range(0..4);
        let len = shape[axis];
        let start = rng.gen_range(0..len);
        check(vec![x.clone()], rng, move |g, v| g.slice(v[0], axis, start, len - start));
        let mut other = shape;
        other[axis] = dim(rng);
        let y = random(rng, &other, -1.0, 1.0);
        check(vec![x, y], rng, move |g, v| g.concat(&[v[0], v[1]], axis));
    });
}

#[test]
fn gather_ops() {
    trials(|rng| {
        let (v, d) = (dim(rng) + 1, dim(rng));
        let table = random(rng, &[v, d], -1.0, 1.0);
        let count = dim(rng) + 2;
        let idx: Vec<usize> = (0..count).map(|_| rng.gen_range(0..v)).collect();
        check(vec![table], rng, move |g, vars| g.embedding(vars[0], &idx));

        let (b, c) = (dim(rng), dim(rng) + 1);
        let x = random(rng, &[b, c], -1.0, 1.0);
        let picks: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        check(vec![x], rng, move |g, vars| g.pick(vars[0], &picks));
    });
}

#[test]
fn pairwise_diff() {
    trials(|rng| {
        let n = dim(rng) + 1;
        let x = random(rng, &[n], -1.0, 1.0);
        check(vec![x], rng, |g, v| g.pairwise_diff(v[0]));
    });
}

#[test]
fn softmax_rows_sum_to_one() {
    trials(|rng| {
        let mut g = Graph::<f32>::new();
        let x = random(rng, &[5, 9], -10.0, 10.0).cast::<f32>();
        let xv = g.constant(x).unwrap();
        let s = g.softmax(xv).unwrap();
        for row in g.value(s).data().chunks(9) {
            let total: f32 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-6, "{total}");
        }
    });
}

#[test]
fn layer_norm_rows_are_standardized() {
    trials(|rng| {
        let mut g = Graph::<f32>::new();
        let d = 32;
        let x = random(rng, &[6, d], -5.0, 5.0).cast::<f32>();
        let xv = g.constant(x).unwrap();
        let gamma = g.constant(Tensor::full(&[d], 1.0)).unwrap();
        let beta = g.constant(Tensor::zeros(&[d])).unwrap();
        let y = g.layer_norm(xv, gamma, beta, 1e-5).unwrap();
        for row in g.value(y).data().chunks(d) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    });
}
