use ndgrad::{par, Graph, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
}

fn shape3() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..6, 3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permute_round_trips(x in shape3().prop_flat_map(tensor), perm in Just([0usize, 1, 2]).prop_shuffle()) {
        let mut inv = [0usize; 3];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let mut g = Graph::new();
        let v = g.constant(x.clone()).unwrap();
        let p = g.permute(v, &perm).unwrap();
        let back = g.permute(p, &inv).unwrap();
        prop_assert_eq!(g.value(back), &x);
    }

    #[test]
    fn softmax_rows_are_distributions(x in shape3().prop_flat_map(tensor)) {
        let mut g = Graph::new();
        let v = g.constant(x.clone()).unwrap();
        let s = g.softmax(v).unwrap();
        let n = *x.shape().last().unwrap();
        for row in g.value(s).data().chunks(n) {
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_matches_the_textbook_loop(
        (m, k, n) in (1usize..7, 1usize..7, 1usize..7),
        seed in any::<u64>(),
    ) {
        let val = |i: usize| (((seed ^ i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 40) as f64 / (1u64 << 24) as f64) - 0.5;
        let a: Vec<f64> = (0..m * k).map(val).collect();
        let b: Vec<f64> = (0..k * n).map(|i| val(i + 1000)).collect();
        let mut g = Graph::new();
        let av = g.constant(Tensor::new(vec![m, k], a.clone()).unwrap()).unwrap();
        let bv = g.constant(Tensor::new(vec![k, n], b.clone()).unwrap()).unwrap();
        let c = g.matmul(av, bv).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut want = 0.0;
                for t in 0..k {
                    want += a[i * k + t] * b[t * n + j];
                }
                prop_assert!((g.value(c).data()[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parallel_rows_do_not_change_bits(rows in 256usize..300, seed in any::<u32>()) {
        let (k, n) = (16, 128);
        let a: Vec<f32> = (0..rows * k).map(|i| ((i as u32 ^ seed) % 97) as f32 / 97.0 - 0.5).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i as u32).wrapping_mul(31) ^ seed) as f32 % 13.0 / 13.0).collect();
        let run = |parallel| {
            par::set_enabled(parallel);
            let mut g = Graph::new();
            let av = g.constant(Tensor::new(vec![rows, k], a.clone()).unwrap()).unwrap();
            let bv = g.constant(Tensor::new(vec![k, n], b.clone()).unwrap()).unwrap();
            let c = g.matmul(av, bv).unwrap();
            let s = g.softmax(c).unwrap();
            g.value(s).data().to_vec()
        };
        let seq = run(false);
        let par_out = run(true);
        prop_assert_eq!(seq, par_out);
    }
}
