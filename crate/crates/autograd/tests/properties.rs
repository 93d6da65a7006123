use ndarray::Array2;
use proptest::prelude::*;
use tim_autograd::{Tape, Var};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn max_fd_error<F>(x: &Array2<f64>, build: F) -> f64
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let v = tape.input(x.clone());
    let loss = build(&mut tape, v);
    let grad = tape.backward(loss).wrt(v).cloned().unwrap_or_else(|| Array2::zeros(x.raw_dim()));
    let eval = |y: &Array2<f64>| {
        let mut t = Tape::new();
        let v = t.input(y.clone());
        let l = build(&mut t, v);
        t.scalar(l)
    };
    let mut worst: f64 = 0.0;
    for ((r, c), &a) in grad.indexed_iter() {
        let h = 1e-5;
        let mut plus = x.clone();
        plus[[r, c]] += h;
        let mut minus = x.clone();
        minus[[r, c]] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4));
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn smooth_chain_matches_finite_differences(x in matrix(3, 4), w in matrix(4, 5)) {
        let err = max_fd_error(&x, |t, v| {
            let w = t.constant(w.clone());
            let gamma = t.constant(Array2::from_elem((1, 5), 1.3));
            let beta = t.constant(Array2::from_elem((1, 5), -0.2));
            let h = t.matmul(v, w);
            let h = t.layer_norm(h, gamma, beta, 1e-5);
            let h = t.gelu(h);
            let h = t.sigmoid(h);
            t.sum(h)
        });
        prop_assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn backward_is_linear_in_the_loss(x in matrix(2, 3), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let grad_of = |ca: f64, cb: f64| {
            let mut t = Tape::new();
            let v = t.input(x.clone());
            let g = t.gelu(v);
            let s1 = t.sum(g);
            let sq = t.mul(v, v);
            let s2 = t.mean(sq);
            let loss = t.weighted_sum(&[(s1, ca), (s2, cb)]);
            t.backward(loss).wrt(v).cloned().unwrap()
        };
        let combined = grad_of(a, b);
        let split = grad_of(a, 0.0) + grad_of(0.0, b);
        for (p, q) in combined.iter().zip(split.iter()) {
            prop_assert!((p - q).abs() <= 1e-12 * (1.0 + p.abs()));
        }
    }

    #[test]
    fn gather_and_concat_route_gradients(x in matrix(4, 2), idx in prop::collection::vec(0usize..4, 1..6)) {
        let mut t = Tape::new();
        let v = t.input(x.clone());
        let g = t.gather_rows(v, &idx);
        let c = t.concat_rows(&[g, v]);
        let loss = t.sum(c);
        let grad = t.backward(loss).wrt(v).cloned().unwrap();
        for r in 0..4 {
            let expected = 1.0 + idx.iter().filter(|&&i| i == r).count() as f64;
            for col in 0..2 {
                prop_assert_eq!(grad[[r, col]], expected);
            }
        }
    }
}
