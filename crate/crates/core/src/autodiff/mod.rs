//! Minimal reverse-mode differentiation engine.
//!
//! Supplies exact gradients of scalar losses with respect to inputs and
//! parameters, plus the central-difference oracle used to test them.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{argmax, argmin, Tensor};

/// Central-difference gradient estimate of a scalar-valued function:
/// per coordinate, `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// This is the independent oracle for `Tape::backward` and is also reused by
/// the black-box gradient estimator. `h` must be positive.
pub fn finite_diff_grad(func: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    debug_assert!(h > 0.0);
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = func(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = func(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        let denom = a.abs().max(b.abs()).max(1.0);
        (a - b).abs() / denom <= tol
    }

    fn assert_grad_close(got: &Tensor, want: &Tensor, tol: f64, ctx: &str) {
        for (i, (&g, &w)) in got.data().iter().zip(want.data().iter()).enumerate() {
            assert!(rel_close(g, w, tol), "{ctx}[{i}]: got {g}, want {w}");
        }
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::from_vec(vec![0.0, 0.0]));
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = SeededRng::new(11);
        for _ in 0..50 {
            let data: Vec<f64> = (0..12).map(|_| rng.uniform_in(-30.0, 30.0)).collect();
            let t = Tensor::new(vec![3, 4], data).unwrap();
            let mut tape = Tape::new();
            let x = tape.input(&t);
            let s = tape.softmax(x);
            for row in tape.value(s).data().chunks(4) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_two_class() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::from_vec(vec![0.0, 0.0]));
        let l = tape.cross_entropy(x, &[0]).unwrap();
        assert!((tape.value(l).item() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::from_vec(vec![0.0, 0.0]));
        assert!(tape.cross_entropy(x, &[2]).is_err());
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.input(&Tensor::from_vec(vec![1.0, 2.0]));
        let b = tape.input(&Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn backward_elementwise_square() {
        // d/dx sum(x ⊙ x) at [1,2] = [2,4]
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::from_vec(vec![1.0, 2.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn relu_subgradient_zero_at_kink() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::from_vec(vec![0.0]).with_grad());
        let y = tape.relu(x);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::from_vec(vec![1.0, 2.0]).with_grad());
        let y = tape.relu(x);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::from_vec(vec![1.0]).with_grad());
        let unused = tape.input(&Tensor::from_vec(vec![5.0, 6.0]).with_grad());
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn finite_diff_on_square() {
        let f = |t: &Tensor| t.data()[0] * t.data()[0];
        let g = finite_diff_grad(f, &Tensor::from_vec(vec![3.0]), 1e-3);
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_on_constant_is_zero() {
        let g = finite_diff_grad(|_| 1.25, &Tensor::from_vec(vec![1.0, -2.0, 0.5]), 1e-3);
        assert_eq!(g.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv2d_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(5);
        let x = Tensor::new(
            vec![1, 1, 4, 4],
            (0..16).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
        )
        .unwrap()
        .with_grad();
        let w = Tensor::new(
            vec![2, 1, 3, 3],
            (0..18).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
        )
        .unwrap()
        .with_grad();

        let run = |xv: &Tensor, wv: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let xi = tape.input(xv);
            let wi = tape.input(wv);
            let y = tape.conv2d(xi, wi, None, 1).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let loss = tape.sum(sq);
            tape.value(loss).item()
        };

        let mut tape = Tape::new();
        let xi = tape.input(&x);
        let wi = tape.input(&w);
        let y = tape.conv2d(xi, wi, None, 1).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();

        let fd_x = finite_diff_grad(|p| run(p, &w), &x, 1e-5);
        let fd_w = finite_diff_grad(|p| run(&x, p), &w, 1e-5);
        assert_grad_close(grads.wrt(xi).unwrap(), &fd_x, 1e-4, "conv d_x");
        assert_grad_close(grads.wrt(wi).unwrap(), &fd_w, 1e-4, "conv d_w");
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        let mut rng = SeededRng::new(17);
        let x = Tensor::new(vec![2, 3], (0..6).map(|_| rng.gaussian()).collect())
            .unwrap()
            .with_grad();
        let w1 = Tensor::new(vec![3, 5], (0..15).map(|_| rng.gaussian() * 0.5).collect())
            .unwrap()
            .with_grad();
        let w2 = Tensor::new(vec![5, 4], (0..20).map(|_| rng.gaussian() * 0.5).collect())
            .unwrap()
            .with_grad();
        let labels = [1usize, 3];

        let run = |xv: &Tensor, w1v: &Tensor, w2v: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let xi = tape.input(xv);
            let a = tape.input(w1v);
            let b = tape.input(w2v);
            let h = tape.matmul(xi, a).unwrap();
            let h = tape.relu(h);
            let logits = tape.matmul(h, b).unwrap();
            let loss = tape.cross_entropy(logits, &labels).unwrap();
            tape.value(loss).item()
        };

        let mut tape = Tape::new();
        let xi = tape.input(&x);
        let a = tape.input(&w1);
        let b = tape.input(&w2);
        let h = tape.matmul(xi, a).unwrap();
        let h = tape.relu(h);
        let logits = tape.matmul(h, b).unwrap();
        let loss = tape.cross_entropy(logits, &labels).unwrap();
        let grads = tape.backward(loss).unwrap();

        let fd_x = finite_diff_grad(|p| run(p, &w1, &w2), &x, 1e-5);
        let fd_w1 = finite_diff_grad(|p| run(&x, p, &w2), &w1, 1e-5);
        let fd_w2 = finite_diff_grad(|p| run(&x, &w1, p), &w2, 1e-5);
        assert_grad_close(grads.wrt(xi).unwrap(), &fd_x, 1e-4, "net d_x");
        assert_grad_close(grads.wrt(a).unwrap(), &fd_w1, 1e-4, "net d_w1");
        assert_grad_close(grads.wrt(b).unwrap(), &fd_w2, 1e-4, "net d_w2");
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = SeededRng::new(23);
        let x = Tensor::new(vec![4, 8], (0..32).map(|_| rng.gaussian()).collect())
            .unwrap()
            .with_grad();
        let w = Tensor::new(vec![8, 8], (0..64).map(|_| rng.gaussian()).collect())
            .unwrap()
            .with_grad();
        let run = || {
            let mut tape = Tape::new();
            let xi = tape.input(&x);
            let wi = tape.input(&w);
            let h = tape.matmul(xi, wi).unwrap();
            let h = tape.relu(h);
            let s = tape.softmax(h);
            let l = tape.l2_norm_sq(s);
            let grads = tape.backward(l).unwrap();
            (
                grads.wrt(xi).unwrap().data().to_vec(),
                grads.wrt(wi).unwrap().data().to_vec(),
            )
        };
        let a = run();
        let b = run();
        // Bit-identical, not approximately equal.
        assert_eq!(a, b);
    }

    #[test]
    fn max_pool_first_index_wins_ties() {
        let mut tape = Tape::new();
        let x = tape.input(
            &Tensor::new(vec![1, 1, 2, 2], vec![3.0, 3.0, 3.0, 3.0])
                .unwrap()
                .with_grad(),
        );
        let y = tape.max_pool2(x).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::from_vec(vec![0.2, 0.8]).with_grad());
        // Forward value is arbitrary; backward must be identity.
        let st = tape
            .straight_through(x, Tensor::from_vec(vec![0.0, 1.0]))
            .unwrap();
        let tripled = tape.scalar_mul(st, 3.0);
        let loss = tape.sum(tripled);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[3.0, 3.0]);
    }
}
