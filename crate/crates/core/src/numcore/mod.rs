//! Dense `f64` tensors and a reverse-mode autodiff tape.

mod graph;
mod tensor;

pub use graph::{log_sum_exp, sigmoid, Graph, NodeId, MIN_ROW_NORM};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Tensor, h: f64, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt()
            + b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let i2 = Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap();
        let a = g.constant(i2.clone());
        let b = g.constant(i2.clone());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &i2);

        let m = g.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let ones = g.constant(Tensor::matrix(2, 1, vec![1., 1.]).unwrap());
        let p = g.matmul(m, ones).unwrap();
        assert_eq!(g.value(p).data(), &[3., 7.]);
        assert_eq!(g.value(p).shape(), &[2, 1]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matmul_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a0 = random_tensor(&mut rng, &[3, 4]);
        let b0 = random_tensor(&mut rng, &[4, 2]);
        let w = random_tensor(&mut rng, &[3, 2]);
        let forward = |a: &Tensor, b: &Tensor| -> f64 {
            let c = a.matmul(b).unwrap();
            c.data().iter().zip(w.data()).map(|(x, y)| x * y).sum()
        };
        let mut g = Graph::new();
        let a = g.param(a0.clone());
        let b = g.param(b0.clone());
        let c = g.matmul(a, b).unwrap();
        let wn = g.constant(w.clone());
        let prod = g.mul(c, wn).unwrap();
        let loss = g.sum(prod).unwrap();
        g.backward(loss).unwrap();
        let na = numeric_grad(&a0, 1e-5, &|x| forward(x, &b0));
        let nb = numeric_grad(&b0, 1e-5, &|x| forward(&a0, x));
        assert!(rel_err(g.grad(a).unwrap().data(), &na) < 1e-6);
        assert!(rel_err(g.grad(b).unwrap().data(), &nb) < 1e-6);
    }

    #[test]
    fn relu_values_and_gradients() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(r).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![-3.0, -0.5]).unwrap());
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0]);
        let s = g.sum(r).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_gradcheck_away_from_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x0 = random_tensor(&mut rng, &[4, 3]);
        for v in x0.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        let w = random_tensor(&mut rng, &[4, 3]);
        let f = |x: &Tensor| -> f64 {
            x.data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| a.max(0.0) * b)
                .sum()
        };
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let r = g.relu(x).unwrap();
        let wn = g.constant(w.clone());
        let p = g.mul(r, wn).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss).unwrap();
        assert!(rel_err(g.grad(x).unwrap().data(), &numeric_grad(&x0, 1e-5, &f)) < 1e-6);
    }

    #[test]
    fn l2_normalize_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
        let y = g.l2_normalize(x).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);

        let u = g.constant(Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap());
        let y = g.l2_normalize(u).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 0.0]);

        let z = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        assert!(matches!(
            g.l2_normalize(z),
            Err(Error::DegenerateInput { .. })
        ));
    }

    #[test]
    fn l2_normalize_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = random_tensor(&mut rng, &[3, 4]);
        let w = random_tensor(&mut rng, &[3, 4]);
        let f = |x: &Tensor| -> f64 {
            let mut total = 0.0;
            for i in 0..x.rows() {
                let row = x.row(i);
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                total += row
                    .iter()
                    .zip(w.row(i))
                    .map(|(a, b)| a / n * b)
                    .sum::<f64>();
            }
            total
        };
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let y = g.l2_normalize(x).unwrap();
        let wn = g.constant(w.clone());
        let p = g.mul(y, wn).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss).unwrap();
        assert!(rel_err(g.grad(x).unwrap().data(), &numeric_grad(&x0, 1e-5, &f)) < 1e-5);
    }

    #[test]
    fn log_sum_exp_cases() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let l = g.log_sum_exp(a).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

        for c in [-700.0, -3.5, 0.0, 42.0, 1e6] {
            let a = g.constant(Tensor::vector(vec![c]).unwrap());
            let l = g.log_sum_exp(a).unwrap();
            assert_eq!(g.value(l).item(), c);
        }

        let big = g.constant(Tensor::vector(vec![1000.0, 1000.0]).unwrap());
        let l = g.log_sum_exp(big).unwrap();
        assert!((g.value(l).item() - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);

        assert_eq!(log_sum_exp(&[]), None);
    }

    #[test]
    fn backward_simple_rules() {
        let mut g = Graph::new();
        let w0 = Tensor::matrix(2, 3, vec![1., -2., 3., 0.5, 0., -1.]).unwrap();
        let w = g.param(w0.clone());
        let s = g.sum(w).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &Tensor::ones(&[2, 3]));

        let mut g = Graph::new();
        let w = g.param(w0.clone());
        let sq = g.mul(w, w).unwrap();
        let dot = g.sum(sq).unwrap();
        g.backward(dot).unwrap();
        let expected: Vec<f64> = w0.data().iter().map(|x| 2.0 * x).collect();
        assert_eq!(g.grad(w).unwrap().data(), expected.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[4.0, 8.0]);
        g.zero_grad();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn shared_node_sums_contributions() {
        // y = relu(x) used twice: loss = sum(y * y) + sum(y)
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = random_tensor(&mut rng, &[5]);
        let f =
            |x: &Tensor| -> f64 { x.data().iter().map(|v| v.max(0.0)).map(|y| y * y + y).sum() };
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let y = g.relu(x).unwrap();
        let yy = g.mul(y, y).unwrap();
        let a = g.sum(yy).unwrap();
        let b = g.sum(y).unwrap();
        let loss = g.add(a, b).unwrap();
        g.backward(loss).unwrap();
        assert!(rel_err(g.grad(x).unwrap().data(), &numeric_grad(&x0, 1e-5, &f)) < 1e-6);
    }

    #[test]
    fn ops_do_not_touch_inputs() {
        let t = Tensor::matrix(2, 2, vec![1., -2., 3., 4.]).unwrap();
        let copy = t.clone();
        let mut g = Graph::new();
        let a = g.param(t.clone());
        let r = g.relu(a).unwrap();
        let n = g.l2_normalize(r).unwrap();
        let tr = g.transpose(n).unwrap();
        let s = g.sum(tr).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.value(a), &copy);
        assert_eq!(t, copy);
    }

    #[test]
    fn non_finite_fails_loudly() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1e308, 1e308]).unwrap());
        assert!(matches!(
            g.scale(a, 10.0),
            Err(Error::NonFinite { op: "scale" })
        ));
    }

    #[test]
    fn bce_masks_unknown_entries() {
        let mut g = Graph::new();
        let logits = g.param(Tensor::matrix(2, 2, vec![0.3, -1.0, 2.0, 0.5]).unwrap());
        let targets = Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap();
        let mask = Tensor::matrix(2, 2, vec![1., 0., 1., 1.]).unwrap();
        let loss = g.bce_with_logits(logits, &targets, &mask).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(logits).unwrap().data();
        assert_eq!(grad[1], 0.0);
        let expected = (sigmoid(0.3) - 1.0) / 3.0;
        assert!((grad[0] - expected).abs() < 1e-15);
        let manual = ((1.0 + (-0.3f64).exp()).ln()
            + (1.0 + 2.0f64.exp()).ln()
            + (1.0 + (-0.5f64).exp()).ln())
            / 3.0;
        assert!((g.value(loss).item() - manual).abs() < 1e-12);
    }

    #[test]
    fn gather_and_stack_gradients() {
        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let picked = g.gather(x, &[0, 3, 3]).unwrap();
        assert_eq!(g.value(picked).data(), &[1., 4., 4.]);
        let s = g.sum(picked).unwrap();
        let m = g.mean(x).unwrap();
        let st = g.stack(&[s, m]).unwrap();
        let loss = g.sum(st).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.25, 0.25, 0.25, 2.25]);
    }
}
