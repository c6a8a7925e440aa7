//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod graph;
pub mod nn;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::{broadcast_shape, Tensor};

/// Central finite-difference gradient of a scalar function.
pub fn finite_difference(f: impl Fn(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// `|a - b| / max(|a|, |b|, floor)` maximised over elements.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Analytic gradient of `f` at `x` via the tape.
pub fn analytic_gradient(f: impl for<'g> Fn(Var<'g>) -> Var<'g>, x: &Tensor) -> (f64, Tensor) {
    let g = Graph::new();
    let v = g.leaf(x.clone());
    let out = f(v);
    let value = out.item();
    let mut grads = g.backward(out);
    (value, grads.take(v).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn hr<F: for<'g> Fn(Var<'g>) -> Var<'g>>(f: F) -> F {
        f
    }

    fn check(f: impl for<'g> Fn(Var<'g>) -> Var<'g>, x: &Tensor) {
        let (_, analytic) = analytic_gradient(&f, x);
        let numeric = finite_difference(
            |t| {
                let g = Graph::new();
                f(g.constant(t.clone())).item()
            },
            x,
            1e-5,
        );
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-5, "relative error {err}: {analytic:?} vs {numeric:?}");
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[3, 4], &mut rng);
        check(|v| v.exp().mul(v).tanh().sum(), &x);
        check(|v| v.sigmoid().square().mean(), &x);
        check(|v| v.square().add_scalar(0.5).log().sum(), &x);
        check(|v| v.add_scalar(2.0).sqrt().div(v.square().add_scalar(1.0)).sum(), &x);
        check(|v| v.relu().mul_scalar(3.0).sum(), &x);
    }

    #[test]
    fn broadcasting_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[2, 3, 4], &mut rng);
        check(|v| v.mul(v.mean_axis(2, true)).sum_axis(1, false).square().sum(), &x);
        check(|v| v.sub(v.narrow(0, 0, 1)).square().sum(), &x);
        check(|v| v.permute(&[2, 0, 1]).reshape(&[4, 6]).log_softmax().narrow(1, 2, 3).sum(), &x);
        check(|v| v.softmax().mul(v).sum(), &x);
        check(|v| v.l2_normalize(1e-12).index_select(&[1, 1, 0]).square().mul(v.index_select(&[0, 1, 0])).sum(), &x);
        check(|v| v.gather_flat(&[0, 5, 5, 23]).square().sum(), &x);
        check(|v| Var::concat(&[v, v.exp()], 1).norm_last().sum(), &x);
    }

    #[test]
    fn matmul_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[2, 3, 3], &mut rng);
        let c = rand_tensor(&[2, 3, 3], &mut rng);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let c2 = c.clone();
            let f = hr(move |v| {
                let k = v.graph().constant(c2.clone());
                v.matmul_t(k, ta, tb).square().sum().add(k.matmul_t(v, tb, ta).mul(k).sum())
            });
            let (_, analytic) = analytic_gradient(&f, &x);
            let numeric = finite_difference(|t| f(Graph::new().constant(t.clone())).item(), &x, 1e-5);
            assert!(max_relative_error(&analytic, &numeric, 1e-6) < 1e-5);
        }
    }

    #[test]
    fn conv2d_gradients_for_input_and_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&[2, 2, 5, 4], &mut rng);
        let k = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let kk = k.clone();
        check(move |v| v.conv2d(v.graph().constant(kk.clone()), 2, 1).square().sum(), &x);
        let xx = x.clone();
        check(move |w| w.graph().constant(xx.clone()).conv2d(w, 1, 1).tanh().sum(), &k);
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[1, 2, 4, 5], &mut rng);
        let k = rand_tensor(&[2, 2, 3, 3], &mut rng);
        let g = Graph::new();
        let y = g.constant(x.clone()).conv2d(g.constant(k.clone()), 1, 1).value();
        for o in 0..2 {
            for i in 0..4i64 {
                for j in 0..5i64 {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for m in -1..=1i64 {
                            for n in -1..=1i64 {
                                let (yy, xx) = (i + m, j + n);
                                if (0..4).contains(&yy) && (0..5).contains(&xx) {
                                    acc += x.data()[(c * 4 + yy as usize) * 5 + xx as usize]
                                        * k.data()[((o * 2 + c) * 3 + (m + 1) as usize) * 3 + (n + 1) as usize];
                                }
                            }
                        }
                    }
                    let got = y.data()[(o * 4 + i as usize) * 5 + j as usize];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let x = Tensor::new(vec![1], vec![3.0]);
        let (v, g) = analytic_gradient(|v| v.mul(v).add(v).sum(), &x);
        assert_eq!(v, 12.0);
        assert_eq!(g.data(), &[7.0]);
    }
}
