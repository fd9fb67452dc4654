//! Layer primitives with hand-derived backward passes. Activations are
//! `[batch, features]` matrices; a 1-D tensor is treated as a batch of one.

use rand::Rng;

use super::tensor::gemm;
use super::{init_uniform, NeuralError, ParamId, ParamSet, Result, Tensor};

fn as_rows(x: &Tensor, width: usize, op: &'static str) -> Result<usize> {
    if x.cols() != width || x.shape().len() > 2 {
        return Err(NeuralError::ShapeMismatch {
            op,
            expected: vec![x.rows(), width],
            found: x.shape().to_vec(),
        });
    }
    Ok(x.rows())
}

/// `y = x W + b` with `W: [n_in, n_out]`.
pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n_in, n_out] = w.shape() else {
        return Err(NeuralError::ShapeMismatch {
            op: "dense",
            expected: vec![0, 0],
            found: w.shape().to_vec(),
        });
    };
    let (n_in, n_out) = (*n_in, *n_out);
    if b.len() != n_out {
        return Err(NeuralError::ShapeMismatch {
            op: "dense bias",
            expected: vec![n_out],
            found: b.shape().to_vec(),
        });
    }
    let rows = as_rows(x, n_in, "dense input")?;
    let mut y = Vec::with_capacity(rows * n_out);
    for _ in 0..rows {
        y.extend_from_slice(b.data());
    }
    gemm(rows, n_in, n_out, x.data(), false, w.data(), false, 1.0, &mut y);
    Ok(Tensor::matrix(rows, n_out, y))
}

pub struct DenseGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

/// Gradients of `dense` given upstream gradient `dy: [batch, n_out]`.
pub fn dense_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> DenseGrads {
    let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
    let rows = x.rows();
    let mut dw = vec![0.0; n_in * n_out];
    gemm(n_in, rows, n_out, x.data(), true, dy.data(), false, 0.0, &mut dw);
    let mut db = vec![0.0; n_out];
    for r in 0..rows {
        for (acc, g) in db.iter_mut().zip(dy.row(r)) {
            *acc += g;
        }
    }
    let mut dx = vec![0.0; rows * n_in];
    gemm(rows, n_out, n_in, dy.data(), false, w.data(), true, 0.0, &mut dx);
    DenseGrads {
        dx: Tensor::matrix(rows, n_in, dx),
        dw: Tensor::matrix(n_in, n_out, dw),
        db: Tensor::vector(db),
    }
}

/// A dense layer whose weights live in a [`ParamSet`] as `<prefix>.w` and
/// `<prefix>.b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    w: ParamId,
    b: ParamId,
}

impl Dense {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        n_in: usize,
        n_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = params.add(
            format!("{prefix}.w"),
            init_uniform(rng, &[n_in, n_out], n_in, n_out),
        )?;
        let b = params.add(format!("{prefix}.b"), Tensor::zeros(&[n_out]))?;
        Ok(Dense { n_in, n_out, w, b })
    }

    pub fn forward(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        dense(x, params.value(self.w), params.value(self.b))
    }

    /// Accumulates weight gradients into `params`; returns `dL/dx`.
    pub fn backward(&self, params: &mut ParamSet, x: &Tensor, dy: &Tensor) -> Tensor {
        let g = dense_backward(x, params.value(self.w), dy);
        params.accumulate(self.w, &g.dw);
        params.accumulate(self.b, &g.db);
        g.dx
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }
}

/// `max(x, 0)`.
pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Subgradient at exactly 0 is 0.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    x.zip_map(dy, |v, g| if v > 0.0 { g } else { 0.0 })
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Takes the forward output `y = sigmoid(x)`.
pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    y.zip_map(dy, |s, g| g * s * (1.0 - s))
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

/// Takes the forward output `y = tanh(x)`.
pub fn tanh_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    y.zip_map(dy, |t, g| g * (1.0 - t * t))
}

/// Winning time step per `(row, feature)` from [`maxpool_time_forward`].
#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    argmax: Vec<usize>,
    steps: usize,
    rows: usize,
    cols: usize,
}

/// Elementwise max over a sequence of equally shaped `[batch, h]` steps.
/// Ties go to the earliest step.
pub fn maxpool_time_forward(steps: &[Tensor]) -> Result<(Tensor, MaxPoolCache)> {
    let first = steps.first().ok_or(NeuralError::ShapeMismatch {
        op: "maxpool_time",
        expected: vec![1],
        found: vec![0],
    })?;
    let (rows, cols) = (first.rows(), first.cols());
    let mut out = first.data().to_vec();
    let mut argmax = vec![0usize; rows * cols];
    for (t, s) in steps.iter().enumerate().skip(1) {
        if s.len() != out.len() {
            return Err(NeuralError::ShapeMismatch {
                op: "maxpool_time",
                expected: first.shape().to_vec(),
                found: s.shape().to_vec(),
            });
        }
        for ((o, a), &v) in out.iter_mut().zip(argmax.iter_mut()).zip(s.data()) {
            if v > *o {
                *o = v;
                *a = t;
            }
        }
    }
    let cache = MaxPoolCache {
        argmax,
        steps: steps.len(),
        rows,
        cols,
    };
    Ok((Tensor::matrix(rows, cols, out), cache))
}

/// Routes each incoming gradient to the step that won the max.
pub fn maxpool_time_backward(cache: &MaxPoolCache, dy: &Tensor) -> Vec<Tensor> {
    let mut grads = vec![Tensor::zeros(&[cache.rows, cache.cols]); cache.steps];
    for (i, (&t, &g)) in cache.argmax.iter().zip(dy.data()).enumerate() {
        grads[t].data_mut()[i] += g;
    }
    grads
}

/// Max over the time (row) axis of `hs: [T, h]`, giving `[h]`.
pub fn maxpool_time(hs: &Tensor) -> Result<Tensor> {
    let steps: Vec<Tensor> = (0..hs.rows())
        .map(|t| Tensor::vector(hs.row(t).to_vec()))
        .collect();
    let (out, _) = maxpool_time_forward(&steps)?;
    out.reshape(&[hs.cols()])
}

/// Mean squared error over all elements, with its gradient w.r.t. `pred`.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(NeuralError::ShapeMismatch {
            op: "mse",
            expected: target.shape().to_vec(),
            found: pred.shape().to_vec(),
        });
    }
    let n = pred.len() as f64;
    let diff = pred.zip_map(target, |p, t| p - t);
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    let grad = diff.map(|d| 2.0 * d / n);
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::gradcheck::{finite_diff_grad, relative_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn dense_identity_and_bias() {
        let x = Tensor::vector(vec![1.0, -2.0, 3.0]);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let y = dense(&x, &eye, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y.data(), x.data());
        let b = Tensor::vector(vec![0.5, 0.25]);
        let y = dense(&Tensor::zeros(&[2]), &Tensor::filled(&[2, 2], 9.0), &b).unwrap();
        assert_eq!(y.data(), b.data());
        assert!(dense(&x, &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2])).is_err());
        assert!(dense(&x, &eye, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut params = ParamSet::new();
            let layer = Dense::register(&mut params, "d", 5, 3, &mut rng).unwrap();
            for v in params.value_mut(layer.bias()).data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let x = rand_tensor(&mut rng, &[4, 5]);
            let target = rand_tensor(&mut rng, &[4, 3]);
            let loss = |p: &ParamSet| mse(&layer.forward(p, &x).unwrap(), &target).unwrap().0;

            let y = layer.forward(&params, &x).unwrap();
            let (_, dy) = mse(&y, &target).unwrap();
            let dx = layer.backward(&mut params, &x, &dy);
            let numeric = finite_diff_grad(loss, &params, 1e-6);
            for (p, n) in params.iter().zip(&numeric) {
                assert!(relative_error(p.grad.data(), n.data()) < 1e-6, "seed {seed} {}", p.name);
            }

            // input gradient through a parameter wrapper
            let mut xp = ParamSet::new();
            let xid = xp.add("x", x.clone()).unwrap();
            let f = |q: &ParamSet| mse(&layer.forward(&params, q.value(xid)).unwrap(), &target).unwrap().0;
            let nx = finite_diff_grad(f, &xp, 1e-6);
            assert!(relative_error(dx.data(), nx[0].data()) < 1e-6);
        }
    }

    #[test]
    fn relu_values() {
        let y = relu(&Tensor::vector(vec![-1.0, 2.0, 0.0]));
        assert_eq!(y.data(), &[0.0, 2.0, 0.0]);
        let g = relu_backward(&Tensor::vector(vec![-1.0, 2.0, 0.0]), &Tensor::vector(vec![1.0; 3]));
        assert_eq!(g.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn sigmoid_tanh_values_and_stability() {
        assert_eq!(sigmoid(&Tensor::vector(vec![0.0])).data(), &[0.5]);
        assert_eq!(tanh(&Tensor::vector(vec![0.0])).data(), &[0.0]);
        let big = sigmoid(&Tensor::vector(vec![-500.0, 500.0]));
        assert!(big.is_finite());
        assert!(big.data()[0] >= 0.0 && big.data()[0] < 1e-200);
        assert_eq!(big.data()[1], 1.0);
        assert!(tanh(&Tensor::vector(vec![-500.0, 500.0])).is_finite());
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut p = ParamSet::new();
            let id = p.add("x", rand_tensor(&mut rng, &[2, 6])).unwrap();
            let w = rand_tensor(&mut rng, &[2, 6]);
            let weighted = |y: &Tensor| y.zip_map(&w, |a, b| a * b).sum();
            let x = p.value(id).clone();

            let ys = sigmoid(&x);
            let gs = sigmoid_backward(&ys, &w);
            let ns = finite_diff_grad(|q: &ParamSet| weighted(&sigmoid(q.value(id))), &p, 1e-5);
            assert!(relative_error(gs.data(), ns[0].data()) < 1e-8);

            let yt = tanh(&x);
            let gt = tanh_backward(&yt, &w);
            let nt = finite_diff_grad(|q: &ParamSet| weighted(&tanh(q.value(id))), &p, 1e-5);
            assert!(relative_error(gt.data(), nt[0].data()) < 1e-8);

            let gr = relu_backward(&x, &w);
            let nr = finite_diff_grad(|q: &ParamSet| weighted(&relu(q.value(id))), &p, 1e-6);
            assert!(relative_error(gr.data(), nr[0].data()) < 1e-8);
        }
    }

    #[test]
    fn maxpool_columnwise() {
        let hs = Tensor::matrix(2, 2, vec![1.0, 5.0, 3.0, 2.0]);
        assert_eq!(maxpool_time(&hs).unwrap().data(), &[3.0, 5.0]);
        let one = Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]);
        assert_eq!(maxpool_time(&one).unwrap().data(), one.data());
        assert!(maxpool_time_forward(&[]).is_err());
    }

    #[test]
    fn maxpool_ties_route_to_first_step() {
        let steps = vec![Tensor::vector(vec![1.0]), Tensor::vector(vec![1.0])];
        let (_, cache) = maxpool_time_forward(&steps).unwrap();
        let g = maxpool_time_backward(&cache, &Tensor::vector(vec![2.0]));
        assert_eq!(g[0].data(), &[2.0]);
        assert_eq!(g[1].data(), &[0.0]);
    }

    #[test]
    fn mse_values() {
        let t = Tensor::vector(vec![1.0; 24]);
        assert_eq!(mse(&t, &t).unwrap().0, 0.0);
        let p = Tensor::vector(vec![2.0; 24]);
        let (l, g) = mse(&p, &t).unwrap();
        assert_eq!(l, 1.0);
        assert!(g.data().iter().all(|&x| (x - 2.0 / 24.0).abs() < 1e-15));
        assert!(mse(&Tensor::vector(vec![0.0; 3]), &t).is_err());
    }

    proptest! {
        #[test]
        fn relu_idempotent(xs in prop::collection::vec(-1e3f64..1e3, 1..50)) {
            let x = Tensor::vector(xs);
            let once = relu(&x);
            prop_assert_eq!(relu(&once), once.clone());
            for (a, b) in once.data().iter().zip(x.data()) {
                prop_assert_eq!(*a, b.max(0.0));
            }
        }

        #[test]
        fn sigmoid_symmetry(xs in prop::collection::vec(-50f64..50.0, 1..50)) {
            let x = Tensor::vector(xs);
            let pos = sigmoid(&x);
            let neg = sigmoid(&x.map(|v| -v));
            for (a, b) in pos.data().iter().zip(neg.data()) {
                prop_assert!((a - (1.0 - b)).abs() < 1e-15);
            }
        }

        #[test]
        fn maxpool_matches_oracle_and_conserves_gradient(
            t in 1usize..8, h in 1usize..6,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let steps: Vec<Tensor> = (0..t).map(|_| rand_tensor(&mut rng, &[2, h])).collect();
            let (out, cache) = maxpool_time_forward(&steps).unwrap();
            for i in 0..2 * h {
                let oracle = steps.iter().map(|s| s.data()[i]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(out.data()[i], oracle);
            }
            let dy = rand_tensor(&mut rng, &[2, h]);
            let grads = maxpool_time_backward(&cache, &dy);
            for i in 0..2 * h {
                let routed: f64 = grads.iter().map(|g| g.data()[i]).sum();
                prop_assert_eq!(routed, dy.data()[i]);
            }
        }

        #[test]
        fn mse_gradient_closed_form(p in prop::collection::vec(-10f64..10.0, 24), q in prop::collection::vec(-10f64..10.0, 24)) {
            let (l, g) = mse(&Tensor::vector(p.clone()), &Tensor::vector(q.clone())).unwrap();
            let oracle: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 24.0;
            prop_assert!((l - oracle).abs() <= 1e-12 * oracle.max(1.0));
            for ((gi, a), b) in g.data().iter().zip(&p).zip(&q) {
                prop_assert!((gi - 2.0 * (a - b) / 24.0).abs() < 1e-15);
            }
        }
    }
}
