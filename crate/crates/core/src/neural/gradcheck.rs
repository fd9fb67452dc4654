//! Central finite differences, the reference for every analytic gradient.

use super::{ParamSet, Tensor};

/// Estimates `df/dp` for every scalar of every parameter by
/// `(f(p + eps) - f(p - eps)) / (2 eps)`.
pub fn finite_diff_grad<F>(mut f: F, params: &ParamSet, eps: f64) -> Vec<Tensor>
where
    F: FnMut(&ParamSet) -> f64,
{
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let shape = params.iter().nth(pi).expect("index").value.shape().to_vec();
        let mut grad = Tensor::zeros(&shape);
        for i in 0..grad.len() {
            let orig = param_data(&mut work, pi)[i];
            param_data(&mut work, pi)[i] = orig + eps;
            let up = f(&work);
            param_data(&mut work, pi)[i] = orig - eps;
            let down = f(&work);
            param_data(&mut work, pi)[i] = orig;
            grad.data_mut()[i] = (up - down) / (2.0 * eps);
        }
        out.push(grad);
    }
    out
}

fn param_data(p: &mut ParamSet, i: usize) -> &mut [f64] {
    p.iter_mut().nth(i).expect("index").value.data_mut()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
