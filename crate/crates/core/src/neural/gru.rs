//! Gated recurrent unit with backpropagation through time.
//!
//! For input `x_t` and previous state `s_{t-1}` (row vectors):
//!
//! ```text
//! r_t = sigmoid(x_t U_r + s_{t-1} W_r + b_r)
//! z_t = sigmoid(x_t U_z + s_{t-1} W_z + b_z)
//! h   = tanh(x_t U_h + r_t * (s_{t-1} W_h) + b_h)
//! s_t = z_t * s_{t-1} + (1 - z_t) * h
//! ```
//!
//! Note the reset gate multiplies `s_{t-1} W_h` after the matrix product.

use rand::Rng;

use super::ops::sigmoid_scalar;
use super::tensor::gemm;
use super::{init_uniform, NeuralError, ParamId, ParamSet, Result, Tensor};

const NAMES: [&str; 9] = ["ur", "wr", "br", "uz", "wz", "bz", "uh", "wh", "bh"];
const UR: usize = 0;
const WR: usize = 1;
const BR: usize = 2;
const UZ: usize = 3;
const WZ: usize = 4;
const BZ: usize = 5;
const UH: usize = 6;
const WH: usize = 7;
const BH: usize = 8;

/// GRU layer with input width `d` and state width `h`; parameters are
/// registered as `<prefix>.{ur,wr,br,uz,wz,bz,uh,wh,bh}`.
#[derive(Debug, Clone)]
pub struct Gru {
    pub d: usize,
    pub h: usize,
    ids: [ParamId; 9],
}

/// Forward intermediates of one step.
#[derive(Debug, Clone)]
pub struct GruStep {
    x: Tensor,
    s_prev: Tensor,
    r: Vec<f64>,
    z: Vec<f64>,
    cand: Vec<f64>,
    // s_{t-1} W_h, before the reset gate
    wh_s: Vec<f64>,
}

impl GruStep {
    pub fn reset_gate(&self) -> &[f64] {
        &self.r
    }

    pub fn update_gate(&self) -> &[f64] {
        &self.z
    }

    pub fn candidate(&self) -> &[f64] {
        &self.cand
    }
}

impl Gru {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        d: usize,
        h: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut ids = Vec::with_capacity(9);
        for name in NAMES {
            let value = match name.as_bytes()[0] {
                b'u' => init_uniform(rng, &[d, h], d, h),
                b'w' => init_uniform(rng, &[h, h], h, h),
                _ => Tensor::zeros(&[h]),
            };
            ids.push(params.add(format!("{prefix}.{name}"), value)?);
        }
        Ok(Gru {
            d,
            h,
            ids: ids.try_into().expect("nine ids"),
        })
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        NAMES.iter().position(|n| *n == name).map(|i| self.ids[i])
    }

    fn p<'a>(&self, params: &'a ParamSet, i: usize) -> &'a [f64] {
        params.value(self.ids[i]).data()
    }

    fn check(&self, x: &Tensor, s_prev: &Tensor) -> Result<usize> {
        let rows = x.rows();
        if x.cols() != self.d || x.shape().len() > 2 {
            return Err(NeuralError::ShapeMismatch {
                op: "gru input",
                expected: vec![rows, self.d],
                found: x.shape().to_vec(),
            });
        }
        if s_prev.cols() != self.h || s_prev.rows() != rows {
            return Err(NeuralError::ShapeMismatch {
                op: "gru state",
                expected: vec![rows, self.h],
                found: s_prev.shape().to_vec(),
            });
        }
        Ok(rows)
    }

    fn affine(&self, params: &ParamSet, rows: usize, x: &[f64], u: usize, s: Option<(&[f64], usize)>, b: usize) -> Vec<f64> {
        let (d, h) = (self.d, self.h);
        let mut out = Vec::with_capacity(rows * h);
        for _ in 0..rows {
            out.extend_from_slice(self.p(params, b));
        }
        gemm(rows, d, h, x, false, self.p(params, u), false, 1.0, &mut out);
        if let Some((s, w)) = s {
            gemm(rows, h, h, s, false, self.p(params, w), false, 1.0, &mut out);
        }
        out
    }

    /// One step; returns `s_t` and the intermediates needed by
    /// [`Gru::cell_backward`].
    pub fn cell_forward(&self, params: &ParamSet, x: &Tensor, s_prev: &Tensor) -> Result<(Tensor, GruStep)> {
        let rows = self.check(x, s_prev)?;
        let h = self.h;
        let (xd, sd) = (x.data(), s_prev.data());

        let mut r = self.affine(params, rows, xd, UR, Some((sd, WR)), BR);
        r.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
        let mut z = self.affine(params, rows, xd, UZ, Some((sd, WZ)), BZ);
        z.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));

        let mut wh_s = vec![0.0; rows * h];
        gemm(rows, h, h, sd, false, self.p(params, WH), false, 0.0, &mut wh_s);
        let mut cand = self.affine(params, rows, xd, UH, None, BH);
        for ((c, &rv), &w) in cand.iter_mut().zip(&r).zip(&wh_s) {
            *c = (*c + rv * w).tanh();
        }

        let s: Vec<f64> = z
            .iter()
            .zip(sd)
            .zip(&cand)
            .map(|((&zv, &sp), &c)| zv * sp + (1.0 - zv) * c)
            .collect();
        let step = GruStep {
            x: x.clone(),
            s_prev: s_prev.clone(),
            r,
            z,
            cand,
            wh_s,
        };
        Ok((Tensor::matrix(rows, h, s), step))
    }

    /// Backward through one step given `ds = dL/ds_t`. Adds parameter
    /// gradients to `grads`; returns `(dL/dx_t, dL/ds_{t-1})`.
    pub fn cell_backward(&self, params: &ParamSet, step: &GruStep, ds: &Tensor, grads: &mut GruGrads) -> (Tensor, Tensor) {
        let (d, h) = (self.d, self.h);
        let rows = step.x.rows();
        let n = rows * h;
        let sp = step.s_prev.data();
        let dsd = ds.data();

        let mut ds_prev = vec![0.0; n];
        let mut da_r = vec![0.0; n];
        let mut da_z = vec![0.0; n];
        let mut da_h = vec![0.0; n];
        let mut d_whs = vec![0.0; n];
        for i in 0..n {
            let (z, c, r) = (step.z[i], step.cand[i], step.r[i]);
            let g = dsd[i];
            ds_prev[i] = g * z;
            let dz = g * (sp[i] - c);
            let dc = g * (1.0 - z);
            da_h[i] = dc * (1.0 - c * c);
            d_whs[i] = da_h[i] * r;
            let dr = da_h[i] * step.wh_s[i];
            da_r[i] = dr * r * (1.0 - r);
            da_z[i] = dz * z * (1.0 - z);
        }

        let xd = step.x.data();
        for (u, w, b, da) in [
            (UR, Some(WR), BR, &da_r),
            (UZ, Some(WZ), BZ, &da_z),
            (UH, None, BH, &da_h),
        ] {
            gemm(d, rows, h, xd, true, da, false, 1.0, grads.t[u].data_mut());
            if let Some(w) = w {
                gemm(h, rows, h, sp, true, da, false, 1.0, grads.t[w].data_mut());
            }
            let bias = grads.t[b].data_mut();
            for row in da.chunks(h) {
                for (acc, g) in bias.iter_mut().zip(row) {
                    *acc += g;
                }
            }
        }
        gemm(h, rows, h, sp, true, &d_whs, false, 1.0, grads.t[WH].data_mut());

        gemm(rows, h, h, &da_r, false, self.p(params, WR), true, 1.0, &mut ds_prev);
        gemm(rows, h, h, &da_z, false, self.p(params, WZ), true, 1.0, &mut ds_prev);
        gemm(rows, h, h, &d_whs, false, self.p(params, WH), true, 1.0, &mut ds_prev);

        let mut dx = vec![0.0; rows * d];
        gemm(rows, h, d, &da_r, false, self.p(params, UR), true, 1.0, &mut dx);
        gemm(rows, h, d, &da_z, false, self.p(params, UZ), true, 1.0, &mut dx);
        gemm(rows, h, d, &da_h, false, self.p(params, UH), true, 1.0, &mut dx);

        (Tensor::matrix(rows, d, dx), Tensor::matrix(rows, h, ds_prev))
    }

    /// Runs the cell over `xs` (each `[batch, d]`) from `s0`; returns every
    /// state `s_1 ... s_T`.
    pub fn sequence_forward(&self, params: &ParamSet, xs: &[Tensor], s0: &Tensor) -> Result<(Vec<Tensor>, Vec<GruStep>)> {
        if xs.is_empty() {
            return Err(NeuralError::ShapeMismatch {
                op: "gru sequence",
                expected: vec![1],
                found: vec![0],
            });
        }
        let mut states = Vec::with_capacity(xs.len());
        let mut steps = Vec::with_capacity(xs.len());
        let mut s = s0.clone();
        for x in xs {
            let (next, step) = self.cell_forward(params, x, &s)?;
            s = next.clone();
            states.push(next);
            steps.push(step);
        }
        Ok((states, steps))
    }

    /// BPTT given `dL/ds_t` for every output state. Accumulates parameter
    /// gradients into `params`; returns `(dL/dx_t for each t, dL/ds_0)`.
    pub fn sequence_backward(&self, params: &mut ParamSet, steps: &[GruStep], d_states: &[Tensor]) -> (Vec<Tensor>, Tensor) {
        let mut grads = GruGrads::zeros(self.d, self.h);
        let rows = steps[0].x.rows();
        let mut carry = Tensor::zeros(&[rows, self.h]);
        let mut dxs = vec![Tensor::zeros(&[0]); steps.len()];
        for t in (0..steps.len()).rev() {
            let mut ds = d_states[t].clone();
            ds.add_assign(&carry);
            let (dx, ds_prev) = self.cell_backward(params, &steps[t], &ds, &mut grads);
            dxs[t] = dx;
            carry = ds_prev;
        }
        grads.apply(self, params);
        (dxs, carry)
    }
}

/// Gradient buffers for the nine GRU parameters.
#[derive(Debug, Clone)]
pub struct GruGrads {
    t: [Tensor; 9],
}

impl GruGrads {
    pub fn zeros(d: usize, h: usize) -> Self {
        let t = NAMES.map(|name| match name.as_bytes()[0] {
            b'u' => Tensor::zeros(&[d, h]),
            b'w' => Tensor::zeros(&[h, h]),
            _ => Tensor::zeros(&[h]),
        });
        GruGrads { t }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        NAMES.iter().position(|n| *n == name).map(|i| &self.t[i])
    }

    /// Adds the buffers into the matching gradients of `params`.
    pub fn apply(&self, gru: &Gru, params: &mut ParamSet) {
        for (id, g) in gru.ids.iter().zip(&self.t) {
            params.accumulate(*id, g);
        }
    }
}
