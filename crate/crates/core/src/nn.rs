//! Dense layers with manual forward/backward passes, the Adam optimizer, and
//! a finite-difference gradient checker. Everything is plain `f64` vectors;
//! batch reductions run in index order so results are bit-reproducible.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Fully-connected layer, weights row-major `[out_dim x in_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    /// Scaled-uniform init: `U(-1/sqrt(in_dim), 1/sqrt(in_dim))`, zero bias.
    pub fn init_uniform(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            w,
            b: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// `y = W x + b`.
    pub fn forward_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(y.len(), self.out_dim);
        for o in 0..self.out_dim {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.b[o];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            y[o] = acc;
        }
    }

    /// Accumulates parameter gradients for upstream `dy` and writes the
    /// input gradient into `dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], dx: &mut [f64], gw: &mut [f64], gb: &mut [f64]) {
        debug_assert_eq!(dy.len(), self.out_dim);
        debug_assert_eq!(dx.len(), self.in_dim);
        for v in dx.iter_mut() {
            *v = 0.0;
        }
        for o in 0..self.out_dim {
            let d = dy[o];
            gb[o] += d;
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut gw[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += d * x[i];
                dx[i] += d * row[i];
            }
        }
    }
}

pub fn tanh_inplace(xs: &mut [f64]) {
    for v in xs.iter_mut() {
        *v = v.tanh();
    }
}

/// Given post-activation values `y = tanh(z)`, scales `dy` by `1 - y^2`.
pub fn tanh_backward(y: &[f64], dy: &mut [f64]) {
    for (d, v) in dy.iter_mut().zip(y) {
        *d *= 1.0 - v * v;
    }
}

/// Adam state over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn update(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                what: "adam update",
                expected: self.m.len(),
                got: params.len().max(grads.len()),
            });
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - beta1.powf(t);
        let c2 = 1.0 - beta2.powf(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub n_checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub pass: bool,
}

/// Central finite differences (step `h`) against `analytic` on the listed
/// parameter indices. `loss` is re-evaluated with perturbed parameters; the
/// vector is restored afterwards. The relative error uses a floored
/// denominator so near-zero gradients do not produce spurious blowups.
pub fn finite_diff_check(
    params: &mut [f64],
    mut loss: impl FnMut(&[f64]) -> f64,
    analytic: &[f64],
    indices: &[usize],
    h: f64,
    tol: f64,
) -> GradCheckReport {
    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    for &idx in indices {
        let orig = params[idx];
        params[idx] = orig + h;
        let up = loss(params);
        params[idx] = orig - h;
        let down = loss(params);
        params[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[idx];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-3);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = idx;
        }
    }
    GradCheckReport {
        n_checked: indices.len(),
        max_rel_err,
        worst_index,
        pass: max_rel_err < tol,
    }
}

/// Draws `n` distinct indices from `0..len` (or all of them if `n >= len`).
pub fn sample_indices(len: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n >= len {
        return (0..len).collect();
    }
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < n {
        picked.insert(rng.gen_range(0..len));
    }
    picked.into_iter().collect()
}
