//! Adam optimizer and gradient clipping.

use crate::error::{Error, Result};
use crate::layers::Parameters;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with optional row-sparse updates.
///
/// Parameters listed in `sparse_rows` are updated lazily: a row whose gradient
/// is exactly zero keeps its value and moment estimates untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    sparse_rows: Vec<String>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    steps: Vec<Vec<u64>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<P: Parameters<T> + ?Sized>(params: &P, sparse_rows: &[&str]) -> Self {
        let mut m = Vec::new();
        let mut steps = Vec::new();
        params.visit("", &mut |name, t| {
            let rows = if sparse_rows.contains(&name.as_str()) {
                t.shape()[0]
            } else {
                1
            };
            steps.push(vec![0; rows]);
            m.push(Tensor::zeros(t.shape()));
        });
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            sparse_rows: sparse_rows.iter().map(|s| s.to_string()).collect(),
            v: m.clone(),
            m,
            steps,
        }
    }

    /// Applies one update with learning rate `lr`.
    pub fn step<P: Parameters<T> + ?Sized>(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        let mut g = Vec::new();
        grads.visit("", &mut |_, t| g.push(t));
        if g.len() != self.m.len() {
            return Err(Error::invalid("optimizer", "parameter set changed since construction"));
        }
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let (m, v, steps, sparse) = (&mut self.m, &mut self.v, &mut self.steps, &self.sparse_rows);
        let mut i = 0;
        let mut err = None;
        params.visit_mut("", &mut |name, p| {
            let grad = g[i];
            if grad.shape() != p.shape() {
                err.get_or_insert(Error::shape("optimizer", p.shape(), grad.shape()));
                i += 1;
                return;
            }
            let row_len = if sparse.contains(&name) {
                p.len() / p.shape()[0]
            } else {
                p.len()
            };
            let (pd, gd) = (p.data_mut(), grad.data());
            let (md, vd) = (m[i].data_mut(), v[i].data_mut());
            for (r, t) in steps[i].iter_mut().enumerate() {
                let span = r * row_len..(r + 1) * row_len;
                if row_len != pd.len() && gd[span.clone()].iter().all(|x| *x == T::zero()) {
                    continue;
                }
                *t += 1;
                let c1 = 1.0 - b1.powi(*t as i32);
                let c2 = 1.0 - b2.powi(*t as i32);
                let (tb1, tb2) = (T::of(b1), T::of(b2));
                let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
                let (lr_c, c2s, e) = (T::of(lr / c1), T::of(c2.sqrt()), T::of(eps));
                for j in span {
                    let gj = gd[j];
                    md[j] = tb1 * md[j] + ob1 * gj;
                    vd[j] = tb2 * vd[j] + ob2 * gj * gj;
                    pd[j] -= lr_c * md[j] / (vd[j].sqrt() / c2s + e);
                }
            }
            i += 1;
        });
        err.map_or(Ok(()), Err)
    }
}

/// Global L2 norm over every gradient tensor.
pub fn grad_norm<T: Scalar, P: Parameters<T> + ?Sized>(grads: &P) -> f64 {
    let mut sq = 0.0;
    grads.visit("", &mut |_, t| {
        sq += t.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
    });
    sq.sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar, P: Parameters<T> + ?Sized>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        grads.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v *= s));
    }
    norm
}
