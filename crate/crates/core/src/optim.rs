//! Adam, global-norm gradient clipping and Polyak averaging over a
//! [`ParamStore`].

use crate::autodiff::{ParamStore, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment estimates for one parameter store.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |p: &ParamStore| p.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            m: zeros(params),
            v: zeros(params),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One descent step along `grads` (same order and shapes as `params`).
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<(), TensorError> {
        check_layout(params, grads)?;
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let data = params.data_mut(id);
            for (((x, g), m), v) in data.iter_mut().zip(grads[k].data()).zip(m).zip(v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }
    norm
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
}

/// `shadow ← (1 − τ)·shadow + τ·online`, elementwise.
pub fn polyak_update(shadow: &mut ParamStore, online: &ParamStore, tau: f64) -> Result<(), TensorError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(TensorError::InvalidArgument {
            op: "polyak_update",
            reason: format!("tau {tau} outside [0, 1]"),
        });
    }
    if !shadow.same_layout(online) {
        return Err(TensorError::ShapeMismatch {
            op: "polyak_update",
            lhs: vec![shadow.numel()],
            rhs: vec![online.numel()],
        });
    }
    let ids: Vec<_> = online.ids().collect();
    for id in ids {
        let src = online.get(id).data();
        for (s, &o) in shadow.data_mut(id).iter_mut().zip(src) {
            *s = (1.0 - tau) * *s + tau * o;
        }
    }
    Ok(())
}

fn check_layout(params: &ParamStore, grads: &[Tensor]) -> Result<(), TensorError> {
    let ok = params.len() == grads.len() && params.tensors().iter().zip(grads).all(|(p, g)| p.shape() == g.shape());
    if ok {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op: "optimizer_step",
            lhs: vec![params.numel()],
            rhs: vec![grads.iter().map(Tensor::len).sum()],
        })
    }
}
