//! Action selection from the flow.
//!
//! Sampling pushes `z ~ N(0, I)` through `g⁻¹(·|s)`. When every coupling
//! layer has a constant Jacobian determinant, `argmax_a Q(s,a)` is the image
//! of the prior's mode, `g⁻¹(0|s)`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{MeowError, Result};
use crate::flow::FlowModel;

/// Draws `a = g⁻¹(z|s)` with `z ~ N(0, I)`; hypernetworks run in eval mode.
pub fn sample_action<R: Rng + ?Sized>(flow: &FlowModel, p: &ParamStore, s: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let z: Vec<f64> = (0..flow.action_dim()).map(|_| rng.sample(StandardNormal)).collect();
    flow.flow_inverse(p, s, &z)
}

/// `n` independent draws at one state, `[n, action_dim]`.
pub fn sample_actions<R: Rng + ?Sized>(
    flow: &FlowModel,
    p: &ParamStore,
    s: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let d = flow.action_dim();
    let z: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    flow.inverse_many(p, s, &Tensor::new(vec![n, d], z)?)
}

/// `g⁻¹(0|s)`. Errors for flows whose coupling layers scale (affine), where
/// the mode of the prior no longer maps to the maximizer of `Q`.
pub fn deterministic_action(flow: &FlowModel, p: &ParamStore, s: &[f64]) -> Result<Vec<f64>> {
    if !flow.has_constant_nonlinear_jacobian() {
        return Err(MeowError::Precondition(
            "deterministic actions need coupling layers with constant Jacobian determinant (additive)".into(),
        ));
    }
    flow.flow_inverse(p, s, &vec![0.0; flow.action_dim()])
}

pub fn action_log_prob(flow: &FlowModel, p: &ParamStore, s: &[f64], a: &[f64]) -> Result<f64> {
    flow.log_prob(p, s, a)
}
