//! Maximum-entropy reinforcement learning with an energy-based normalizing
//! flow policy.
//!
//! A single state-conditioned flow `g(a|s)` supplies the soft Q-function,
//! the soft value function and the sampler at once:
//!
//! * `Q(s,a) = α·(log p_z(g(a|s)) + Σ log|det J| over non-linear layers)`
//! * `V(s)  = −α·Σ log|det J| over linear layers`
//! * `π(a|s) = exp((Q − V)/α)`, sampled as `g⁻¹(z|s)` with `z ~ N(0, I)`.
//!
//! The value is exact and integration-free because the linear layers'
//! Jacobians do not depend on the action.

// Validation writes `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod envs;
pub mod error;
pub mod flow;
pub mod model;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod policy;
pub mod run;
pub mod shifted;
pub mod trainer;

pub use error::{MeowError, Result};
