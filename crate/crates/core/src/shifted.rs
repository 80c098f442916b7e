//! Learnable reward shifting with two state-conditioned heads.
//!
//! `Q^b(s,a) = Q(s,a) + b(s)` and `V^b(s) = V(s) + b(s)` leave the policy
//! untouched because the shift cancels in `(Q^b − V^b)/α`. Two heads over the
//! one flow give the clipped target `V^clip(s) = V(s) + min(b₁(s), b₂(s))`.

use rand::Rng;

use crate::autodiff::{Binding, Graph, ParamId, ParamStore, Tensor, VarId};
use crate::config::ModelConfig;
use crate::error::{MeowError, Result};
use crate::nn::{Init, Mlp, MlpSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    First,
    Second,
}

impl TryFrom<u8> for Head {
    type Error = MeowError;

    fn try_from(h: u8) -> Result<Self> {
        match h {
            1 => Ok(Head::First),
            2 => Ok(Head::Second),
            other => Err(MeowError::Precondition(format!("head must be 1 or 2, got {other}"))),
        }
    }
}

/// Two independent scalar networks `b₁, b₂: S → ℝ`.
#[derive(Debug, Clone)]
pub struct ShiftHeads {
    b1: Mlp,
    b2: Mlp,
}

/// Both head outputs for a batch, each `[rows]`.
#[derive(Debug, Clone, Copy)]
pub struct ShiftOutput {
    pub b1: VarId,
    pub b2: VarId,
}

impl ShiftOutput {
    pub fn get(&self, head: Head) -> VarId {
        match head {
            Head::First => self.b1,
            Head::Second => self.b2,
        }
    }
}

impl ShiftHeads {
    /// Heads start at `b ≡ 0` (zero output layer).
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, state_dim: usize, config: &ModelConfig, rng: &mut R) -> Self {
        let spec = MlpSpec {
            in_dim: state_dim,
            hidden: config.shift_hidden,
            layers: config.shift_layers,
            out_dim: 1,
            layer_norm: false,
            dropout: 0.0,
        };
        Self {
            b1: Mlp::new(store, "shift.b1", spec, Init::Zeros, rng),
            b2: Mlp::new(store, "shift.b2", spec, Init::Zeros, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, states: VarId) -> Result<ShiftOutput> {
        let rows = g.shape(states)[0];
        let mut one = |m: &Mlp| -> Result<VarId> {
            let y = m.forward(g, p, states)?;
            Ok(g.reshape(y, vec![rows])?)
        };
        Ok(ShiftOutput {
            b1: one(&self.b1)?,
            b2: one(&self.b2)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.b1.param_ids();
        ids.extend(self.b2.param_ids());
        ids
    }

    fn head(&self, head: Head) -> &Mlp {
        match head {
            Head::First => &self.b1,
            Head::Second => &self.b2,
        }
    }

    /// Adds `delta` to both heads' output biases.
    pub fn offset(&self, store: &mut ParamStore, delta: f64) -> Result<()> {
        self.offset_head(store, Head::First, delta)?;
        self.offset_head(store, Head::Second, delta)
    }

    pub fn offset_head(&self, store: &mut ParamStore, head: Head, delta: f64) -> Result<()> {
        let id = self.head(head).output().bias;
        let v = store.get(id).data()[0] + delta;
        store.set(id, Tensor::vector(vec![v])?)?;
        Ok(())
    }

    /// Pins a head to a constant value (zero weights, bias `value`).
    pub fn set_constant(&self, store: &mut ParamStore, head: Head, value: f64) -> Result<()> {
        let out = self.head(head).output();
        store.set(out.weight, Tensor::zeros(&[out.in_dim, 1]))?;
        store.set(out.bias, Tensor::vector(vec![value])?)?;
        Ok(())
    }
}
