//! The state-conditioned energy-based flow `g(·|s)`.
//!
//! Layer stack, applied in the action → latent direction:
//!
//! 1. `coupling_layers` coupling layers (the non-linear set). Their
//!    conditioner weights are generated per state by an MLP hypernetwork with
//!    layer normalization and dropout; the state enters only through those
//!    generated weights.
//! 2. One element-wise linear layer `z = x·exp(r(s)) + t(s)` (the linear
//!    set), whose scale and shift come from a second hypernetwork.
//!
//! Log-determinants are kept per set. The linear-set sum `Σ_d r_d(s)` never
//! looks at the action, which is what makes the soft value exact:
//! `V(s) = −α·Σ_d r_d(s)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Binding, Graph, ParamId, ParamStore, Tensor, VarId};
use crate::config::{CouplingKind, ModelConfig};
use crate::error::{MeowError, Result};
use crate::nn::{Init, Mlp, MlpSpec};

/// Rows per graph when evaluating many actions for one state.
const CHUNK_ROWS: usize = 4096;

/// Role of one layer in the decomposed log-determinant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSet {
    NonLinear,
    Linear,
}

/// Coupling layer with a hypernetwork-generated conditioner.
#[derive(Debug, Clone)]
pub struct CouplingLayer {
    kind: CouplingKind,
    pass: Vec<usize>,
    shifted: Vec<usize>,
    hidden: usize,
    /// `None` when there is nothing to shift (one-dimensional actions).
    hyper: Option<Mlp>,
}

impl CouplingLayer {
    /// Outputs of the conditioner: a shift per transformed dimension, plus a
    /// raw log-scale per dimension for affine layers.
    fn heads(&self) -> usize {
        match self.kind {
            CouplingKind::Additive => self.shifted.len(),
            CouplingKind::Affine => 2 * self.shifted.len(),
        }
    }

    /// Flattened conditioner size: `W1 [h×p] | b1 [h] | W2 [o×h] | b2 [o]`.
    pub fn conditioner_params(&self) -> usize {
        if self.hyper.is_none() {
            return 0;
        }
        let (p, h, o) = (self.pass.len(), self.hidden, self.heads());
        h * p + h + o * h + o
    }

    pub fn pass_dims(&self) -> &[usize] {
        &self.pass
    }

    pub fn shifted_dims(&self) -> &[usize] {
        &self.shifted
    }

    pub fn kind(&self) -> CouplingKind {
        self.kind
    }

    /// Runs the generated conditioner on the pass half: `(shift, log_scale)`.
    fn conditioner(&self, g: &mut Graph, weights: VarId, pass: VarId) -> Result<(VarId, Option<VarId>)> {
        let (p, h, o) = (self.pass.len(), self.hidden, self.heads());
        let w1 = g.narrow_cols(weights, 0, h * p)?;
        let b1 = g.narrow_cols(weights, h * p, h)?;
        let w2 = g.narrow_cols(weights, h * p + h, o * h)?;
        let b2 = g.narrow_cols(weights, h * p + h + o * h, o)?;
        let hid = g.bmv(w1, pass)?;
        let hid = g.add(hid, b1)?;
        let hid = g.swish(hid)?;
        let out = g.bmv(w2, hid)?;
        let out = g.add(out, b2)?;
        match self.kind {
            CouplingKind::Additive => Ok((out, None)),
            CouplingKind::Affine => {
                let q = self.shifted.len();
                let t = g.narrow_cols(out, 0, q)?;
                let s = g.narrow_cols(out, q, q)?;
                Ok((t, Some(s)))
            }
        }
    }

    fn forward(&self, g: &mut Graph, weights: Option<VarId>, x: VarId) -> Result<(VarId, Option<VarId>)> {
        let Some(weights) = weights else {
            return Ok((x, None));
        };
        let xp = g.select_cols(x, &self.pass)?;
        let xs = g.select_cols(x, &self.shifted)?;
        let (t, log_scale) = self.conditioner(g, weights, xp)?;
        let (ys, logdet) = match log_scale {
            None => (g.add(xs, t)?, None),
            Some(s) => {
                let e = g.exp(s)?;
                let scaled = g.mul(xs, e)?;
                (g.add(scaled, t)?, Some(g.sum_rows(s)?))
            }
        };
        let y = g.merge_cols(xp, &self.pass, ys, &self.shifted)?;
        Ok((y, logdet))
    }

    fn inverse(&self, g: &mut Graph, weights: Option<VarId>, y: VarId) -> Result<VarId> {
        let Some(weights) = weights else {
            return Ok(y);
        };
        let yp = g.select_cols(y, &self.pass)?;
        let ys = g.select_cols(y, &self.shifted)?;
        let (t, log_scale) = self.conditioner(g, weights, yp)?;
        let mut xs = g.sub(ys, t)?;
        if let Some(s) = log_scale {
            let neg = g.neg(s)?;
            let inv = g.exp(neg)?;
            xs = g.mul(xs, inv)?;
        }
        Ok(g.merge_cols(yp, &self.pass, xs, &self.shifted)?)
    }
}

/// Element-wise linear layer `z = x·exp(r) + t` with `(r, t)` generated from
/// the state.
#[derive(Debug, Clone)]
pub struct ElementwiseLinear {
    hyper: Mlp,
    dim: usize,
}

/// Per-state generated weights for every layer of a [`FlowModel`].
#[derive(Debug, Clone)]
pub struct Conditioning {
    coupling_weights: Vec<Option<VarId>>,
    /// `r(s)`, `[rows, D]`.
    pub log_scale: VarId,
    /// `t(s)`, `[rows, D]`.
    pub shift: VarId,
    rows: usize,
}

impl Conditioning {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Tiles a single-state conditioning to `times` rows.
    pub fn repeat(&self, g: &mut Graph, times: usize) -> Result<Conditioning> {
        if self.rows != 1 {
            return Err(MeowError::Precondition(
                "only single-row conditionings can be repeated".into(),
            ));
        }
        let coupling_weights = self
            .coupling_weights
            .iter()
            .map(|w| w.map(|w| g.repeat_rows(w, times)).transpose())
            .collect::<Result<_, _>>()?;
        Ok(Conditioning {
            coupling_weights,
            log_scale: g.repeat_rows(self.log_scale, times)?,
            shift: g.repeat_rows(self.shift, times)?,
            rows: times,
        })
    }
}

/// Graph outputs of [`FlowModel::forward`], each with one entry per row.
#[derive(Debug, Clone, Copy)]
pub struct FlowOutput {
    pub z: VarId,
    /// Σ log|det J| over the coupling layers, `[rows]`.
    pub logdet_n: VarId,
    /// Σ log|det J| over the linear layer, `[rows]`; action-independent.
    pub logdet_l: VarId,
}

/// Plain-number result of a flow evaluation at one `(s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowEval {
    pub z: Vec<f64>,
    pub logdet_n: f64,
    pub logdet_l: f64,
}

#[derive(Debug, Clone)]
pub struct FlowModel {
    state_dim: usize,
    action_dim: usize,
    alpha: f64,
    couplings: Vec<CouplingLayer>,
    linear: ElementwiseLinear,
}

impl FlowModel {
    /// Builds the layer stack and registers its parameters in `store`.
    ///
    /// The output layer of every hypernetwork starts with zero weights and a
    /// zero bias on everything except the conditioner's first layer, so the
    /// flow starts as the identity (`z = a`, `V = 0`).
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        state_dim: usize,
        action_dim: usize,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if action_dim == 0 {
            return Err(MeowError::Config("action_dim must be positive".into()));
        }
        let first = action_dim.div_ceil(2);
        let mut couplings = Vec::with_capacity(config.coupling_layers);
        for k in 0..config.coupling_layers {
            // The pass block always holds ⌈D/2⌉ dims; the roles alternate.
            let (pass, shifted): (Vec<usize>, Vec<usize>) = if k % 2 == 0 {
                ((0..first).collect(), (first..action_dim).collect())
            } else {
                (
                    (action_dim - first..action_dim).collect(),
                    (0..action_dim - first).collect(),
                )
            };
            let mut layer = CouplingLayer {
                kind: config.coupling,
                pass,
                shifted,
                hidden: config.conditioner_hidden,
                hyper: None,
            };
            if !layer.shifted.is_empty() {
                let (p, h, o) = (layer.pass.len(), layer.hidden, layer.heads());
                let spec = MlpSpec {
                    in_dim: state_dim,
                    hidden: config.hyper_hidden,
                    layers: config.hyper_layers,
                    out_dim: h * p + h + o * h + o,
                    layer_norm: true,
                    dropout: config.dropout,
                };
                let mlp = Mlp::new(store, &format!("flow.coupling{k}.hyper"), spec, Init::Zeros, rng);
                let bound = 1.0 / (p as f64).sqrt();
                let bias_id = mlp.output().bias;
                let mut bias = store.get(bias_id).data().to_vec();
                for v in &mut bias[..h * p + h] {
                    *v = rng.random_range(-bound..=bound);
                }
                store.set(bias_id, Tensor::vector(bias)?)?;
                layer.hyper = Some(mlp);
            }
            couplings.push(layer);
        }
        let linear_spec = MlpSpec {
            in_dim: state_dim,
            hidden: config.hyper_hidden,
            layers: config.hyper_layers,
            out_dim: 2 * action_dim,
            layer_norm: false,
            dropout: 0.0,
        };
        let linear = ElementwiseLinear {
            hyper: Mlp::new(store, "flow.linear.hyper", linear_spec, Init::Zeros, rng),
            dim: action_dim,
        };
        Ok(Self {
            state_dim,
            action_dim,
            alpha: config.alpha,
            couplings,
            linear,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn couplings(&self) -> &[CouplingLayer] {
        &self.couplings
    }

    /// Layer kinds in application order (action → latent).
    pub fn layer_sets(&self) -> Vec<LayerSet> {
        let mut sets = vec![LayerSet::NonLinear; self.couplings.len()];
        sets.push(LayerSet::Linear);
        sets
    }

    /// True when every non-linear layer has an action-independent Jacobian
    /// determinant (additive couplings), the condition for the closed-form
    /// argmax of Q.
    pub fn has_constant_nonlinear_jacobian(&self) -> bool {
        self.couplings
            .iter()
            .all(|c| c.kind == CouplingKind::Additive || c.hyper.is_none())
    }

    /// Ids of every parameter owned by the flow.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .couplings
            .iter()
            .filter_map(|c| c.hyper.as_ref())
            .flat_map(Mlp::param_ids)
            .collect();
        ids.extend(self.linear.hyper.param_ids());
        ids
    }

    /// Output-layer parameter ids of every hypernetwork with their fan-in.
    fn output_layers(&self) -> Vec<(ParamId, ParamId, usize)> {
        self.couplings
            .iter()
            .filter_map(|c| c.hyper.as_ref())
            .chain(std::iter::once(&self.linear.hyper))
            .map(|m| (m.output().weight, m.output().bias, m.output().in_dim))
            .collect()
    }

    /// Adds Gaussian noise to the hypernetwork output layers: `N(0, σ²/fan_in)`
    /// on weights and `N(0, σ²)` on biases. Turns the identity initialization
    /// into a generic state-dependent flow.
    pub fn perturb<R: Rng + ?Sized>(&self, store: &mut ParamStore, scale: f64, rng: &mut R) -> Result<()> {
        for (w, b, fan_in) in self.output_layers() {
            for (id, std) in [(w, scale / (fan_in as f64).sqrt()), (b, scale)] {
                let normal = Normal::new(0.0, std).map_err(|e| MeowError::Config(e.to_string()))?;
                let t = store.get(id);
                let data = t.data().iter().map(|v| v + normal.sample(rng)).collect();
                store.set(id, Tensor::new(t.shape().to_vec(), data)?)?;
            }
        }
        Ok(())
    }

    /// Makes the element-wise linear layer state-independent with the given
    /// log-scales and shifts (the hypernetwork's output weights are zeroed).
    pub fn set_constant_linear(&self, store: &mut ParamStore, log_scale: &[f64], shift: &[f64]) -> Result<()> {
        let d = self.action_dim;
        if log_scale.len() != d || shift.len() != d {
            return Err(MeowError::Dimension {
                what: "linear layer",
                expected: d,
                got: log_scale.len().min(shift.len()),
            });
        }
        let out = self.linear.hyper.output();
        store.set(out.weight, Tensor::zeros(&[out.in_dim, out.out_dim]))?;
        let bias = log_scale.iter().chain(shift).copied().collect();
        store.set(out.bias, Tensor::vector(bias)?)?;
        Ok(())
    }

    /// Generates every layer's weights for a `[rows, state_dim]` batch.
    pub fn condition(&self, g: &mut Graph, p: &Binding, states: VarId) -> Result<Conditioning> {
        let shape = g.shape(states).to_vec();
        if shape.len() != 2 || shape[1] != self.state_dim {
            return Err(MeowError::Dimension {
                what: "state",
                expected: self.state_dim,
                got: *shape.last().unwrap_or(&0),
            });
        }
        let coupling_weights = self
            .couplings
            .iter()
            .map(|c| c.hyper.as_ref().map(|h| h.forward(g, p, states)).transpose())
            .collect::<Result<_, _>>()?;
        self.condition_linear(g, p, states, coupling_weights, shape[0])
    }

    /// Like [`condition`](Self::condition) but skips the coupling
    /// hypernetworks; enough for `V(s)` and nothing else.
    pub fn condition_value_only(&self, g: &mut Graph, p: &Binding, states: VarId) -> Result<Conditioning> {
        let rows = g.shape(states)[0];
        self.condition_linear(g, p, states, vec![None; self.couplings.len()], rows)
    }

    fn condition_linear(
        &self,
        g: &mut Graph,
        p: &Binding,
        states: VarId,
        coupling_weights: Vec<Option<VarId>>,
        rows: usize,
    ) -> Result<Conditioning> {
        let out = self.linear.hyper.forward(g, p, states)?;
        let d = self.linear.dim;
        Ok(Conditioning {
            coupling_weights,
            log_scale: g.narrow_cols(out, 0, d)?,
            shift: g.narrow_cols(out, d, d)?,
            rows,
        })
    }

    fn check_actions(&self, g: &Graph, cond: &Conditioning, x: VarId) -> Result<()> {
        match g.shape(x) {
            &[r, d] if r == cond.rows && d == self.action_dim => Ok(()),
            s => Err(MeowError::Dimension {
                what: "action batch",
                expected: self.action_dim,
                got: s.last().copied().unwrap_or(0),
            }),
        }
    }

    fn require_full(&self, cond: &Conditioning) -> Result<()> {
        let full = self
            .couplings
            .iter()
            .zip(&cond.coupling_weights)
            .all(|(c, w)| c.hyper.is_none() || w.is_some());
        if full {
            Ok(())
        } else {
            Err(MeowError::Precondition("conditioning lacks coupling weights".into()))
        }
    }

    /// `z = g(a|s)` with the decomposed log-determinants.
    pub fn forward(&self, g: &mut Graph, cond: &Conditioning, actions: VarId) -> Result<FlowOutput> {
        self.check_actions(g, cond, actions)?;
        self.require_full(cond)?;
        let mut x = actions;
        let mut logdet_n: Option<VarId> = None;
        for (layer, &w) in self.couplings.iter().zip(&cond.coupling_weights) {
            let (y, ld) = layer.forward(g, w, x)?;
            x = y;
            if let Some(ld) = ld {
                logdet_n = Some(match logdet_n {
                    Some(acc) => g.add(acc, ld)?,
                    None => ld,
                });
            }
        }
        let logdet_n = match logdet_n {
            Some(v) => v,
            None => g.constant(Tensor::zeros(&[cond.rows])),
        };
        let e = g.exp(cond.log_scale)?;
        let scaled = g.mul(x, e)?;
        let z = g.add(scaled, cond.shift)?;
        let logdet_l = g.sum_rows(cond.log_scale)?;
        Ok(FlowOutput { z, logdet_n, logdet_l })
    }

    /// `a = g⁻¹(z|s)`.
    pub fn inverse(&self, g: &mut Graph, cond: &Conditioning, z: VarId) -> Result<VarId> {
        self.check_actions(g, cond, z)?;
        self.require_full(cond)?;
        let centered = g.sub(z, cond.shift)?;
        let neg = g.neg(cond.log_scale)?;
        let inv = g.exp(neg)?;
        let mut x = g.mul(centered, inv)?;
        for (layer, &w) in self.couplings.iter().zip(&cond.coupling_weights).rev() {
            x = layer.inverse(g, w, x)?;
        }
        Ok(x)
    }

    /// `Q(s,a) = α·(log p_z(z) + logdet_n)`, `[rows]`.
    pub fn soft_q_var(&self, g: &mut Graph, out: &FlowOutput) -> Result<VarId> {
        let lp = g.gauss_log_density(out.z)?;
        let e = g.add(lp, out.logdet_n)?;
        Ok(g.scale(e, self.alpha)?)
    }

    /// `V(s) = −α·logdet_l(s)`, `[rows]`.
    pub fn soft_v_var(&self, g: &mut Graph, cond: &Conditioning) -> Result<VarId> {
        let ld = g.sum_rows(cond.log_scale)?;
        Ok(g.scale(ld, -self.alpha)?)
    }

    /// `log π(a|s) = log p_z(z) + logdet_n + logdet_l`, `[rows]`.
    pub fn log_prob_var(&self, g: &mut Graph, out: &FlowOutput) -> Result<VarId> {
        let lp = g.gauss_log_density(out.z)?;
        let e = g.add(lp, out.logdet_n)?;
        Ok(g.add(e, out.logdet_l)?)
    }

    fn state_row(&self, g: &mut Graph, s: &[f64]) -> Result<VarId> {
        if s.len() != self.state_dim {
            return Err(MeowError::Dimension {
                what: "state",
                expected: self.state_dim,
                got: s.len(),
            });
        }
        Ok(g.constant(Tensor::matrix(1, s.len(), s.to_vec())?))
    }

    fn action_row(&self, g: &mut Graph, a: &[f64]) -> Result<VarId> {
        if a.len() != self.action_dim {
            return Err(MeowError::Dimension {
                what: "action",
                expected: self.action_dim,
                got: a.len(),
            });
        }
        Ok(g.constant(Tensor::matrix(1, a.len(), a.to_vec())?))
    }

    /// Evaluates `g(a|s)` outside any training graph.
    pub fn flow_forward(&self, p: &ParamStore, s: &[f64], a: &[f64]) -> Result<FlowEval> {
        let mut g = Graph::new();
        let b = g.bind(p, false);
        let sv = self.state_row(&mut g, s)?;
        let av = self.action_row(&mut g, a)?;
        let cond = self.condition(&mut g, &b, sv)?;
        let out = self.forward(&mut g, &cond, av)?;
        Ok(FlowEval {
            z: g.value(out.z).data().to_vec(),
            logdet_n: g.value(out.logdet_n).data()[0],
            logdet_l: g.value(out.logdet_l).data()[0],
        })
    }

    pub fn flow_inverse(&self, p: &ParamStore, s: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = g.bind(p, false);
        let sv = self.state_row(&mut g, s)?;
        let zv = self.action_row(&mut g, z)?;
        let cond = self.condition(&mut g, &b, sv)?;
        let a = self.inverse(&mut g, &cond, zv)?;
        Ok(g.value(a).data().to_vec())
    }

    pub fn soft_q(&self, p: &ParamStore, s: &[f64], a: &[f64]) -> Result<f64> {
        let e = self.flow_forward(p, s, a)?;
        Ok(self.alpha * (gauss_log_density(&e.z) + e.logdet_n))
    }

    pub fn soft_v(&self, p: &ParamStore, s: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let b = g.bind(p, false);
        let sv = self.state_row(&mut g, s)?;
        let cond = self.condition_value_only(&mut g, &b, sv)?;
        let v = self.soft_v_var(&mut g, &cond)?;
        Ok(g.value(v).data()[0])
    }

    pub fn log_prob(&self, p: &ParamStore, s: &[f64], a: &[f64]) -> Result<f64> {
        let e = self.flow_forward(p, s, a)?;
        Ok(gauss_log_density(&e.z) + e.logdet_n + e.logdet_l)
    }

    /// Flow evaluations for many actions at one state: `(Q, log π)` per
    /// action. The hypernetworks run once per chunk.
    pub fn evaluate_actions(&self, p: &ParamStore, s: &[f64], actions: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let (n, d) = actions.dims2().ok_or(MeowError::Dimension {
            what: "action batch",
            expected: 2,
            got: actions.ndim(),
        })?;
        if d != self.action_dim {
            return Err(MeowError::Dimension {
                what: "action",
                expected: self.action_dim,
                got: d,
            });
        }
        let mut q = Vec::with_capacity(n);
        let mut lp = Vec::with_capacity(n);
        for start in (0..n).step_by(CHUNK_ROWS) {
            let rows = CHUNK_ROWS.min(n - start);
            let mut g = Graph::new();
            let b = g.bind(p, false);
            let sv = self.state_row(&mut g, s)?;
            let one = self.condition(&mut g, &b, sv)?;
            let cond = one.repeat(&mut g, rows)?;
            let chunk = Tensor::new(vec![rows, d], actions.data()[start * d..(start + rows) * d].to_vec())?;
            let av = g.constant(chunk);
            let out = self.forward(&mut g, &cond, av)?;
            let qv = self.soft_q_var(&mut g, &out)?;
            let lv = self.log_prob_var(&mut g, &out)?;
            q.extend_from_slice(g.value(qv).data());
            lp.extend_from_slice(g.value(lv).data());
        }
        Ok((q, lp))
    }

    /// Maps many latents through `g⁻¹(·|s)` at one state.
    pub fn inverse_many(&self, p: &ParamStore, s: &[f64], z: &Tensor) -> Result<Tensor> {
        let (n, d) = z.dims2().ok_or(MeowError::Dimension {
            what: "latent batch",
            expected: 2,
            got: z.ndim(),
        })?;
        let mut out = Vec::with_capacity(n * d);
        for start in (0..n).step_by(CHUNK_ROWS) {
            let rows = CHUNK_ROWS.min(n - start);
            let mut g = Graph::new();
            let b = g.bind(p, false);
            let sv = self.state_row(&mut g, s)?;
            let one = self.condition(&mut g, &b, sv)?;
            let cond = one.repeat(&mut g, rows)?;
            let chunk = Tensor::new(vec![rows, d], z.data()[start * d..(start + rows) * d].to_vec())?;
            let zv = g.constant(chunk);
            let a = self.inverse(&mut g, &cond, zv)?;
            out.extend_from_slice(g.value(a).data());
        }
        Ok(Tensor::new(vec![n, d], out)?)
    }
}

pub(crate) fn gauss_log_density(z: &[f64]) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * ln_2pi
}
