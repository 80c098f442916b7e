//! Finite-difference gradient checks on the quantities training
//! differentiates: `Q`, `V`, `V^clip` and the full Bellman loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, Binding, FiniteDiffSpec, Graph, ParamStore, Tensor, TensorError, VarId};
use crate::config::{CouplingKind, ModelConfig};
use crate::error::{MeowError, Result};
use crate::flow::FlowModel;
use crate::model::MeowModel;
use crate::shifted::Head;
use crate::trainer::{compute_loss, Batch, Transition};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Rows in the probe batch.
    pub rows: usize,
    /// Coordinates probed per parameter tensor; `None` probes all.
    pub max_coords_per_tensor: Option<usize>,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            rows: 4,
            max_coords_per_tensor: Some(16),
            gamma: 0.9,
            seed: 0,
        }
    }
}

fn tensor_err(e: MeowError) -> TensorError {
    match e {
        MeowError::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "gradcheck",
            reason: other.to_string(),
        },
    }
}

fn probe_batch(model: &MeowModel, opts: &GradCheckOptions) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut draw = |n: usize, scale: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(-scale..scale)).collect() };
    let (sd, ad) = (model.state_dim(), model.action_dim());
    let ts: Vec<Transition> = (0..opts.rows)
        .map(|i| Transition {
            s: draw(sd, 2.0),
            a: draw(ad, 1.5),
            r: draw(1, 3.0)[0],
            s_next: draw(sd, 2.0),
            done: i % 3 == 2,
        })
        .collect();
    let refs: Vec<&Transition> = ts.iter().collect();
    Batch::from_transitions(&refs)
}

fn heads_tie(model: &MeowModel, params: &ParamStore, batch: &Batch) -> Result<bool> {
    let mut g = Graph::new();
    let b = g.bind(params, false);
    let s = g.constant(batch.states.clone());
    let out = model.heads.forward(&mut g, &b, s)?;
    let (b1, b2) = (g.value(out.b1).data(), g.value(out.b2).data());
    Ok(b1.iter().zip(b2).any(|(x, y)| (x - y).abs() < 1e-3))
}

/// Runs the four checks against `params` (online) and `shadow` (target).
pub fn gradcheck_suite(
    model: &MeowModel,
    params: &ParamStore,
    shadow: &ParamStore,
    opts: &GradCheckOptions,
) -> Result<Vec<GradCheck>> {
    let batch = probe_batch(model, opts)?;
    let spec = FiniteDiffSpec {
        max_coords_per_tensor: opts.max_coords_per_tensor,
        seed: opts.seed,
        ..FiniteDiffSpec::default()
    };
    let run = |name: &'static str,
               store: &ParamStore,
               f: &dyn Fn(&mut Graph, &Binding) -> Result<VarId>|
     -> Result<GradCheck> {
        let r = finite_diff_check(|g, b| f(g, b).map_err(tensor_err), store, &spec)?;
        Ok(GradCheck {
            name,
            max_rel_error: r.max_rel_error,
            coords_checked: r.coords_checked,
        })
    };
    let states = |g: &mut Graph| g.constant(batch.states.clone());
    let sum = |g: &mut Graph, v: VarId| -> Result<VarId> { Ok(g.sum(v)?) };

    let q = run("soft_q", params, &|g, b| {
        let s = states(g);
        let a = g.constant(batch.actions.clone());
        let cond = model.flow.condition(g, b, s)?;
        let out = model.flow.forward(g, &cond, a)?;
        let q = model.flow.soft_q_var(g, &out)?;
        sum(g, q)
    })?;
    let v = run("soft_v", params, &|g, b| {
        let s = states(g);
        let cond = model.flow.condition_value_only(g, b, s)?;
        let v = model.flow.soft_v_var(g, &cond)?;
        sum(g, v)
    })?;
    // `min` has no derivative where the heads tie (both start at zero), so
    // a tied pair is separated on a copy before probing.
    let mut separated = None;
    if heads_tie(model, params, &batch)? {
        let mut p = params.clone();
        model.heads.offset_head(&mut p, Head::Second, 1.0)?;
        separated = Some(p);
    }
    let vc = run("v_clip", separated.as_ref().unwrap_or(params), &|g, b| {
        let s = states(g);
        let v = model.v_clip_var(g, b, s)?;
        sum(g, v)
    })?;
    let loss = run("loss", params, &|g, b| {
        let sp = g.bind(shadow, false);
        Ok(compute_loss(g, model, b, &sp, &batch, opts.gamma)?.loss)
    })?;
    Ok(vec![q, v, vc, loss])
}

/// Moves every parameter off its structured initialization so that the
/// checks exercise non-trivial derivatives (zero-initialized output layers
/// otherwise leave most gradients exactly zero).
pub fn randomize(model: &MeowModel, params: &mut ParamStore, scale: f64, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.flow.perturb(params, scale, &mut rng)?;
    for id in model.heads.param_ids() {
        let t = params.get(id);
        let data: Vec<f64> = t.data().iter().map(|x| x + rng.random_range(-scale..scale)).collect();
        params.set(id, Tensor::new(t.shape().to_vec(), data)?)?;
    }
    Ok(())
}

/// Perturbation scale for [`random_flow`]. Stacked affine layers compound
/// their scales, so they tolerate far less before mass leaves the default
/// quadrature box or overflows.
pub fn probe_scale(kind: CouplingKind) -> f64 {
    match kind {
        CouplingKind::Additive => 0.1,
        CouplingKind::Affine => 0.02,
    }
}

/// A randomly perturbed flow whose density stays well inside `[−8, 8]^D`.
pub fn random_flow(
    kind: CouplingKind,
    state_dim: usize,
    action_dim: usize,
    seed: u64,
) -> Result<(FlowModel, ParamStore)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = ModelConfig {
        coupling: kind,
        ..ModelConfig::default()
    };
    let flow = FlowModel::new(&mut store, state_dim, action_dim, &cfg, &mut rng)?;
    flow.perturb(&mut store, probe_scale(kind), &mut rng)?;
    Ok((flow, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_and_randomized_models_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (model, mut params) = MeowModel::new(2, 2, &ModelConfig::default(), &mut rng).unwrap();
        let shadow = params.clone();
        let fresh = gradcheck_suite(&model, &params, &shadow, &GradCheckOptions::default()).unwrap();
        assert_eq!(
            fresh.iter().map(|c| c.name).collect::<Vec<_>>(),
            ["soft_q", "soft_v", "v_clip", "loss"]
        );
        assert!(fresh.iter().all(GradCheck::passed), "{fresh:?}");

        randomize(&model, &mut params, 0.3, 1).unwrap();
        let report = gradcheck_suite(&model, &params, &shadow, &GradCheckOptions::default()).unwrap();
        assert!(report.iter().all(GradCheck::passed), "{report:?}");
        assert!(report.iter().all(|c| c.coords_checked > 0));
    }
}
