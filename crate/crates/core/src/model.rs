//! The full learnable object: one flow plus two shift heads in one
//! parameter store.

use rand::Rng;

use crate::autodiff::{Binding, Graph, ParamStore, Tensor, VarId};
use crate::config::ModelConfig;
use crate::error::{MeowError, Result};
use crate::flow::FlowModel;
use crate::shifted::{Head, ShiftHeads};

#[derive(Debug, Clone)]
pub struct MeowModel {
    pub flow: FlowModel,
    pub heads: ShiftHeads,
    config: ModelConfig,
}

impl MeowModel {
    /// Builds the architecture and its freshly initialized parameters.
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let flow = FlowModel::new(&mut store, state_dim, action_dim, config, rng)?;
        let heads = ShiftHeads::new(&mut store, state_dim, config, rng);
        let model = Self {
            flow,
            heads,
            config: config.clone(),
        };
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn state_dim(&self) -> usize {
        self.flow.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.flow.action_dim()
    }

    pub fn alpha(&self) -> f64 {
        self.flow.alpha()
    }

    /// `(b₁(s), b₂(s))`.
    pub fn shifts(&self, p: &ParamStore, s: &[f64]) -> Result<(f64, f64)> {
        if s.len() != self.state_dim() {
            return Err(MeowError::Dimension {
                what: "state",
                expected: self.state_dim(),
                got: s.len(),
            });
        }
        let mut g = Graph::new();
        let b = g.bind(p, false);
        let sv = g.constant(Tensor::matrix(1, s.len(), s.to_vec())?);
        let out = self.heads.forward(&mut g, &b, sv)?;
        Ok((g.value(out.b1).data()[0], g.value(out.b2).data()[0]))
    }

    fn shift(&self, p: &ParamStore, s: &[f64], head: Head) -> Result<f64> {
        let (b1, b2) = self.shifts(p, s)?;
        Ok(match head {
            Head::First => b1,
            Head::Second => b2,
        })
    }

    /// `Q(s,a) + b_head(s)`.
    pub fn q_shifted(&self, p: &ParamStore, s: &[f64], a: &[f64], head: Head) -> Result<f64> {
        Ok(self.flow.soft_q(p, s, a)? + self.shift(p, s, head)?)
    }

    /// `V(s) + b_head(s)`.
    pub fn v_shifted(&self, p: &ParamStore, s: &[f64], head: Head) -> Result<f64> {
        Ok(self.flow.soft_v(p, s)? + self.shift(p, s, head)?)
    }

    /// `V(s) + min(b₁(s), b₂(s))`.
    pub fn v_clip(&self, p: &ParamStore, s: &[f64]) -> Result<f64> {
        let (b1, b2) = self.shifts(p, s)?;
        Ok(self.flow.soft_v(p, s)? + b1.min(b2))
    }

    /// Graph form of [`v_clip`](Self::v_clip) for a `[rows, state_dim]`
    /// batch; only the linear-layer hypernetwork and the heads are evaluated.
    pub fn v_clip_var(&self, g: &mut Graph, p: &Binding, states: VarId) -> Result<VarId> {
        let cond = self.flow.condition_value_only(g, p, states)?;
        let v = self.flow.soft_v_var(g, &cond)?;
        let b = self.heads.forward(g, p, states)?;
        let m = g.min(b.b1, b.b2)?;
        Ok(g.add(v, m)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checks::randomize;
    use crate::oracle::{quadrature_v, FlowRef, GridSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_model(seed: u64) -> (MeowModel, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, mut p) = MeowModel::new(2, 2, &ModelConfig::default(), &mut rng).unwrap();
        randomize(&m, &mut p, 0.15, seed + 1).unwrap();
        (m, p)
    }

    #[test]
    fn zero_heads_leave_q_and_v_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (m, mut p) = MeowModel::new(2, 2, &ModelConfig::default(), &mut rng).unwrap();
        m.flow.perturb(&mut p, 0.3, &mut rng).unwrap();
        let (s, a) = ([0.5, -0.2], [0.1, 0.9]);
        for head in [Head::First, Head::Second] {
            assert_eq!(
                m.q_shifted(&p, &s, &a, head).unwrap(),
                m.flow.soft_q(&p, &s, &a).unwrap()
            );
            assert_eq!(m.v_shifted(&p, &s, head).unwrap(), m.flow.soft_v(&p, &s).unwrap());
        }
    }

    #[test]
    fn constant_shifts_add() {
        let (m, mut p) = random_model(1);
        m.heads.set_constant(&mut p, Head::First, 0.5).unwrap();
        m.heads.set_constant(&mut p, Head::Second, 5.0).unwrap();
        let (s, a) = ([0.3, 0.3], [-0.4, 0.2]);
        let q = m.flow.soft_q(&p, &s, &a).unwrap();
        let v = m.flow.soft_v(&p, &s).unwrap();
        assert!((m.q_shifted(&p, &s, &a, Head::First).unwrap() - (q + 0.5)).abs() < 1e-12);
        assert!((m.v_shifted(&p, &s, Head::Second).unwrap() - (v + 5.0)).abs() < 1e-12);
        assert!((m.v_clip(&p, &s).unwrap() - (v + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn shifts_cancel_in_the_policy() {
        let (m, p) = random_model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let alpha = m.alpha();
        for _ in 0..200 {
            let s = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let a = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let lp = m.flow.log_prob(&p, &s, &a).unwrap();
            for head in [Head::First, Head::Second] {
                let shifted = (m.q_shifted(&p, &s, &a, head).unwrap() - m.v_shifted(&p, &s, head).unwrap()) / alpha;
                assert!((shifted - lp).abs() < 1e-12, "{shifted} {lp}");
            }
        }
    }

    #[test]
    fn v_clip_is_the_smaller_shifted_value() {
        let (m, p) = random_model(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let states: Vec<f64> = (0..40).map(|_| rng.random_range(-4.0..4.0)).collect();
        let mut g = Graph::new();
        let b = g.bind(&p, false);
        let sv = g.constant(Tensor::matrix(20, 2, states.clone()).unwrap());
        let vc = m.v_clip_var(&mut g, &b, sv).unwrap();
        let batched = g.value(vc).data().to_vec();
        for (i, s) in states.chunks(2).enumerate() {
            let v1 = m.v_shifted(&p, s, Head::First).unwrap();
            let v2 = m.v_shifted(&p, s, Head::Second).unwrap();
            let vc = m.v_clip(&p, s).unwrap();
            assert_eq!(vc, v1.min(v2));
            assert!(vc <= v1 && vc <= v2);
            assert!((batched[i] - vc).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_heads_make_v_clip_either_shifted_value() {
        let (m, mut p) = random_model(6);
        m.heads.set_constant(&mut p, Head::First, 1.5).unwrap();
        m.heads.set_constant(&mut p, Head::Second, 1.5).unwrap();
        let s = [0.2, 0.7];
        assert_eq!(m.v_clip(&p, &s).unwrap(), m.v_shifted(&p, &s, Head::Second).unwrap());
    }

    #[test]
    fn shifted_value_matches_quadrature() {
        let (m, p) = random_model(7);
        let s = [0.4, -0.6];
        let (b1, _) = m.shifts(&p, &s).unwrap();
        let quad = quadrature_v(FlowRef::new(&m.flow, &p), &s, GridSpec::default()).unwrap() + b1;
        assert!((m.v_shifted(&p, &s, Head::First).unwrap() - quad).abs() < 1e-3);
    }

    #[test]
    fn v_clip_gradient_skips_the_larger_head() {
        let (m, mut p) = random_model(8);
        m.heads.set_constant(&mut p, Head::Second, 100.0).unwrap();
        let mut g = Graph::new();
        let b = g.bind(&p, true);
        let sv = g.constant(Tensor::matrix(2, 2, vec![0.1, 0.2, -0.5, 1.0]).unwrap());
        let v = m.v_clip_var(&mut g, &b, sv).unwrap();
        let total = g.sum(v).unwrap();
        let grads = g.backward(total).unwrap().for_binding(&g, &b);
        let norm = |prefix: &str| -> f64 {
            p.ids()
                .filter(|id| p.name(*id).starts_with(prefix))
                .map(|id| grads[id.index()].data().iter().map(|x| x * x).sum::<f64>())
                .sum()
        };
        assert_eq!(norm("shift.b2"), 0.0);
        assert!(norm("shift.b1") > 0.0);
    }

    #[test]
    fn head_index_is_checked() {
        assert_eq!(Head::try_from(2).unwrap(), Head::Second);
        assert!(Head::try_from(3).is_err());
    }
}
