//! Environments: the 2-D four-goal point mass and a one-step diagnostic.
//!
//! Environments are stateless value objects: `step` maps `(s, a)` to the
//! successor, so episode bookkeeping (the horizon) lives with the caller.
//! Actions arrive unbounded and are clipped to the action box here.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::autodiff::ParamStore;
pub use crate::config::ActionMode;
use crate::config::{EnvConfig, EnvName};
use crate::error::{MeowError, Result};
use crate::flow::FlowModel;
use crate::policy;

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub horizon: usize,
}

impl EnvSpec {
    pub fn clip(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&x, (&lo, &hi))| x.clamp(lo, hi))
            .collect()
    }

    /// A uniform draw from the action box.
    pub fn random_action<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.action_low
            .iter()
            .zip(&self.action_high)
            .map(|(&lo, &hi)| rng.random_range(lo..hi))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// True termination; running out of horizon is not termination.
    pub done: bool,
}

pub trait Environment: Send + Sync {
    fn spec(&self) -> &EnvSpec;
    fn reset(&self, rng: &mut dyn rand::RngCore) -> Vec<f64>;
    fn step(&self, s: &[f64], a: &[f64]) -> Result<Step>;
    /// Task-specific progress measure reported at the end of an episode.
    fn final_distance(&self, _s: &[f64]) -> Option<f64> {
        None
    }
}

pub fn make_env(config: &EnvConfig) -> Box<dyn Environment> {
    match config.name {
        EnvName::Multigoal => Box::new(MultiGoalEnv::new(config)),
        EnvName::Onestep => Box::new(OneStepEnv::new()),
    }
}

fn check_dims(spec: &EnvSpec, s: &[f64], a: &[f64]) -> Result<()> {
    if s.len() != spec.state_dim {
        return Err(MeowError::Dimension {
            what: "state",
            expected: spec.state_dim,
            got: s.len(),
        });
    }
    if a.len() != spec.action_dim {
        return Err(MeowError::Dimension {
            what: "action",
            expected: spec.action_dim,
            got: a.len(),
        });
    }
    if s.iter().chain(a).any(|v| !v.is_finite()) {
        return Err(MeowError::NonFinite {
            what: "state or action",
        });
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Point mass in the plane with four goals at distance 5 from the origin.
///
/// `s' = s + k·clip(a)` and `r = max_i −‖s' − g_i‖ − 30‖clip(a)‖`, where `k`
/// is `action_scale`. The distance term is read at the successor state.
#[derive(Debug, Clone)]
pub struct MultiGoalEnv {
    spec: EnvSpec,
    goals: [[f64; 2]; 4],
    init_sigma: f64,
    action_scale: f64,
}

impl MultiGoalEnv {
    pub const GOALS: [[f64; 2]; 4] = [[0.0, 5.0], [0.0, -5.0], [5.0, 0.0], [-5.0, 0.0]];
    pub const ACTION_COST: f64 = 30.0;

    pub fn new(config: &EnvConfig) -> Self {
        Self {
            spec: EnvSpec {
                state_dim: 2,
                action_dim: 2,
                action_low: vec![-1.0; 2],
                action_high: vec![1.0; 2],
                horizon: config.horizon,
            },
            goals: Self::GOALS,
            init_sigma: config.init_sigma,
            action_scale: config.action_scale,
        }
    }

    pub fn goals(&self) -> &[[f64; 2]; 4] {
        &self.goals
    }

    /// `max_i −‖s − g_i‖`.
    pub fn goal_reward(&self, s: &[f64]) -> f64 {
        -self.nearest_goal_distance(s)
    }

    pub fn action_reward(&self, a: &[f64]) -> f64 {
        -Self::ACTION_COST * norm(a)
    }

    pub fn nearest_goal_distance(&self, s: &[f64]) -> f64 {
        self.goals
            .iter()
            .map(|g| norm(&[s[0] - g[0], s[1] - g[1]]))
            .fold(f64::INFINITY, f64::min)
    }
}

impl Environment for MultiGoalEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        if self.init_sigma == 0.0 {
            return vec![0.0, 0.0];
        }
        let n = Normal::new(0.0, self.init_sigma).expect("init_sigma validated non-negative");
        vec![n.sample(rng), n.sample(rng)]
    }

    fn step(&self, s: &[f64], a: &[f64]) -> Result<Step> {
        check_dims(&self.spec, s, a)?;
        let a = self.spec.clip(a);
        let next_state: Vec<f64> = s.iter().zip(&a).map(|(x, u)| x + self.action_scale * u).collect();
        let reward = self.goal_reward(&next_state) + self.action_reward(&a);
        Ok(Step {
            next_state,
            reward,
            done: false,
        })
    }

    fn final_distance(&self, s: &[f64]) -> Option<f64> {
        Some(self.nearest_goal_distance(s))
    }
}

/// One-step task with a 1-D state `s ~ U[−1, 1]` and two symmetric optimal
/// actions `±μ(s)`, `μ(s) = 0.5 + 0.25·s`:
/// `r = −4·min((a − μ)², (a + μ)²)`.
#[derive(Debug, Clone)]
pub struct OneStepEnv {
    spec: EnvSpec,
}

impl OneStepEnv {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                state_dim: 1,
                action_dim: 1,
                action_low: vec![-1.0],
                action_high: vec![1.0],
                horizon: 1,
            },
        }
    }

    pub fn optimum(s: f64) -> f64 {
        0.5 + 0.25 * s
    }
}

impl Default for OneStepEnv {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for OneStepEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        vec![rng.random_range(-1.0..=1.0)]
    }

    fn step(&self, s: &[f64], a: &[f64]) -> Result<Step> {
        check_dims(&self.spec, s, a)?;
        let a = self.spec.clip(a)[0];
        let mu = Self::optimum(s[0]);
        let reward = -4.0 * (a - mu).powi(2).min((a + mu).powi(2));
        Ok(Step {
            next_state: s.to_vec(),
            reward,
            done: true,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Episode {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub episode_return: f64,
    pub final_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub mode: ActionMode,
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_final_distance: Option<f64>,
}

/// Runs one episode (until termination or horizon) with the given policy.
pub fn rollout<R: Rng>(
    env: &dyn Environment,
    flow: &FlowModel,
    p: &ParamStore,
    mode: ActionMode,
    rng: &mut R,
) -> Result<Episode> {
    let mut s = env.reset(rng);
    let mut ep = Episode {
        states: vec![s.clone()],
        actions: Vec::new(),
        rewards: Vec::new(),
        episode_return: 0.0,
        final_distance: None,
    };
    for _ in 0..env.spec().horizon {
        let a = match mode {
            ActionMode::Deterministic => policy::deterministic_action(flow, p, &s)?,
            ActionMode::Stochastic => policy::sample_action(flow, p, &s, rng)?,
        };
        let step = env.step(&s, &a)?;
        ep.episode_return += step.reward;
        ep.rewards.push(step.reward);
        ep.actions.push(env.spec().clip(&a));
        s = step.next_state;
        ep.states.push(s.clone());
        if step.done {
            break;
        }
    }
    ep.final_distance = env.final_distance(&s);
    Ok(ep)
}

/// Mean and population standard deviation of episode returns, plus the mean
/// final distance when the environment defines one.
pub fn evaluate<R: Rng>(
    env: &dyn Environment,
    flow: &FlowModel,
    p: &ParamStore,
    episodes: usize,
    mode: ActionMode,
    rng: &mut R,
) -> Result<(EvalSummary, Vec<Episode>)> {
    if episodes == 0 {
        return Err(MeowError::Config("evaluation needs at least one episode".into()));
    }
    let eps = (0..episodes)
        .map(|_| rollout(env, flow, p, mode, rng))
        .collect::<Result<Vec<_>>>()?;
    let n = eps.len() as f64;
    let mean = eps.iter().map(|e| e.episode_return).sum::<f64>() / n;
    let var = eps.iter().map(|e| (e.episode_return - mean).powi(2)).sum::<f64>() / n;
    let dists: Vec<f64> = eps.iter().filter_map(|e| e.final_distance).collect();
    let mean_final_distance = (!dists.is_empty()).then(|| dists.iter().sum::<f64>() / dists.len() as f64);
    let summary = EvalSummary {
        mode,
        episodes,
        mean_return: mean,
        std_return: var.sqrt(),
        mean_final_distance,
    };
    Ok((summary, eps))
}
