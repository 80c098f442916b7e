//! The training loop: one environment interaction and one gradient step on a
//! single soft Bellman loss per call, with Polyak-averaged shadow parameters
//! supplying the target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Binding, Graph, ParamStore, Tensor, TensorError, VarId};
use crate::config::{RunConfig, TrainerConfig};
use crate::envs::{self, ActionMode, Environment, EvalSummary};
use crate::error::{MeowError, Result};
use crate::model::MeowModel;
use crate::optim::{clip_global_norm, polyak_update, Adam, AdamConfig};
use crate::policy;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    /// The action as emitted by the policy, before clipping.
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
}

/// A sampled minibatch in matrix form.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Tensor,
    pub next_states: Tensor,
    /// 1.0 for terminal transitions, else 0.0.
    pub dones: Tensor,
}

impl Batch {
    pub fn from_transitions(ts: &[&Transition]) -> Result<Self> {
        let first = ts.first().ok_or(MeowError::EmptyBuffer)?;
        let (sd, ad) = (first.s.len(), first.a.len());
        let n = ts.len();
        let gather = |f: &dyn Fn(&Transition) -> &[f64], width: usize| -> Result<Tensor> {
            let mut data = Vec::with_capacity(n * width);
            for t in ts {
                let row = f(t);
                if row.len() != width {
                    return Err(MeowError::Dimension {
                        what: "transition",
                        expected: width,
                        got: row.len(),
                    });
                }
                data.extend_from_slice(row);
            }
            Ok(Tensor::new(vec![n, width], data)?)
        };
        Ok(Self {
            states: gather(&|t| &t.s, sd)?,
            actions: gather(&|t| &t.a, ad)?,
            rewards: Tensor::vector(ts.iter().map(|t| t.r).collect())?,
            next_states: gather(&|t| &t.s_next, sd)?,
            dones: Tensor::vector(ts.iter().map(|t| if t.done { 1.0 } else { 0.0 }).collect())?,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Fixed-capacity ring of transitions; the oldest entry is overwritten first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: Vec::new(),
            capacity,
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Storage-order view of the current contents (not age order once the
    /// ring has wrapped).
    pub fn items(&self) -> &[Transition] {
        &self.items
    }

    /// `n` indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(MeowError::EmptyBuffer);
        }
        Ok((0..n).map(|_| rng.random_range(0..self.items.len())).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Batch> {
        let idx = self.sample_indices(n, rng)?;
        let picked: Vec<&Transition> = idx.iter().map(|&i| &self.items[i]).collect();
        Batch::from_transitions(&picked)
    }
}

/// Graph handles produced by [`compute_loss`].
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub loss: VarId,
    pub q: VarId,
    pub b1: VarId,
    pub b2: VarId,
    pub target: VarId,
    pub logdet_n: VarId,
    pub logdet_l: VarId,
}

/// Mean over the batch of `½(Q + b₁ − y)² + ½(Q + b₂ − y)²`, where
/// `y = r + γ(1 − done)·V^clip_{θ′}(s')` is detached.
pub fn compute_loss(
    g: &mut Graph,
    model: &MeowModel,
    online: &Binding,
    shadow: &Binding,
    batch: &Batch,
    gamma: f64,
) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(MeowError::EmptyBuffer);
    }
    let s = g.constant(batch.states.clone());
    let a = g.constant(batch.actions.clone());
    let s_next = g.constant(batch.next_states.clone());
    let r = g.constant(batch.rewards.clone());
    let not_done = g.constant(Tensor::vector(
        batch.dones.data().iter().map(|d| gamma * (1.0 - d)).collect(),
    )?);

    let v_next = model.v_clip_var(g, shadow, s_next)?;
    let boot = g.mul(not_done, v_next)?;
    let y = g.add(r, boot)?;
    let target = g.detach(y)?;

    let cond = model.flow.condition(g, online, s)?;
    let out = model.flow.forward(g, &cond, a)?;
    let q = model.flow.soft_q_var(g, &out)?;
    let b = model.heads.forward(g, online, s)?;
    let mut terms = Vec::with_capacity(2);
    for head in [b.b1, b.b2] {
        let qb = g.add(q, head)?;
        let err = g.sub(qb, target)?;
        let sq = g.square(err)?;
        terms.push(g.scale(sq, 0.5)?);
    }
    let total = g.add(terms[0], terms[1])?;
    let loss = g.mean(total)?;
    Ok(LossParts {
        loss,
        q,
        b1: b.b1,
        b2: b.b2,
        target,
        logdet_n: out.logdet_n,
        logdet_l: out.logdet_l,
    })
}

/// Loss value, eval mode; convenient for tests and checks.
pub fn loss_value(
    model: &MeowModel,
    online: &ParamStore,
    shadow: &ParamStore,
    batch: &Batch,
    gamma: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.bind(online, false);
    let sp = g.bind(shadow, false);
    let parts = compute_loss(&mut g, model, &p, &sp, batch, gamma)?;
    Ok(g.value(parts.loss).item()?)
}

/// Per-step record. Update statistics are `None` during warm-up.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub reward: f64,
    pub update: Option<UpdateMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateMetrics {
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub logdet_n_mean: f64,
    pub logdet_l_mean: f64,
    pub b1_mean: f64,
    pub b2_mean: f64,
    /// Mean of `V(s) + min(b₁, b₂)` over the batch states, online parameters.
    pub v_clip_mean: f64,
}

/// Online and shadow parameters, optimizer, buffer and the running episode.
pub struct Trainer {
    model: MeowModel,
    params: ParamStore,
    shadow: ParamStore,
    adam: Adam,
    config: TrainerConfig,
    env: Box<dyn Environment>,
    buffer: ReplayBuffer,
    step: usize,
    state: Option<Vec<f64>>,
    episode_t: usize,
    act_rng: ChaCha8Rng,
    batch_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    seed: u64,
}

/// Independent streams derived from one seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const INIT_STREAM: u64 = 0;
const ACT_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;

impl Trainer {
    /// Builds environment, model and optimizer from a run config.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let env = envs::make_env(&config.env);
        let spec = env.spec().clone();
        let mut rng = stream(config.seed, INIT_STREAM);
        let (model, params) = MeowModel::new(spec.state_dim, spec.action_dim, &config.model, &mut rng)?;
        Self::from_parts(model, params, env, config.trainer.clone(), config.seed)
    }

    pub fn from_parts(
        model: MeowModel,
        params: ParamStore,
        env: Box<dyn Environment>,
        config: TrainerConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let spec = env.spec();
        if spec.state_dim != model.state_dim() || spec.action_dim != model.action_dim() {
            return Err(MeowError::Dimension {
                what: "model vs environment",
                expected: spec.state_dim + spec.action_dim,
                got: model.state_dim() + model.action_dim(),
            });
        }
        let adam = Adam::new(
            &params,
            AdamConfig {
                lr: config.learning_rate,
                ..AdamConfig::default()
            },
        );
        Ok(Self {
            model,
            shadow: params.clone(),
            params,
            adam,
            buffer: ReplayBuffer::new(config.buffer_capacity),
            config,
            env,
            step: 0,
            state: None,
            episode_t: 0,
            act_rng: stream(seed, ACT_STREAM),
            batch_rng: stream(seed, BATCH_STREAM),
            dropout_rng: stream(seed, DROPOUT_STREAM),
            seed,
        })
    }

    pub fn model(&self) -> &MeowModel {
        &self.model
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn shadow(&self) -> &ParamStore {
        &self.shadow
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn env(&self) -> &dyn Environment {
        self.env.as_ref()
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    /// Environment steps taken so far.
    pub fn step(&self) -> usize {
        self.step
    }

    /// One interaction, then (after warm-up) one gradient step and one
    /// Polyak update.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let spec = self.env.spec().clone();
        let s = match self.state.take() {
            Some(s) => s,
            None => {
                self.episode_t = 0;
                self.env.reset(&mut self.act_rng)
            }
        };
        let a = if self.step < self.config.warmup_steps {
            spec.random_action(&mut self.act_rng)
        } else {
            policy::sample_action(&self.model.flow, &self.params, &s, &mut self.act_rng)?
        };
        let out = self.env.step(&s, &a)?;
        self.episode_t += 1;
        let reward = out.reward;
        if !(out.done || self.episode_t >= spec.horizon) {
            self.state = Some(out.next_state.clone());
        }
        self.buffer.push(Transition {
            s,
            a,
            r: out.reward,
            s_next: out.next_state,
            done: out.done,
        });
        let update = if self.step >= self.config.warmup_steps {
            Some(self.update()?)
        } else {
            None
        };
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            reward,
            update,
        })
    }

    /// Shifts both heads (online and shadow) by the constant `c` solving
    /// `mean(Q + b + c) = mean(r + γ(1−d)(V^clip + c))` on `batch`.
    ///
    /// `Q` without the shift is bounded above by `α log N(0)`, so at zero
    /// init the whole value level must be learned through `b`. Started far
    /// below its target, the regression pulls the flow's mode around faster
    /// than `b` can follow.
    fn fit_shift_offset(&mut self, batch: &Batch) -> Result<()> {
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let sp = g.bind(&self.shadow, false);
        let parts = compute_loss(&mut g, &self.model, &p, &sp, batch, self.config.gamma).map_err(loss_error)?;
        let n = batch.len() as f64;
        let (y, q, b1) = (
            g.value(parts.target).data(),
            g.value(parts.q).data(),
            g.value(parts.b1).data(),
        );
        let gap = y.iter().zip(q).zip(b1).map(|((y, q), b)| y - q - b).sum::<f64>() / n;
        let carried = batch
            .dones
            .data()
            .iter()
            .map(|d| self.config.gamma * (1.0 - d))
            .sum::<f64>()
            / n;
        if 1.0 - carried < 1e-6 {
            return Ok(());
        }
        let c = gap / (1.0 - carried);
        self.model.heads.offset(&mut self.params, c)?;
        self.model.heads.offset(&mut self.shadow, c)
    }

    fn update(&mut self) -> Result<UpdateMetrics> {
        let batch = self.buffer.sample(self.config.batch_size, &mut self.batch_rng)?;
        if self.adam.steps() == 0 && self.config.fit_shift_init {
            self.fit_shift_offset(&batch)?;
        }
        let dropout_seed = self.dropout_rng.random::<u64>();
        let mut g = Graph::train(ChaCha8Rng::seed_from_u64(dropout_seed));
        let p = g.bind(&self.params, true);
        let sp = g.bind(&self.shadow, false);
        let parts = compute_loss(&mut g, &self.model, &p, &sp, &batch, self.config.gamma).map_err(loss_error)?;
        let loss = g.value(parts.loss).item()?;
        let grads = g.backward(parts.loss)?;
        let mut grads = grads.for_binding(&g, &p);
        let grad_norm = clip_global_norm(&mut grads, self.config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(MeowError::NonFinite { what: "gradient" });
        }
        self.adam.step(&mut self.params, &grads)?;
        polyak_update(&mut self.shadow, &self.params, self.config.tau)?;

        let mean = |v: VarId| {
            let d = g.value(v).data();
            d.iter().sum::<f64>() / d.len() as f64
        };
        let alpha = self.model.alpha();
        let (ll, b1, b2) = (
            g.value(parts.logdet_l).data(),
            g.value(parts.b1).data(),
            g.value(parts.b2).data(),
        );
        let v_clip_mean = ll
            .iter()
            .zip(b1.iter().zip(b2))
            .map(|(l, (x, y))| -alpha * l + x.min(*y))
            .sum::<f64>()
            / ll.len() as f64;
        Ok(UpdateMetrics {
            loss,
            grad_norm,
            logdet_n_mean: mean(parts.logdet_n),
            logdet_l_mean: mean(parts.logdet_l),
            b1_mean: mean(parts.b1),
            b2_mean: mean(parts.b2),
            v_clip_mean,
        })
    }

    /// Evaluation rollouts on a private stream that restarts at every call,
    /// so successive evaluations see the same initial states.
    pub fn evaluate(&self, episodes: usize, mode: ActionMode) -> Result<EvalSummary> {
        let mut rng = stream(self.seed, EVAL_STREAM);
        let (summary, _) = envs::evaluate(
            self.env.as_ref(),
            &self.model.flow,
            &self.params,
            episodes,
            mode,
            &mut rng,
        )?;
        Ok(summary)
    }

    /// Consumes the trainer, returning the model and online parameters.
    pub fn into_parts(self) -> (MeowModel, ParamStore) {
        (self.model, self.params)
    }
}

fn loss_error(e: MeowError) -> MeowError {
    match e {
        MeowError::Tensor(TensorError::NonFinite { .. }) => MeowError::NonFinite { what: "loss" },
        other => other,
    }
}
