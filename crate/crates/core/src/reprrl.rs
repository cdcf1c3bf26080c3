//! Representation transfer: encoder embeddings of single states and
//! state-action pairs, and an offline TD3 learner that reads raw states,
//! frozen embeddings or finetuned embeddings.
//!
//! In both embedding modes the actor consumes state embeddings; only the
//! critic sees joint state-action embeddings. When finetuning, the encoder
//! is trained from the critic loss alone and has its own polyak target.

use std::fmt;
use std::str::FromStr;

use diffcore::{Gradients, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::capabilities::{rollout_eval, Policy, RolloutContext};
use crate::envs::{Env, ReferenceReturns};
use crate::error::{invalid, MtmError, Result};
use crate::model::{MtmModel, Pass};
use crate::seeded_rng;
use crate::training::{optimizer_step, OptimState, ADAM_BETAS, ADAM_EPS};
use crate::trajdata::{compute_rtg, ModalStats, NormStats, Trajectory};

const INIT_STREAM: u64 = 0x7d3;
const EVAL_STREAM: u64 = 0xe7a1;

fn matrix(rows: &[Vec<f64>], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        if r.len() != dim {
            return Err(MtmError::Dimension(format!("expected length {dim}, got {}", r.len())));
        }
        data.extend_from_slice(r);
    }
    Ok(Tensor::matrix(rows.len(), dim, data))
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Encoder latent of each state's token (`embed_dim` each), in eval mode.
/// States are raw; `norm` is the model's training normalization.
pub fn encode_state(model: &MtmModel, norm: &NormStats, states: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let normed: Vec<Vec<f64>> = states.iter().map(|s| norm.state.apply(s)).collect();
    let mut tape = Tape::new();
    let s = tape.constant(matrix(&normed, model.config().state_dim)?)?;
    let z = model.encode_step(&mut tape, s, None, &mut Pass::eval())?;
    Ok(rows_of(tape.value(z)))
}

/// Concatenated state and action token latents (`2 * embed_dim` each).
pub fn encode_state_action(model: &MtmModel, norm: &NormStats, states: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let cfg = model.config();
    let s: Vec<Vec<f64>> = states.iter().map(|s| norm.state.apply(s)).collect();
    let a: Vec<Vec<f64>> = actions.iter().map(|a| norm.action.apply(a)).collect();
    let mut tape = Tape::new();
    let sv = tape.constant(matrix(&s, cfg.state_dim)?)?;
    let av = tape.constant(matrix(&a, cfg.action_dim)?)?;
    let z = model.encode_step(&mut tape, sv, Some(av), &mut Pass::eval())?;
    Ok(rows_of(tape.value(z)))
}

/// Input routing for the actor and critics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Raw,
    MtmState,
    MtmStateAction,
}

impl Representation {
    pub const ALL: [Representation; 3] = [Representation::Raw, Representation::MtmState, Representation::MtmStateAction];

    pub fn name(self) -> &'static str {
        match self {
            Representation::Raw => "raw",
            Representation::MtmState => "mtm_state",
            Representation::MtmStateAction => "mtm_state_action",
        }
    }

    pub fn uses_encoder(self) -> bool {
        self != Representation::Raw
    }
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Representation {
    type Err = MtmError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| invalid(format!("unknown representation {s:?} (raw | mtm_state | mtm_state_action)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Td3Config {
    pub discount: f64,
    /// Fraction of the source mixed into each target per update.
    pub polyak: f64,
    pub policy_delay: u64,
    /// Target smoothing noise std, in units of the action bound.
    pub target_noise: f64,
    /// Smoothing noise clip, in units of the action bound.
    pub noise_clip: f64,
    pub actor_width: usize,
    pub actor_depth: usize,
    pub critic_width: usize,
    pub critic_depth: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub encoder_lr: f64,
    pub batch_size: usize,
    pub updates: u64,
    pub representation: Representation,
    pub finetune: bool,
    /// Updates between policy evaluations; 0 evaluates only at the end.
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            discount: 0.99,
            polyak: 0.005,
            policy_delay: 2,
            target_noise: 0.2,
            noise_clip: 0.5,
            actor_width: 64,
            actor_depth: 2,
            critic_width: 64,
            critic_depth: 2,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            encoder_lr: 3e-5,
            batch_size: 256,
            updates: 10_000,
            representation: Representation::Raw,
            finetune: false,
            eval_interval: 1000,
            eval_episodes: 10,
            seed: 0,
        }
    }
}

impl Td3Config {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(MtmError::Config(m));
        if self.policy_delay < 1 {
            return err("policy_delay must be at least 1".into());
        }
        if !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return err(format!("polyak must lie in (0, 1], got {}", self.polyak));
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return err(format!("discount must lie in [0, 1], got {}", self.discount));
        }
        if !(self.target_noise >= 0.0 && self.noise_clip >= 0.0) {
            return err("target_noise and noise_clip must be non-negative".into());
        }
        for (name, lr) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr), ("encoder_lr", self.encoder_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return err(format!("{name} must be positive, got {lr}"));
            }
        }
        if (self.actor_depth > 0 && self.actor_width == 0) || (self.critic_depth > 0 && self.critic_width == 0) {
            return err("hidden widths must be positive".into());
        }
        if self.batch_size == 0 || self.updates == 0 || self.eval_episodes == 0 {
            return err("batch_size, updates and eval_episodes must be positive".into());
        }
        Ok(())
    }
}

/// Fully connected ReLU network; `depth` hidden layers of equal width.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub params: ParamStore,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Weights and biases uniform in `+-1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(input: usize, width: usize, depth: usize, output: usize, rng: &mut R) -> Self {
        let mut sizes = vec![input];
        sizes.extend(std::iter::repeat_n(width, depth));
        sizes.push(output);
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        for (i, w) in sizes.windows(2).enumerate() {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let mut draw = |n: usize| (0..n).map(|_| rng.sample(dist)).collect::<Vec<f64>>();
            let wt = Tensor::matrix(w[0], w[1], draw(w[0] * w[1]));
            let bt = Tensor::matrix(1, w[1], draw(w[1]));
            layers.push((params.add(format!("l{i}.w"), wt, false), params.add(format!("l{i}.b"), bt, false)));
        }
        Self { params, layers }
    }

    /// Leaves for every parameter in id order.
    fn leaves(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| Ok(tape.leaf(p.value.clone(), trainable)?))
            .collect()
    }

    fn apply(&self, tape: &mut Tape, mut x: Var, vars: &[Var]) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            x = tape.linear(x, vars[w.0], vars[b.0])?;
            if i < last {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }

    fn set_grads(&mut self, grads: &Gradients, vars: &[Var]) {
        self.params.zero_grad();
        for (p, v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = grads.get(*v) {
                p.grad.add_assign(g);
            }
        }
    }
}

/// Transitions sampled for one update. States are normalized; actions raw.
#[derive(Clone, Debug, PartialEq)]
pub struct Td3Batch {
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Vec<f64>,
    pub next_states: Tensor,
}

impl Td3Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Flattened `(s, a, r, s')` transitions of an offline dataset.
#[derive(Clone, Debug)]
pub struct Td3Data {
    state_dim: usize,
    action_dim: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
}

impl Td3Data {
    /// Every consecutive pair of timesteps; states normalized with `state_norm`.
    pub fn new(trajs: &[&Trajectory], state_norm: &ModalStats) -> Result<Self> {
        let first = trajs.first().ok_or_else(|| invalid("empty TD3 dataset"))?;
        let (sd, ad) = (first.state_dim, first.action_dim);
        let mut d = Self {
            state_dim: sd,
            action_dim: ad,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
        };
        for t in trajs {
            let t = t.to_f64();
            let actions = t.actions.as_ref().ok_or_else(|| invalid("TD3 needs actions; a trajectory has none"))?;
            if t.state_dim != sd || t.action_dim != ad {
                return Err(MtmError::Dimension("trajectories differ in dimensions".into()));
            }
            for i in 0..t.len().saturating_sub(1) {
                d.states.extend(state_norm.apply(&t.states[i * sd..(i + 1) * sd]));
                d.next_states.extend(state_norm.apply(&t.states[(i + 1) * sd..(i + 2) * sd]));
                d.actions.extend_from_slice(&actions[i * ad..(i + 1) * ad]);
                d.rewards.push(t.rewards[i]);
            }
        }
        if d.rewards.is_empty() {
            return Err(invalid("TD3 dataset has no transition"));
        }
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Td3Batch {
        let (sd, ad) = (self.state_dim, self.action_dim);
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.len())).collect();
        let pick = |src: &[f64], dim: usize| Tensor::matrix(n, dim, idx.iter().flat_map(|&i| src[i * dim..(i + 1) * dim].iter().copied()).collect());
        Td3Batch {
            states: pick(&self.states, sd),
            actions: pick(&self.actions, ad),
            rewards: idx.iter().map(|&i| self.rewards[i]).collect(),
            next_states: pick(&self.next_states, sd),
        }
    }
}

/// Gaussian target-smoothing noise, clipped entrywise to `+-clip`.
pub fn smoothing_noise<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64, clip: f64) -> Vec<f64> {
    (0..n).map(|_| (std * rng.sample::<f64, _>(StandardNormal)).clamp(-clip, clip)).collect()
}

/// Rewards recomputed with `env`'s task reward from each next state. The
/// final step has no stored successor and keeps its reward.
pub fn relabel_rewards(env: &Env, traj: &Trajectory) -> Trajectory {
    let mut out = traj.clone();
    let sd = traj.state_dim;
    for t in 0..traj.len().saturating_sub(1) {
        let next: Vec<f64> = traj.states[(t + 1) * sd..(t + 2) * sd].iter().map(|v| *v as f64).collect();
        out.rewards[t] = env.reward(&next) as f32;
    }
    if out.rtg.is_some() {
        out.rtg = Some(compute_rtg(&out.rewards));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Td3Diagnostics {
    pub critic_loss: f64,
    pub actor_loss: Option<f64>,
    pub mean_target: f64,
}

/// Twin-delayed actor-critic with optional encoder in front of it.
#[derive(Clone, Debug)]
pub struct Td3Agent {
    pub config: Td3Config,
    pub actor: Mlp,
    pub actor_target: Mlp,
    pub critics: [Mlp; 2],
    pub critic_targets: [Mlp; 2],
    pub encoder: Option<MtmModel>,
    pub encoder_target: Option<MtmModel>,
    pub state_norm: ModalStats,
    pub action_norm: ModalStats,
    pub action_bound: f64,
    pub updates: u64,
    actor_opt: OptimState,
    critic_opts: [OptimState; 2],
    encoder_opt: Option<OptimState>,
}

impl Td3Agent {
    /// `norm` supplies state (and, for joint embeddings, action)
    /// normalization; with an encoder it must be the encoder's own.
    pub fn new(config: Td3Config, state_dim: usize, action_dim: usize, action_bound: f64, norm: &NormStats, encoder: Option<MtmModel>) -> Result<Self> {
        config.validate()?;
        let repr = config.representation;
        let encoder = if repr.uses_encoder() {
            let e = encoder.ok_or_else(|| invalid(format!("{repr} needs a pretrained model")))?;
            if e.config().state_dim != state_dim || e.config().action_dim != action_dim {
                return Err(MtmError::Dimension("pretrained model dimensions differ from the dataset's".into()));
            }
            Some(e)
        } else {
            None
        };
        if norm.state.dim() != state_dim || norm.action.dim() != action_dim {
            return Err(MtmError::Dimension("normalization dimensions differ from the dataset's".into()));
        }
        let d = encoder.as_ref().map_or(0, |e| e.config().embed_dim);
        let (actor_in, critic_in) = match repr {
            Representation::Raw => (state_dim, state_dim + action_dim),
            Representation::MtmState => (d, d + action_dim),
            Representation::MtmStateAction => (d, 2 * d),
        };
        let mut rng = seeded_rng(config.seed, INIT_STREAM);
        let actor = Mlp::new(actor_in, config.actor_width, config.actor_depth, action_dim, &mut rng);
        let critics = [0, 1].map(|_| Mlp::new(critic_in, config.critic_width, config.critic_depth, 1, &mut rng));
        let encoder_opt = encoder.as_ref().filter(|_| config.finetune).map(|e| OptimState::new(&e.params));
        Ok(Self {
            actor_opt: OptimState::new(&actor.params),
            critic_opts: [OptimState::new(&critics[0].params), OptimState::new(&critics[1].params)],
            actor_target: actor.clone(),
            critic_targets: critics.clone(),
            encoder_target: encoder.clone(),
            actor,
            critics,
            encoder,
            encoder_opt,
            state_norm: norm.state.clone(),
            action_norm: norm.action.clone(),
            action_bound,
            updates: 0,
            config,
        })
    }

    fn finetuning(&self) -> bool {
        self.encoder_opt.is_some()
    }

    fn features(&self, tape: &mut Tape, enc: Option<&MtmModel>, s: Var) -> Result<Var> {
        match enc {
            None => Ok(s),
            Some(e) => e.encode_step(tape, s, None, &mut Pass::eval()),
        }
    }

    fn critic_input(&self, tape: &mut Tape, enc: Option<&MtmModel>, s: Var, a: Var, train_encoder: bool) -> Result<Var> {
        let mut pass = if train_encoder { Pass::grad_no_dropout() } else { Pass::eval() };
        match (self.config.representation, enc) {
            (Representation::Raw, _) => Ok(tape.concat(&[s, a], 1)?),
            (Representation::MtmState, Some(e)) => {
                let z = e.encode_step(tape, s, None, &mut pass)?;
                Ok(tape.concat(&[z, a], 1)?)
            }
            (Representation::MtmStateAction, Some(e)) => {
                let n = tape.value(a).rows();
                let ad = self.action_norm.dim();
                let shift = tape.constant(Tensor::matrix(1, ad, self.action_norm.mean.iter().map(|m| -m).collect()))?;
                let inv: Vec<f64> = (0..n).flat_map(|_| self.action_norm.std.iter().map(|s| 1.0 / s)).collect();
                let inv = tape.constant(Tensor::matrix(n, ad, inv))?;
                let centered = tape.add_row(a, shift)?;
                let an = tape.mul(centered, inv)?;
                e.encode_step(tape, s, Some(an), &mut pass)
            }
            _ => Err(invalid("embedding representation without an encoder")),
        }
    }

    fn act(&self, tape: &mut Tape, actor: &Mlp, vars: &[Var], feats: Var) -> Result<Var> {
        let pre = actor.apply(tape, feats, vars)?;
        let sq = tape.tanh(pre)?;
        Ok(tape.scale(sq, self.action_bound)?)
    }

    /// Deterministic actions for normalized states.
    pub fn policy_actions(&self, states: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let s = tape.constant(states.clone())?;
        let f = self.features(&mut tape, self.encoder.as_ref(), s)?;
        let vars = self.actor.leaves(&mut tape, false)?;
        let a = self.act(&mut tape, &self.actor, &vars, f)?;
        Ok(tape.value(a).clone())
    }

    /// Clipped double-Q targets `r + discount * min(Q1', Q2')(s', a')` with
    /// smoothed target actions; only target networks are read.
    pub fn critic_targets<R: Rng + ?Sized>(&self, batch: &Td3Batch, rng: &mut R) -> Result<Vec<f64>> {
        let n = batch.len();
        let c = &self.config;
        let bound = self.action_bound;
        let enc = self.encoder_target.as_ref();
        let mut tape = Tape::new();
        let s2 = tape.constant(batch.next_states.clone())?;
        let f2 = self.features(&mut tape, enc, s2)?;
        let av = self.actor_target.leaves(&mut tape, false)?;
        let a2 = self.act(&mut tape, &self.actor_target, &av, f2)?;
        let noise = smoothing_noise(rng, n * batch.actions.cols(), c.target_noise * bound, c.noise_clip * bound);
        let a2: Vec<f64> = tape.value(a2).data().iter().zip(&noise).map(|(a, e)| (a + e).clamp(-bound, bound)).collect();
        let a2 = tape.constant(Tensor::matrix(n, batch.actions.cols(), a2))?;
        let x = self.critic_input(&mut tape, enc, s2, a2, false)?;
        let mut qs = Vec::new();
        for critic in &self.critic_targets {
            let vars = critic.leaves(&mut tape, false)?;
            qs.push(critic.apply(&mut tape, x, &vars)?);
        }
        let (q1, q2) = (tape.value(qs[0]).data(), tape.value(qs[1]).data());
        let y: Vec<f64> = (0..n).map(|i| batch.rewards[i] + c.discount * q1[i].min(q2[i])).collect();
        if y.iter().any(|v| !v.is_finite()) {
            return Err(MtmError::NonFinite("TD3 critic target".into()));
        }
        Ok(y)
    }

    /// One TD3 update: both critics (and the encoder, when finetuning)
    /// regress to the targets; every `policy_delay` updates the actor
    /// ascends Q1 and all targets are polyak-averaged.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &Td3Batch, rng: &mut R) -> Result<Td3Diagnostics> {
        let y = self.critic_targets(batch, rng)?;
        let n = batch.len();
        let finetune = self.finetuning();

        let mut tape = Tape::new();
        let s = tape.constant(batch.states.clone())?;
        let a = tape.constant(batch.actions.clone())?;
        let x = self.critic_input(&mut tape, self.encoder.as_ref(), s, a, finetune)?;
        let yv = tape.constant(Tensor::matrix(n, 1, y.clone()))?;
        let mut vars = Vec::new();
        let mut losses = Vec::new();
        for critic in &self.critics {
            let v = critic.leaves(&mut tape, true)?;
            let q = critic.apply(&mut tape, x, &v)?;
            losses.push(tape.mse(q, yv)?);
            vars.push(v);
        }
        let loss = tape.add(losses[0], losses[1])?;
        let critic_loss = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        for (i, v) in vars.iter().enumerate() {
            self.critics[i].set_grads(&grads, v);
            optimizer_step(&mut self.critics[i].params, &mut self.critic_opts[i], self.config.critic_lr, 0.0, ADAM_BETAS, ADAM_EPS)?;
        }
        if let (Some(e), Some(opt)) = (self.encoder.as_mut(), self.encoder_opt.as_mut()) {
            e.params.zero_grad();
            grads.accumulate_into(&tape, &mut e.params);
            optimizer_step(&mut e.params, opt, self.config.encoder_lr, 0.0, ADAM_BETAS, ADAM_EPS)?;
        }
        self.updates += 1;

        let mut actor_loss = None;
        if self.updates % self.config.policy_delay == 0 {
            let mut tape = Tape::new();
            let s = tape.constant(batch.states.clone())?;
            let f = self.features(&mut tape, self.encoder.as_ref(), s)?;
            let av = self.actor.leaves(&mut tape, true)?;
            let act = self.act(&mut tape, &self.actor, &av, f)?;
            let x = self.critic_input(&mut tape, self.encoder.as_ref(), s, act, false)?;
            let cv = self.critics[0].leaves(&mut tape, false)?;
            let q = self.critics[0].apply(&mut tape, x, &cv)?;
            let mean_q = tape.mean(q)?;
            let loss = tape.scale(mean_q, -1.0)?;
            actor_loss = Some(tape.value(loss).data()[0]);
            let grads = tape.backward(loss)?;
            self.actor.set_grads(&grads, &av);
            optimizer_step(&mut self.actor.params, &mut self.actor_opt, self.config.actor_lr, 0.0, ADAM_BETAS, ADAM_EPS)?;

            let tau = self.config.polyak;
            self.actor_target.params.polyak_from(&self.actor.params, tau);
            for i in 0..2 {
                self.critic_targets[i].params.polyak_from(&self.critics[i].params, tau);
            }
            if finetune {
                if let (Some(t), Some(e)) = (self.encoder_target.as_mut(), self.encoder.as_ref()) {
                    t.params.polyak_from(&e.params, tau);
                }
            }
        }
        Ok(Td3Diagnostics {
            critic_loss,
            actor_loss,
            mean_target: y.iter().sum::<f64>() / n as f64,
        })
    }
}

/// Free-function form of [`Td3Agent::update`].
pub fn td3_update<R: Rng + ?Sized>(agent: &mut Td3Agent, batch: &Td3Batch, rng: &mut R) -> Result<Td3Diagnostics> {
    agent.update(batch, rng)
}

impl Policy for Td3Agent {
    fn act_batch(&self, contexts: &[RolloutContext]) -> Result<Vec<Vec<f64>>> {
        let states: Vec<Vec<f64>> = contexts.iter().map(|c| self.state_norm.apply(&c.state)).collect();
        let a = self.policy_actions(&matrix(&states, self.state_norm.dim())?)?;
        Ok(rows_of(&a))
    }

    fn history_len(&self) -> usize {
        0
    }
}

/// One evaluation of the deterministic policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub update: u64,
    pub mean_return: f64,
    pub mean_normalized: f64,
    pub critic_loss: f64,
}

/// Offline TD3 on `trajs` (rewards already relabeled for `env`'s task).
/// Embedding modes need `pretrained` together with its normalization.
pub fn td3_train_offline(
    trajs: &[&Trajectory],
    env: &Env,
    refs: &ReferenceReturns,
    pretrained: Option<(&MtmModel, &NormStats)>,
    config: &Td3Config,
) -> Result<(Td3Agent, Vec<CurvePoint>)> {
    config.validate()?;
    if trajs.iter().any(|t| t.actions.is_none()) {
        return Err(invalid("TD3 needs actions; the dataset has state-only trajectories"));
    }
    let (norm, encoder) = match (config.representation.uses_encoder(), pretrained) {
        (true, Some((m, n))) => (n.clone(), Some(m.clone())),
        (true, None) => return Err(invalid(format!("{} needs a pretrained model", config.representation))),
        (false, _) => (NormStats::fit(trajs)?, None),
    };
    let data = Td3Data::new(trajs, &norm.state)?;
    let mut agent = Td3Agent::new(config.clone(), env.state_dim(), env.action_dim(), env.action_bound(), &norm, encoder)?;
    let mut curve = Vec::new();
    let mut loss_acc = 0.0;
    let mut loss_n = 0usize;
    while agent.updates < config.updates {
        let mut rng = seeded_rng(config.seed, agent.updates);
        let batch = data.sample(config.batch_size, &mut rng);
        loss_acc += agent.update(&batch, &mut rng)?.critic_loss;
        loss_n += 1;
        let u = agent.updates;
        if u == config.updates || (config.eval_interval > 0 && u % config.eval_interval == 0) {
            let report = rollout_eval(&agent, env, refs, None, config.eval_episodes, config.seed ^ EVAL_STREAM)?;
            curve.push(CurvePoint {
                update: u,
                mean_return: report.mean_return,
                mean_normalized: report.mean_normalized,
                critic_loss: loss_acc / loss_n as f64,
            });
            loss_acc = 0.0;
            loss_n = 0;
        }
    }
    Ok((agent, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvConfig, Quality, ScriptedPolicySpec};
    use crate::model::ModelConfig;
    use crate::trajdata::Dataset;

    fn identity(d: usize) -> ModalStats {
        ModalStats {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    fn identity_norm(sd: usize, ad: usize) -> NormStats {
        NormStats {
            rtg: identity(1),
            state: identity(sd),
            action: identity(ad),
        }
    }

    fn scalar_config() -> Td3Config {
        Td3Config {
            discount: 0.9,
            polyak: 0.3,
            policy_delay: 1,
            target_noise: 0.2,
            noise_clip: 0.5,
            actor_depth: 0,
            critic_depth: 0,
            actor_lr: 0.01,
            critic_lr: 0.02,
            batch_size: 3,
            ..Td3Config::default()
        }
    }

    fn scalar_batch() -> Td3Batch {
        Td3Batch {
            states: Tensor::matrix(3, 1, vec![0.5, -1.2, 0.3]),
            actions: Tensor::matrix(3, 1, vec![0.7, -0.4, 1.5]),
            rewards: vec![1.0, -0.5, 0.25],
            next_states: Tensor::matrix(3, 1, vec![0.6, -1.0, 0.9]),
        }
    }

    fn adam_first(p: f64, g: f64, lr: f64) -> f64 {
        let m = 0.1 * g / (1.0 - 0.9);
        let v = 0.001 * g * g / (1.0 - 0.999);
        p - lr * m / (v.sqrt() + 1e-8)
    }

    fn vals(m: &Mlp) -> Vec<f64> {
        m.params.iter().map(|p| p.value.data().to_vec()).collect::<Vec<_>>().concat()
    }

    #[test]
    fn update_matches_scalar_oracle() {
        let cfg = scalar_config();
        let bound = 2.0;
        let mut agent = Td3Agent::new(cfg.clone(), 1, 1, bound, &identity_norm(1, 1), None).unwrap();
        // distinct targets so the oracle exercises the target copies
        let mut rng = seeded_rng(3, 3);
        let [c0, c1] = &mut agent.critic_targets;
        for m in [&mut agent.actor_target, c0, c1] {
            for p in m.params.iter_mut() {
                p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            }
        }
        let [wa, ba] = vals(&agent.actor)[..] else { panic!() };
        let [twa, tba] = vals(&agent.actor_target)[..] else { panic!() };
        let c: Vec<[f64; 3]> = agent.critics.iter().map(|m| vals(m).try_into().unwrap()).collect();
        let tc: Vec<[f64; 3]> = agent.critic_targets.iter().map(|m| vals(m).try_into().unwrap()).collect();
        let b = scalar_batch();
        let (s, a, r, s2) = (b.states.data(), b.actions.data(), &b.rewards, b.next_states.data());
        let n = 3.0;

        let mut rng = seeded_rng(11, 0);
        let mut oracle_rng = rng.clone();
        let diag = agent.update(&b, &mut rng).unwrap();

        let noise = smoothing_noise(&mut oracle_rng, 3, 0.2 * bound, 0.5 * bound);
        let q = |p: &[f64; 3], s: f64, a: f64| p[0] * s + p[1] * a + p[2];
        let y: Vec<f64> = (0..3)
            .map(|i| {
                let a2 = (bound * (twa * s2[i] + tba).tanh() + noise[i]).clamp(-bound, bound);
                r[i] + 0.9 * q(&tc[0], s2[i], a2).min(q(&tc[1], s2[i], a2))
            })
            .collect();
        let mut new_c = Vec::new();
        let mut loss = 0.0;
        for p in &c {
            let e: Vec<f64> = (0..3).map(|i| q(p, s[i], a[i]) - y[i]).collect();
            loss += e.iter().map(|v| v * v).sum::<f64>() / n;
            let g = [
                (0..3).map(|i| 2.0 * e[i] * s[i]).sum::<f64>() / n,
                (0..3).map(|i| 2.0 * e[i] * a[i]).sum::<f64>() / n,
                e.iter().map(|v| 2.0 * v).sum::<f64>() / n,
            ];
            new_c.push([0, 1, 2].map(|k| adam_first(p[k], g[k], 0.02)));
        }
        assert!((diag.critic_loss - loss).abs() < 1e-10);
        for (m, want) in agent.critics.iter().zip(&new_c) {
            for (g, w) in vals(m).iter().zip(want) {
                assert!((g - w).abs() < 1e-10, "critic {g} vs {w}");
            }
        }
        let c1 = new_c[0];
        let (mut gw, mut gb) = (0.0, 0.0);
        for i in 0..3 {
            let th = (wa * s[i] + ba).tanh();
            let d = -c1[1] * bound * (1.0 - th * th) / n;
            gw += d * s[i];
            gb += d;
        }
        let (nwa, nba) = (adam_first(wa, gw, 0.01), adam_first(ba, gb, 0.01));
        let got = vals(&agent.actor);
        assert!((got[0] - nwa).abs() < 1e-10 && (got[1] - nba).abs() < 1e-10);
        let mix = |src: f64, old: f64| 0.3 * src + 0.7 * old;
        let ta = vals(&agent.actor_target);
        assert!((ta[0] - mix(nwa, twa)).abs() < 1e-10 && (ta[1] - mix(nba, tba)).abs() < 1e-10);
        for (k, m) in agent.critic_targets.iter().enumerate() {
            for (j, v) in vals(m).iter().enumerate() {
                assert!((v - mix(new_c[k][j], tc[k][j])).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn polyak_one_copies_sources() {
        let cfg = Td3Config {
            polyak: 1.0,
            ..scalar_config()
        };
        let mut agent = Td3Agent::new(cfg, 1, 1, 1.0, &identity_norm(1, 1), None).unwrap();
        agent.update(&scalar_batch(), &mut seeded_rng(0, 0)).unwrap();
        assert_eq!(vals(&agent.actor), vals(&agent.actor_target));
        for i in 0..2 {
            assert_eq!(vals(&agent.critics[i]), vals(&agent.critic_targets[i]));
        }
    }

    #[test]
    fn polyak_identity_is_exact() {
        let mut agent = Td3Agent::new(scalar_config(), 1, 1, 1.0, &identity_norm(1, 1), None).unwrap();
        agent.update(&scalar_batch(), &mut seeded_rng(0, 0)).unwrap();
        let old = vals(&agent.critic_targets[1]);
        agent.update(&scalar_batch(), &mut seeded_rng(0, 1)).unwrap();
        let src = vals(&agent.critics[1]);
        let want: Vec<f64> = src.iter().zip(&old).map(|(s, o)| 0.3 * s + (1.0 - 0.3) * o).collect();
        assert_eq!(vals(&agent.critic_targets[1]), want);
    }

    #[test]
    fn zero_discount_and_rewards_give_zero_targets() {
        let cfg = Td3Config {
            discount: 0.0,
            actor_depth: 2,
            critic_depth: 2,
            actor_width: 8,
            critic_width: 8,
            ..Td3Config::default()
        };
        let agent = Td3Agent::new(cfg, 1, 1, 1.0, &identity_norm(1, 1), None).unwrap();
        let mut b = scalar_batch();
        b.rewards = vec![0.0; 3];
        assert_eq!(agent.critic_targets(&b, &mut seeded_rng(0, 0)).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn non_finite_target_is_an_error() {
        let agent = Td3Agent::new(scalar_config(), 1, 1, 1.0, &identity_norm(1, 1), None).unwrap();
        let mut b = scalar_batch();
        b.rewards[1] = f64::NAN;
        assert!(matches!(agent.critic_targets(&b, &mut seeded_rng(0, 0)), Err(MtmError::NonFinite(_))));
    }

    #[test]
    fn actor_waits_for_policy_delay() {
        let cfg = Td3Config {
            policy_delay: 2,
            ..scalar_config()
        };
        let mut agent = Td3Agent::new(cfg, 1, 1, 1.0, &identity_norm(1, 1), None).unwrap();
        let before = vals(&agent.actor);
        let d1 = agent.update(&scalar_batch(), &mut seeded_rng(0, 0)).unwrap();
        assert!(d1.actor_loss.is_none());
        assert_eq!(vals(&agent.actor), before);
        let d2 = agent.update(&scalar_batch(), &mut seeded_rng(0, 1)).unwrap();
        assert!(d2.actor_loss.is_some());
        assert_ne!(vals(&agent.actor), before);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            Td3Config { policy_delay: 0, ..Td3Config::default() },
            Td3Config { polyak: 0.0, ..Td3Config::default() },
            Td3Config { polyak: 1.5, ..Td3Config::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
        assert_eq!("mtm_state".parse::<Representation>().unwrap(), Representation::MtmState);
        assert!("latent".parse::<Representation>().is_err());
    }

    fn tiny_model() -> MtmModel {
        let cfg = ModelConfig {
            embed_dim: 16,
            n_enc_layers: 1,
            n_heads: 2,
            dropout: 0.0,
            segment_len: 2,
            state_dim: 4,
            action_dim: 2,
            ..ModelConfig::default()
        };
        MtmModel::new(cfg, 5).unwrap()
    }

    #[test]
    fn embeddings_have_expected_shapes_and_are_deterministic() {
        let model = tiny_model();
        let norm = identity_norm(4, 2);
        let s = vec![vec![0.1, 0.2, -0.3, 0.4], vec![1.0, 0.0, 0.5, -0.5]];
        let a = vec![vec![0.3, -0.1], vec![0.0, 0.9]];
        let z = encode_state(&model, &norm, &s).unwrap();
        assert_eq!(z.len(), 2);
        assert_eq!(z[0].len(), 16);
        assert_eq!(z, encode_state(&model, &norm, &s).unwrap());
        let za = encode_state_action(&model, &norm, &s, &a).unwrap();
        assert_eq!(za[0].len(), 32);
        let other = encode_state_action(&model, &norm, &s, &[vec![-0.8, 0.4], vec![0.0, 0.9]]).unwrap();
        assert_ne!(za[0], other[0]);
        assert_eq!(za[1], other[1]);
    }

    #[test]
    fn near_constant_dimension_barely_moves_embedding() {
        let model = tiny_model();
        let mut norm = identity_norm(4, 2);
        norm.state.std[3] = crate::trajdata::STD_FLOOR;
        let a = vec![0.2, -0.1, 0.4, 0.0];
        let mut b = a.clone();
        b[3] += 1e-10;
        let z = encode_state(&model, &norm, &[a, b]).unwrap();
        let dist: f64 = z[0].iter().zip(&z[1]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(dist < 1e-3, "{dist}");
    }

    fn exploration(n: usize) -> (Env, Dataset) {
        let cfg = EnvConfig::point_mass();
        let ds = Dataset::generate(&cfg, &ScriptedPolicySpec::single(Quality::Random), n, 0.1, 0).unwrap();
        (Env::new(cfg).unwrap(), ds)
    }

    fn small_td3(repr: Representation, finetune: bool) -> Td3Config {
        Td3Config {
            representation: repr,
            finetune,
            updates: 6,
            batch_size: 16,
            eval_interval: 3,
            eval_episodes: 2,
            actor_width: 16,
            critic_width: 16,
            ..Td3Config::default()
        }
    }

    #[test]
    fn frozen_encoder_is_bitwise_unchanged() {
        let (env, ds) = exploration(8);
        let model = tiny_model();
        let trajs = ds.train_trajectories();
        let norm = &ds.manifest.norm;
        for repr in [Representation::MtmState, Representation::MtmStateAction] {
            let (agent, curve) = td3_train_offline(&trajs, &env, &ds.manifest.refs, Some((&model, norm)), &small_td3(repr, false)).unwrap();
            assert_eq!(curve.len(), 2);
            let enc = agent.encoder.as_ref().unwrap();
            for (p, q) in enc.params.iter().zip(model.params.iter()) {
                assert_eq!(p.value, q.value, "{}", p.name);
            }
            let (tuned, _) = td3_train_offline(&trajs, &env, &ds.manifest.refs, Some((&model, norm)), &small_td3(repr, true)).unwrap();
            let enc = tuned.encoder.as_ref().unwrap();
            let ids = model.encoder_param_ids();
            assert!(ids.iter().any(|id| enc.params.value(*id) != model.params.value(*id)));
            // decoder parameters get no gradient from the critic
            let enc_ids: std::collections::HashSet<_> = ids.into_iter().collect();
            for id in model.params.ids().filter(|id| !enc_ids.contains(id)) {
                assert_eq!(enc.params.value(id), model.params.value(id));
            }
        }
    }

    #[test]
    fn offline_training_is_deterministic_and_needs_actions() {
        let (env, ds) = exploration(8);
        let trajs = ds.train_trajectories();
        let cfg = small_td3(Representation::Raw, false);
        let (_, c1) = td3_train_offline(&trajs, &env, &ds.manifest.refs, None, &cfg).unwrap();
        let (_, c2) = td3_train_offline(&trajs, &env, &ds.manifest.refs, None, &cfg).unwrap();
        assert_eq!(c1, c2);
        let mut stripped = trajs[0].clone();
        stripped.actions = None;
        assert!(td3_train_offline(&[&stripped], &env, &ds.manifest.refs, None, &cfg).is_err());
        assert!(td3_train_offline(&trajs, &env, &ds.manifest.refs, None, &small_td3(Representation::MtmState, false)).is_err());
    }

    #[test]
    fn relabeling_reproduces_env_rewards() {
        let (env, ds) = exploration(3);
        for t in &ds.trajectories {
            let r = relabel_rewards(&env, t);
            for i in 0..t.len() - 1 {
                assert!((r.rewards[i] - t.rewards[i]).abs() < 1e-6);
            }
        }
        let mut moved = env.config().clone();
        moved.goal = vec![-1.0, -1.0];
        let other = Env::new(moved).unwrap();
        let r = relabel_rewards(&other, &ds.trajectories[0]);
        assert_ne!(r.rewards[0], ds.trajectories[0].rewards[0]);
    }
}
