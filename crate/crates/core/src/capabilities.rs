//! Inference by mask choice: forward and inverse dynamics, BC, RCBC,
//! two-stage heteromodal acting, rollouts and held-out capability losses.
//!
//! Inference windows always span the model's `L` timesteps. When fewer real
//! timesteps exist the earliest one is repeated at the front; cells that are
//! unknown (the current action, actions of state-only data) are zero-filled
//! and hidden.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::envs::{Env, ReferenceReturns};
use crate::error::{invalid, MtmError, Result};
use crate::masking::{capability_mask, Capability, MaskGrid};
use crate::model::{MtmModel, Reconstruction};
use crate::seeded_rng;
use crate::trajdata::{Modality, NormStats, Segment};

/// Raw (unnormalized) contents of one timestep; `None` marks an unknown cell.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawStep {
    pub rtg: Option<f64>,
    pub state: Option<Vec<f64>>,
    pub action: Option<Vec<f64>>,
}

impl RawStep {
    pub fn state(state: &[f64]) -> Self {
        Self {
            state: Some(state.to_vec()),
            ..Self::default()
        }
    }
}

/// Normalized segment plus capability mask for a window whose last known
/// timesteps are `steps`; the front is padded to `len` by repetition.
pub fn build_query(norm: &NormStats, steps: &[RawStep], len: usize, cap: Capability, query_t: usize) -> Result<(Segment, MaskGrid)> {
    if steps.is_empty() {
        return Err(invalid("empty history"));
    }
    let steps = &steps[steps.len().saturating_sub(len)..];
    let pad = len - steps.len();
    let (sd, ad) = (norm.state.dim(), norm.action.dim());
    let mut seg = Segment {
        start: 0,
        len,
        state_dim: sd,
        action_dim: ad,
        rtg: vec![0.0; len],
        states: vec![0.0; len * sd],
        actions: vec![0.0; len * ad],
        presence: [true; 3],
    };
    let mut mask = capability_mask(cap, len, query_t)?;
    for t in 0..len {
        let step = &steps[t.saturating_sub(pad)];
        let cells: [(Modality, Option<Vec<f64>>); 3] = [
            (Modality::Rtg, step.rtg.map(|r| vec![r])),
            (Modality::State, step.state.clone()),
            (Modality::Action, step.action.clone()),
        ];
        for (m, raw) in cells {
            match raw {
                Some(v) => {
                    if v.len() != seg.dim(m) {
                        return Err(MtmError::Dimension(format!("{m:?} of length {} vs {}", v.len(), seg.dim(m))));
                    }
                    seg.cell_mut(t, m).copy_from_slice(&norm.modality(m).apply(&v));
                }
                None => mask.set(t, m, false),
            }
        }
    }
    Ok((seg, mask))
}

/// Runs the model on prepared queries and returns each query's target cell,
/// de-normalized.
pub fn infer(model: &MtmModel, norm: &NormStats, queries: &[(Segment, MaskGrid)], target: (usize, Modality)) -> Result<Vec<Vec<f64>>> {
    let (segs, masks): (Vec<Segment>, Vec<MaskGrid>) = queries.iter().cloned().unzip();
    let recs = model.reconstruct(&segs, &masks)?;
    let dims = (model.config().state_dim, model.config().action_dim);
    Ok(recs
        .iter()
        .map(|r| norm.modality(target.1).invert(r.cell(target.0, target.1, dims)))
        .collect())
}

/// Next state from a history of `(state, action)` pairs ending at the
/// current timestep. Uses at most `L - 1` pairs.
pub fn predict_forward(model: &MtmModel, norm: &NormStats, history: &[(Vec<f64>, Vec<f64>)]) -> Result<Vec<f64>> {
    let len = model.config().segment_len;
    let steps: Vec<RawStep> = history
        .iter()
        .map(|(s, a)| RawStep {
            rtg: None,
            state: Some(s.clone()),
            action: Some(a.clone()),
        })
        .chain(std::iter::once(RawStep::default()))
        .collect();
    let q = len - 1;
    let query = build_query(norm, &steps, len, Capability::Fd, q)?;
    Ok(infer(model, norm, &[query], (q, Modality::State))?.remove(0))
}

/// Action taking `states.last()` to `next_state`, given earlier states.
pub fn predict_inverse(model: &MtmModel, norm: &NormStats, states: &[Vec<f64>], next_state: &[f64]) -> Result<Vec<f64>> {
    let len = model.config().segment_len;
    if states.is_empty() {
        return Err(invalid("predict_inverse needs the current state"));
    }
    let steps: Vec<RawStep> = states.iter().map(|s| RawStep::state(s)).chain(std::iter::once(RawStep::state(next_state))).collect();
    let q = len - 1;
    let query = build_query(norm, &steps, len, Capability::Id, q)?;
    Ok(infer(model, norm, &[query], (q - 1, Modality::Action))?.remove(0))
}

/// Held-out reconstruction losses in normalized units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldoutLosses {
    /// Mean squared error over every present scalar with everything visible.
    pub full: f64,
    /// Target-cell MSE of the FD mask at `q = L - 1`.
    pub fd: f64,
    /// Target-cell MSE of the ID mask at `q = L - 1`.
    pub id: f64,
}

const EVAL_CHUNK: usize = 256;

fn reconstruct_chunked(model: &MtmModel, segs: &[Segment], masks: &[MaskGrid]) -> Result<Vec<Reconstruction>> {
    let mut out = Vec::with_capacity(segs.len());
    for (s, m) in segs.chunks(EVAL_CHUNK).zip(masks.chunks(EVAL_CHUNK)) {
        out.extend(model.reconstruct(s, m)?);
    }
    Ok(out)
}

fn sq_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Target-cell MSE of capability `cap` at `query_t` over the segments of
/// `segs` that carry both states and actions.
pub fn capability_loss(model: &MtmModel, segs: &[Segment], cap: Capability, query_t: usize) -> Result<f64> {
    let len = model.config().segment_len;
    let (t, m) = cap.target(query_t).ok_or_else(|| invalid("FULL has no single target cell"))?;
    let mask = capability_mask(cap, len, query_t)?;
    let usable: Vec<Segment> = segs.iter().filter(|s| s.presence[1] && s.presence[2]).cloned().collect();
    if usable.is_empty() {
        return Err(invalid(format!("no segment carries the {m:?} target of {cap:?}")));
    }
    let masks = vec![mask; usable.len()];
    let recs = reconstruct_chunked(model, &usable, &masks)?;
    let dims = (model.config().state_dim, model.config().action_dim);
    let total: f64 = recs.iter().zip(&usable).map(|(r, s)| sq_err(r.cell(t, m, dims), s.cell(t, m))).sum();
    Ok(total / (usable.len() * usable[0].dim(m)) as f64)
}

/// FULL, FD and ID held-out losses; the training loop records exactly these.
pub fn heldout_losses(model: &MtmModel, segs: &[Segment]) -> Result<HeldoutLosses> {
    let len = model.config().segment_len;
    let full_masks = vec![MaskGrid::filled(len, true); segs.len()];
    let recs = reconstruct_chunked(model, segs, &full_masks)?;
    let mut err = 0.0;
    let mut count = 0usize;
    for (r, s) in recs.iter().zip(segs) {
        for m in Modality::ALL {
            if s.presence[m.index()] {
                let pred = match m {
                    Modality::Rtg => &r.rtg,
                    Modality::State => &r.states,
                    Modality::Action => &r.actions,
                };
                err += sq_err(pred, s.values(m));
                count += s.values(m).len();
            }
        }
    }
    let (fd, id) = if len >= 2 {
        (
            capability_loss(model, segs, Capability::Fd, len - 1).unwrap_or(f64::NAN),
            capability_loss(model, segs, Capability::Id, len - 1).unwrap_or(f64::NAN),
        )
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(HeldoutLosses {
        full: err / count.max(1) as f64,
        fd,
        id,
    })
}

/// MSE of predicting "next state = current state" at the FD target cell.
pub fn persistence_fd_loss(segs: &[Segment]) -> Result<f64> {
    let len = segs.first().ok_or_else(|| invalid("no segments"))?.len;
    if len < 2 {
        return Err(invalid("persistence needs two timesteps"));
    }
    let total: f64 = segs.iter().map(|s| sq_err(s.cell(len - 2, Modality::State), s.cell(len - 1, Modality::State))).sum();
    Ok(total / (segs.len() * segs[0].state_dim) as f64)
}

/// How an MTM policy turns a context into an action.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    Bc,
    Rcbc,
    /// Predict the next state from states and rtg, then invert it.
    TwoStage,
}

/// One completed timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub rtg: f64,
}

/// Sliding window of an ongoing episode.
#[derive(Clone, Debug)]
pub struct RolloutContext {
    capacity: usize,
    history: VecDeque<Transition>,
    pub state: Vec<f64>,
    pub target_return: Option<f64>,
    reward_sum: f64,
}

impl RolloutContext {
    /// `capacity` is the number of completed timesteps kept (`L - 1`).
    pub fn new(capacity: usize, state: Vec<f64>, target_return: Option<f64>) -> Self {
        Self {
            capacity,
            history: VecDeque::with_capacity(capacity + 1),
            state,
            target_return,
            reward_sum: 0.0,
        }
    }

    /// Bookkeeping value: target minus every reward observed so far.
    pub fn rtg(&self) -> Option<f64> {
        self.target_return.map(|g| g - self.reward_sum)
    }

    pub fn history(&self) -> &VecDeque<Transition> {
        &self.history
    }

    pub fn push(&mut self, action: Vec<f64>, reward: f64, next_state: Vec<f64>) {
        let rtg = self.rtg().unwrap_or(0.0);
        self.history.push_back(Transition {
            state: std::mem::replace(&mut self.state, next_state),
            action,
            rtg,
        });
        while self.history.len() > self.capacity {
            self.history.pop_front();
        }
        self.reward_sum += reward;
    }

    /// Window of raw steps ending with the current timestep: at most `keep`
    /// completed steps, then the current state with its action unknown.
    pub fn steps(&self, keep_rtg: bool, keep: usize) -> Vec<RawStep> {
        let skip = self.history.len().saturating_sub(keep);
        let mut out: Vec<RawStep> = self
            .history
            .iter()
            .skip(skip)
            .map(|tr| RawStep {
                rtg: keep_rtg.then_some(tr.rtg),
                state: Some(tr.state.clone()),
                action: Some(tr.action.clone()),
            })
            .collect();
        out.push(RawStep {
            rtg: if keep_rtg { self.rtg() } else { None },
            state: Some(self.state.clone()),
            action: None,
        });
        out
    }
}

/// Anything that picks actions for a batch of lockstep episodes.
pub trait Policy {
    fn act_batch(&self, contexts: &[RolloutContext]) -> Result<Vec<Vec<f64>>>;

    /// Completed timesteps the policy wants to see.
    fn history_len(&self) -> usize;
}

/// The masked trajectory model used as a policy.
pub struct MtmPolicy<'a> {
    pub model: &'a MtmModel,
    pub norm: &'a NormStats,
    pub mode: ActMode,
    pub action_bound: f64,
}

impl MtmPolicy<'_> {
    fn clip(&self, a: Vec<f64>) -> Vec<f64> {
        a.into_iter().map(|x| x.clamp(-self.action_bound, self.action_bound)).collect()
    }
}

impl Policy for MtmPolicy<'_> {
    fn history_len(&self) -> usize {
        self.model.config().segment_len - 1
    }

    fn act_batch(&self, contexts: &[RolloutContext]) -> Result<Vec<Vec<f64>>> {
        let len = self.model.config().segment_len;
        let needs_target = self.mode != ActMode::Bc;
        if needs_target && contexts.iter().any(|c| c.target_return.is_none()) {
            return Err(invalid(format!("{:?} needs a target return", self.mode)));
        }
        let actions = match self.mode {
            ActMode::Bc | ActMode::Rcbc => {
                let cap = if self.mode == ActMode::Bc { Capability::Bc } else { Capability::Rcbc };
                let queries = contexts
                    .iter()
                    .map(|c| build_query(self.norm, &c.steps(needs_target, len - 1), len, cap, len))
                    .collect::<Result<Vec<_>>>()?;
                infer(self.model, self.norm, &queries, (len - 1, Modality::Action))?
            }
            ActMode::TwoStage => {
                if len < 2 {
                    return Err(invalid("two-stage acting needs L >= 2"));
                }
                let q = len - 1;
                let windows: Vec<Vec<RawStep>> = contexts.iter().map(|c| c.steps(true, len - 2)).collect();
                let plan_queries = windows
                    .iter()
                    .map(|w| {
                        let mut w = w.clone();
                        w.push(RawStep::default());
                        build_query(self.norm, &w, len, Capability::StatePlan, q)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let planned = infer(self.model, self.norm, &plan_queries, (q, Modality::State))?;
                let id_queries = windows
                    .iter()
                    .zip(planned)
                    .map(|(w, next)| {
                        let mut w = w.clone();
                        w.push(RawStep::state(&next));
                        build_query(self.norm, &w, len, Capability::Id, q)
                    })
                    .collect::<Result<Vec<_>>>()?;
                infer(self.model, self.norm, &id_queries, (q - 1, Modality::Action))?
            }
        };
        Ok(actions.into_iter().map(|a| self.clip(a)).collect())
    }
}

/// Returns of a batch of evaluation episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub returns: Vec<f64>,
    pub mean_return: f64,
    pub std_return: f64,
    pub normalized: Vec<f64>,
    pub mean_normalized: f64,
    pub target_return: Option<f64>,
}

pub const DEFAULT_EVAL_EPISODES: usize = 20;

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs `n_episodes` full episodes in lockstep. Episode `e` draws its
/// initial state and process noise from stream `e` of `seed`.
pub fn rollout_eval(policy: &dyn Policy, env: &Env, refs: &ReferenceReturns, target_return: Option<f64>, n_episodes: usize, seed: u64) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(invalid("n_episodes must be positive"));
    }
    let mut rngs: Vec<_> = (0..n_episodes).map(|e| seeded_rng(seed, e as u64)).collect();
    let mut ctxs: Vec<RolloutContext> = rngs
        .iter_mut()
        .map(|r| RolloutContext::new(policy.history_len(), env.reset(r), target_return))
        .collect();
    let mut returns = vec![0.0; n_episodes];
    for _ in 0..env.horizon() {
        let actions = policy.act_batch(&ctxs)?;
        for (i, a) in actions.into_iter().enumerate() {
            let a = env.clip_action(&a);
            let (next, r) = env.step(&ctxs[i].state, &a, &mut rngs[i])?;
            returns[i] += r;
            ctxs[i].push(a, r, next);
        }
    }
    let (mean_return, std_return) = mean_std(&returns);
    let normalized = returns.iter().map(|r| refs.normalize(*r)).collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        mean_normalized: mean_std(&normalized).0,
        returns,
        mean_return,
        std_return,
        normalized,
        target_return,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvConfig;
    use crate::model::ModelConfig;
    use crate::trajdata::ModalStats;

    fn identity_norm(sd: usize, ad: usize) -> NormStats {
        let id = |d: usize| ModalStats {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        };
        NormStats {
            rtg: id(1),
            state: id(sd),
            action: id(ad),
        }
    }

    fn tiny_model() -> MtmModel {
        MtmModel::new(
            ModelConfig {
                embed_dim: 16,
                n_heads: 2,
                n_enc_layers: 1,
                segment_len: 3,
                state_dim: 4,
                action_dim: 2,
                dropout: 0.0,
                ..ModelConfig::default()
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn short_history_is_padded_by_repetition() {
        let norm = identity_norm(1, 1);
        let steps = vec![RawStep {
            rtg: Some(2.0),
            state: Some(vec![0.5]),
            action: None,
        }];
        let (seg, mask) = build_query(&norm, &steps, 3, Capability::Rcbc, 3).unwrap();
        assert_eq!(seg.states, vec![0.5, 0.5, 0.5]);
        assert_eq!(seg.rtg, vec![2.0, 2.0, 2.0]);
        // unknown actions stay hidden even where the RCBC layout would show them
        assert!((0..3).all(|t| !mask.visible(t, Modality::Action)));
        assert!(build_query(&norm, &[], 3, Capability::Bc, 3).is_err());
    }

    #[test]
    fn capability_outputs_have_modality_dims() {
        let m = tiny_model();
        let norm = identity_norm(4, 2);
        let s = vec![0.1, 0.2, 0.3, 0.4];
        let a = vec![0.5, -0.5];
        assert_eq!(predict_forward(&m, &norm, &[(s.clone(), a.clone())]).unwrap().len(), 4);
        assert_eq!(predict_inverse(&m, &norm, &[s.clone()], &s).unwrap().len(), 2);
        assert!(predict_inverse(&m, &norm, &[], &s).is_err());
    }

    #[test]
    fn rtg_bookkeeping_is_exact() {
        let mut c = RolloutContext::new(2, vec![0.0], Some(10.0));
        let rewards = [0.1, -0.7, 0.25, 3.5];
        let mut sum = 0.0;
        for r in rewards {
            c.push(vec![0.0], r, vec![0.0]);
            sum += r;
            assert_eq!(c.rtg().unwrap(), 10.0 - sum);
            assert!(c.history().len() <= 2);
        }
    }

    #[test]
    fn actions_are_bounded_and_deterministic() {
        let m = tiny_model();
        let norm = identity_norm(4, 2);
        let env = Env::new(EnvConfig::point_mass()).unwrap();
        let refs = ReferenceReturns { random: -100.0, expert: -20.0 };
        for mode in [ActMode::Bc, ActMode::Rcbc, ActMode::TwoStage] {
            let p = MtmPolicy {
                model: &m,
                norm: &norm,
                mode,
                action_bound: 0.01,
            };
            let a = rollout_eval(&p, &env, &refs, Some(-20.0), 3, 1).unwrap();
            let b = rollout_eval(&p, &env, &refs, Some(-20.0), 3, 1).unwrap();
            assert_eq!(a, b);
            let ctx = RolloutContext::new(2, vec![5.0, -5.0, 1.0, 1.0], Some(-20.0));
            assert!(p.act_batch(&[ctx]).unwrap()[0].iter().all(|x| x.abs() <= 0.01));
        }
        let rcbc = MtmPolicy {
            model: &m,
            norm: &norm,
            mode: ActMode::Rcbc,
            action_bound: 1.0,
        };
        assert!(rcbc.act_batch(&[RolloutContext::new(2, vec![0.0; 4], None)]).is_err());
    }

    #[test]
    fn two_stage_uses_state_plan_then_inverse_masks() {
        let norm = identity_norm(1, 1);
        let steps = vec![RawStep::state(&[1.0]), RawStep::default()];
        let (_, plan) = build_query(&norm, &steps, 3, Capability::StatePlan, 2).unwrap();
        assert!(!plan.visible(2, Modality::State) && (0..3).all(|t| !plan.visible(t, Modality::Action)));
        let steps = vec![RawStep::state(&[1.0]), RawStep::state(&[2.0])];
        let (seg, id) = build_query(&norm, &steps, 3, Capability::Id, 2).unwrap();
        assert!(id.visible(2, Modality::State));
        assert_eq!(seg.cell(2, Modality::State), &[2.0]);
    }
}
