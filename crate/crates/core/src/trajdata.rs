//! Trajectory storage, returns-to-go, normalization, splits, segments and the
//! MTMD on-disk container.
//!
//! Raw data is stored as `f32` ([`Trajectory`]); everything the model sees is
//! normalized `f64` ([`Trajectory<f64>`]). Each timestep has three modalities in
//! the fixed order `(rtg, state, action)`.
//!
//! MTMD layout (little-endian):
//!
//! ```text
//! b"MTMD" | version: u32 | manifest_len: u64 | manifest JSON (UTF-8)
//! per trajectory: states f32[T*state_dim] | actions f32[T*action_dim] (if present)
//!                 | rewards f32[T] | rtg f32[T] (if present)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::{generate_dataset, reference_returns, Env, EnvConfig, ReferenceReturns, ScriptedPolicySpec};
use crate::error::{invalid, MtmError, Result};
use crate::seeded_rng;

pub const MTMD_MAGIC: &[u8; 4] = b"MTMD";
pub const MTMD_VERSION: u32 = 1;
pub const DEFAULT_SEGMENT_LEN: usize = 4;
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Rtg,
    State,
    Action,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rtg, Modality::State, Modality::Action];

    pub fn index(self) -> usize {
        self as usize
    }
}

pub const NUM_MODALITIES: usize = 3;

/// One episode. `actions`/`rtg` are `None` when the modality is absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<F = f32> {
    pub state_dim: usize,
    pub action_dim: usize,
    /// Row-major `T x state_dim`.
    pub states: Vec<F>,
    pub actions: Option<Vec<F>>,
    pub rewards: Vec<F>,
    pub rtg: Option<Vec<F>>,
}

impl<F> Trajectory<F> {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn presence(&self) -> [bool; NUM_MODALITIES] {
        [self.rtg.is_some(), true, self.actions.is_some()]
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        let ok = self.states.len() == t * self.state_dim
            && self.actions.as_ref().is_none_or(|a| a.len() == t * self.action_dim)
            && self.rtg.as_ref().is_none_or(|r| r.len() == t);
        if ok {
            Ok(())
        } else {
            Err(MtmError::Dimension("trajectory arrays disagree on length".into()))
        }
    }
}

impl Trajectory<f32> {
    pub fn to_f64(&self) -> Trajectory<f64> {
        let cvt = |v: &Vec<f32>| v.iter().map(|x| *x as f64).collect::<Vec<f64>>();
        Trajectory {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            states: cvt(&self.states),
            actions: self.actions.as_ref().map(cvt),
            rewards: cvt(&self.rewards),
            rtg: self.rtg.as_ref().map(cvt),
        }
    }

    pub fn undiscounted_return(&self) -> f64 {
        self.rewards.iter().map(|r| *r as f64).sum()
    }
}

/// Undiscounted suffix sums, built by the recursion `rtg[t] = r[t] + rtg[t+1]`
/// so the identity holds exactly in the storage precision.
pub fn compute_rtg<F: Copy + Default + std::ops::Add<Output = F>>(rewards: &[F]) -> Vec<F> {
    let mut out = vec![F::default(); rewards.len()];
    let mut acc = F::default();
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + acc;
        out[t] = acc;
    }
    out
}

/// Per-dimension mean and floored population std of one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ModalStats {
    fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    fn fit<'a>(dim: usize, rows: impl Iterator<Item = &'a [f32]>) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0f64; dim];
        let mut sq = vec![0.0f64; dim];
        let rows: Vec<&[f32]> = rows.collect();
        for row in &rows {
            for (d, v) in row.chunks_exact(dim).flat_map(|r| r.iter().enumerate()) {
                sum[d] += *v as f64;
            }
            n += row.len() / dim.max(1);
        }
        if n == 0 {
            return Self::identity(dim);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        for row in &rows {
            for (d, v) in row.chunks_exact(dim).flat_map(|r| r.iter().enumerate()) {
                let e = *v as f64 - mean[d];
                sq[d] += e * e;
            }
        }
        let std = sq.iter().map(|s| (s / n as f64).sqrt().max(STD_FLOOR)).collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, v)| {
                let d = i % self.dim();
                (v - self.mean[d]) / self.std[d]
            })
            .collect()
    }

    pub fn invert(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, v)| {
                let d = i % self.dim();
                v * self.std[d] + self.mean[d]
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub rtg: ModalStats,
    pub state: ModalStats,
    pub action: ModalStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Apply,
    Invert,
}

impl NormStats {
    /// Fits statistics on `trajs`; pass only the training split. Modalities
    /// absent from every trajectory get identity statistics.
    pub fn fit(trajs: &[&Trajectory]) -> Result<Self> {
        let first = trajs.first().ok_or_else(|| invalid("cannot fit statistics on zero trajectories"))?;
        let (sd, ad) = (first.state_dim, first.action_dim);
        if trajs.iter().any(|t| t.state_dim != sd || t.action_dim != ad) {
            return Err(MtmError::Dimension("trajectories disagree on dimensions".into()));
        }
        Ok(Self {
            rtg: ModalStats::fit(1, trajs.iter().filter_map(|t| t.rtg.as_deref())),
            state: ModalStats::fit(sd, trajs.iter().map(|t| t.states.as_slice())),
            action: ModalStats::fit(ad, trajs.iter().filter_map(|t| t.actions.as_deref())),
        })
    }

    pub fn modality(&self, m: Modality) -> &ModalStats {
        match m {
            Modality::Rtg => &self.rtg,
            Modality::State => &self.state,
            Modality::Action => &self.action,
        }
    }

    fn check(&self, t: &Trajectory<f64>) -> Result<()> {
        if t.state_dim != self.state.dim() || t.action_dim != self.action.dim() {
            return Err(MtmError::Dimension(format!(
                "trajectory dims ({}, {}) vs statistics ({}, {})",
                t.state_dim,
                t.action_dim,
                self.state.dim(),
                self.action.dim()
            )));
        }
        t.validate()
    }

    /// Normalizes (or de-normalizes) states, actions and rtg. Rewards are
    /// left in raw units since they are never tokenized.
    pub fn transform(&self, t: &Trajectory<f64>, dir: Direction) -> Result<Trajectory<f64>> {
        self.check(t)?;
        let f = |s: &ModalStats, x: &[f64]| match dir {
            Direction::Apply => s.apply(x),
            Direction::Invert => s.invert(x),
        };
        Ok(Trajectory {
            state_dim: t.state_dim,
            action_dim: t.action_dim,
            states: f(&self.state, &t.states),
            actions: t.actions.as_deref().map(|a| f(&self.action, a)),
            rewards: t.rewards.clone(),
            rtg: t.rtg.as_deref().map(|r| f(&self.rtg, r)),
        })
    }
}

pub fn normalize(trajs: &[Trajectory<f64>], stats: &NormStats, dir: Direction) -> Result<Vec<Trajectory<f64>>> {
    trajs.iter().map(|t| stats.transform(t, dir)).collect()
}

/// Trajectory-level partition by index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

impl Split {
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.eval) {
            if i >= n || seen[i] {
                return Err(MtmError::Format(format!("split index {i} is out of range or repeated")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(MtmError::Format("split does not cover every trajectory".into()));
        }
        Ok(())
    }
}

/// Shuffles `0..n` with `seed`; the first `round(f*n)` (at least 1, at most
/// `n-1`) indices form the eval set. Both halves are returned sorted.
pub fn split_dataset(n: usize, eval_fraction: f64, seed: u64) -> Result<Split> {
    if n < 2 {
        return Err(invalid(format!("need at least 2 trajectories to split, got {n}")));
    }
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(invalid(format!("eval_fraction must be in (0, 1), got {eval_fraction}")));
    }
    let n_eval = ((eval_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(seed, 0x5b117));
    let mut eval = idx[..n_eval].to_vec();
    let mut train = idx[n_eval..].to_vec();
    eval.sort_unstable();
    train.sort_unstable();
    Ok(Split { train, eval })
}

/// Fixed-length, timestep-aligned window of a normalized trajectory.
///
/// Absent modalities are zero-filled and flagged in `presence`.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    /// `L` values.
    pub rtg: Vec<f64>,
    /// Row-major `L x state_dim`.
    pub states: Vec<f64>,
    /// Row-major `L x action_dim`.
    pub actions: Vec<f64>,
    /// Indexed by [`Modality::index`].
    pub presence: [bool; NUM_MODALITIES],
}

impl Segment {
    pub fn window(traj: &Trajectory<f64>, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > traj.len() {
            return Err(invalid(format!(
                "window [{start}, {}) does not fit a trajectory of length {}",
                start + len,
                traj.len()
            )));
        }
        let (sd, ad) = (traj.state_dim, traj.action_dim);
        Ok(Self {
            start,
            len,
            state_dim: sd,
            action_dim: ad,
            rtg: traj.rtg.as_ref().map_or_else(|| vec![0.0; len], |r| r[start..start + len].to_vec()),
            states: traj.states[start * sd..(start + len) * sd].to_vec(),
            actions: traj
                .actions
                .as_ref()
                .map_or_else(|| vec![0.0; len * ad], |a| a[start * ad..(start + len) * ad].to_vec()),
            presence: traj.presence(),
        })
    }

    pub fn dim(&self, m: Modality) -> usize {
        match m {
            Modality::Rtg => 1,
            Modality::State => self.state_dim,
            Modality::Action => self.action_dim,
        }
    }

    /// All `L` cells of one modality, row-major.
    pub fn values(&self, m: Modality) -> &[f64] {
        match m {
            Modality::Rtg => &self.rtg,
            Modality::State => &self.states,
            Modality::Action => &self.actions,
        }
    }

    /// Values of cell `(t, m)`; `t` is 0-based.
    pub fn cell(&self, t: usize, m: Modality) -> &[f64] {
        let d = self.dim(m);
        &self.values(m)[t * d..(t + 1) * d]
    }

    pub fn cell_mut(&mut self, t: usize, m: Modality) -> &mut [f64] {
        let d = self.dim(m);
        let v = match m {
            Modality::Rtg => &mut self.rtg,
            Modality::State => &mut self.states,
            Modality::Action => &mut self.actions,
        };
        &mut v[t * d..(t + 1) * d]
    }
}

/// Window of length `len` with start uniform over `0..=T-len`.
pub fn sample_segment<R: Rng + ?Sized>(traj: &Trajectory<f64>, len: usize, rng: &mut R) -> Result<Segment> {
    if traj.len() < len || len == 0 {
        return Err(invalid(format!(
            "cannot cut a segment of length {len} from a trajectory of length {}",
            traj.len()
        )));
    }
    let start = rng.random_range(0..=traj.len() - len);
    Segment::window(traj, start, len)
}

/// Heteromodal view of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Heteromodal<F = f32> {
    /// Same order as the input; state-only members have `actions == None`.
    pub trajectories: Vec<F>,
    pub actioned: Vec<usize>,
    pub state_only: Vec<usize>,
    /// Held out, left untouched.
    pub eval: Vec<usize>,
}

/// Keeps actions on `round(a*N)` trajectories, drops them on the next
/// `round(s*N)`, and reserves the rest for evaluation. Assignment is a
/// seeded permutation.
pub fn make_heteromodal<F: Clone>(
    trajs: &[Trajectory<F>],
    actioned_fraction: f64,
    stateonly_fraction: f64,
    seed: u64,
) -> Result<Heteromodal<Trajectory<F>>> {
    let n = trajs.len();
    if actioned_fraction < 0.0 || stateonly_fraction < 0.0 || actioned_fraction + stateonly_fraction > 1.0 + 1e-12 {
        return Err(invalid("heteromodal fractions must be non-negative and sum to at most 1"));
    }
    let n_act = (actioned_fraction * n as f64).round() as usize;
    let n_so = ((stateonly_fraction * n as f64).round() as usize).min(n - n_act.min(n));
    if n_act == 0 {
        return Err(invalid("heteromodal fractions yield zero actioned trajectories"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(seed, 0x4e7e));
    let mut actioned = idx[..n_act].to_vec();
    let mut state_only = idx[n_act..n_act + n_so].to_vec();
    let mut eval = idx[n_act + n_so..].to_vec();
    actioned.sort_unstable();
    state_only.sort_unstable();
    eval.sort_unstable();
    let mut out = trajs.to_vec();
    for &i in &state_only {
        out[i].actions = None;
    }
    Ok(Heteromodal {
        trajectories: out,
        actioned,
        state_only,
        eval,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub env: EnvConfig,
    /// Hex SHA-256 of the canonical JSON of `env`.
    pub env_hash: String,
    pub policy: ScriptedPolicySpec,
    pub seed: u64,
    pub n_trajectories: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub lengths: Vec<usize>,
    pub has_actions: Vec<bool>,
    pub has_rtg: Vec<bool>,
    pub split: Split,
    pub norm: NormStats,
    pub refs: ReferenceReturns,
}

pub fn env_hash(env: &EnvConfig) -> Result<String> {
    let digest = Sha256::digest(serde_json::to_vec(env)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// A trajectory set with its manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    /// Assembles a dataset: split, statistics fitted on the train half.
    pub fn assemble(
        env: EnvConfig,
        policy: ScriptedPolicySpec,
        seed: u64,
        trajectories: Vec<Trajectory>,
        split: Split,
        refs: ReferenceReturns,
    ) -> Result<Self> {
        split.validate(trajectories.len())?;
        let train: Vec<&Trajectory> = split.train.iter().map(|&i| &trajectories[i]).collect();
        let norm = NormStats::fit(&train)?;
        let manifest = DatasetManifest {
            format_version: MTMD_VERSION,
            env_hash: env_hash(&env)?,
            state_dim: env.state_dim,
            action_dim: env.action_dim,
            env,
            policy,
            seed,
            n_trajectories: trajectories.len(),
            lengths: trajectories.iter().map(|t| t.len()).collect(),
            has_actions: trajectories.iter().map(|t| t.actions.is_some()).collect(),
            has_rtg: trajectories.iter().map(|t| t.rtg.is_some()).collect(),
            split,
            norm,
            refs,
        };
        Ok(Self { manifest, trajectories })
    }

    /// Collects a fresh dataset and measures reference returns.
    pub fn generate(env_cfg: &EnvConfig, policy: &ScriptedPolicySpec, n_traj: usize, eval_fraction: f64, seed: u64) -> Result<Self> {
        let env = Env::new(env_cfg.clone())?;
        let trajs = generate_dataset(&env, policy, n_traj, seed)?;
        let split = split_dataset(n_traj, eval_fraction, seed)?;
        let refs = reference_returns(&env, policy, env_cfg.seed)?;
        Self::assemble(env_cfg.clone(), policy.clone(), seed, trajs, split, refs)
    }

    /// Keeps the given trajectories (by index) and re-fits everything on them.
    pub fn subset(&self, train: &[usize], eval: &[usize]) -> Result<Self> {
        let mut trajs = Vec::with_capacity(train.len() + eval.len());
        trajs.extend(train.iter().map(|&i| self.trajectories[i].clone()));
        trajs.extend(eval.iter().map(|&i| self.trajectories[i].clone()));
        let split = Split {
            train: (0..train.len()).collect(),
            eval: (train.len()..train.len() + eval.len()).collect(),
        };
        let m = &self.manifest;
        Self::assemble(m.env.clone(), m.policy.clone(), m.seed, trajs, split, m.refs)
    }

    pub fn train_trajectories(&self) -> Vec<&Trajectory> {
        self.manifest.split.train.iter().map(|&i| &self.trajectories[i]).collect()
    }

    pub fn eval_trajectories(&self) -> Vec<&Trajectory> {
        self.manifest.split.eval.iter().map(|&i| &self.trajectories[i]).collect()
    }

    /// Normalized copies of the given trajectories.
    pub fn normalized(&self, which: &[&Trajectory]) -> Result<Vec<Trajectory<f64>>> {
        which
            .iter()
            .map(|t| self.manifest.norm.transform(&t.to_f64(), Direction::Apply))
            .collect()
    }

    /// Mean undiscounted return of the training split.
    pub fn behavior_return(&self) -> f64 {
        let train = self.train_trajectories();
        train.iter().map(|t| t.undiscounted_return()).sum::<f64>() / train.len().max(1) as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MTMD_MAGIC);
        buf.extend_from_slice(&MTMD_VERSION.to_le_bytes());
        buf.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        buf.extend_from_slice(&manifest);
        let put = |buf: &mut Vec<u8>, xs: &[f32]| xs.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
        for t in &self.trajectories {
            put(&mut buf, &t.states);
            if let Some(a) = &t.actions {
                put(&mut buf, a);
            }
            put(&mut buf, &t.rewards);
            if let Some(r) = &t.rtg {
                put(&mut buf, r);
            }
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(4)? != MTMD_MAGIC {
            return Err(MtmError::Format("not an MTMD file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != MTMD_VERSION {
            return Err(MtmError::Format(format!("unsupported MTMD version {version}")));
        }
        let mlen = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        let manifest: DatasetManifest = serde_json::from_slice(r.take(mlen)?)?;
        let m = &manifest;
        if m.lengths.len() != m.n_trajectories || m.has_actions.len() != m.n_trajectories || m.has_rtg.len() != m.n_trajectories {
            return Err(MtmError::Format("manifest per-trajectory arrays disagree with n_trajectories".into()));
        }
        m.split.validate(m.n_trajectories)?;
        let mut trajectories = Vec::with_capacity(m.n_trajectories);
        for i in 0..m.n_trajectories {
            let t = m.lengths[i];
            let states = r.f32s(t * m.state_dim)?;
            let actions = if m.has_actions[i] { Some(r.f32s(t * m.action_dim)?) } else { None };
            let rewards = r.f32s(t)?;
            let rtg = if m.has_rtg[i] { Some(r.f32s(t)?) } else { None };
            trajectories.push(Trajectory {
                state_dim: m.state_dim,
                action_dim: m.action_dim,
                states,
                actions,
                rewards,
                rtg,
            });
        }
        if r.pos != bytes.len() {
            return Err(MtmError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { manifest, trajectories })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| MtmError::Format("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| MtmError::Format("array too large".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Quality;
    use proptest::{prop_assert, prop_assert_eq, proptest};

    fn toy(n: usize, t: usize, seed: u64) -> Vec<Trajectory> {
        let mut rng = seeded_rng(seed, 0);
        (0..n)
            .map(|_| {
                let rewards: Vec<f32> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
                Trajectory {
                    state_dim: 2,
                    action_dim: 1,
                    states: (0..2 * t).map(|_| rng.random_range(-3.0..3.0)).collect(),
                    actions: Some((0..t).map(|_| rng.random_range(-1.0..1.0)).collect()),
                    rtg: Some(compute_rtg(&rewards)),
                    rewards,
                }
            })
            .collect()
    }

    #[test]
    fn rtg_examples() {
        assert_eq!(compute_rtg(&[1.0f32, 1.0, 1.0]), vec![3.0, 2.0, 1.0]);
        assert_eq!(compute_rtg::<f32>(&[]), Vec::<f32>::new());
        assert_eq!(compute_rtg(&[0.5f32, -0.5]), vec![0.0, -0.5]);
    }

    proptest! {
        #[test]
        fn rtg_recursion_is_exact(rewards in proptest::collection::vec(-10.0f32..10.0, 1..80)) {
            let rtg = compute_rtg(&rewards);
            let n = rewards.len();
            prop_assert_eq!(rtg[n - 1], rewards[n - 1]);
            for t in 0..n - 1 {
                prop_assert_eq!(rtg[t], rewards[t] + rtg[t + 1]);
            }
        }

        #[test]
        fn normalization_round_trips(seed in 0u64..1000) {
            let trajs = toy(5, 7, seed);
            let refs: Vec<&Trajectory> = trajs.iter().collect();
            let stats = NormStats::fit(&refs).unwrap();
            for t in &trajs {
                let x = t.to_f64();
                let back = stats.transform(&stats.transform(&x, Direction::Apply).unwrap(), Direction::Invert).unwrap();
                for (a, b) in x.states.iter().zip(&back.states) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
                for (a, b) in x.rtg.unwrap().iter().zip(back.rtg.as_ref().unwrap()) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn applied_fit_set_is_standardized() {
        let trajs = toy(10, 9, 3);
        let refs: Vec<&Trajectory> = trajs.iter().collect();
        let stats = NormStats::fit(&refs).unwrap();
        let normed: Vec<Trajectory<f64>> = trajs.iter().map(|t| stats.transform(&t.to_f64(), Direction::Apply).unwrap()).collect();
        for d in 0..2 {
            let xs: Vec<f64> = normed.iter().flat_map(|t| t.states.chunks(2).map(move |r| r[d])).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
            assert!(mean.abs() < 1e-6 && (var.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_dimension_is_floored() {
        let mut trajs = toy(3, 5, 1);
        for t in &mut trajs {
            for row in t.states.chunks_mut(2) {
                row[1] = 4.0;
            }
        }
        let refs: Vec<&Trajectory> = trajs.iter().collect();
        let stats = NormStats::fit(&refs).unwrap();
        assert_eq!(stats.state.std[1], STD_FLOOR);
        let n = stats.transform(&trajs[0].to_f64(), Direction::Apply).unwrap();
        assert!(n.states.chunks(2).all(|r| r[1] == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let trajs = toy(2, 5, 1);
        let refs: Vec<&Trajectory> = trajs.iter().collect();
        let stats = NormStats::fit(&refs).unwrap();
        let mut bad = trajs[0].to_f64();
        bad.state_dim = 1;
        bad.states.truncate(5);
        assert!(stats.transform(&bad, Direction::Apply).is_err());
    }

    #[test]
    fn split_counts() {
        let s = split_dataset(100, 0.05, 1).unwrap();
        assert_eq!((s.train.len(), s.eval.len()), (95, 5));
        s.validate(100).unwrap();
        let s = split_dataset(2, 0.05, 1).unwrap();
        assert_eq!((s.train.len(), s.eval.len()), (1, 1));
        assert_eq!(split_dataset(100, 0.05, 7).unwrap(), split_dataset(100, 0.05, 7).unwrap());
        assert!(split_dataset(1, 0.5, 0).is_err());
        assert!(split_dataset(10, 1.0, 0).is_err());
    }

    #[test]
    fn segment_edges() {
        let t = toy(1, 6, 2).remove(0).to_f64();
        let mut rng = seeded_rng(0, 0);
        let s = sample_segment(&t, 6, &mut rng).unwrap();
        assert_eq!(s.start, 0);
        assert_eq!(s.states, t.states);
        assert!(sample_segment(&t, 7, &mut rng).is_err());
        assert_eq!(DEFAULT_SEGMENT_LEN, 4);
    }

    #[test]
    fn segment_starts_are_uniform() {
        let t = toy(1, 10, 2).remove(0).to_f64();
        let mut rng = seeded_rng(11, 0);
        let mut counts = [0usize; 7];
        for _ in 0..10_000 {
            counts[sample_segment(&t, 4, &mut rng).unwrap().start] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e4 - 1.0 / 7.0).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn heteromodal_counts_and_presence() {
        let trajs = toy(1000, 3, 5);
        let h = make_heteromodal(&trajs, 0.01, 0.95, 3).unwrap();
        assert_eq!((h.actioned.len(), h.state_only.len(), h.eval.len()), (10, 950, 40));
        for &i in &h.state_only {
            let t = &h.trajectories[i];
            assert!(t.actions.is_none());
            assert_eq!(t.states, trajs[i].states);
            assert_eq!(t.rtg, trajs[i].rtg);
        }
        for &i in h.actioned.iter().chain(&h.eval) {
            assert_eq!(h.trajectories[i], trajs[i]);
        }
        let same = make_heteromodal(&trajs, 1.0, 0.0, 3).unwrap();
        assert_eq!(same.trajectories, trajs);
        assert!(make_heteromodal(&trajs, 0.0, 0.5, 3).is_err());
        assert!(make_heteromodal(&trajs, 0.6, 0.5, 3).is_err());
    }

    fn small_dataset() -> Dataset {
        let mut cfg = EnvConfig::point_mass();
        cfg.horizon = 8;
        Dataset::generate(&cfg, &ScriptedPolicySpec::single(Quality::Expert), 6, 0.2, 4).unwrap()
    }

    #[test]
    fn mtmd_round_trip_with_heteromodal_flags() {
        let ds = small_dataset();
        let h = make_heteromodal(&ds.trajectories, 0.5, 0.5, 1).unwrap();
        let ds = Dataset::assemble(ds.manifest.env.clone(), ds.manifest.policy.clone(), 4, h.trajectories, ds.manifest.split.clone(), ds.manifest.refs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.mtmd");
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.trajectories.iter().filter(|t| t.actions.is_none()).count(), 3);
    }

    #[test]
    fn mtmd_rejects_bad_magic_and_truncation() {
        let ds = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.mtmd");
        ds.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(Dataset::load(&path), Err(MtmError::Format(_))));
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Dataset::load(&path), Err(MtmError::Format(_))));
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        fs::write(&path, &wrong_version).unwrap();
        assert!(matches!(Dataset::load(&path), Err(MtmError::Format(_))));
    }

    #[test]
    fn stats_ignore_eval_split() {
        let ds = small_dataset();
        let train = ds.train_trajectories();
        assert_eq!(NormStats::fit(&train).unwrap(), ds.manifest.norm);
        let all: Vec<&Trajectory> = ds.trajectories.iter().collect();
        assert_ne!(NormStats::fit(&all).unwrap(), ds.manifest.norm);
    }
}
