//! Synthetic continuous-control environments, scripted behaviour policies and
//! the normalized-score metric.
//!
//! Two environments are provided:
//!
//! * `linear_system`: `s' = A s + B a + noise`, reward `-|s'|^2`. With zero
//!   noise it is exactly predictable from `(A, B)`, which makes it the ground
//!   truth for forward and inverse dynamics.
//! * `point_mass`: a 2-D double integrator driven toward a fixed goal, reward
//!   `-|p' - goal|`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, MtmError, Result};
use crate::seeded_rng;
use crate::trajdata::{compute_rtg, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    LinearSystem,
    PointMass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    /// Integration step (point_mass).
    pub dt: f64,
    /// Row-major `state_dim x state_dim`; empty means "draw from `seed`".
    pub a_matrix: Vec<f64>,
    /// Row-major `state_dim x action_dim`; empty means "draw from `seed`".
    pub b_matrix: Vec<f64>,
    /// Spectral radius the drawn `A` is rescaled to.
    pub spectral_radius: f64,
    pub action_bound: f64,
    pub noise_std: f64,
    /// Target position (point_mass).
    pub goal: Vec<f64>,
    /// Per-axis velocity limit (point_mass).
    pub max_speed: f64,
    /// Half-width of the initial position box (point_mass) or std of the
    /// initial state (linear_system).
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::point_mass()
    }
}

impl EnvConfig {
    pub fn point_mass() -> Self {
        Self {
            kind: EnvKind::PointMass,
            state_dim: 4,
            action_dim: 2,
            horizon: 64,
            dt: 0.1,
            a_matrix: Vec::new(),
            b_matrix: Vec::new(),
            spectral_radius: 0.95,
            action_bound: 1.0,
            noise_std: 0.0,
            goal: vec![1.0, 0.5],
            max_speed: 2.0,
            init_scale: 1.0,
            seed: 0,
        }
    }

    pub fn linear_system() -> Self {
        Self {
            kind: EnvKind::LinearSystem,
            state_dim: 6,
            action_dim: 2,
            horizon: 32,
            dt: 0.1,
            a_matrix: Vec::new(),
            b_matrix: Vec::new(),
            spectral_radius: 0.95,
            action_bound: 1.0,
            noise_std: 0.01,
            goal: Vec::new(),
            max_speed: 2.0,
            init_scale: 1.0,
            seed: 0,
        }
    }

    pub fn for_kind(kind: EnvKind) -> Self {
        match kind {
            EnvKind::LinearSystem => Self::linear_system(),
            EnvKind::PointMass => Self::point_mass(),
        }
    }
}

/// A materialized environment: configuration plus derived matrices.
#[derive(Clone, Debug)]
pub struct Env {
    config: EnvConfig,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    b_pinv: DMatrix<f64>,
}

fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self> {
        if config.horizon == 0 {
            return Err(MtmError::Config("horizon must be positive".into()));
        }
        if !(config.action_bound > 0.0) {
            return Err(MtmError::Config("action_bound must be positive".into()));
        }
        let (sd, ad) = (config.state_dim, config.action_dim);
        let (a, b) = match config.kind {
            EnvKind::PointMass => {
                if sd != 4 || ad != 2 || config.goal.len() != 2 {
                    return Err(MtmError::Config(
                        "point_mass needs state_dim 4, action_dim 2 and a 2-D goal".into(),
                    ));
                }
                (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0))
            }
            EnvKind::LinearSystem => {
                if sd == 0 || ad == 0 || ad > sd {
                    return Err(MtmError::Config(format!(
                        "linear_system needs 0 < action_dim <= state_dim, got {ad} and {sd}"
                    )));
                }
                let mut rng = seeded_rng(config.seed, 0x11ea5);
                let a = if config.a_matrix.is_empty() {
                    let raw = DMatrix::from_fn(sd, sd, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let rho = spectral_radius(&raw);
                    raw * (config.spectral_radius / rho)
                } else {
                    if config.a_matrix.len() != sd * sd {
                        return Err(MtmError::Config(format!("a_matrix needs {} entries", sd * sd)));
                    }
                    DMatrix::from_row_slice(sd, sd, &config.a_matrix)
                };
                let b = if config.b_matrix.is_empty() {
                    DMatrix::from_fn(sd, ad, |_, _| rng.sample::<f64, _>(StandardNormal))
                } else {
                    if config.b_matrix.len() != sd * ad {
                        return Err(MtmError::Config(format!("b_matrix needs {} entries", sd * ad)));
                    }
                    DMatrix::from_row_slice(sd, ad, &config.b_matrix)
                };
                let rho = spectral_radius(&a);
                if rho > 1.05 {
                    return Err(MtmError::Config(format!("spectral radius of A is {rho:.4} > 1.05")));
                }
                (a, b)
            }
        };
        let b_pinv = if b.is_empty() {
            b.clone()
        } else {
            b.clone()
                .pseudo_inverse(1e-12)
                .map_err(|e| MtmError::Config(format!("pseudo-inverse of B: {e}")))?
        };
        Ok(Self { config, a, b, b_pinv })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state_dim(&self) -> usize {
        self.config.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.config.action_dim
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn action_bound(&self) -> f64 {
        self.config.action_bound
    }

    /// `A` as a row-major vector (linear_system only).
    pub fn a_matrix(&self) -> Vec<f64> {
        self.a.transpose().as_slice().to_vec()
    }

    pub fn b_matrix(&self) -> Vec<f64> {
        self.b.transpose().as_slice().to_vec()
    }

    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        let bound = self.config.action_bound;
        action.iter().map(|a| a.clamp(-bound, bound)).collect()
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let scale = self.config.init_scale;
        match self.config.kind {
            EnvKind::PointMass => vec![
                rng.random_range(-scale..=scale),
                rng.random_range(-scale..=scale),
                0.0,
                0.0,
            ],
            EnvKind::LinearSystem => (0..self.config.state_dim)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        }
    }

    /// Advances one step. Actions are clipped to the bound first.
    pub fn step<R: Rng + ?Sized>(&self, state: &[f64], action: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64)> {
        let c = &self.config;
        if state.len() != c.state_dim || action.len() != c.action_dim {
            return Err(MtmError::Dimension(format!(
                "env_step expects state {} / action {}, got {} / {}",
                c.state_dim,
                c.action_dim,
                state.len(),
                action.len()
            )));
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(MtmError::NonFinite("environment state".into()));
        }
        let action = self.clip_action(action);
        let noise = |rng: &mut R| {
            if c.noise_std > 0.0 {
                c.noise_std * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            }
        };
        match c.kind {
            EnvKind::PointMass => {
                let mut next = vec![0.0; 4];
                for i in 0..2 {
                    next[i] = state[i] + state[2 + i] * c.dt;
                    let v = state[2 + i] + action[i] * c.dt + noise(rng);
                    next[2 + i] = v.clamp(-c.max_speed, c.max_speed);
                }
                let r = self.reward(&next);
                Ok((next, r))
            }
            EnvKind::LinearSystem => {
                let s = DVector::from_column_slice(state);
                let a = DVector::from_column_slice(&action);
                let mut next = &self.a * s + &self.b * a;
                for v in next.iter_mut() {
                    *v += noise(rng);
                }
                let next = next.as_slice().to_vec();
                let r = self.reward(&next);
                Ok((next, r))
            }
        }
    }

    /// Task reward of arriving in `next`: negative goal distance (point_mass)
    /// or negative squared norm (linear_system).
    pub fn reward(&self, next: &[f64]) -> f64 {
        let c = &self.config;
        match c.kind {
            EnvKind::PointMass => -((next[0] - c.goal[0]).powi(2) + (next[1] - c.goal[1]).powi(2)).sqrt(),
            EnvKind::LinearSystem => -next.iter().map(|v| v * v).sum::<f64>(),
        }
    }

    /// Least-squares inverse dynamics `B^+ (s' - A s)` (linear_system only).
    pub fn inverse_dynamics_oracle(&self, state: &[f64], next: &[f64]) -> Result<Vec<f64>> {
        if self.config.kind != EnvKind::LinearSystem {
            return Err(invalid("the least-squares inverse-dynamics oracle needs linear_system"));
        }
        let s = DVector::from_column_slice(state);
        let n = DVector::from_column_slice(next);
        Ok((&self.b_pinv * (n - &self.a * s)).as_slice().to_vec())
    }

    /// Noise-free scripted controller driving toward the goal (point_mass)
    /// or toward the origin (linear_system).
    fn expert_action(&self, state: &[f64]) -> Vec<f64> {
        let c = &self.config;
        match c.kind {
            EnvKind::PointMass => (0..2)
                .map(|i| EXPERT_KP * (c.goal[i] - state[i]) - EXPERT_KD * state[2 + i])
                .collect(),
            EnvKind::LinearSystem => {
                let s = DVector::from_column_slice(state);
                (-(&self.b_pinv * (&self.a * s)) * 0.5).as_slice().to_vec()
            }
        }
    }

    /// Action of a scripted behaviour tier, clipped to the bound.
    pub fn scripted_action<R: Rng + ?Sized>(
        &self,
        quality: Quality,
        spec: &ScriptedPolicySpec,
        state: &[f64],
        rng: &mut R,
    ) -> Vec<f64> {
        let bound = self.config.action_bound;
        let raw = match quality {
            Quality::Random => (0..self.config.action_dim)
                .map(|_| rng.random_range(-bound..=bound))
                .collect(),
            Quality::Expert | Quality::Medium => {
                let std = if quality == Quality::Expert {
                    spec.noise_std
                } else {
                    spec.medium_noise_std
                };
                let mut a = self.expert_action(state);
                if std > 0.0 {
                    let normal = Normal::new(0.0, std).expect("positive std");
                    for v in &mut a {
                        *v += normal.sample(rng);
                    }
                }
                a
            }
        };
        self.clip_action(&raw)
    }
}

const EXPERT_KP: f64 = 2.0;
const EXPERT_KD: f64 = 2.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    Expert,
    Medium,
    Random,
}

impl FromStr for Quality {
    type Err = MtmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(Self::Expert),
            "medium" => Ok(Self::Medium),
            "random" => Ok(Self::Random),
            other => Err(invalid(format!("unknown quality tag {other:?}"))),
        }
    }
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Expert => "expert",
            Self::Medium => "medium",
            Self::Random => "random",
        })
    }
}

/// Behaviour policy used to collect a dataset.
///
/// A single-tier dataset is a one-entry mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScriptedPolicySpec {
    pub mixture: Vec<(Quality, f64)>,
    /// Action noise of the expert tier.
    pub noise_std: f64,
    /// Action noise of the medium tier (the expert controller with inflated noise).
    pub medium_noise_std: f64,
}

impl Default for ScriptedPolicySpec {
    fn default() -> Self {
        Self::single(Quality::Expert)
    }
}

impl ScriptedPolicySpec {
    pub fn single(quality: Quality) -> Self {
        Self::mixture(vec![(quality, 1.0)])
    }

    pub fn mixture(mixture: Vec<(Quality, f64)>) -> Self {
        Self {
            mixture,
            noise_std: 0.1,
            medium_noise_std: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mixture.is_empty() {
            return Err(invalid("policy mixture is empty"));
        }
        if self.mixture.iter().any(|(_, f)| !(*f >= 0.0)) {
            return Err(invalid("mixture fractions must be non-negative"));
        }
        let total: f64 = self.mixture.iter().map(|(_, f)| f).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("mixture fractions sum to {total}, expected 1")));
        }
        Ok(())
    }

    /// Tier of each of `n` trajectories: counts follow the fractions
    /// (largest-remainder rounding) and the order is shuffled by `rng`.
    fn assign<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Quality> {
        let mut counts: Vec<usize> = self.mixture.iter().map(|(_, f)| (f * n as f64).floor() as usize).collect();
        let mut rema: Vec<(usize, f64)> = self
            .mixture
            .iter()
            .enumerate()
            .map(|(i, (_, f))| (i, f * n as f64 - counts[i] as f64))
            .collect();
        rema.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut left = n - counts.iter().sum::<usize>();
        for (i, _) in rema {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        let mut tiers: Vec<Quality> = self
            .mixture
            .iter()
            .zip(&counts)
            .flat_map(|((q, _), c)| std::iter::repeat_n(*q, *c))
            .collect();
        use rand::seq::SliceRandom;
        tiers.shuffle(rng);
        tiers
    }
}

/// Rolls out one episode of a scripted tier and records it.
pub fn collect_trajectory(env: &Env, quality: Quality, spec: &ScriptedPolicySpec, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
    let (sd, ad, horizon) = (env.state_dim(), env.action_dim(), env.horizon());
    let mut states = Vec::with_capacity(horizon * sd);
    let mut actions = Vec::with_capacity(horizon * ad);
    let mut rewards = Vec::with_capacity(horizon);
    let mut s = env.reset(rng);
    for _ in 0..horizon {
        let a = env.scripted_action(quality, spec, &s, rng);
        let (next, r) = env.step(&s, &a, rng)?;
        states.extend(s.iter().map(|v| *v as f32));
        actions.extend(a.iter().map(|v| *v as f32));
        rewards.push(r as f32);
        s = next;
    }
    let rtg = compute_rtg(&rewards);
    Ok(Trajectory {
        state_dim: sd,
        action_dim: ad,
        states,
        actions: Some(actions),
        rewards,
        rtg: Some(rtg),
    })
}

/// Collects `n_traj` episodes; trajectory `i` draws from its own stream of `seed`.
pub fn generate_dataset(env: &Env, policy: &ScriptedPolicySpec, n_traj: usize, seed: u64) -> Result<Vec<Trajectory>> {
    if n_traj == 0 {
        return Err(invalid("n_traj must be at least 1"));
    }
    policy.validate()?;
    let mut assign_rng = seeded_rng(seed, u64::MAX);
    let tiers = policy.assign(n_traj, &mut assign_rng);
    tiers
        .iter()
        .enumerate()
        .map(|(i, q)| collect_trajectory(env, *q, policy, &mut seeded_rng(seed, i as u64)))
        .collect()
}

/// Mean undiscounted return of a scripted tier over `n_episodes`.
pub fn tier_mean_return(env: &Env, quality: Quality, spec: &ScriptedPolicySpec, n_episodes: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for ep in 0..n_episodes {
        let mut rng = seeded_rng(seed, ep as u64);
        let mut s = env.reset(&mut rng);
        for _ in 0..env.horizon() {
            let a = env.scripted_action(quality, spec, &s, &mut rng);
            let (next, r) = env.step(&s, &a, &mut rng)?;
            total += r;
            s = next;
        }
    }
    Ok(total / n_episodes.max(1) as f64)
}

/// Random-tier and expert-tier reference returns.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceReturns {
    pub random: f64,
    pub expert: f64,
}

/// References measured by 100-episode rollouts of the random and expert tiers.
pub fn reference_returns(env: &Env, spec: &ScriptedPolicySpec, seed: u64) -> Result<ReferenceReturns> {
    Ok(ReferenceReturns {
        random: tier_mean_return(env, Quality::Random, spec, 100, seed ^ 0x5eed_0001)?,
        expert: tier_mean_return(env, Quality::Expert, spec, 100, seed ^ 0x5eed_0002)?,
    })
}

/// `100 * (raw - random) / (expert - random)`.
pub fn normalized_score(raw_return: f64, random_ref: f64, expert_ref: f64) -> Result<f64> {
    if expert_ref == random_ref {
        return Err(invalid("degenerate references: expert_ref equals random_ref"));
    }
    Ok(100.0 * (raw_return - random_ref) / (expert_ref - random_ref))
}

impl ReferenceReturns {
    pub fn normalize(&self, raw: f64) -> Result<f64> {
        normalized_score(raw, self.random, self.expert)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_mass_at_rest_stays_put() {
        let env = Env::new(EnvConfig::point_mass()).unwrap();
        let mut rng = seeded_rng(0, 0);
        let s = vec![0.3, -0.2, 0.0, 0.0];
        let (next, _) = env.step(&s, &[0.0, 0.0], &mut rng).unwrap();
        assert_eq!(&next[..2], &s[..2]);
    }

    #[test]
    fn identity_system_is_static() {
        let mut cfg = EnvConfig::linear_system();
        cfg.state_dim = 3;
        cfg.action_dim = 1;
        cfg.noise_std = 0.0;
        cfg.a_matrix = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        cfg.b_matrix = vec![0.0; 3];
        // B = 0 has no usable pseudo-inverse but the dynamics are still valid
        let env = Env::new(cfg).unwrap();
        let mut rng = seeded_rng(0, 0);
        let s = vec![0.5, -1.0, 2.0];
        let (next, _) = env.step(&s, &[0.7], &mut rng).unwrap();
        assert_eq!(next, s);
    }

    #[test]
    fn linear_step_matches_matrix_expression() {
        let mut cfg = EnvConfig::linear_system();
        cfg.state_dim = 2;
        cfg.action_dim = 1;
        cfg.noise_std = 0.0;
        cfg.a_matrix = vec![0.5, 0.25, -0.125, 0.75];
        cfg.b_matrix = vec![1.0, -2.0];
        let env = Env::new(cfg).unwrap();
        let mut rng = seeded_rng(0, 0);
        let (next, r) = env.step(&[2.0, -4.0], &[0.5], &mut rng).unwrap();
        // [0.5*2 + 0.25*-4 + 0.5, -0.125*2 + 0.75*-4 - 1.0]
        assert_eq!(next, vec![0.5, -4.25]);
        assert_eq!(r, -(0.25 + 4.25 * 4.25));
    }

    #[test]
    fn drawn_a_is_rescaled_to_target_radius() {
        let env = Env::new(EnvConfig::linear_system()).unwrap();
        let a = DMatrix::from_row_slice(6, 6, &env.a_matrix());
        assert!((spectral_radius(&a) - 0.95).abs() < 1e-9);
    }

    #[test]
    fn unstable_a_is_rejected() {
        let mut cfg = EnvConfig::linear_system();
        cfg.state_dim = 1;
        cfg.action_dim = 1;
        cfg.a_matrix = vec![1.2];
        cfg.b_matrix = vec![1.0];
        assert!(Env::new(cfg).is_err());
    }

    #[test]
    fn actions_are_clipped() {
        let env = Env::new(EnvConfig::point_mass()).unwrap();
        let mut rng = seeded_rng(0, 0);
        let (a, _) = env.step(&[0.0; 4], &[5.0, -5.0], &mut rng).unwrap();
        let (b, _) = env.step(&[0.0; 4], &[1.0, -1.0], &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_state_is_an_error() {
        let env = Env::new(EnvConfig::point_mass()).unwrap();
        let mut rng = seeded_rng(0, 0);
        assert!(env.step(&[f64::NAN, 0.0, 0.0, 0.0], &[0.0, 0.0], &mut rng).is_err());
    }

    #[test]
    fn oracle_recovers_noise_free_action() {
        let mut cfg = EnvConfig::linear_system();
        cfg.noise_std = 0.0;
        let env = Env::new(cfg).unwrap();
        let mut rng = seeded_rng(3, 0);
        let s = env.reset(&mut rng);
        let a = vec![0.3, -0.8];
        let (next, _) = env.step(&s, &a, &mut rng).unwrap();
        let rec = env.inverse_dynamics_oracle(&s, &next).unwrap();
        for (x, y) in rec.iter().zip(&a) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn dataset_shape_and_determinism() {
        let env = Env::new(EnvConfig::point_mass()).unwrap();
        let spec = ScriptedPolicySpec::single(Quality::Expert);
        let a = generate_dataset(&env, &spec, 100, 9).unwrap();
        assert_eq!(a.len(), 100);
        assert!(a.iter().all(|t| t.len() == 64));
        let b = generate_dataset(&env, &spec, 100, 9).unwrap();
        assert_eq!(a, b);
        assert!(generate_dataset(&env, &spec, 0, 9).is_err());
    }

    #[test]
    fn mixture_counts_follow_fractions() {
        let spec = ScriptedPolicySpec::mixture(vec![(Quality::Expert, 0.2), (Quality::Medium, 0.4), (Quality::Random, 0.4)]);
        let tiers = spec.assign(1000, &mut seeded_rng(1, 1));
        let count = |q| tiers.iter().filter(|t| **t == q).count();
        assert_eq!((count(Quality::Expert), count(Quality::Medium), count(Quality::Random)), (200, 400, 400));
        let bad = ScriptedPolicySpec::mixture(vec![(Quality::Expert, 0.5)]);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn quality_tags_parse() {
        assert_eq!("medium".parse::<Quality>().unwrap(), Quality::Medium);
        assert!("legendary".parse::<Quality>().is_err());
    }

    #[test]
    fn tiers_are_ordered_on_point_mass() {
        let env = Env::new(EnvConfig::point_mass()).unwrap();
        let spec = ScriptedPolicySpec::default();
        let e = tier_mean_return(&env, Quality::Expert, &spec, 100, 1).unwrap();
        let m = tier_mean_return(&env, Quality::Medium, &spec, 100, 2).unwrap();
        let r = tier_mean_return(&env, Quality::Random, &spec, 100, 3).unwrap();
        assert!(e > m && m > r, "{e} {m} {r}");
    }

    #[test]
    fn normalized_score_formula() {
        assert_eq!(normalized_score(-20.0, -100.0, -20.0).unwrap(), 100.0);
        assert_eq!(normalized_score(-100.0, -100.0, -20.0).unwrap(), 0.0);
        assert!(normalized_score(1.0, 2.0, 2.0).is_err());
    }
}
