//! Experiment suites. The lower-level functions return plain results and are
//! shared by the CLI commands (which log them) and the acceptance tests.

use std::path::Path;

use mtm_core::capabilities::{capability_loss, rollout_eval, ActMode, EvalReport, MtmPolicy};
use mtm_core::envs::{generate_dataset, reference_returns, Env, ReferenceReturns};
use mtm_core::masking::{Capability, MaskKind};
use mtm_core::model::MtmModel;
use mtm_core::reprrl::{relabel_rewards, td3_train_offline, CurvePoint, Representation};
use mtm_core::training::{fixed_segments, train, MetricPoint, TrainConfig};
use mtm_core::trajdata::{env_hash, make_heteromodal, split_dataset, Dataset, Direction, NormStats, Segment, Trajectory};
use mtm_core::seeded_rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baseline::{train_baseline, BaselinePolicy};
use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

const EVAL_SEED: u64 = 0xe7a1_5eed;
const SUBSET_STREAM: u64 = 0x5ab5;

/// Dataset plus normalized train / eval trajectories.
pub struct Prepared {
    pub env: Env,
    pub dataset: Dataset,
    pub norm: NormStats,
    pub train: Vec<Trajectory<f64>>,
    pub eval: Vec<Trajectory<f64>>,
}

impl Prepared {
    pub fn new(dataset: Dataset) -> Result<Self> {
        let norm = dataset.manifest.norm.clone();
        Self::with_norm(dataset, norm)
    }

    /// Normalizes with `norm` (e.g. a checkpoint's) instead of the dataset's.
    pub fn with_norm(dataset: Dataset, norm: NormStats) -> Result<Self> {
        let env = Env::new(dataset.manifest.env.clone())?;
        let apply = |ts: Vec<&Trajectory>| -> Result<Vec<Trajectory<f64>>> {
            Ok(ts.iter().map(|t| norm.transform(&t.to_f64(), Direction::Apply)).collect::<mtm_core::Result<_>>()?)
        };
        let train = apply(dataset.train_trajectories())?;
        let eval = apply(dataset.eval_trajectories())?;
        Ok(Self {
            env,
            dataset,
            norm,
            train,
            eval,
        })
    }

    pub fn refs(&self) -> ReferenceReturns {
        self.dataset.manifest.refs
    }
}

/// The configured dataset: loaded from `dataset.path` or generated from the
/// run seed. A loaded dataset must come from the configured environment.
pub fn dataset_for(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset.path {
        Some(p) => {
            if !p.exists() {
                return Err(HarnessError::Missing { what: "dataset", path: p.clone() });
            }
            let ds = Dataset::load(p)?;
            if ds.manifest.env_hash != env_hash(&cfg.env)? {
                return Err(HarnessError::Invalid(format!("{} was generated for a different environment than the config's", p.display())));
            }
            Ok(ds)
        }
        None => Ok(Dataset::generate(&cfg.env, &cfg.dataset.policy, cfg.dataset.n_trajectories, cfg.dataset.eval_fraction, cfg.train.seed)?),
    }
}

/// Trains a model with the given training mask.
pub fn train_mtm(
    train_set: &[Trajectory<f64>],
    eval_set: &[Trajectory<f64>],
    norm: &NormStats,
    cfg: &ExperimentConfig,
    mask: MaskKind,
    checkpoint: Option<&Path>,
) -> Result<(MtmModel, Vec<MetricPoint>)> {
    let tc = TrainConfig { mask, ..cfg.train.clone() };
    Ok(train(train_set.to_vec(), eval_set, norm.clone(), cfg.model.clone(), tc, checkpoint)?)
}

pub fn target_return(cfg: &ExperimentConfig, refs: &ReferenceReturns) -> f64 {
    cfg.eval.target_return.unwrap_or(refs.expert)
}

/// Rollout evaluation of a model in one acting mode.
pub fn evaluate_mtm(model: &MtmModel, norm: &NormStats, env: &Env, refs: &ReferenceReturns, mode: ActMode, target: Option<f64>, episodes: usize, seed: u64) -> Result<EvalReport> {
    let policy = MtmPolicy {
        model,
        norm,
        mode,
        action_bound: env.action_bound(),
    };
    let target = if mode == ActMode::Bc { None } else { target };
    Ok(rollout_eval(&policy, env, refs, target, episodes, seed ^ EVAL_SEED)?)
}

/// Held-out segments used for FD / ID losses.
pub fn heldout_segments(prep: &Prepared, cfg: &ExperimentConfig, segment_len: usize) -> Result<Vec<Segment>> {
    Ok(fixed_segments(&prep.eval, segment_len, cfg.train.eval_segments, cfg.train.seed)?)
}

/// The four-capability report of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapabilityReport {
    pub model: String,
    pub bc_return: f64,
    pub bc_normalized: f64,
    pub rcbc_return: f64,
    pub rcbc_normalized: f64,
    /// Held-out target-cell MSE, normalized units.
    pub fd_loss: f64,
    pub id_loss: f64,
    pub target_return: f64,
    pub ref_random: f64,
    pub ref_expert: f64,
}

pub fn mtm_capabilities(model: &MtmModel, prep: &Prepared, cfg: &ExperimentConfig, seed: u64) -> Result<CapabilityReport> {
    let refs = prep.refs();
    let target = target_return(cfg, &refs);
    let ep = cfg.eval.episodes;
    let bc = evaluate_mtm(model, &prep.norm, &prep.env, &refs, ActMode::Bc, None, ep, seed)?;
    let rcbc = evaluate_mtm(model, &prep.norm, &prep.env, &refs, ActMode::Rcbc, Some(target), ep, seed)?;
    let len = model.config().segment_len;
    let segs = heldout_segments(prep, cfg, len)?;
    Ok(CapabilityReport {
        model: "mtm".into(),
        bc_return: bc.mean_return,
        bc_normalized: bc.mean_normalized,
        rcbc_return: rcbc.mean_return,
        rcbc_normalized: rcbc.mean_normalized,
        fd_loss: capability_loss(model, &segs, Capability::Fd, len - 1)?,
        id_loss: capability_loss(model, &segs, Capability::Id, len - 1)?,
        target_return: target,
        ref_random: refs.random,
        ref_expert: refs.expert,
    })
}

/// Returns of a BC or RCBC baseline policy.
pub fn baseline_rollout(prep: &Prepared, cfg: &ExperimentConfig, cap: Capability, seed: u64) -> Result<EvalReport> {
    let (mlp, _) = train_baseline(cap, &prep.train, cfg.model.segment_len, &cfg.baseline)?;
    let refs = prep.refs();
    let policy = BaselinePolicy {
        mlp: &mlp,
        norm: &prep.norm,
        action_bound: prep.env.action_bound(),
    };
    let target = (cap == Capability::Rcbc).then(|| target_return(cfg, &refs));
    Ok(rollout_eval(&policy, &prep.env, &refs, target, cfg.eval.episodes, seed ^ EVAL_SEED)?)
}

/// Same report for the specialized MLP baselines, one network per capability.
pub fn baseline_capabilities(prep: &Prepared, cfg: &ExperimentConfig, seed: u64) -> Result<CapabilityReport> {
    let refs = prep.refs();
    let len = cfg.model.segment_len;
    let bc = baseline_rollout(prep, cfg, Capability::Bc, seed)?;
    let rcbc = baseline_rollout(prep, cfg, Capability::Rcbc, seed)?;
    let segs: Vec<Segment> = heldout_segments(prep, cfg, len)?.into_iter().filter(|s| s.presence[1] && s.presence[2]).collect();
    let mut losses = Vec::new();
    for cap in [Capability::Fd, Capability::Id] {
        let (mlp, _) = train_baseline(cap, &prep.train, len, &cfg.baseline)?;
        losses.push(mlp.loss(&segs)?);
    }
    Ok(CapabilityReport {
        model: "baseline_mlp".into(),
        bc_return: bc.mean_return,
        bc_normalized: bc.mean_normalized,
        rcbc_return: rcbc.mean_return,
        rcbc_normalized: rcbc.mean_normalized,
        fd_loss: losses[0],
        id_loss: losses[1],
        target_return: target_return(cfg, &refs),
        ref_random: refs.random,
        ref_expert: refs.expert,
    })
}

/// One random-autoregressive model against three specialized ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VersatilityResult {
    pub versatile_fd: f64,
    pub versatile_id: f64,
    pub versatile_rcbc: f64,
    pub specialized_fd: f64,
    pub specialized_id: f64,
    pub specialized_rcbc: f64,
}

pub fn versatility(prep: &Prepared, cfg: &ExperimentConfig, seed: u64) -> Result<VersatilityResult> {
    let len = cfg.model.segment_len;
    let segs = heldout_segments(prep, cfg, len)?;
    let refs = prep.refs();
    let target = Some(target_return(cfg, &refs));
    let ep = cfg.eval.episodes;
    let (ra, _) = train_mtm(&prep.train, &prep.eval, &prep.norm, cfg, MaskKind::RandomAutoregressive, None)?;
    let (fd, _) = train_mtm(&prep.train, &prep.eval, &prep.norm, cfg, MaskKind::Fd, None)?;
    let (id, _) = train_mtm(&prep.train, &prep.eval, &prep.norm, cfg, MaskKind::Id, None)?;
    let (rc, _) = train_mtm(&prep.train, &prep.eval, &prep.norm, cfg, MaskKind::Rcbc, None)?;
    Ok(VersatilityResult {
        versatile_fd: capability_loss(&ra, &segs, Capability::Fd, len - 1)?,
        versatile_id: capability_loss(&ra, &segs, Capability::Id, len - 1)?,
        versatile_rcbc: evaluate_mtm(&ra, &prep.norm, &prep.env, &refs, ActMode::Rcbc, target, ep, seed)?.mean_normalized,
        specialized_fd: capability_loss(&fd, &segs, Capability::Fd, len - 1)?,
        specialized_id: capability_loss(&id, &segs, Capability::Id, len - 1)?,
        specialized_rcbc: evaluate_mtm(&rc, &prep.norm, &prep.env, &refs, ActMode::Rcbc, target, ep, seed)?.mean_normalized,
    })
}

/// `n` target returns evenly spaced from the random to the expert reference.
pub fn return_levels(refs: &ReferenceReturns, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![refs.expert],
        _ => (0..n).map(|k| refs.random + (refs.expert - refs.random) * k as f64 / (n - 1) as f64).collect(),
    }
}

/// Mean return achieved when conditioning on each target.
pub fn rcbc_sweep(model: &MtmModel, prep: &Prepared, targets: &[f64], episodes: usize, seed: u64) -> Result<Vec<EvalReport>> {
    let refs = prep.refs();
    targets
        .iter()
        .map(|&g| evaluate_mtm(model, &prep.norm, &prep.env, &refs, ActMode::Rcbc, Some(g), episodes, seed))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeteroResult {
    pub n_actioned: usize,
    pub n_state_only: usize,
    /// Heteromodal model acting by state planning plus inverse dynamics.
    pub two_stage: f64,
    /// Heteromodal model acting by RCBC.
    pub hetero_rcbc: f64,
    /// Model trained on the actioned trajectories only, acting by RCBC.
    pub actioned_only: f64,
}

fn normalize_all(norm: &NormStats, ts: &[&Trajectory]) -> Result<Vec<Trajectory<f64>>> {
    Ok(ts.iter().map(|t| norm.transform(&t.to_f64(), Direction::Apply)).collect::<mtm_core::Result<_>>()?)
}

/// Heteromodal training against the actioned-only model on the `hetero` data.
pub fn hetero_compare(cfg: &ExperimentConfig, seed: u64) -> Result<HeteroResult> {
    let h = &cfg.hetero;
    let env = Env::new(cfg.env.clone())?;
    let trajs = generate_dataset(&env, &h.policy, h.n_trajectories, seed)?;
    let refs = reference_returns(&env, &h.policy, cfg.env.seed)?;
    let split = make_heteromodal(&trajs, h.actioned_fraction, h.state_only_fraction, seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| &split.trajectories[i]).collect::<Vec<_>>();
    let (actioned, state_only, eval) = (pick(&split.actioned), pick(&split.state_only), pick(&split.eval));
    let all: Vec<&Trajectory> = actioned.iter().chain(&state_only).copied().collect();
    let norm = NormStats::fit(&all)?;
    let eval_n = normalize_all(&norm, &eval)?;
    let (hetero, _) = train_mtm(&normalize_all(&norm, &all)?, &eval_n, &norm, cfg, MaskKind::RandomAutoregressive, None)?;
    let (act_only, _) = train_mtm(&normalize_all(&norm, &actioned)?, &eval_n, &norm, cfg, MaskKind::RandomAutoregressive, None)?;
    let target = Some(target_return(cfg, &refs));
    let ep = cfg.eval.episodes;
    let score = |m: &MtmModel, mode| evaluate_mtm(m, &norm, &env, &refs, mode, target, ep, seed).map(|r| r.mean_normalized);
    Ok(HeteroResult {
        n_actioned: actioned.len(),
        n_state_only: state_only.len(),
        two_stage: score(&hetero, ActMode::TwoStage)?,
        hetero_rcbc: score(&hetero, ActMode::Rcbc)?,
        actioned_only: score(&act_only, ActMode::Rcbc)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub fraction: f64,
    pub n_train: usize,
    pub mtm_rcbc: f64,
    pub baseline_rcbc: f64,
    /// Heteromodal model (subset actioned, rest of the split state-only),
    /// acting two-stage; absent when the subset is the whole split.
    pub hetero_two_stage: Option<f64>,
}

/// Seeded choice of `round(fraction * n_train)` training trajectories (at
/// least one), returned as dataset indices.
pub fn train_subset(ds: &Dataset, fraction: f64, seed: u64) -> Vec<usize> {
    let mut idx = ds.manifest.split.train.clone();
    idx.shuffle(&mut seeded_rng(seed, SUBSET_STREAM));
    let k = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len());
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    out
}

/// MTM and baseline RCBC scores on a fraction of the training split.
pub fn data_point(ds: &Dataset, cfg: &ExperimentConfig, fraction: f64, with_hetero: bool, seed: u64) -> Result<DataPoint> {
    let idx = train_subset(ds, fraction, seed);
    let sub = Prepared::new(ds.subset(&idx, &ds.manifest.split.eval)?)?;
    let refs = sub.refs();
    let target = Some(target_return(cfg, &refs));
    let (model, _) = train_mtm(&sub.train, &sub.eval, &sub.norm, cfg, MaskKind::RandomAutoregressive, None)?;
    let mtm_rcbc = evaluate_mtm(&model, &sub.norm, &sub.env, &refs, ActMode::Rcbc, target, cfg.eval.episodes, seed)?.mean_normalized;
    let baseline_rcbc = baseline_rollout(&sub, cfg, Capability::Rcbc, seed)?.mean_normalized;
    let hetero_two_stage = if with_hetero && idx.len() < ds.manifest.split.train.len() {
        let full = Prepared::new(ds.clone())?;
        let mut trajs: Vec<Trajectory<f64>> = Vec::new();
        for &i in &ds.manifest.split.train {
            let mut t = full.norm.transform(&ds.trajectories[i].to_f64(), Direction::Apply)?;
            if idx.binary_search(&i).is_err() {
                t.actions = None;
            }
            trajs.push(t);
        }
        let (m, _) = train_mtm(&trajs, &full.eval, &full.norm, cfg, MaskKind::RandomAutoregressive, None)?;
        Some(evaluate_mtm(&m, &full.norm, &full.env, &refs, ActMode::TwoStage, target, cfg.eval.episodes, seed)?.mean_normalized)
    } else {
        None
    };
    Ok(DataPoint {
        fraction,
        n_train: idx.len(),
        mtm_rcbc,
        baseline_rcbc,
        hetero_two_stage,
    })
}

/// Exploration data for representation transfer, rewards relabeled with
/// the configured task.
pub fn exploration_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<(Env, Dataset)> {
    let env = Env::new(cfg.env.clone())?;
    let t = &cfg.transfer;
    let trajs: Vec<Trajectory> = generate_dataset(&env, &t.policy, t.n_trajectories, seed)?
        .iter()
        .map(|tr| relabel_rewards(&env, tr))
        .collect();
    let split = split_dataset(trajs.len(), cfg.dataset.eval_fraction, seed)?;
    let refs = reference_returns(&env, &t.policy, cfg.env.seed)?;
    let ds = Dataset::assemble(cfg.env.clone(), t.policy.clone(), seed, trajs, split, refs)?;
    Ok((env, ds))
}

/// Encoder pretraining on exploration data with `transfer.pretrain_steps`.
pub fn pretrain_encoder(cfg: &ExperimentConfig, ds: &Dataset) -> Result<MtmModel> {
    let prep = Prepared::new(ds.clone())?;
    let steps = cfg.transfer.pretrain_steps;
    let mut c = cfg.clone();
    c.train.steps = steps;
    c.train.warmup_steps = cfg.train.warmup_steps.min(steps / 10);
    c.train.eval_interval = 0;
    Ok(train_mtm(&prep.train, &prep.eval, &prep.norm, &c, MaskKind::RandomAutoregressive, None)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRun {
    pub representation: Representation,
    pub finetune: bool,
    pub curve: Vec<CurvePoint>,
}

pub const TRANSFER_MODES: [(Representation, bool); 5] = [
    (Representation::Raw, false),
    (Representation::MtmState, false),
    (Representation::MtmState, true),
    (Representation::MtmStateAction, false),
    (Representation::MtmStateAction, true),
];

/// Offline TD3 in each requested mode on the exploration dataset;
/// `encoder_norm` is the normalization the encoder was trained with.
pub fn transfer_runs(
    cfg: &ExperimentConfig,
    env: &Env,
    ds: &Dataset,
    encoder: &MtmModel,
    encoder_norm: &NormStats,
    modes: &[(Representation, bool)],
) -> Result<Vec<TransferRun>> {
    let trajs = ds.train_trajectories();
    let refs = ds.manifest.refs;
    modes
        .iter()
        .map(|&(representation, finetune)| {
            let tc = mtm_core::reprrl::Td3Config {
                representation,
                finetune,
                ..cfg.td3.clone()
            };
            let pre = representation.uses_encoder().then_some((encoder, encoder_norm));
            let (_, curve) = td3_train_offline(&trajs, env, &refs, pre, &tc)?;
            Ok(TransferRun {
                representation,
                finetune,
                curve,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn return_levels_span_the_references() {
        let refs = ReferenceReturns { random: -100.0, expert: -20.0 };
        assert_eq!(return_levels(&refs, 5), vec![-100.0, -80.0, -60.0, -40.0, -20.0]);
        assert_eq!(return_levels(&refs, 1), vec![-20.0]);
    }

    #[test]
    fn subsets_are_nested_in_the_train_split() {
        let cfg = ExperimentConfig {
            dataset: crate::config::DatasetSection {
                n_trajectories: 40,
                ..Default::default()
            },
            ..Default::default()
        };
        let ds = dataset_for(&cfg).unwrap();
        let small = train_subset(&ds, 0.1, 3);
        let large = train_subset(&ds, 0.5, 3);
        assert_eq!(small.len(), 4);
        assert!(small.iter().all(|i| large.contains(i)));
        assert!(large.iter().all(|i| ds.manifest.split.train.contains(i)));
        assert_eq!(train_subset(&ds, 0.001, 3).len(), 1);
    }
}
