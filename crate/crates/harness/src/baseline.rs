//! Specialized feed-forward baselines: one network per capability, fed the
//! cells that capability's mask leaves visible, flattened in sequence order.

use diffcore::{ParamId, ParamStore, Tape, Tensor, Var};
use mtm_core::capabilities::{build_query, Policy, RolloutContext};
use mtm_core::masking::{capability_mask, Capability, MaskGrid};
use mtm_core::seeded_rng;
use mtm_core::training::{lr_at_step, optimizer_step, MetricPoint, OptimState, TrainConfig, ADAM_BETAS, ADAM_EPS};
use mtm_core::trajdata::{sample_segment, Modality, NormStats, Segment, Trajectory};
use mtm_core::{MtmError, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

const INIT_STREAM: u64 = 0xba5e;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub width: usize,
    pub layers: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            width: 256,
            layers: 2,
            lr: 2e-4,
            weight_decay: 0.005,
            warmup_steps: 500,
            steps: 5000,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule(4).validate()?;
        if self.width == 0 || self.layers == 0 {
            return Err(MtmError::Config("baseline width and layers must be positive".into()));
        }
        Ok(())
    }

    fn schedule(&self, segment_len: usize) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            steps: self.steps,
            warmup_steps: self.warmup_steps,
            lr: self.lr,
            weight_decay: self.weight_decay,
            segment_len,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

/// Query position each capability is trained and evaluated at.
pub fn query_position(cap: Capability, len: usize) -> usize {
    match cap {
        Capability::Bc | Capability::Rcbc => len,
        _ => len - 1,
    }
}

#[derive(Clone, Debug)]
pub struct BaselineMlp {
    pub capability: Capability,
    pub segment_len: usize,
    pub params: ParamStore,
    layers: Vec<(ParamId, ParamId)>,
    mask: MaskGrid,
    target: (usize, Modality),
    input_dim: usize,
}

impl BaselineMlp {
    pub fn new(cap: Capability, segment_len: usize, state_dim: usize, action_dim: usize, cfg: &BaselineConfig) -> Result<Self> {
        let q = query_position(cap, segment_len);
        let mask = capability_mask(cap, segment_len, q)?;
        let target = cap.target(q).ok_or_else(|| MtmError::InvalidArgument("baseline needs a single-target capability".into()))?;
        let dim = |m: Modality| match m {
            Modality::Rtg => 1,
            Modality::State => state_dim,
            Modality::Action => action_dim,
        };
        let mut input_dim = 0;
        for t in 0..segment_len {
            for m in Modality::ALL {
                if mask.visible(t, m) {
                    input_dim += dim(m);
                }
            }
        }
        let mut sizes = vec![input_dim];
        sizes.extend(std::iter::repeat_n(cfg.width, cfg.layers));
        sizes.push(dim(target.1));
        let mut rng = seeded_rng(cfg.seed, INIT_STREAM);
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        for (i, w) in sizes.windows(2).enumerate() {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<f64>>();
            let wt = Tensor::matrix(w[0], w[1], draw(w[0] * w[1]));
            let bt = Tensor::matrix(1, w[1], draw(w[1]));
            layers.push((params.add(format!("l{i}.w"), wt, true), params.add(format!("l{i}.b"), bt, false)));
        }
        Ok(Self {
            capability: cap,
            segment_len,
            params,
            layers,
            mask,
            target,
            input_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.params.value(self.layers.last().expect("at least one layer").1).cols()
    }

    /// Cell the network predicts, as `(t, modality)`.
    pub fn target(&self) -> (usize, Modality) {
        self.target
    }

    /// Visible cells of `seg`, flattened in `(t, modality)` order.
    pub fn features(&self, seg: &Segment) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.input_dim);
        for t in 0..self.segment_len {
            for m in Modality::ALL {
                if self.mask.visible(t, m) {
                    x.extend_from_slice(seg.cell(t, m));
                }
            }
        }
        x
    }

    fn forward(&self, tape: &mut Tape, segs: &[Segment], train: bool) -> Result<Var> {
        let data: Vec<f64> = segs.iter().flat_map(|s| self.features(s)).collect();
        let mut x = tape.constant(Tensor::matrix(segs.len(), self.input_dim, data))?;
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let (w, b) = if train {
                (tape.param(&self.params, *w)?, tape.param(&self.params, *b)?)
            } else {
                (tape.frozen_param(&self.params, *w)?, tape.frozen_param(&self.params, *b)?)
            };
            x = tape.linear(x, w, b)?;
            if i < last {
                x = tape.gelu(x)?;
            }
        }
        Ok(x)
    }

    fn targets(&self, segs: &[Segment]) -> Tensor {
        let (t, m) = self.target;
        let data: Vec<f64> = segs.iter().flat_map(|s| s.cell(t, m).to_vec()).collect();
        Tensor::matrix(segs.len(), self.output_dim(), data)
    }

    /// Predicted target cells (normalized units).
    pub fn predict(&self, segs: &[Segment]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let y = self.forward(&mut tape, segs, false)?;
        let y = tape.value(y);
        Ok((0..y.rows()).map(|i| y.row(i).to_vec()).collect())
    }

    /// Target-cell MSE over `segs`, matching the model's capability loss.
    pub fn loss(&self, segs: &[Segment]) -> Result<f64> {
        let (t, m) = self.target;
        let pred = self.predict(segs)?;
        let total: f64 = pred
            .iter()
            .zip(segs)
            .map(|(p, s)| p.iter().zip(s.cell(t, m)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum();
        Ok(total / (segs.len() * self.output_dim()) as f64)
    }
}

/// Every baseline target or input involves actions; RCBC also reads rtg.
fn usable(cap: Capability, t: &Trajectory<f64>, len: usize) -> bool {
    t.len() >= len && t.actions.is_some() && (cap != Capability::Rcbc || t.rtg.is_some())
}

/// Trains a baseline on normalized trajectories. Trajectories lacking the
/// capability's modalities are skipped.
pub fn train_baseline(cap: Capability, train: &[Trajectory<f64>], segment_len: usize, cfg: &BaselineConfig) -> Result<(BaselineMlp, Vec<MetricPoint>)> {
    cfg.validate()?;
    let data: Vec<&Trajectory<f64>> = train.iter().filter(|t| usable(cap, t, segment_len)).collect();
    let first = data.first().ok_or_else(|| MtmError::InvalidArgument(format!("no trajectory usable for the {cap:?} baseline")))?;
    let mut mlp = BaselineMlp::new(cap, segment_len, first.state_dim, first.action_dim, cfg)?;
    let mut optim = OptimState::new(&mlp.params);
    let schedule = cfg.schedule(segment_len);
    let mut metrics = Vec::new();
    let mut acc = 0.0;
    for step in 0..cfg.steps {
        let mut rng = seeded_rng(cfg.seed ^ INIT_STREAM, step);
        let segs = (0..cfg.batch_size)
            .map(|_| sample_segment(data[rng.random_range(0..data.len())], segment_len, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let pred = mlp.forward(&mut tape, &segs, true)?;
        let target = tape.constant(mlp.targets(&segs))?;
        let loss = tape.mse(pred, target)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(MtmError::NonFiniteLoss { step });
        }
        acc += value;
        let grads = tape.backward(loss)?;
        mlp.params.zero_grad();
        grads.accumulate_into(&tape, &mut mlp.params);
        optimizer_step(&mut mlp.params, &mut optim, lr_at_step(step + 1, &schedule), cfg.weight_decay, ADAM_BETAS, ADAM_EPS)?;
        let done = step + 1;
        if done == cfg.steps || done % 500 == 0 {
            let n = if done % 500 == 0 { 500 } else { done % 500 };
            metrics.push(MetricPoint {
                step: done,
                name: "train_loss".into(),
                value: acc / n as f64,
            });
            acc = 0.0;
        }
    }
    Ok((mlp, metrics))
}

/// A BC or RCBC baseline acting in the environment.
pub struct BaselinePolicy<'a> {
    pub mlp: &'a BaselineMlp,
    pub norm: &'a NormStats,
    pub action_bound: f64,
}

impl Policy for BaselinePolicy<'_> {
    fn history_len(&self) -> usize {
        self.mlp.segment_len - 1
    }

    fn act_batch(&self, contexts: &[RolloutContext]) -> Result<Vec<Vec<f64>>> {
        let cap = self.mlp.capability;
        if !matches!(cap, Capability::Bc | Capability::Rcbc) {
            return Err(MtmError::InvalidArgument(format!("a {cap:?} baseline cannot act")));
        }
        let len = self.mlp.segment_len;
        let rcbc = cap == Capability::Rcbc;
        if rcbc && contexts.iter().any(|c| c.target_return.is_none()) {
            return Err(MtmError::InvalidArgument("RCBC needs a target return".into()));
        }
        let segs = contexts
            .iter()
            .map(|c| build_query(self.norm, &c.steps(rcbc, len - 1), len, cap, len).map(|q| q.0))
            .collect::<Result<Vec<_>>>()?;
        let pred = self.mlp.predict(&segs)?;
        Ok(pred
            .into_iter()
            .map(|a| {
                self.norm
                    .action
                    .invert(&a)
                    .into_iter()
                    .map(|x| x.clamp(-self.action_bound, self.action_bound))
                    .collect()
            })
            .collect())
    }
}
