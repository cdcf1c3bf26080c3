//! Masked-reconstruction training: loss, AdamW, learning-rate schedule, MTMC
//! checkpoints and the training loop.
//!
//! Every step draws its batch and masks from `seeded_rng(seed, step)`, so the
//! only random state a checkpoint needs is the seed and the step counter.
//!
//! MTMC layout (little-endian):
//!
//! ```text
//! b"MTMC" | version: u32 | header_len: u64 | header JSON (UTF-8)
//! f64 blobs: every parameter, then every first moment, then every second moment
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use diffcore::{ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::capabilities::{heldout_losses, HeldoutLosses};
use crate::error::{invalid, MtmError, Result};
use crate::masking::{MaskGrid, MaskKind, DEFAULT_RATIO_RANGE};
use crate::model::{ModelConfig, MtmModel, Pass, Predictions};
use crate::seeded_rng;
use crate::trajdata::{sample_segment, Modality, NormStats, Segment, Trajectory, NUM_MODALITIES};

pub const MTMC_MAGIC: &[u8; 4] = b"MTMC";
pub const MTMC_VERSION: u32 = 1;
pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;
const EVAL_STREAM: u64 = u64::MAX - 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub warmup_steps: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub mask: MaskKind,
    pub ratio_range: (f64, f64),
    pub segment_len: usize,
    /// Steps between metric records; 0 records only at the end.
    pub eval_interval: u64,
    /// Held-out segments scored at each record.
    pub eval_segments: usize,
    /// Steps between checkpoints when a checkpoint path is given; 0 means only at the end.
    pub checkpoint_interval: u64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            steps: 5000,
            warmup_steps: 500,
            lr: 1e-3,
            weight_decay: 0.01,
            mask: MaskKind::RandomAutoregressive,
            ratio_range: DEFAULT_RATIO_RANGE,
            segment_len: 4,
            eval_interval: 500,
            eval_segments: 512,
            checkpoint_interval: 0,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MtmError::Config(m));
        if self.steps == 0 || self.warmup_steps >= self.steps {
            return bad(format!("need 0 <= warmup_steps < steps, got {} and {}", self.warmup_steps, self.steps));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("lr must be positive; weight_decay and grad_clip non-negative".into());
        }
        let (lo, hi) = self.ratio_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad(format!("ratio_range [{lo}, {hi}] must lie in [0, 1]"));
        }
        self.mask.validate(self.segment_len)
    }
}

/// Linear warmup from 0 to `lr`, then cosine decay to 0 at `steps`.
pub fn lr_at_step(step: u64, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.steps);
    if step < cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.steps - cfg.warmup_steps) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Per-parameter AdamW moments.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One AdamW update from the gradients stored in `store`. Weight decay is
/// decoupled and only touches parameters flagged for it.
pub fn optimizer_step(store: &mut ParamStore, state: &mut OptimState, lr: f64, weight_decay: f64, betas: (f64, f64), eps: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(MtmError::Dimension(format!("optimizer state for {} params, store has {}", state.m.len(), store.len())));
    }
    if let Some(p) = store.iter().find(|p| !p.grad.is_finite()) {
        return Err(MtmError::NonFinite(format!("gradient of {}", p.name)));
    }
    state.step += 1;
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in store.iter_mut().enumerate() {
        let decay = if p.decay { weight_decay } else { 0.0 };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let g = p.grad.data();
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w -= lr * (mhat / (vhat.sqrt() + eps)) + lr * decay * *w;
        }
    }
    Ok(())
}

/// Mean squared error over every present scalar of every cell, visible or
/// hidden. Cells of absent modalities carry zero weight.
pub fn masked_mse_loss(tape: &mut Tape, preds: &Predictions, segments: &[Segment]) -> Result<Var> {
    let mut terms = Vec::with_capacity(NUM_MODALITIES);
    let mut weights_all = Vec::with_capacity(NUM_MODALITIES);
    let mut count = 0.0;
    for m in Modality::ALL {
        let dim = segments[0].dim(m);
        let mut target = Vec::new();
        let mut w = Vec::new();
        for s in segments {
            target.extend_from_slice(s.values(m));
            let on = if s.presence[m.index()] { 1.0 } else { 0.0 };
            w.extend(std::iter::repeat_n(on, s.len * dim));
        }
        count += w.iter().sum::<f64>();
        weights_all.push((m, target, w));
    }
    if count == 0.0 {
        return Err(invalid("every cell of the batch is absent"));
    }
    for (m, target, w) in weights_all {
        let pred = preds.per_modality[m.index()];
        let shape = tape.value(pred).shape().to_vec();
        let target = tape.constant(Tensor::new(shape, target)?)?;
        let w: Rc<[f64]> = w.into();
        terms.push(tape.weighted_sse(pred, target, Some(w), count)?);
    }
    let s = tape.add(terms[0], terms[1])?;
    Ok(tape.add(s, terms[2])?)
}

/// One metric observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub step: u64,
    pub name: String,
    pub value: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    optim_step: u64,
    norm: NormStats,
    seed: u64,
    params: Vec<(String, Vec<usize>)>,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: MtmModel,
    pub optim: OptimState,
    pub train: TrainConfig,
    pub step: u64,
    pub norm: NormStats,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            format_version: MTMC_VERSION,
            model: self.model.config().clone(),
            train: self.train.clone(),
            step: self.step,
            optim_step: self.optim.step,
            norm: self.norm.clone(),
            seed: self.train.seed,
            params: self.model.params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MTMC_MAGIC);
        buf.extend_from_slice(&MTMC_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        let tensors = self.model.params.iter().map(|p| &p.value).chain(&self.optim.m).chain(&self.optim.v);
        for t in tensors {
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        fs::File::create(&tmp)?.write_all(&buf)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let fmt = |m: &str| MtmError::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MTMC_MAGIC {
            return Err(fmt("not an MTMC checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != MTMC_VERSION {
            return Err(MtmError::Format(format!("unsupported MTMC version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize.checked_add(hlen).filter(|e| *e <= bytes.len()).ok_or_else(|| fmt("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..body])?;
        let mut model = MtmModel::new(header.model.clone(), 0)?;
        let layout: Vec<(String, Vec<usize>)> = model.params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
        if layout != header.params {
            return Err(fmt("parameter layout does not match the model config"));
        }
        let total: usize = layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if bytes.len() != body + 3 * total * 8 {
            return Err(fmt("truncated or oversized parameter blobs"));
        }
        let mut pos = body;
        let mut next = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data = bytes[pos..pos + 8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            pos += 8 * n;
            Tensor::new(shape.to_vec(), data)
        };
        for p in model.params.iter_mut() {
            p.value = next(&layout_shape(&p.value))?;
        }
        let m = layout.iter().map(|(_, s)| next(s)).collect::<std::result::Result<Vec<_>, _>>()?;
        let v = layout.iter().map(|(_, s)| next(s)).collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            model,
            optim: OptimState {
                m,
                v,
                step: header.optim_step,
            },
            train: header.train,
            step: header.step,
            norm: header.norm,
        })
    }
}

fn layout_shape(t: &Tensor) -> Vec<usize> {
    t.shape().to_vec()
}

/// Draws `n` fixed windows from `trajs` for held-out scoring.
pub fn fixed_segments(trajs: &[Trajectory<f64>], len: usize, n: usize, seed: u64) -> Result<Vec<Segment>> {
    let usable: Vec<&Trajectory<f64>> = trajs.iter().filter(|t| t.len() >= len).collect();
    if usable.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = seeded_rng(seed, EVAL_STREAM);
    (0..n)
        .map(|_| {
            let t = usable[rng.random_range(0..usable.len())];
            sample_segment(t, len, &mut rng)
        })
        .collect()
}

/// Stateful training loop over normalized trajectories.
pub struct Trainer {
    pub model: MtmModel,
    pub optim: OptimState,
    pub config: TrainConfig,
    pub norm: NormStats,
    pub step: u64,
    train: Vec<Trajectory<f64>>,
    eval_segments: Vec<Segment>,
    checkpoint_path: Option<PathBuf>,
}

impl Trainer {
    pub fn new(model: MtmModel, config: TrainConfig, norm: NormStats, train: Vec<Trajectory<f64>>, eval: &[Trajectory<f64>]) -> Result<Self> {
        config.validate()?;
        if model.config().segment_len != config.segment_len {
            return Err(MtmError::Config(format!(
                "model segment_len {} differs from train segment_len {}",
                model.config().segment_len,
                config.segment_len
            )));
        }
        let train: Vec<Trajectory<f64>> = train.into_iter().filter(|t| t.len() >= config.segment_len).collect();
        if train.is_empty() {
            return Err(invalid("no training trajectory is long enough for one segment"));
        }
        let eval_segments = fixed_segments(eval, config.segment_len, config.eval_segments, config.seed)?;
        let optim = OptimState::new(&model.params);
        Ok(Self {
            model,
            optim,
            config,
            norm,
            step: 0,
            train,
            eval_segments,
            checkpoint_path: None,
        })
    }

    /// Continues from a checkpoint; the data must be the same as the original run's.
    pub fn resume(ckpt: Checkpoint, train: Vec<Trajectory<f64>>, eval: &[Trajectory<f64>]) -> Result<Self> {
        let mut t = Self::new(ckpt.model, ckpt.train, ckpt.norm, train, eval)?;
        t.optim = ckpt.optim;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn with_checkpoint_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.checkpoint_path = Some(path.into());
        self
    }

    pub fn eval_segments(&self) -> &[Segment] {
        &self.eval_segments
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optim: self.optim.clone(),
            train: self.config.clone(),
            step: self.step,
            norm: self.norm.clone(),
        }
    }

    /// Batch and masks of step `step`.
    pub fn batch(&self, step: u64) -> Result<(Vec<Segment>, Vec<MaskGrid>)> {
        let mut rng = seeded_rng(self.config.seed, step);
        let c = &self.config;
        let mut segs = Vec::with_capacity(c.batch_size);
        let mut masks = Vec::with_capacity(c.batch_size);
        for _ in 0..c.batch_size {
            let t = &self.train[rng.random_range(0..self.train.len())];
            segs.push(sample_segment(t, c.segment_len, &mut rng)?);
        }
        for s in &segs {
            let mut mask = c.mask.draw(c.segment_len, c.ratio_range, &mut rng)?;
            // a fully hidden present set would leave the encoder nothing to read
            if mask.clone().with_presence(s.presence).n_visible() == 0 {
                mask = MaskGrid::filled(c.segment_len, false);
                mask.set(0, Modality::State, true);
            }
            masks.push(mask);
        }
        Ok((segs, masks))
    }

    /// Loss of the current parameters on a batch, without dropout or updates.
    pub fn eval_loss(&self, segs: &[Segment], masks: &[MaskGrid]) -> Result<f64> {
        let mut tape = Tape::new();
        let preds = self.model.forward(&mut tape, segs, masks, &mut Pass::eval())?;
        let loss = masked_mse_loss(&mut tape, &preds, segs)?;
        Ok(tape.value(loss).data()[0])
    }

    /// One optimization step; returns the training loss before the update.
    pub fn train_step(&mut self) -> Result<f64> {
        let (segs, masks) = self.batch(self.step)?;
        let mut drop_rng = seeded_rng(self.config.seed ^ 0xd20b, self.step);
        let mut tape = Tape::new();
        let mut pass = if self.model.config().dropout > 0.0 {
            Pass::train(&mut drop_rng)
        } else {
            Pass {
                grad: crate::model::Grad::Train,
                rng: None,
                bound: None,
            }
        };
        let preds = self.model.forward(&mut tape, &segs, &masks, &mut pass)?;
        let loss = masked_mse_loss(&mut tape, &preds, &segs)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            if let Some(path) = &self.checkpoint_path {
                self.checkpoint().save(path)?;
            }
            return Err(MtmError::NonFiniteLoss { step: self.step });
        }
        let grads = tape.backward(loss)?;
        self.model.params.zero_grad();
        grads.accumulate_into(&tape, &mut self.model.params);
        if self.config.grad_clip > 0.0 {
            let norm = self.model.params.grad_norm();
            if norm > self.config.grad_clip {
                self.model.params.scale_grads(self.config.grad_clip / norm);
            }
        }
        let lr = lr_at_step(self.step + 1, &self.config);
        optimizer_step(&mut self.model.params, &mut self.optim, lr, self.config.weight_decay, ADAM_BETAS, ADAM_EPS)?;
        self.step += 1;
        Ok(value)
    }

    pub fn heldout(&self) -> Result<Option<HeldoutLosses>> {
        if self.eval_segments.is_empty() {
            return Ok(None);
        }
        heldout_losses(&self.model, &self.eval_segments).map(Some)
    }

    /// Trains until `config.steps`, recording metrics at each eval interval
    /// and at the end.
    pub fn run(&mut self) -> Result<Vec<MetricPoint>> {
        let mut metrics = Vec::new();
        let mut acc = 0.0;
        let mut n = 0usize;
        while self.step < self.config.steps {
            acc += self.train_step()?;
            n += 1;
            let record = self.step == self.config.steps || (self.config.eval_interval > 0 && self.step % self.config.eval_interval == 0);
            if record {
                let step = self.step;
                metrics.push(MetricPoint {
                    step,
                    name: "train_loss".into(),
                    value: acc / n as f64,
                });
                acc = 0.0;
                n = 0;
                if let Some(h) = self.heldout()? {
                    for (name, value) in [("eval_full_loss", h.full), ("eval_fd_loss", h.fd), ("eval_id_loss", h.id)] {
                        metrics.push(MetricPoint {
                            step,
                            name: name.into(),
                            value,
                        });
                    }
                }
            }
            let ck = self.config.checkpoint_interval;
            if let Some(path) = &self.checkpoint_path {
                if self.step == self.config.steps || (ck > 0 && self.step % ck == 0) {
                    self.checkpoint().save(path)?;
                }
            }
        }
        Ok(metrics)
    }
}

/// Trains a fresh model of `model_cfg` (initialized from `train_cfg.seed`).
pub fn train(
    train: Vec<Trajectory<f64>>,
    eval: &[Trajectory<f64>],
    norm: NormStats,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<(MtmModel, Vec<MetricPoint>)> {
    let model = MtmModel::new(model_cfg, train_cfg.seed)?;
    let mut trainer = Trainer::new(model, train_cfg, norm, train, eval)?;
    if let Some(p) = checkpoint {
        trainer = trainer.with_checkpoint_path(p);
    }
    let metrics = trainer.run()?;
    Ok((trainer.model, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvConfig, Quality, ScriptedPolicySpec};
    use crate::trajdata::Dataset;
    use proptest::{prop_assert, proptest};

    #[test]
    fn schedule_landmarks() {
        let cfg = TrainConfig {
            steps: 100,
            warmup_steps: 10,
            lr: 0.5,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at_step(0, &cfg), 0.0);
        assert_eq!(lr_at_step(10, &cfg), 0.5);
        assert!(lr_at_step(100, &cfg).abs() < 1e-15);
        let before = lr_at_step(9, &cfg);
        let after = lr_at_step(11, &cfg);
        assert!((0.5 - before) <= 0.05 + 1e-12 && (0.5 - after) < 0.001);
    }

    proptest! {
        #[test]
        fn schedule_is_bounded(step in 0u64..=5000) {
            let cfg = TrainConfig::default();
            let lr = lr_at_step(step, &cfg);
            prop_assert!((0.0..=cfg.lr).contains(&lr));
        }
    }

    /// Hand-rolled single-variable AdamW.
    fn scalar_adamw(p: f64, g: f64, m: f64, v: f64, t: i32, lr: f64, wd: f64) -> (f64, f64, f64) {
        let m = 0.9 * m + 0.1 * g;
        let v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        (p - lr * mh / (vh.sqrt() + 1e-8) - lr * wd * p, m, v)
    }

    fn one_param(value: f64, grad: f64, decay: bool) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(value), decay);
        s.get_mut(id).grad = Tensor::scalar(grad);
        s
    }

    #[test]
    fn adamw_matches_scalar_oracle() {
        let mut store = one_param(0.7, -0.3, true);
        let mut st = OptimState::new(&store);
        let (mut p, mut m, mut v) = (0.7, 0.0, 0.0);
        for t in 1..=3 {
            optimizer_step(&mut store, &mut st, 0.01, 0.1, ADAM_BETAS, ADAM_EPS).unwrap();
            (p, m, v) = scalar_adamw(p, -0.3, m, v, t, 0.01, 0.1);
            let got = store.value(diffcore::ParamId(0)).data()[0];
            assert!((got - p).abs() < 1e-15, "{got} vs {p}");
        }
    }

    #[test]
    fn adamw_edge_cases() {
        let mut a = one_param(0.7, 0.2, true);
        let mut b = one_param(0.7, 0.2, false);
        let (mut sa, mut sb) = (OptimState::new(&a), OptimState::new(&b));
        optimizer_step(&mut a, &mut sa, 0.01, 0.0, ADAM_BETAS, ADAM_EPS).unwrap();
        optimizer_step(&mut b, &mut sb, 0.01, 0.5, ADAM_BETAS, ADAM_EPS).unwrap();
        // no decay flag behaves exactly like zero decay
        assert_eq!(a.value(diffcore::ParamId(0)), b.value(diffcore::ParamId(0)));
        let mut z = one_param(0.7, 0.0, true);
        let mut sz = OptimState::new(&z);
        optimizer_step(&mut z, &mut sz, 0.01, 0.0, ADAM_BETAS, ADAM_EPS).unwrap();
        assert_eq!(z.value(diffcore::ParamId(0)).data()[0], 0.7);
        let mut nan = one_param(0.7, f64::NAN, true);
        let mut sn = OptimState::new(&nan);
        let err = optimizer_step(&mut nan, &mut sn, 0.01, 0.0, ADAM_BETAS, ADAM_EPS).unwrap_err();
        assert!(err.to_string().contains('p'));
    }

    fn toy_segments(present_actions: bool) -> Vec<Segment> {
        vec![Segment {
            start: 0,
            len: 1,
            state_dim: 1,
            action_dim: 1,
            rtg: vec![0.0],
            states: vec![1.0],
            actions: vec![0.0],
            presence: [false, true, present_actions],
        }]
    }

    fn leaf_preds(tape: &mut Tape, vals: [f64; 3]) -> Predictions {
        let v: Vec<Var> = vals.iter().map(|x| tape.leaf(Tensor::matrix(1, 1, vec![*x]), true).unwrap()).collect();
        Predictions {
            per_modality: [v[0], v[1], v[2]],
        }
    }

    #[test]
    fn loss_examples() {
        let segs = toy_segments(false);
        let mut tape = Tape::new();
        let preds = leaf_preds(&mut tape, [5.0, 3.0, 9.0]);
        let loss = masked_mse_loss(&mut tape, &preds, &segs).unwrap();
        // only the state cell is present: (3 - 1)^2
        assert_eq!(tape.value(loss).data()[0], 4.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(preds.per_modality[0]).map_or(0.0, |t| t.data()[0]), 0.0);
        assert_eq!(g.get(preds.per_modality[2]).map_or(0.0, |t| t.data()[0]), 0.0);

        let mut tape = Tape::new();
        let preds = leaf_preds(&mut tape, [0.0, 1.0, 0.0]);
        let loss = masked_mse_loss(&mut tape, &preds, &toy_segments(true)).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);
    }

    #[test]
    fn all_absent_is_an_error() {
        let mut segs = toy_segments(false);
        segs[0].presence = [false; 3];
        let mut tape = Tape::new();
        let preds = leaf_preds(&mut tape, [0.0; 3]);
        assert!(masked_mse_loss(&mut tape, &preds, &segs).is_err());
    }

    pub(crate) fn linear_dataset(seed: u64, n: usize) -> Dataset {
        let mut env = EnvConfig::linear_system();
        env.noise_std = 0.0;
        env.horizon = 16;
        Dataset::generate(&env, &ScriptedPolicySpec::single(Quality::Random), n, 0.1, seed).unwrap()
    }

    pub(crate) fn small_setup(seed: u64, steps: u64) -> (Dataset, ModelConfig, TrainConfig) {
        let ds = linear_dataset(seed, 40);
        let model = ModelConfig {
            embed_dim: 16,
            n_heads: 2,
            n_enc_layers: 1,
            state_dim: 6,
            action_dim: 2,
            dropout: 0.1,
            ..ModelConfig::default()
        };
        let train = TrainConfig {
            batch_size: 8,
            steps,
            warmup_steps: 1,
            eval_interval: 5,
            eval_segments: 16,
            seed,
            ..TrainConfig::default()
        };
        (ds, model, train)
    }

    fn trainer(seed: u64, steps: u64) -> Trainer {
        let (ds, model_cfg, cfg) = small_setup(seed, steps);
        let train = ds.normalized(&ds.train_trajectories()).unwrap();
        let eval = ds.normalized(&ds.eval_trajectories()).unwrap();
        Trainer::new(MtmModel::new(model_cfg, seed).unwrap(), cfg, ds.manifest.norm.clone(), train, &eval).unwrap()
    }

    #[test]
    fn first_step_reduces_batch_loss() {
        for seed in 0..5 {
            let mut t = trainer(seed, 10);
            let (segs, masks) = t.batch(0).unwrap();
            let before = t.eval_loss(&segs, &masks).unwrap();
            t.train_step().unwrap();
            let after = t.eval_loss(&segs, &masks).unwrap();
            assert!(after < before, "seed {seed}: {after} >= {before}");
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let a = trainer(3, 12).run().unwrap();
        let b = trainer(3, 12).run().unwrap();
        assert_eq!(a, b);
        assert!(a.iter().any(|m| m.name == "eval_fd_loss"));
    }

    #[test]
    fn checkpoint_resume_reproduces_losses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mtmc");
        let mut full = trainer(4, 30);
        for _ in 0..5 {
            full.train_step().unwrap();
        }
        full.checkpoint().save(&path).unwrap();
        let expected: Vec<f64> = (0..10).map(|_| full.train_step().unwrap()).collect();

        let (ds, _, _) = small_setup(4, 30);
        let train = ds.normalized(&ds.train_trajectories()).unwrap();
        let eval = ds.normalized(&ds.eval_trajectories()).unwrap();
        let mut resumed = Trainer::resume(Checkpoint::load(&path).unwrap(), train, &eval).unwrap();
        let got: Vec<f64> = (0..10).map(|_| resumed.train_step().unwrap()).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mtmc");
        let t = trainer(1, 10);
        t.checkpoint().save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(MtmError::Format(_))));
        fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(MtmError::Format(_))));
    }

    #[test]
    fn heteromodal_training_runs() {
        let (ds, model_cfg, cfg) = small_setup(5, 6);
        let h = crate::trajdata::make_heteromodal(&ds.trajectories, 0.2, 0.7, 5).unwrap();
        let train: Vec<Trajectory<f64>> = h
            .actioned
            .iter()
            .chain(&h.state_only)
            .map(|&i| ds.manifest.norm.transform(&h.trajectories[i].to_f64(), crate::trajdata::Direction::Apply).unwrap())
            .collect();
        let eval: Vec<Trajectory<f64>> = h.eval.iter().map(|&i| ds.manifest.norm.transform(&h.trajectories[i].to_f64(), crate::trajdata::Direction::Apply).unwrap()).collect();
        let (_, metrics) = super::train(train, &eval, ds.manifest.norm.clone(), model_cfg, cfg, None).unwrap();
        assert!(metrics.iter().all(|m| m.value.is_finite()));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = TrainConfig {
            warmup_steps: 10,
            steps: 10,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            mask: MaskKind::Fd,
            segment_len: 1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
