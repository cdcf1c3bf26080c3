//! The masked trajectory model.
//!
//! Tokens are `E^m(x) + time(t) + mode(m)`. Only visible tokens enter the
//! encoder; the decoder sees the whole grid, with encoder outputs at visible
//! slots and `mask_token(m) + time(t) + mode(m)` at hidden ones. Per-modality
//! heads read the decoder output at every cell.
//!
//! A batch is packed: all segments' tokens are stacked row-wise and attention
//! is restricted to each segment's span, so variable visible counts cost no
//! padding.

use std::rc::Rc;

use diffcore::{ParamId, ParamStore, SeqSpan, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, MtmError, Result};
use crate::masking::MaskGrid;
use crate::seeded_rng;
use crate::trajdata::{Modality, Segment, NUM_MODALITIES};

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    /// Hidden `Linear + GELU` layers in each prediction head.
    pub head_hidden_layers: usize,
    /// Feed-forward width as a multiple of `embed_dim`.
    pub ffn_mult: usize,
    pub dropout: f64,
    pub segment_len: usize,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            n_enc_layers: 2,
            n_dec_layers: 1,
            n_heads: 4,
            head_hidden_layers: 1,
            ffn_mult: 4,
            dropout: 0.1,
            segment_len: 4,
            state_dim: 4,
            action_dim: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MtmError::Config(m));
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return bad(format!("embed_dim {} must be a positive multiple of n_heads {}", self.embed_dim, self.n_heads));
        }
        if self.embed_dim % 2 != 0 {
            return bad("embed_dim must be even for the sinusoidal time encoding".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        if self.segment_len == 0 || self.state_dim == 0 || self.action_dim == 0 || self.ffn_mult == 0 {
            return bad("segment_len, state_dim, action_dim and ffn_mult must be positive".into());
        }
        Ok(())
    }

    pub fn modality_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Rtg => 1,
            Modality::State => self.state_dim,
            Modality::Action => self.action_dim,
        }
    }
}

/// Interleaved sinusoid: `[sin(t w_0), cos(t w_0), sin(t w_1), ...]` with
/// `w_i = 10000^(-2i/dim)`.
pub fn sinusoid(t: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let w = 10000f64.powf(-((2 * i) as f64) / dim as f64);
        let a = t as f64 * w;
        out[2 * i] = a.sin();
        out[2 * i + 1] = a.cos();
    }
    out
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: Norm,
    qkv: Linear,
    proj: Linear,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct Head {
    ln: Norm,
    hidden: Vec<Linear>,
    out: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    input: Vec<Linear>,
    mode_embed: ParamId,
    mask_tokens: ParamId,
    enc: Vec<Block>,
    enc_ln: Norm,
    dec: Vec<Block>,
    dec_ln: Norm,
    heads: Vec<Head>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    /// Normal(0, std) resampled outside two standard deviations.
    fn trunc_normal(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = self.rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break z * INIT_STD;
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape and data agree")
    }

    fn linear(&mut self, store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: store.add(format!("{name}.w"), self.trunc_normal(&[fan_in, fan_out]), true),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]), false),
        }
    }

    fn norm(store: &mut ParamStore, name: &str, dim: usize) -> Norm {
        Norm {
            g: store.add(format!("{name}.gamma"), Tensor::full(&[1, dim], 1.0), false),
            b: store.add(format!("{name}.beta"), Tensor::zeros(&[1, dim]), false),
        }
    }

    fn block(&mut self, store: &mut ParamStore, name: &str, d: usize, ffn: usize) -> Block {
        Block {
            ln1: Self::norm(store, &format!("{name}.ln1"), d),
            qkv: self.linear(store, &format!("{name}.qkv"), d, 3 * d),
            proj: self.linear(store, &format!("{name}.proj"), d, d),
            ln2: Self::norm(store, &format!("{name}.ln2"), d),
            ff1: self.linear(store, &format!("{name}.ff1"), d, ffn),
            ff2: self.linear(store, &format!("{name}.ff2"), ffn, d),
        }
    }
}

/// Where each row of a packed encoder sequence came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenPos {
    pub segment: usize,
    pub t: usize,
    pub modality: Modality,
}

/// Encoder output for a packed batch.
pub struct Encoded {
    /// `N_visible x embed_dim`, rows in per-segment sequence order.
    pub latents: Var,
    pub positions: Vec<TokenPos>,
    pub spans: Rc<[SeqSpan]>,
}

/// Predictions for every cell, one matrix per modality with rows
/// `segment * L + t`, in normalized units.
pub struct Predictions {
    pub per_modality: [Var; NUM_MODALITIES],
}

/// Concrete per-segment predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub rtg: Vec<f64>,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
}

impl Reconstruction {
    pub fn cell(&self, t: usize, m: Modality, dims: (usize, usize)) -> &[f64] {
        match m {
            Modality::Rtg => &self.rtg[t..t + 1],
            Modality::State => &self.states[t * dims.0..(t + 1) * dims.0],
            Modality::Action => &self.actions[t * dims.1..(t + 1) * dims.1],
        }
    }
}

/// How parameters enter a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grad {
    /// Gradients reach the parameter store.
    Train,
    /// Parameters are constants.
    Frozen,
}

/// Per-forward switches.
pub struct Pass<'r, R: Rng + ?Sized = ChaCha8Rng> {
    pub grad: Grad,
    /// Enables dropout when present.
    pub rng: Option<&'r mut R>,
    /// Pre-recorded leaves standing in for the parameters, indexed by
    /// [`ParamId`]; overrides `grad`.
    pub bound: Option<&'r [Var]>,
}

impl Pass<'static, ChaCha8Rng> {
    pub fn eval() -> Self {
        Self {
            grad: Grad::Frozen,
            rng: None,
            bound: None,
        }
    }

    pub fn grad_no_dropout() -> Self {
        Self {
            grad: Grad::Train,
            rng: None,
            bound: None,
        }
    }
}

impl<'r> Pass<'r, ChaCha8Rng> {
    pub fn with_vars(vars: &'r [Var]) -> Self {
        Self {
            grad: Grad::Frozen,
            rng: None,
            bound: Some(vars),
        }
    }
}

type Binding<'a> = (Grad, Option<&'a [Var]>);

impl<'r, R: Rng + ?Sized> Pass<'r, R> {
    fn binding(&self) -> Binding<'r> {
        (self.grad, self.bound)
    }

    pub fn train(rng: &'r mut R) -> Self {
        Self {
            grad: Grad::Train,
            rng: Some(rng),
            bound: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MtmModel {
    config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

impl MtmModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let ffn = config.ffn_mult * d;
        let mut store = ParamStore::new();
        let mut init = Init {
            rng: seeded_rng(seed, 0x1417),
        };
        let input = Modality::ALL
            .iter()
            .map(|m| init.linear(&mut store, &format!("embed.{m:?}"), config.modality_dim(*m), d))
            .collect();
        let mode_embed = store.add("mode_embed", init.trunc_normal(&[NUM_MODALITIES, d]), false);
        let mask_tokens = store.add("mask_tokens", init.trunc_normal(&[NUM_MODALITIES, d]), false);
        let enc = (0..config.n_enc_layers).map(|i| init.block(&mut store, &format!("enc{i}"), d, ffn)).collect();
        let enc_ln = Init::norm(&mut store, "enc_ln", d);
        let dec = (0..config.n_dec_layers).map(|i| init.block(&mut store, &format!("dec{i}"), d, ffn)).collect();
        let dec_ln = Init::norm(&mut store, "dec_ln", d);
        let heads = Modality::ALL
            .iter()
            .map(|m| {
                let name = format!("head.{m:?}");
                Head {
                    ln: Init::norm(&mut store, &format!("{name}.ln"), d),
                    hidden: (0..config.head_hidden_layers)
                        .map(|i| init.linear(&mut store, &format!("{name}.h{i}"), d, d))
                        .collect(),
                    out: init.linear(&mut store, &format!("{name}.out"), d, config.modality_dim(*m)),
                }
            })
            .collect();
        Ok(Self {
            config,
            params: store,
            layout: Layout {
                input,
                mode_embed,
                mask_tokens,
                enc,
                enc_ln,
                dec,
                dec_ln,
                heads,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Ids of everything that [`Self::encode`] reads: input projections,
    /// mode embeddings, encoder blocks and the encoder's final norm.
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        let l = &self.layout;
        let mut ids = vec![l.mode_embed];
        for lin in &l.input {
            ids.extend([lin.w, lin.b]);
        }
        for b in &l.enc {
            ids.extend(block_ids(b));
        }
        ids.extend([l.enc_ln.g, l.enc_ln.b]);
        ids
    }

    fn bind(&self, tape: &mut Tape, id: ParamId, b: Binding) -> Result<Var> {
        if let Some(vars) = b.1 {
            return vars.get(id.0).copied().ok_or_else(|| invalid("bound variables do not cover the model"));
        }
        Ok(match b.0 {
            Grad::Train => tape.param(&self.params, id)?,
            Grad::Frozen => tape.frozen_param(&self.params, id)?,
        })
    }

    fn linear(&self, tape: &mut Tape, x: Var, l: &Linear, grad: Binding) -> Result<Var> {
        let w = self.bind(tape, l.w, grad)?;
        let b = self.bind(tape, l.b, grad)?;
        Ok(tape.linear(x, w, b)?)
    }

    fn norm(&self, tape: &mut Tape, x: Var, n: &Norm, grad: Binding) -> Result<Var> {
        let g = self.bind(tape, n.g, grad)?;
        let b = self.bind(tape, n.b, grad)?;
        Ok(tape.layer_norm(x, g, b, LN_EPS)?)
    }

    fn block<R: Rng + ?Sized>(&self, tape: &mut Tape, x: Var, blk: &Block, spans: &Rc<[SeqSpan]>, pass: &mut Pass<'_, R>) -> Result<Var> {
        let keep = 1.0 - self.config.dropout;
        let h = self.norm(tape, x, &blk.ln1, pass.binding())?;
        let qkv = self.linear(tape, h, &blk.qkv, pass.binding())?;
        let a = tape.attention(qkv, spans.clone(), self.config.n_heads, keep, pass.rng.as_deref_mut())?;
        let a = self.linear(tape, a, &blk.proj, pass.binding())?;
        let x = tape.add(x, a)?;
        let h = self.norm(tape, x, &blk.ln2, pass.binding())?;
        let h = self.linear(tape, h, &blk.ff1, pass.binding())?;
        let h = tape.gelu(h)?;
        let mut h = self.linear(tape, h, &blk.ff2, pass.binding())?;
        if let Some(rng) = pass.rng.as_deref_mut() {
            h = tape.dropout(h, keep, rng)?;
        }
        Ok(tape.add(x, h)?)
    }

    fn check_inputs(&self, segments: &[Segment], masks: &[MaskGrid]) -> Result<()> {
        if segments.is_empty() || segments.len() != masks.len() {
            return Err(invalid(format!("{} segments with {} masks", segments.len(), masks.len())));
        }
        let c = &self.config;
        for (s, m) in segments.iter().zip(masks) {
            if s.state_dim != c.state_dim || s.action_dim != c.action_dim {
                return Err(MtmError::Dimension(format!(
                    "segment dims ({}, {}) vs model ({}, {})",
                    s.state_dim, s.action_dim, c.state_dim, c.action_dim
                )));
            }
            if m.len() != s.len || s.len != segments[0].len {
                return Err(MtmError::Dimension(format!(
                    "mask length {} / segment length {} / batch length {}",
                    m.len(),
                    s.len,
                    segments[0].len
                )));
            }
        }
        Ok(())
    }

    /// `time(t) + mode(m)` rows for the given cells, as `(constant time part, mode index)`.
    fn position_rows(&self, cells: &[(usize, Modality)]) -> (Tensor, Rc<[usize]>) {
        let d = self.config.embed_dim;
        let mut time = Vec::with_capacity(cells.len() * d);
        for (t, _) in cells {
            time.extend(sinusoid(*t, d));
        }
        let modes: Rc<[usize]> = cells.iter().map(|(_, m)| m.index()).collect();
        (Tensor::matrix(cells.len(), d, time), modes)
    }

    /// Runs the encoder on the visible, present cells of each segment.
    pub fn encode<R: Rng + ?Sized>(&self, tape: &mut Tape, segments: &[Segment], masks: &[MaskGrid], pass: &mut Pass<'_, R>) -> Result<Encoded> {
        self.check_inputs(segments, masks)?;
        let mut positions = Vec::new();
        let mut spans = Vec::with_capacity(segments.len());
        for (b, (seg, mask)) in segments.iter().zip(masks).enumerate() {
            let start = positions.len();
            let eff = mask.clone().with_presence(seg.presence);
            for t in 0..seg.len {
                for m in Modality::ALL {
                    if eff.visible(t, m) {
                        positions.push(TokenPos { segment: b, t, modality: m });
                    }
                }
            }
            if positions.len() == start {
                return Err(invalid(format!("segment {b} has no visible token")));
            }
            spans.push((start, positions.len() - start));
        }
        // project each modality's visible cells, then gather into sequence order
        let mut parts = Vec::new();
        let mut order = vec![0usize; positions.len()];
        let mut offset = 0;
        for m in Modality::ALL {
            let dim = self.config.modality_dim(m);
            let mut rows = Vec::new();
            for (i, p) in positions.iter().enumerate() {
                if p.modality == m {
                    order[i] = offset + rows.len() / dim;
                    rows.extend_from_slice(segments[p.segment].cell(p.t, m));
                }
            }
            let n = rows.len() / dim;
            if n == 0 {
                continue;
            }
            let x = tape.constant(Tensor::matrix(n, dim, rows))?;
            parts.push(self.linear(tape, x, &self.layout.input[m.index()], pass.binding())?);
            offset += n;
        }
        let stacked = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
        let tokens = tape.gather_rows(stacked, order)?;
        let cells: Vec<(usize, Modality)> = positions.iter().map(|p| (p.t, p.modality)).collect();
        let (time, modes) = self.position_rows(&cells);
        let mode_embed = self.bind(tape, self.layout.mode_embed, pass.binding())?;
        let mode_rows = tape.gather_rows(mode_embed, modes)?;
        let time = tape.constant(time)?;
        let pos = tape.add(mode_rows, time)?;
        let mut x = tape.add(tokens, pos)?;
        let spans: Rc<[SeqSpan]> = spans.into();
        for blk in &self.layout.enc {
            x = self.block(tape, x, blk, &spans, pass)?;
        }
        let latents = self.norm(tape, x, &self.layout.enc_ln, pass.binding())?;
        Ok(Encoded { latents, positions, spans })
    }

    /// Encoder on one-timestep sequences built directly from tape values:
    /// the state token at `t = 0`, optionally followed by the action token.
    /// Returns `B x D` latents, or `B x 2D` (state then action) with actions.
    ///
    /// Matches [`Self::encode`] on the same visible cells, but lets gradients
    /// reach the inputs.
    pub fn encode_step<R: Rng + ?Sized>(&self, tape: &mut Tape, states: Var, actions: Option<Var>, pass: &mut Pass<'_, R>) -> Result<Var> {
        let b = tape.value(states).rows();
        let s_tok = self.linear(tape, states, &self.layout.input[Modality::State.index()], pass.binding())?;
        let mut cells = vec![(0, Modality::State); b];
        let tokens = match actions {
            None => s_tok,
            Some(a) => {
                if tape.value(a).rows() != b {
                    return Err(MtmError::Dimension("states and actions differ in batch size".into()));
                }
                let a_tok = self.linear(tape, a, &self.layout.input[Modality::Action.index()], pass.binding())?;
                let both = tape.concat(&[s_tok, a_tok], 0)?;
                let order: Rc<[usize]> = (0..b).flat_map(|i| [i, b + i]).collect();
                cells = (0..b).flat_map(|_| [(0, Modality::State), (0, Modality::Action)]).collect();
                tape.gather_rows(both, order)?
            }
        };
        let per = cells.len() / b;
        let (time, modes) = self.position_rows(&cells);
        let mode_embed = self.bind(tape, self.layout.mode_embed, pass.binding())?;
        let mode_rows = tape.gather_rows(mode_embed, modes)?;
        let time = tape.constant(time)?;
        let pos = tape.add(mode_rows, time)?;
        let mut x = tape.add(tokens, pos)?;
        let spans: Rc<[SeqSpan]> = (0..b).map(|i| (i * per, per)).collect();
        for blk in &self.layout.enc {
            x = self.block(tape, x, blk, &spans, pass)?;
        }
        let x = self.norm(tape, x, &self.layout.enc_ln, pass.binding())?;
        if per == 1 {
            return Ok(x);
        }
        let s_rows: Rc<[usize]> = (0..b).map(|i| 2 * i).collect();
        let a_rows: Rc<[usize]> = (0..b).map(|i| 2 * i + 1).collect();
        let s = tape.gather_rows(x, s_rows)?;
        let a = tape.gather_rows(x, a_rows)?;
        Ok(tape.concat(&[s, a], 1)?)
    }

    /// Full forward pass: encoder, decoder and heads.
    pub fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape, segments: &[Segment], masks: &[MaskGrid], pass: &mut Pass<'_, R>) -> Result<Predictions> {
        let enc = self.encode(tape, segments, masks, pass)?;
        let len = segments[0].len;
        let per_seg = len * NUM_MODALITIES;
        let n_vis = enc.positions.len();
        // slot of every grid cell in concat(encoder rows, hidden rows)
        let mut slot = vec![usize::MAX; segments.len() * per_seg];
        for (i, p) in enc.positions.iter().enumerate() {
            slot[p.segment * per_seg + p.t * NUM_MODALITIES + p.modality.index()] = i;
        }
        let mut hidden = Vec::new();
        for (cell, s) in slot.iter_mut().enumerate() {
            if *s == usize::MAX {
                *s = n_vis + hidden.len();
                let within = cell % per_seg;
                hidden.push((within / NUM_MODALITIES, Modality::ALL[within % NUM_MODALITIES]));
            }
        }
        let full_in = if hidden.is_empty() {
            enc.latents
        } else {
            let (time, modes) = self.position_rows(&hidden);
            let tokens = self.bind(tape, self.layout.mask_tokens, pass.binding())?;
            let tok_rows = tape.gather_rows(tokens, modes.clone())?;
            let mode_embed = self.bind(tape, self.layout.mode_embed, pass.binding())?;
            let mode_rows = tape.gather_rows(mode_embed, modes)?;
            let time = tape.constant(time)?;
            let h = tape.add(tok_rows, mode_rows)?;
            let h = tape.add(h, time)?;
            tape.concat(&[enc.latents, h], 0)?
        };
        let mut x = tape.gather_rows(full_in, slot)?;
        let spans: Rc<[SeqSpan]> = (0..segments.len()).map(|b| (b * per_seg, per_seg)).collect();
        for blk in &self.layout.dec {
            x = self.block(tape, x, blk, &spans, pass)?;
        }
        let x = self.norm(tape, x, &self.layout.dec_ln, pass.binding())?;
        let mut out = Vec::with_capacity(NUM_MODALITIES);
        for m in Modality::ALL {
            let rows: Rc<[usize]> = (0..segments.len() * len)
                .map(|r| (r / len) * per_seg + (r % len) * NUM_MODALITIES + m.index())
                .collect();
            let h = tape.gather_rows(x, rows)?;
            let head = &self.layout.heads[m.index()];
            let mut h = self.norm(tape, h, &head.ln, pass.binding())?;
            for lin in &head.hidden {
                h = self.linear(tape, h, lin, pass.binding())?;
                h = tape.gelu(h)?;
            }
            out.push(self.linear(tape, h, &head.out, pass.binding())?);
        }
        Ok(Predictions {
            per_modality: [out[0], out[1], out[2]],
        })
    }

    /// Eval-mode predictions for every cell of every segment.
    pub fn reconstruct(&self, segments: &[Segment], masks: &[MaskGrid]) -> Result<Vec<Reconstruction>> {
        let mut tape = Tape::new();
        let preds = self.forward(&mut tape, segments, masks, &mut Pass::eval())?;
        let len = segments[0].len;
        let vals: Vec<&Tensor> = preds.per_modality.iter().map(|v| tape.value(*v)).collect();
        Ok((0..segments.len())
            .map(|b| {
                let take = |t: &Tensor| {
                    let c = t.cols();
                    t.data()[b * len * c..(b + 1) * len * c].to_vec()
                };
                Reconstruction {
                    rtg: take(vals[0]),
                    states: take(vals[1]),
                    actions: take(vals[2]),
                }
            })
            .collect())
    }
}

fn block_ids(b: &Block) -> Vec<ParamId> {
    vec![
        b.ln1.g, b.ln1.b, b.qkv.w, b.qkv.b, b.proj.w, b.proj.b, b.ln2.g, b.ln2.b, b.ff1.w, b.ff1.b, b.ff2.w, b.ff2.b,
    ]
}
