//! Two-layer LSTM language model with optional tied embeddings.
//!
//! The forward pass runs on a [`Tape`]. Noise enters through [`BatchNoise`]:
//! per-position input rows (substituted words, element-wise mixtures,
//! dropout scales), substituted target rows for Kneser-Ney, per-lane masks
//! on the output matrix and per-sequence recurrent dropout masks.

use rand::Rng as _;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::WordId;
use crate::noising::ReplacementPlan;
use crate::numeric::checkpoint::{CheckpointError, TensorArchive};
use crate::numeric::{LogitSub, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    /// Output matrix shares storage with the input embedding (needs d = h).
    pub tied: bool,
    /// Weights start uniform in `[-init_range, init_range]`.
    pub init_range: f64,
    pub forget_bias: f64,
}

impl LmConfig {
    pub fn new(vocab_size: usize, embed_dim: usize, hidden_dim: usize, tied: bool) -> Self {
        LmConfig { vocab_size, embed_dim, hidden_dim, layers: 2, tied, init_range: 0.05, forget_bias: 1.0 }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        let bad = |m: &str| Err(LmError::InvalidConfig(m.to_string()));
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return bad("embed_dim and hidden_dim must be positive");
        }
        if self.layers == 0 {
            return bad("at least one LSTM layer is required");
        }
        if self.tied && self.embed_dim != self.hidden_dim {
            return bad("tied embeddings need embed_dim == hidden_dim");
        }
        if !(self.init_range >= 0.0) {
            return bad("init_range must be non-negative");
        }
        Ok(())
    }
}

/// Closed-form number of trainable scalars.
pub fn param_count(cfg: &LmConfig) -> Result<usize, LmError> {
    cfg.validate()?;
    let (v, d, h) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim);
    let lstm: usize = (0..cfg.layers)
        .map(|l| {
            let input = if l == 0 { d } else { h };
            4 * (h * (input + h) + h)
        })
        .sum();
    let output = if cfg.tied { 0 } else { v * h };
    Ok(v * d + lstm + output + v)
}

/// One LSTM layer. Gate order along the `4h` axis: input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    /// `4h × input_dim`
    pub w_input: Tensor,
    /// `4h × h`
    pub w_hidden: Tensor,
    /// `1 × 4h`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: LmConfig,
    /// `V × d`
    pub embedding: Tensor,
    /// `V × h`, absent when tied.
    pub output: Option<Tensor>,
    /// `1 × V`
    pub output_bias: Tensor,
    pub layers: Vec<LstmLayer>,
}

impl ModelParams {
    /// All-zero parameters (the model predicts the uniform distribution).
    pub fn zeros(config: LmConfig) -> Result<Self, LmError> {
        config.validate()?;
        let (v, d, h) = (config.vocab_size, config.embed_dim, config.hidden_dim);
        let layers = (0..config.layers)
            .map(|l| {
                let input = if l == 0 { d } else { h };
                LstmLayer {
                    w_input: Tensor::zeros(4 * h, input),
                    w_hidden: Tensor::zeros(4 * h, h),
                    bias: Tensor::zeros(1, 4 * h),
                }
            })
            .collect();
        Ok(ModelParams {
            config,
            embedding: Tensor::zeros(v, d),
            output: (!config.tied).then(|| Tensor::zeros(v, h)),
            output_bias: Tensor::zeros(1, v),
            layers,
        })
    }

    /// Uniform weights, zero biases, forget-gate bias set to `forget_bias`.
    pub fn init<R: RngCore + ?Sized>(config: LmConfig, rng: &mut R) -> Result<Self, LmError> {
        let mut p = ModelParams::zeros(config)?;
        let r = config.init_range as Scalar;
        let mut fill = |t: &mut Tensor| {
            if r > 0.0 {
                for x in t.data_mut() {
                    *x = rng.random_range(-r..=r);
                }
            }
        };
        fill(&mut p.embedding);
        if let Some(o) = p.output.as_mut() {
            fill(o);
        }
        let h = config.hidden_dim;
        for layer in &mut p.layers {
            fill(&mut layer.w_input);
            fill(&mut layer.w_hidden);
            for x in &mut layer.bias.data_mut()[h..2 * h] {
                *x = config.forget_bias as Scalar;
            }
        }
        Ok(p)
    }

    /// The matrix producing logits.
    pub fn output_table(&self) -> &Tensor {
        self.output.as_ref().unwrap_or(&self.embedding)
    }

    /// Named tensors in canonical order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        if let Some(o) = &self.output {
            out.push(("output".to_string(), o));
        }
        out.push(("output_bias".to_string(), &self.output_bias));
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("lstm.{l}.w_input"), &layer.w_input));
            out.push((format!("lstm.{l}.w_hidden"), &layer.w_hidden));
            out.push((format!("lstm.{l}.bias"), &layer.bias));
        }
        out
    }

    /// Mutable tensors in the order of [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        if let Some(o) = self.output.as_mut() {
            out.push(o);
        }
        out.push(&mut self.output_bias);
        for layer in &mut self.layers {
            out.push(&mut layer.w_input);
            out.push(&mut layer.w_hidden);
            out.push(&mut layer.bias);
        }
        out
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn to_archive(&self, metadata: serde_json::Value) -> TensorArchive {
        TensorArchive {
            metadata,
            tensors: self.tensors().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        }
    }

    pub fn from_archive(config: LmConfig, archive: &TensorArchive) -> Result<Self, LmError> {
        let mut p = ModelParams::zeros(config)?;
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(p.tensors_mut()) {
            let t = archive.get(name)?;
            if t.shape() != slot.shape() {
                return Err(LmError::Tensor(TensorError::ShapeMismatch {
                    op: "load",
                    lhs: slot.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                }));
            }
            *slot = t.clone();
        }
        Ok(p)
    }
}

/// Hidden and cell state per layer, each `batch × h`.
#[derive(Debug, Clone, PartialEq)]
pub struct LmState {
    pub h: Vec<Tensor>,
    pub c: Vec<Tensor>,
}

impl LmState {
    pub fn zeros(config: &LmConfig, batch: usize) -> Self {
        let z = || (0..config.layers).map(|_| Tensor::zeros(batch, config.hidden_dim)).collect();
        LmState { h: z(), c: z() }
    }
}

/// `lanes × steps` input ids and their next-word targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<WordId>>,
    pub targets: Vec<Vec<WordId>>,
}

impl Batch {
    pub fn lanes(&self) -> usize {
        self.inputs.len()
    }

    pub fn steps(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), LmError> {
        let t = self.steps();
        if self.lanes() == 0 || t == 0 {
            return Err(LmError::InvalidBatch("empty batch".into()));
        }
        if self.targets.len() != self.lanes() {
            return Err(LmError::InvalidBatch("targets and inputs differ in lanes".into()));
        }
        for (i, o) in self.inputs.iter().zip(&self.targets) {
            if i.len() != t || o.len() != t {
                return Err(LmError::InvalidBatch("ragged batch".into()));
            }
            if i.iter().chain(o).any(|&w| w as usize >= vocab_size) {
                return Err(LmError::InvalidBatch("token id out of vocabulary".into()));
            }
        }
        Ok(())
    }
}

/// How one input embedding row is assembled:
/// `row[j] = scale[j] · table[source(j)][j] + offset[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowSource {
    /// One word for the whole row, or one per dimension.
    pub sources: Vec<WordId>,
    pub scale: Option<Vec<Scalar>>,
    pub offset: Option<Vec<Scalar>>,
}

impl RowSource {
    pub fn word(w: WordId) -> Self {
        RowSource { sources: vec![w], scale: None, offset: None }
    }

    fn source(&self, j: usize) -> WordId {
        if self.sources.len() == 1 {
            self.sources[0]
        } else {
            self.sources[j]
        }
    }

    /// The row this source produces from `table`.
    pub fn materialize(&self, table: &Tensor) -> Vec<Scalar> {
        (0..table.cols())
            .map(|j| {
                let x = table.get(self.source(j) as usize, j);
                let x = self.scale.as_ref().map_or(x, |s| s[j] * x);
                self.offset.as_ref().map_or(x, |o| x + o[j])
            })
            .collect()
    }
}

/// Noise for one lane of a batch window.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LaneNoise {
    /// One entry per position, or empty for plain lookups.
    pub inputs: Vec<RowSource>,
    /// `(position, sources)`: the target row used at `position` is
    /// replaced by the given row (or per-dimension mixture of rows).
    pub output_subs: Vec<(usize, Vec<WordId>)>,
    /// Element-wise multiplier on the output matrix (`V × h`).
    pub output_keep: Option<Tensor>,
}

impl LaneNoise {
    /// Word-level noise from a replacement plan, no dropout.
    pub fn from_plan(plan: &ReplacementPlan, seq: &[WordId]) -> Self {
        LaneNoise {
            inputs: seq
                .iter()
                .enumerate()
                .map(|(t, &w)| RowSource::word(plan.input_at(t, w).unwrap_or(w)))
                .collect(),
            output_subs: plan.output_subs.iter().map(|(&t, &r)| (t, vec![r])).collect(),
            output_keep: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchNoise {
    pub lanes: Vec<LaneNoise>,
    /// Per layer, a `batch × h` multiplier on the recurrent input `h_{t−1}`.
    pub recurrent_keep: Option<Vec<Tensor>>,
}

/// Model parameters registered as tape leaves.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub input_table: Var,
    pub output_table: Var,
    pub output_bias: Var,
    pub layers: Vec<[Var; 3]>,
    /// Trainable leaves in [`ModelParams::tensors`] order.
    pub leaves: Vec<Var>,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, params: &ModelParams) -> Self {
        Self::register_with(tape, params, None, None)
    }

    /// Register with replacement input / output tables (e.g. mean
    /// embeddings for evaluation). Replacements are not part of `leaves`.
    pub fn register_with(
        tape: &mut Tape,
        params: &ModelParams,
        input_table: Option<&Tensor>,
        output_table: Option<&Tensor>,
    ) -> Self {
        let embedding = tape.leaf(params.embedding.clone());
        let mut leaves = vec![embedding];
        let output = params.output.as_ref().map(|o| {
            let v = tape.leaf(o.clone());
            leaves.push(v);
            v
        });
        let output_bias = tape.leaf(params.output_bias.clone());
        leaves.push(output_bias);
        let layers: Vec<[Var; 3]> = params
            .layers
            .iter()
            .map(|layer| {
                let vs = [
                    tape.leaf(layer.w_input.clone()),
                    tape.leaf(layer.w_hidden.clone()),
                    tape.leaf(layer.bias.clone()),
                ];
                leaves.extend(vs);
                vs
            })
            .collect();
        let input_table = input_table.map_or(embedding, |t| tape.leaf(t.clone()));
        let output_table = match output_table {
            Some(t) => tape.leaf(t.clone()),
            None => output.unwrap_or(embedding),
        };
        ParamVars { input_table, output_table, output_bias, layers, leaves }
    }
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// Per lane, `steps × V` logits including the output bias.
    pub logits: Vec<Var>,
    pub state: LmState,
}

/// Run the LSTM over one window.
pub fn forward(
    tape: &mut Tape,
    vars: &ParamVars,
    config: &LmConfig,
    batch: &Batch,
    state: &LmState,
    noise: Option<&BatchNoise>,
) -> Result<ForwardOutput, LmError> {
    batch.validate(config.vocab_size)?;
    let (b, steps) = (batch.lanes(), batch.steps());
    let (d, h) = (config.embed_dim, config.hidden_dim);
    if state.h.len() != config.layers || state.h.iter().chain(&state.c).any(|t| t.shape() != [b, h]) {
        return Err(LmError::InvalidBatch("state does not match batch size".into()));
    }
    if let Some(n) = noise {
        if n.lanes.len() != b {
            return Err(LmError::InvalidBatch("one LaneNoise per lane required".into()));
        }
        if n.lanes.iter().any(|l| !l.inputs.is_empty() && l.inputs.len() != steps) {
            return Err(LmError::InvalidBatch("input noise must cover every position".into()));
        }
    }
    let lane = |i: usize| noise.map(|n| &n.lanes[i]);

    let mut hs: Vec<Var> = state.h.iter().map(|t| tape.leaf(t.clone())).collect();
    let mut cs: Vec<Var> = state.c.iter().map(|t| tape.leaf(t.clone())).collect();
    let mut top: Vec<Var> = Vec::with_capacity(steps);

    for t in 0..steps {
        let needs_elements = (0..b).any(|i| lane(i).is_some_and(|l| !l.inputs.is_empty()));
        let x = if needs_elements {
            let mut src = Vec::with_capacity(b * d);
            let mut scale: Option<Vec<Scalar>> = None;
            let mut offset: Option<Vec<Scalar>> = None;
            for i in 0..b {
                let base = i * d;
                match lane(i).and_then(|l| l.inputs.get(t)) {
                    Some(rs) => {
                        if rs.sources.len() != 1 && rs.sources.len() != d {
                            return Err(LmError::InvalidBatch("row source width".into()));
                        }
                        src.extend((0..d).map(|j| rs.source(j)));
                        if let Some(s) = &rs.scale {
                            scale.get_or_insert_with(|| vec![1.0; b * d])[base..base + d].copy_from_slice(s);
                        }
                        if let Some(o) = &rs.offset {
                            offset.get_or_insert_with(|| vec![0.0; b * d])[base..base + d].copy_from_slice(o);
                        }
                    }
                    None => src.extend(std::iter::repeat_n(batch.inputs[i][t], d)),
                }
            }
            tape.gather_elements(vars.input_table, b, src, scale, offset.as_deref())?
        } else {
            let ids: Vec<usize> = (0..b).map(|i| batch.inputs[i][t] as usize).collect();
            tape.gather_rows(vars.input_table, &ids)?
        };

        let mut input = x;
        for (l, [w_in, w_hid, bias]) in vars.layers.iter().enumerate() {
            let h_prev = match noise.and_then(|n| n.recurrent_keep.as_ref()) {
                Some(keep) => tape.mul_const(hs[l], keep[l].clone())?,
                None => hs[l],
            };
            let zx = tape.matmul_bt(input, *w_in)?;
            let zh = tape.matmul_bt(h_prev, *w_hid)?;
            let z = tape.add(zx, zh)?;
            let z = tape.add_row(z, *bias)?;
            let gi = tape.slice_cols(z, 0, h)?;
            let gf = tape.slice_cols(z, h, h)?;
            let gg = tape.slice_cols(z, 2 * h, h)?;
            let go = tape.slice_cols(z, 3 * h, h)?;
            let i_gate = tape.sigmoid(gi);
            let f_gate = tape.sigmoid(gf);
            let g_cell = tape.tanh(gg);
            let o_gate = tape.sigmoid(go);
            let kept = tape.mul(f_gate, cs[l])?;
            let written = tape.mul(i_gate, g_cell)?;
            let c = tape.add(kept, written)?;
            let tc = tape.tanh(c);
            let hn = tape.mul(o_gate, tc)?;
            cs[l] = c;
            hs[l] = hn;
            input = hn;
        }
        top.push(input);
    }

    let mut logits = Vec::with_capacity(b);
    for i in 0..b {
        let parts: Vec<(Var, usize)> = top.iter().map(|&v| (v, i)).collect();
        let hidden = tape.stack_rows(&parts)?;
        let table = match lane(i).and_then(|l| l.output_keep.as_ref()) {
            Some(keep) => tape.mul_const(vars.output_table, keep.clone())?,
            None => vars.output_table,
        };
        let mut raw = tape.matmul_bt(hidden, table)?;
        if let Some(l) = lane(i) {
            if !l.output_subs.is_empty() {
                let subs = l
                    .output_subs
                    .iter()
                    .map(|(t, sources)| {
                        if *t >= steps {
                            return Err(LmError::InvalidBatch("output substitution past window".into()));
                        }
                        Ok(LogitSub { row: *t, col: batch.targets[i][*t] as usize, sources: sources.clone() })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                raw = tape.substitute_logits(raw, hidden, table, subs)?;
            }
        }
        logits.push(tape.add_row(raw, vars.output_bias)?);
    }

    let new_state = LmState {
        h: hs.iter().map(|&v| tape.value(v).clone()).collect(),
        c: cs.iter().map(|&v| tape.value(v).clone()).collect(),
    };
    Ok(ForwardOutput { logits, state: new_state })
}

/// Mean token cross-entropy over all lanes and steps.
pub fn cross_entropy(tape: &mut Tape, out: &ForwardOutput, batch: &Batch) -> Result<Var, LmError> {
    let per_lane = out
        .logits
        .iter()
        .zip(&batch.targets)
        .map(|(&l, t)| {
            let targets: Vec<usize> = t.iter().map(|&w| w as usize).collect();
            tape.softmax_cross_entropy(l, &targets)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let total = tape.sum(&per_lane)?;
    Ok(tape.scale(total, 1.0 / per_lane.len() as Scalar))
}

/// Forward plus mean cross-entropy on a fresh tape.
pub fn loss_for_batch(
    params: &ModelParams,
    batch: &Batch,
    state: &LmState,
    noise: Option<&BatchNoise>,
) -> Result<(Scalar, LmState), LmError> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let out = forward(&mut tape, &vars, &params.config, batch, state, noise)?;
    let loss = cross_entropy(&mut tape, &out, batch)?;
    Ok((tape.value(loss).item(), out.state))
}

/// Loss value, parameter gradients (in [`ModelParams::tensors`] order) and
/// the carried state. `penalty` may add extra scalar terms to the loss.
pub fn loss_and_grads<F>(
    params: &ModelParams,
    batch: &Batch,
    state: &LmState,
    noise: Option<&BatchNoise>,
    penalty: F,
) -> Result<(Scalar, Vec<Tensor>, LmState), LmError>
where
    F: FnOnce(&mut Tape, &ParamVars) -> Result<Option<Var>, LmError>,
{
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let out = forward(&mut tape, &vars, &params.config, batch, state, noise)?;
    let mut loss = cross_entropy(&mut tape, &out, batch)?;
    if let Some(extra) = penalty(&mut tape, &vars)? {
        loss = tape.sum(&[loss, extra])?;
    }
    let mut grads = tape.backward(loss)?;
    let g = vars.leaves.iter().map(|&v| grads.take(&tape, v)).collect();
    Ok((tape.value(loss).item(), g, out.state))
}

/// Log-probability of each target, lane-major (`lane * steps + t`).
pub fn target_log_probs(tape: &Tape, out: &ForwardOutput, batch: &Batch) -> Vec<f64> {
    let mut lp = Vec::with_capacity(batch.lanes() * batch.steps());
    for (&l, targets) in out.logits.iter().zip(&batch.targets) {
        let logits = tape.value(l);
        for (r, &t) in targets.iter().enumerate() {
            let row = logits.row(r);
            let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
            let z: Scalar = row.iter().map(|&x| (x - max).exp()).sum();
            lp.push((row[t as usize] - max - z.ln()) as f64);
        }
    }
    lp
}

/// Softmax of a logits row.
pub fn softmax(row: &[Scalar]) -> Vec<Scalar> {
    let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
    let e: Vec<Scalar> = row.iter().map(|&x| (x - max).exp()).collect();
    let z: Scalar = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// A recurrent dropout mask per layer: `batch × h`, entries `0` or `1/(1−p)`.
pub fn recurrent_masks<R: RngCore + ?Sized>(config: &LmConfig, batch: usize, p: f64, rng: &mut R) -> Vec<Tensor> {
    let keep = (1.0 / (1.0 - p)) as Scalar;
    (0..config.layers)
        .map(|_| {
            let data = (0..batch * config.hidden_dim)
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                .collect();
            Tensor::matrix(batch, config.hidden_dim, data).expect("mask shape")
        })
        .collect()
}
