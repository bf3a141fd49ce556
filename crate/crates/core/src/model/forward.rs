use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{LayerVars, ModelParams, ModelVars};
use super::segments::SegmentBatch;
use crate::attention::{astro_attention_var, positional_var};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::retention::RetentionSchedule;
use crate::rng;

/// Memory tokens handed from one segment to the next.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryState {
    pub tokens: Matrix,
    /// Segment (1-based) that will consume these tokens.
    pub segment_index: usize,
}

/// Inverted dropout with masks derived from a seed, so a recomputed segment
/// sees exactly the masks of its first evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    pub seed: Option<u64>,
}

impl Dropout {
    pub fn off() -> Self {
        Self::default()
    }

    pub fn new(rate: f64, seed: u64) -> Self {
        Self { rate, seed: Some(seed) }
    }

    fn active(&self) -> bool {
        self.rate > 0.0 && self.seed.is_some()
    }

    fn apply(&self, tape: &mut Tape, a: Var, segment: usize, layer: usize, site: u64) -> Result<Var> {
        let Some(seed) = self.seed.filter(|_| self.active()) else {
            return Ok(a);
        };
        let (rows, cols) = tape.shape(a);
        let mut state = rng::fold(seed, &[segment as u64, layer as u64, site]);
        let keep_scale = 1.0 / (1.0 - self.rate);
        let mask = Matrix::from_fn(rows, cols, |_, _| {
            state = rng::fold(state, &[0]);
            let u = (state >> 11) as f64 / (1u64 << 53) as f64;
            if u < self.rate {
                0.0
            } else {
                keep_scale
            }
        });
        let mask = tape.constant(mask);
        tape.hadamard(a, mask)
    }
}

pub struct SegmentOutput {
    /// Sequence rows, `N_seg × d`.
    pub output: Var,
    /// Memory rows before retention scaling, `M × d`.
    pub memory_raw: Var,
}

fn add_bias(tape: &mut Tape, a: Var, bias: Var) -> Result<Var> {
    let rows = tape.shape(a).0;
    let b = tape.broadcast_row(bias, rows)?;
    tape.add(a, b)
}

fn encoder_layer(
    tape: &mut Tape,
    layer: &mut LayerVars,
    index: usize,
    x: Var,
    config: &ModelConfig,
    mask: &[bool],
    dropout: &Dropout,
    segment: usize,
) -> Result<Var> {
    let attn_cfg = config.attention();
    let positional = match layer.positional {
        Some(r) => r,
        None => {
            let r = positional_var(tape, &layer.attn, config.block_len(), &attn_cfg)?;
            layer.positional = Some(r);
            r
        }
    };
    let all_real = mask.iter().all(|m| *m);
    let attn = astro_attention_var(
        tape,
        x,
        &layer.attn,
        positional,
        &attn_cfg,
        config.flags(),
        (!all_real).then_some(mask),
    )?;
    let attn = dropout.apply(tape, attn, segment, index, 0)?;
    let h = tape.layer_norm(attn, layer.ln1_gain, layer.ln1_bias)?;
    let hidden = tape.matmul(h, layer.w1)?;
    let hidden = add_bias(tape, hidden, layer.b1)?;
    let hidden = tape.relu(hidden);
    let hidden = dropout.apply(tape, hidden, segment, index, 1)?;
    let ff = tape.matmul(hidden, layer.w2)?;
    let ff = add_bias(tape, ff, layer.b2)?;
    let sum = tape.add(h, ff)?;
    tape.layer_norm(sum, layer.ln2_gain, layer.ln2_bias)
}

/// Run one segment: embed `ids`, append the memory rows, apply every
/// encoder layer, and split the result back into sequence and memory rows.
pub fn segment_forward(
    tape: &mut Tape,
    vars: &mut ModelVars,
    config: &ModelConfig,
    ids: &[usize],
    mask: &[bool],
    memory: Var,
    dropout: &Dropout,
    segment: usize,
) -> Result<SegmentOutput> {
    if ids.len() != config.seg_len || mask.len() != config.seg_len {
        return Err(Error::InvalidArgument(format!(
            "segment has {} ids and {} mask entries, expected {}",
            ids.len(),
            mask.len(),
            config.seg_len
        )));
    }
    let mem_shape = tape.shape(memory);
    if mem_shape != (config.n_mem_tokens, config.d) {
        return Err(Error::Shape { op: "segment memory", left: mem_shape, right: (config.n_mem_tokens, config.d) });
    }
    let embedded = tape.gather_rows(vars.embed, ids)?;
    let mut x = if config.n_mem_tokens == 0 { embedded } else { tape.concat_rows(&[embedded, memory])? };
    let mut full_mask = mask.to_vec();
    full_mask.resize(config.block_len(), true);
    for (l, layer) in vars.layers.iter_mut().enumerate() {
        x = encoder_layer(tape, layer, l, x, config, &full_mask, dropout, segment)?;
    }
    let output = tape.slice_rows(x, 0, config.seg_len)?;
    let memory_raw = tape.slice_rows(x, config.seg_len, config.n_mem_tokens)?;
    Ok(SegmentOutput { output, memory_raw })
}

/// Scale the raw memory of segment `t` (1-based) by its retention factor.
pub fn apply_retention(memory_raw: &Matrix, schedule: &RetentionSchedule, t: usize) -> Result<MemoryState> {
    let factor = schedule.factor(t)?;
    Ok(MemoryState { tokens: memory_raw.scale(factor), segment_index: t + 1 })
}

pub fn apply_retention_var(tape: &mut Tape, memory_raw: Var, schedule: &RetentionSchedule, t: usize) -> Result<Var> {
    let factor = schedule.factor(t)?;
    Ok(tape.scalar_mul(memory_raw, factor))
}

/// Logits `1 × C` from the mean of the real sequence rows and the mean of
/// the memory rows.
pub fn classify(tape: &mut Tape, vars: &ModelVars, output: Var, mask: &[bool], memory_raw: Var) -> Result<Var> {
    let (n, d) = tape.shape(output);
    if mask.len() != n {
        return Err(Error::InvalidArgument(format!("mask has {} entries for {n} rows", mask.len())));
    }
    let count = mask.iter().filter(|m| **m).count();
    let weights = Matrix::from_fn(1, n, |_, c| if mask[c] && count > 0 { 1.0 / count as f64 } else { 0.0 });
    let weights = tape.constant(weights);
    let seq_pool = tape.matmul(weights, output)?;
    let n_mem = tape.shape(memory_raw).0;
    let mem_pool = if n_mem == 0 {
        tape.constant(Matrix::zeros(1, d))
    } else {
        let w = tape.constant(Matrix::filled(1, n_mem, 1.0 / n_mem as f64));
        tape.matmul(w, memory_raw)?
    };
    let pooled = tape.concat_cols(&[seq_pool, mem_pool])?;
    let logits = tape.matmul(pooled, vars.head_w)?;
    tape.add(logits, vars.head_b)
}

/// Result of running a whole sequence without gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceOutput {
    /// Logits after the last segment.
    pub logits: Matrix,
    /// `m_1 … m_{T+1}`.
    pub memories: Vec<Matrix>,
    pub outputs: Vec<Matrix>,
}

/// Forward pass over every segment with the learned initial memory.
pub fn forward_sequence(params: &ModelParams, batch: &SegmentBatch, schedule: &RetentionSchedule) -> Result<SequenceOutput> {
    forward_sequence_from(params, batch, schedule, &params.mem_init, &Dropout::off())
}

pub fn forward_sequence_from(
    params: &ModelParams,
    batch: &SegmentBatch,
    schedule: &RetentionSchedule,
    mem_1: &Matrix,
    dropout: &Dropout,
) -> Result<SequenceOutput> {
    let config = &params.config;
    check_schedule(config, batch, schedule)?;
    let mut memories = vec![mem_1.clone()];
    let mut outputs = Vec::with_capacity(batch.n_segments());
    let mut logits = None;
    for t in 1..=batch.n_segments() {
        let mut tape = Tape::new();
        let mut vars = ModelVars::register(&mut tape, params, false);
        let mem = tape.input(memories[t - 1].clone(), false);
        let (ids, mask) = (&batch.segments[t - 1], &batch.masks[t - 1]);
        let out = segment_forward(&mut tape, &mut vars, config, ids, mask, mem, dropout, t)?;
        if t == batch.n_segments() {
            let l = classify(&mut tape, &vars, out.output, mask, out.memory_raw)?;
            logits = Some(tape.value(l).clone());
        }
        outputs.push(tape.value(out.output).clone());
        memories.push(apply_retention(tape.value(out.memory_raw), schedule, t)?.tokens);
    }
    Ok(SequenceOutput { logits: logits.expect("at least one segment"), memories, outputs })
}

pub(crate) fn check_schedule(config: &ModelConfig, batch: &SegmentBatch, schedule: &RetentionSchedule) -> Result<()> {
    if schedule.n_segments != config.n_segments || batch.n_segments() != config.n_segments {
        return Err(Error::InvalidArgument(format!(
            "schedule covers {} segments, batch has {}, model expects {}",
            schedule.n_segments,
            batch.n_segments(),
            config.n_segments
        )));
    }
    Ok(())
}

/// Index of the largest logit.
pub fn argmax(logits: &Matrix) -> usize {
    logits
        .row(0)
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// `-log softmax(logits)[label]` for a single row of logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    log_z - logits[label]
}
