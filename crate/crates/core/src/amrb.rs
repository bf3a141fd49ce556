//! Memory-replay backpropagation over segment recurrences.
//!
//! The forward pass keeps only the memory tokens entering each segment. The
//! backward pass walks segments in reverse, rebuilds one segment's graph
//! from its stored memory, backpropagates the segment's own loss and then
//! the gradient arriving from later segments through the retained graph.
//! [`bptt_rollout`] keeps one graph for the whole sequence and serves as the
//! reference.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{
    apply_retention_var, check_schedule, classify, segment_forward, Dropout, ModelParams, ModelVars, ParamGrads,
    SegmentBatch,
};
use crate::retention::RetentionSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RolloutKind {
    Amrb,
    Bptt,
}

/// Peak counts of activation floats held on tapes, plus stored memory
/// states. Parameters are not counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub forward_peak: usize,
    pub backward_peak: usize,
    pub replay_buffer_floats: usize,
    pub replay_buffer_bytes: usize,
}

/// Memory states `m_1 … m_T`, stored as plain values.
#[derive(Clone, Debug, Default)]
pub struct ReplayBuffer {
    states: Vec<Matrix>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn with_capacity(capacity: usize) -> Self {
        Self { states: Vec::with_capacity(capacity), capacity }
    }

    pub fn push(&mut self, state: Matrix) -> Result<()> {
        if self.states.len() == self.capacity {
            return Err(Error::InvalidArgument(format!("replay buffer already holds {} states", self.capacity)));
        }
        self.states.push(state);
        Ok(())
    }

    /// State entering segment `t` (1-based).
    pub fn get(&self, t: usize) -> Option<&Matrix> {
        t.checked_sub(1).and_then(|i| self.states.get(i))
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn floats(&self) -> usize {
        self.states.iter().map(Matrix::len).sum()
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Gradients of the summed segment losses, aligned with
    /// [`ModelParams::named`]. The `mem_init` entry holds `∇m_1`.
    pub grads: ParamGrads,
    pub mem_grad: Matrix,
    /// `L_t` per segment, zero where the segment has no target.
    pub losses: Vec<f64>,
    pub final_logits: Matrix,
    pub memory: MemoryReport,
}

impl GradReport {
    pub fn total_loss(&self) -> f64 {
        self.losses.iter().sum()
    }
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub report: GradReport,
    /// `m_{T+1}`, detached.
    pub final_memory: Matrix,
    /// Largest difference between a memory state recomputed during the
    /// backward pass and the value stored in the forward pass.
    pub replay_deviation: f64,
}

fn local_loss(
    tape: &mut Tape,
    vars: &ModelVars,
    batch: &SegmentBatch,
    t: usize,
    output: Var,
    memory_raw: Var,
) -> Result<(Var, Option<Var>)> {
    let mask = &batch.masks[t - 1];
    let logits = classify(tape, vars, output, mask, memory_raw)?;
    let loss = match batch.label_for(t) {
        Some(label) => Some(tape.cross_entropy(logits, &[label])?),
        None => None,
    };
    Ok((logits, loss))
}

pub fn amrb_rollout(
    params: &ModelParams,
    batch: &SegmentBatch,
    mem_1: &Matrix,
    schedule: &RetentionSchedule,
    dropout: &Dropout,
) -> Result<Rollout> {
    let config = &params.config;
    check_schedule(config, batch, schedule)?;
    let n_segments = batch.n_segments();

    // Forward: no graph survives a segment; only the memory states are kept.
    let mut buffer = ReplayBuffer::with_capacity(n_segments);
    buffer.push(mem_1.clone())?;
    let mut forward_peak = 0;
    let mut memory = mem_1.clone();
    for t in 1..=n_segments {
        let mut tape = Tape::new();
        let mut vars = ModelVars::register(&mut tape, params, false);
        let mem = tape.input(memory, false);
        let out = segment_forward(&mut tape, &mut vars, config, &batch.segments[t - 1], &batch.masks[t - 1], mem, dropout, t)?;
        let next = apply_retention_var(&mut tape, out.memory_raw, schedule, t)?;
        forward_peak = forward_peak.max(tape.peak_floats() + buffer.floats());
        memory = tape.value(next).clone();
        if t < n_segments {
            buffer.push(memory.clone())?;
        }
    }
    let final_memory = memory;

    // Backward: rebuild each segment from its stored input memory.
    let mut grads = params.zero_grads();
    let mut grad_next = Matrix::zeros(config.n_mem_tokens, config.d);
    let mut losses = vec![0.0; n_segments];
    let mut final_logits = None;
    let mut backward_peak = 0;
    let mut replay_deviation = 0.0_f64;
    for t in (1..=n_segments).rev() {
        let stored = buffer.get(t).expect("buffer holds every segment input").clone();
        let mut tape = Tape::new();
        let mut vars = ModelVars::register(&mut tape, params, true);
        let mem = tape.input(stored, true);
        let out = segment_forward(&mut tape, &mut vars, config, &batch.segments[t - 1], &batch.masks[t - 1], mem, dropout, t)?;
        let next = apply_retention_var(&mut tape, out.memory_raw, schedule, t)?;
        let expected = if t < n_segments { buffer.get(t + 1).expect("stored") } else { &final_memory };
        replay_deviation = replay_deviation.max(tape.value(next).max_abs_diff(expected));

        let (logits, loss) = local_loss(&mut tape, &vars, batch, t, out.output, out.memory_raw)?;
        if t == n_segments {
            final_logits = Some(tape.value(logits).clone());
        }
        if let Some(loss) = loss {
            losses[t - 1] = tape.value(loss).get(0, 0);
            tape.backward(loss, &Matrix::ones(1, 1), true)?;
        }
        tape.backward(next, &grad_next, false)?;
        backward_peak = backward_peak.max(tape.peak_floats() + buffer.floats());
        vars.accumulate_grads(&tape, &mut grads)?;
        grad_next = tape.grad_or_zeros(mem);
    }
    grads.grads[ModelParams::mem_init_index()].add_assign(&grad_next)?;

    let replay_buffer_floats = buffer.floats();
    let memory = MemoryReport {
        forward_peak,
        backward_peak,
        replay_buffer_floats,
        replay_buffer_bytes: replay_buffer_floats * std::mem::size_of::<f64>(),
    };
    let report = GradReport {
        grads,
        mem_grad: grad_next,
        losses,
        final_logits: final_logits.expect("at least one segment"),
        memory,
    };
    Ok(Rollout { report, final_memory, replay_deviation })
}

pub fn bptt_rollout(
    params: &ModelParams,
    batch: &SegmentBatch,
    mem_1: &Matrix,
    schedule: &RetentionSchedule,
    dropout: &Dropout,
) -> Result<Rollout> {
    let config = &params.config;
    check_schedule(config, batch, schedule)?;
    let n_segments = batch.n_segments();
    let mut tape = Tape::new();
    let mut vars = ModelVars::register(&mut tape, params, true);
    let mem_1_var = tape.input(mem_1.clone(), true);
    let mut memory = mem_1_var;
    let mut loss_vars = Vec::new();
    let mut losses = vec![0.0; n_segments];
    let mut final_logits = None;
    for t in 1..=n_segments {
        let out = segment_forward(&mut tape, &mut vars, config, &batch.segments[t - 1], &batch.masks[t - 1], memory, dropout, t)?;
        let (logits, loss) = local_loss(&mut tape, &vars, batch, t, out.output, out.memory_raw)?;
        if let Some(loss) = loss {
            losses[t - 1] = tape.value(loss).get(0, 0);
            loss_vars.push(loss);
        }
        if t == n_segments {
            final_logits = Some(tape.value(logits).clone());
        }
        memory = apply_retention_var(&mut tape, out.memory_raw, schedule, t)?;
    }
    let final_memory = tape.value(memory).clone();
    let forward_peak = tape.peak_floats();
    let mut grads = params.zero_grads();
    let mut mem_grad = Matrix::zeros(config.n_mem_tokens, config.d);
    if let Some((&first, rest)) = loss_vars.split_first() {
        let mut total = first;
        for &l in rest {
            total = tape.add(total, l)?;
        }
        tape.backward(total, &Matrix::ones(1, 1), false)?;
        vars.accumulate_grads(&tape, &mut grads)?;
        mem_grad = tape.grad_or_zeros(mem_1_var);
        grads.grads[ModelParams::mem_init_index()].add_assign(&mem_grad)?;
    }
    let backward_peak = tape.peak_floats();
    let memory = MemoryReport { forward_peak, backward_peak, replay_buffer_floats: 0, replay_buffer_bytes: 0 };
    let report = GradReport { grads, mem_grad, losses, final_logits: final_logits.expect("at least one segment"), memory };
    Ok(Rollout { report, final_memory, replay_deviation: 0.0 })
}

pub fn rollout(
    kind: RolloutKind,
    params: &ModelParams,
    batch: &SegmentBatch,
    mem_1: &Matrix,
    schedule: &RetentionSchedule,
    dropout: &Dropout,
) -> Result<Rollout> {
    match kind {
        RolloutKind::Amrb => amrb_rollout(params, batch, mem_1, schedule, dropout),
        RolloutKind::Bptt => bptt_rollout(params, batch, mem_1, schedule, dropout),
    }
}

/// Peak activation counts for one rollout of `batch` from the learned
/// initial memory, without dropout.
pub fn memory_report(
    kind: RolloutKind,
    params: &ModelParams,
    batch: &SegmentBatch,
    schedule: &RetentionSchedule,
) -> Result<MemoryReport> {
    Ok(rollout(kind, params, batch, &params.mem_init, schedule, &Dropout::off())?.report.memory)
}
