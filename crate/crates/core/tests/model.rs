mod common;

use astroseq_core::amrb::{rollout, RolloutKind};
use astroseq_core::autodiff::Tape;
use astroseq_core::model::{
    apply_retention, apply_retention_var, classify, forward_sequence, segment_forward, split_segments, Dropout,
    LossMode, ModelConfig, ModelParams, ModelVars, SegmentBatch, Target,
};
use astroseq_core::retention::{retention_schedule, uniform_schedule, MacroModel, RetentionSchedule};
use astroseq_core::Matrix;
use common::{random_matrix, rng};
use rand::Rng;

fn config(n_segments: usize, n_mem_tokens: usize) -> ModelConfig {
    ModelConfig {
        d: 8,
        m: 6,
        n_heads: 2,
        ffn_dim: 16,
        n_mem_tokens,
        seg_len: 6,
        n_segments,
        vocab_size: 12,
        n_classes: 3,
        ..ModelConfig::default()
    }
}

fn model(cfg: ModelConfig, seed: u64) -> ModelParams {
    ModelParams::init(cfg, &mut rng(seed)).unwrap()
}

/// Segment 1 draws tokens from 1..6 and later segments from 6..12, so
/// embedding rows 1..6 are reachable from the final loss only through
/// memory.
fn split_vocab_batch(cfg: &ModelConfig, seed: u64) -> SegmentBatch {
    let mut r = rng(seed);
    let seq: Vec<usize> = (0..cfg.max_len())
        .map(|i| if i < cfg.seg_len { r.random_range(1..6) } else { r.random_range(6..12) })
        .collect();
    split_segments(&seq, cfg.seg_len, cfg.n_segments).unwrap().with_target(Target::Final(2))
}

fn grads(kind: RolloutKind, p: &ModelParams, b: &SegmentBatch, s: &RetentionSchedule) -> astroseq_core::model::ParamGrads {
    rollout(kind, p, b, &p.mem_init, s, &Dropout::off()).unwrap().report.grads
}

#[test]
fn forward_is_deterministic() {
    let cfg = config(3, 2);
    let p = model(cfg.clone(), 1);
    let b = split_vocab_batch(&cfg, 2);
    let s = uniform_schedule(3).unwrap();
    assert_eq!(forward_sequence(&p, &b, &s).unwrap(), forward_sequence(&p, &b, &s).unwrap());
}

#[test]
fn without_memory_earlier_segments_are_invisible() {
    let cfg = config(3, 0);
    let p = model(cfg.clone(), 3);
    let b = split_vocab_batch(&cfg, 4);
    let s = uniform_schedule(3).unwrap();
    for kind in [RolloutKind::Amrb, RolloutKind::Bptt] {
        let g = grads(kind, &p, &b, &s);
        let embed = g.get("embed").unwrap();
        assert!(embed.slice_rows(1, 5).unwrap().max_abs() == 0.0, "{kind:?}");
        assert!(embed.slice_rows(6, 6).unwrap().max_abs() > 0.0);
    }
    let mut changed = b.clone();
    changed.segments[0] = vec![3; cfg.seg_len];
    assert_eq!(forward_sequence(&p, &b, &s).unwrap().logits, forward_sequence(&p, &changed, &s).unwrap().logits);
}

#[test]
fn memory_carries_earlier_segments() {
    let cfg = config(3, 2);
    let p = model(cfg.clone(), 3);
    let b = split_vocab_batch(&cfg, 4);
    let s = uniform_schedule(3).unwrap();
    let g = grads(RolloutKind::Amrb, &p, &b, &s);
    assert!(g.get("embed").unwrap().slice_rows(1, 5).unwrap().max_abs() > 0.0);
    assert!(g.get("mem_init").unwrap().max_abs() > 0.0);
}

#[test]
fn memory_stays_bounded_over_long_sequences() {
    let cfg = config(16, 4);
    let p = model(cfg.clone(), 5);
    let b = split_vocab_batch(&cfg, 6);
    for s in [uniform_schedule(16).unwrap(), retention_schedule(16, &MacroModel::default()).unwrap()] {
        let out = forward_sequence(&p, &b, &s).unwrap();
        assert_eq!(out.memories.len(), 17);
        assert!(out.memories.iter().all(|m| m.is_finite() && m.max_abs() < 1e3));
    }
}

#[test]
fn padding_content_is_ignored() {
    let cfg = config(2, 2);
    let p = model(cfg.clone(), 7);
    let seq: Vec<usize> = (0..9).map(|i| 1 + i % 11).collect();
    let b = split_segments(&seq, 6, 2).unwrap().with_target(Target::Final(0));
    assert_eq!(b.masks[1], vec![true, true, true, false, false, false]);
    let mut changed = b.clone();
    changed.segments[1][3..].copy_from_slice(&[5, 9, 11]);
    let s = uniform_schedule(2).unwrap();
    let a = forward_sequence(&p, &b, &s).unwrap();
    let c = forward_sequence(&p, &changed, &s).unwrap();
    assert!(a.logits.max_abs_diff(&c.logits) < 1e-12);
    assert!(a.memories[2].max_abs_diff(&c.memories[2]) < 1e-12);
}

#[test]
fn retention_scales_the_upstream_gradient() {
    let s = RetentionSchedule::manual(vec![0.3, 0.7]).unwrap();
    let raw = random_matrix(2, 4, 1.0, 8);
    let upstream = random_matrix(2, 4, 1.0, 9);
    let mut tape = Tape::new();
    let v = tape.input(raw.clone(), true);
    let scaled = apply_retention_var(&mut tape, v, &s, 2).unwrap();
    assert!(tape.value(scaled).max_abs_diff(&raw.scale(0.7)) == 0.0);
    tape.backward(scaled, &upstream, false).unwrap();
    assert!(tape.grad_or_zeros(v).max_abs_diff(&upstream.scale(0.7)) < 1e-15);

    let state = apply_retention(&raw, &s, 1).unwrap();
    assert_eq!(state.segment_index, 2);
    assert_eq!(state.tokens, raw.scale(0.3));
}

#[test]
fn halving_the_factor_halves_the_injected_memory() {
    let cfg = config(2, 3);
    let p = model(cfg.clone(), 10);
    let b = split_vocab_batch(&cfg, 11);
    let half = forward_sequence(&p, &b, &RetentionSchedule::manual(vec![0.5, 1.0]).unwrap()).unwrap();
    let full = forward_sequence(&p, &b, &RetentionSchedule::manual(vec![1.0, 1.0]).unwrap()).unwrap();
    assert_eq!(half.memories[1], full.memories[1].scale(0.5));
    assert_eq!(half.outputs[0], full.outputs[0]);
}

#[test]
fn unrolled_recurrence_matches_forward_sequence() {
    let cfg = config(4, 2);
    let p = model(cfg.clone(), 12);
    let b = split_vocab_batch(&cfg, 13);
    let s = retention_schedule(4, &MacroModel::default()).unwrap();
    let expected = forward_sequence(&p, &b, &s).unwrap();

    let mut memory = p.mem_init.clone();
    let mut logits = Matrix::zeros(1, 1);
    for t in 1..=4 {
        let mut tape = Tape::new();
        let mut vars = ModelVars::register(&mut tape, &p, false);
        let m = tape.input(memory.clone(), false);
        let out = segment_forward(&mut tape, &mut vars, &cfg, &b.segments[t - 1], &b.masks[t - 1], m, &Dropout::off(), t)
            .unwrap();
        let l = classify(&mut tape, &vars, out.output, &b.masks[t - 1], out.memory_raw).unwrap();
        logits = tape.value(l).clone();
        memory = tape.value(out.memory_raw).scale(s.factors[t - 1]);
        assert_eq!(memory, expected.memories[t]);
    }
    assert_eq!(logits, expected.logits);
}

#[test]
fn replayed_memory_matches_forward_memory() {
    let cfg = ModelConfig { dropout: 0.2, ..config(5, 2) };
    let p = model(cfg.clone(), 14);
    let b = split_vocab_batch(&cfg, 15);
    let s = retention_schedule(5, &MacroModel::default()).unwrap();
    let r = rollout(RolloutKind::Amrb, &p, &b, &p.mem_init, &s, &Dropout::new(0.2, 99)).unwrap();
    assert_eq!(r.replay_deviation, 0.0);
}

#[test]
fn replay_matches_full_backpropagation_with_dropout_and_per_segment_loss() {
    let cfg = ModelConfig { loss_mode: LossMode::EverySegment, ..config(5, 3) };
    let p = model(cfg.clone(), 16);
    let b = split_vocab_batch(&cfg, 17).with_target(Target::PerSegment(vec![0, 2, 1, 1, 0]));
    let s = retention_schedule(5, &MacroModel::default()).unwrap();
    let drop = Dropout::new(0.25, 5);
    let a = rollout(RolloutKind::Amrb, &p, &b, &p.mem_init, &s, &drop).unwrap();
    let f = rollout(RolloutKind::Bptt, &p, &b, &p.mem_init, &s, &drop).unwrap();
    assert!(a.report.grads.max_relative_diff(&f.report.grads) < 1e-10);
    assert!(a.report.mem_grad.max_abs_diff(&f.report.mem_grad) < 1e-12);
    assert_eq!(a.report.losses, f.report.losses);
    assert_eq!(a.final_memory, f.final_memory);
}

#[test]
fn replay_backward_peak_grows_only_with_the_buffer() {
    let mut peaks = Vec::new();
    for t in [2, 4, 8, 16] {
        let cfg = config(t, 2);
        let p = model(cfg.clone(), 18);
        let b = split_vocab_batch(&cfg, 19);
        let s = uniform_schedule(t).unwrap();
        let amrb = rollout(RolloutKind::Amrb, &p, &b, &p.mem_init, &s, &Dropout::off()).unwrap().report.memory;
        let bptt = rollout(RolloutKind::Bptt, &p, &b, &p.mem_init, &s, &Dropout::off()).unwrap().report.memory;
        assert_eq!(amrb.replay_buffer_floats, t * 2 * 8);
        assert!(amrb.backward_peak < bptt.backward_peak, "T = {t}");
        peaks.push(amrb.backward_peak - amrb.replay_buffer_floats);
    }
    assert!(peaks.windows(2).all(|w| w[0] == w[1]), "{peaks:?}");
}
