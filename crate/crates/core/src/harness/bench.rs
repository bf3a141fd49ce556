//! Wall-clock and activation-memory measurements.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::amrb::{amrb_rollout, bptt_rollout};
use crate::attention::{
    astro_attention_with, positional_matrix, softmax_attention_reference, AttentionConfig, AttentionFlags,
    AttentionParams,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{split_segments, Dropout, ModelConfig, ModelParams, Target};
use crate::retention::{retention_schedule, MacroModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub attention_sizes: Vec<usize>,
    pub d: usize,
    pub m: usize,
    pub rollout_segments: Vec<usize>,
    /// Minimum measuring time per timed case.
    pub min_seconds: f64,
    pub min_reps: usize,
    /// Attention sizes are timed round-robin this many times and the fastest
    /// round is kept; interference on the machine only ever adds time.
    pub rounds: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            attention_sizes: vec![128, 256, 512, 1024],
            d: 16,
            m: 16,
            rollout_segments: vec![2, 4, 8],
            min_seconds: 0.3,
            min_reps: 15,
            rounds: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTiming {
    pub n: usize,
    pub astro_seconds: f64,
    pub softmax_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutTiming {
    pub segments: usize,
    pub amrb_seconds: f64,
    pub bptt_seconds: f64,
    pub amrb_backward_peak: usize,
    pub bptt_backward_peak: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub attention: Vec<AttentionTiming>,
    pub rollouts: Vec<RolloutTiming>,
}

impl BenchReport {
    fn ratios(&self, f: impl Fn(&AttentionTiming) -> f64) -> Vec<f64> {
        self.attention.windows(2).map(|w| f(&w[1]) / f(&w[0])).collect()
    }

    /// Time ratio between consecutive attention sizes.
    pub fn astro_ratios(&self) -> Vec<f64> {
        self.ratios(|t| t.astro_seconds)
    }

    pub fn softmax_ratios(&self) -> Vec<f64> {
        self.ratios(|t| t.softmax_seconds)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,size,astro_or_amrb_seconds,softmax_or_bptt_seconds,amrb_peak,bptt_peak\n");
        for t in &self.attention {
            let _ = writeln!(out, "attention,{},{},{},,", t.n, t.astro_seconds, t.softmax_seconds);
        }
        for r in &self.rollouts {
            let _ = writeln!(
                out,
                "rollout,{},{},{},{},{}",
                r.segments, r.amrb_seconds, r.bptt_seconds, r.amrb_backward_peak, r.bptt_backward_peak
            );
        }
        out
    }
}

/// Median duration of `f` over at least `min_reps` calls and `min_time`.
pub fn median_time(mut f: impl FnMut(), min_reps: usize, min_time: Duration) -> f64 {
    f();
    let mut samples = Vec::new();
    let begin = Instant::now();
    while samples.len() < min_reps.max(1) || begin.elapsed() < min_time {
        let t = Instant::now();
        f();
        samples.push(t.elapsed().as_secs_f64());
    }
    samples.sort_by(f64::total_cmp);
    samples[samples.len() / 2]
}

/// Bytes of distinct inputs cycled through per attention size, so the branch
/// predictor cannot memorize a small input that is timed over and over.
const INPUT_POOL_BYTES: usize = 512 << 10;

/// Time the astromorphic block and the softmax reference at each size. The
/// positional encoding does not depend on the input and is built once per
/// size outside the timed region.
pub fn bench_attention(config: &BenchConfig) -> Result<Vec<AttentionTiming>> {
    let n_max = config.attention_sizes.iter().copied().max().unwrap_or(1);
    let attn_cfg = AttentionConfig { d: config.d, m: config.m, n_heads: 1, n_max, alpha: 0.25, pos_scale: 2.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = AttentionParams::init(attn_cfg, &mut rng)?;
    let rounds = config.rounds.max(1);
    let min_time = Duration::from_secs_f64(config.min_seconds / rounds as f64);
    let flags = AttentionFlags::default();
    let mut cases = Vec::with_capacity(config.attention_sizes.len());
    for &n in &config.attention_sizes {
        let pool = (INPUT_POOL_BYTES / (n * config.d * 8).max(1)).max(2);
        let inputs: Vec<Matrix> = (0..pool).map(|_| Matrix::uniform(n, config.d, 1.0, &mut rng)).collect();
        let positional = positional_matrix(n, &params)?;
        for x in &inputs {
            astro_attention_with(x, &params, &positional, flags, None)?;
        }
        cases.push((n, inputs, positional));
    }
    let mut samples = vec![(Vec::with_capacity(rounds), Vec::with_capacity(rounds)); cases.len()];
    for _ in 0..rounds {
        for ((_, inputs, positional), (astro, softmax)) in cases.iter().zip(&mut samples) {
            let mut next = 0;
            astro.push(median_time(
                || {
                    next = (next + 1) % inputs.len();
                    let out = astro_attention_with(&inputs[next], &params, positional, flags, None);
                    black_box(out.expect("validated above"));
                },
                config.min_reps,
                min_time,
            ));
            softmax.push(median_time(
                || {
                    next = (next + 1) % inputs.len();
                    black_box(softmax_attention_reference(&inputs[next], &params).expect("shapes fixed"));
                },
                config.min_reps,
                min_time,
            ));
        }
    }
    Ok(cases
        .iter()
        .zip(samples)
        .map(|((n, _, _), (astro, softmax))| AttentionTiming {
            n: *n,
            astro_seconds: fastest(&astro),
            softmax_seconds: fastest(&softmax),
        })
        .collect())
}

fn fastest(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::INFINITY, f64::min)
}

/// The small model used by gradient checks and rollout benchmarks.
pub fn tiny_model_config(n_segments: usize) -> ModelConfig {
    ModelConfig {
        d: 8,
        m: 6,
        n_heads: 2,
        ffn_dim: 16,
        n_layers: 1,
        n_mem_tokens: 2,
        seg_len: 8,
        n_segments,
        dropout: 0.0,
        vocab_size: 16,
        n_classes: 4,
        ..ModelConfig::default()
    }
}

pub fn bench_rollouts(config: &BenchConfig) -> Result<Vec<RolloutTiming>> {
    let min_time = Duration::from_secs_f64(config.min_seconds);
    config
        .rollout_segments
        .iter()
        .map(|&t| {
            let model = tiny_model_config(t);
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ t as u64);
            let params = ModelParams::init(model.clone(), &mut rng)?;
            let seq: Vec<usize> = (0..model.max_len()).map(|_| rng.random_range(1..model.vocab_size)).collect();
            let batch = split_segments(&seq, model.seg_len, t)?.with_target(Target::Final(0));
            let schedule = retention_schedule(t, &MacroModel::default())?;
            let off = Dropout::off();
            let amrb = amrb_rollout(&params, &batch, &params.mem_init, &schedule, &off)?;
            let bptt = bptt_rollout(&params, &batch, &params.mem_init, &schedule, &off)?;
            let amrb_seconds = median_time(
                || {
                    black_box(amrb_rollout(&params, &batch, &params.mem_init, &schedule, &off).expect("ran above"));
                },
                config.min_reps,
                min_time,
            );
            let bptt_seconds = median_time(
                || {
                    black_box(bptt_rollout(&params, &batch, &params.mem_init, &schedule, &off).expect("ran above"));
                },
                config.min_reps,
                min_time,
            );
            Ok(RolloutTiming {
                segments: t,
                amrb_seconds,
                bptt_seconds,
                amrb_backward_peak: amrb.report.memory.backward_peak,
                bptt_backward_peak: bptt.report.memory.backward_peak,
            })
        })
        .collect()
}

pub fn bench(config: &BenchConfig) -> Result<BenchReport> {
    if config.attention_sizes.contains(&0) || config.rollout_segments.contains(&0) {
        return Err(Error::InvalidArgument("benchmark sizes must be positive".into()));
    }
    Ok(BenchReport { attention: bench_attention(config)?, rollouts: bench_rollouts(config)? })
}
