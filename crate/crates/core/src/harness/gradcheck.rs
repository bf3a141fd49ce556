//! Gradient checks on the tiny model: AMRB against BPTT, or either against
//! central finite differences.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::bench::tiny_model_config;
use crate::amrb::{rollout, MemoryReport, RolloutKind};
use crate::error::{Error, Result};
use crate::model::{split_segments, Dropout, ModelParams, ParamGrads, SegmentBatch, Target};
use crate::retention::{retention_schedule, MacroModel, RetentionSchedule};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradcheckMode {
    Amrb,
    Bptt,
    Both,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub mode: GradcheckMode,
    pub n_segments: usize,
    pub seed: u64,
    /// `"bptt"` when both rollouts ran, `"finite_difference"` otherwise.
    pub reference: String,
    pub max_relative_discrepancy: f64,
    pub memory: BTreeMap<String, MemoryReport>,
}

/// Random tiny model and sequence with a label on every segment, so both the
/// local-loss and the carried-gradient paths are exercised.
pub fn tiny_problem(n_segments: usize, seed: u64) -> Result<(ModelParams, SegmentBatch, RetentionSchedule)> {
    if n_segments == 0 {
        return Err(Error::InvalidArgument("gradcheck needs at least one segment".into()));
    }
    let config = tiny_model_config(n_segments);
    let params = ModelParams::init(config.clone(), &mut stream_rng(seed, Stream::Init, 0))?;
    let mut rng = stream_rng(seed, Stream::Data, 0);
    let seq: Vec<usize> = (0..config.max_len()).map(|_| rng.random_range(1..config.vocab_size)).collect();
    let labels = (0..n_segments).map(|_| rng.random_range(0..config.n_classes)).collect();
    let batch = split_segments(&seq, config.seg_len, n_segments)?.with_target(Target::PerSegment(labels));
    let schedule = retention_schedule(n_segments, &MacroModel::default())?;
    Ok((params, batch, schedule))
}

fn total_loss(params: &ModelParams, batch: &SegmentBatch, schedule: &RetentionSchedule) -> Result<f64> {
    let r = rollout(RolloutKind::Bptt, params, batch, &params.mem_init, schedule, &Dropout::off())?;
    Ok(r.report.total_loss())
}

/// Largest relative error between `grads` and central differences, probing
/// up to `per_tensor` evenly spaced entries of every parameter tensor.
pub fn finite_difference_discrepancy(
    params: &ModelParams,
    batch: &SegmentBatch,
    schedule: &RetentionSchedule,
    grads: &ParamGrads,
    per_tensor: usize,
) -> Result<f64> {
    const STEP: f64 = 1e-5;
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (k, grad) in grads.grads.iter().enumerate() {
        let len = grad.len();
        let picks = per_tensor.min(len);
        for p in 0..picks {
            let idx = p * len / picks;
            let original = probe.named_mut()[k].1.data()[idx];
            probe.named_mut()[k].1.data_mut()[idx] = original + STEP;
            let up = total_loss(&probe, batch, schedule)?;
            probe.named_mut()[k].1.data_mut()[idx] = original - STEP;
            let down = total_loss(&probe, batch, schedule)?;
            probe.named_mut()[k].1.data_mut()[idx] = original;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = grad.data()[idx];
            let scale = numeric.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max((numeric - analytic).abs() / scale);
        }
    }
    Ok(worst)
}

pub fn gradcheck(n_segments: usize, seed: u64, mode: GradcheckMode) -> Result<GradcheckReport> {
    let (params, batch, schedule) = tiny_problem(n_segments, seed)?;
    let run = |kind| rollout(kind, &params, &batch, &params.mem_init, &schedule, &Dropout::off());
    let mut memory = BTreeMap::new();
    let (reference, max_relative_discrepancy) = match mode {
        GradcheckMode::Both => {
            let amrb = run(RolloutKind::Amrb)?;
            let bptt = run(RolloutKind::Bptt)?;
            memory.insert("amrb".to_string(), amrb.report.memory);
            memory.insert("bptt".to_string(), bptt.report.memory);
            ("bptt", amrb.report.grads.max_relative_diff(&bptt.report.grads))
        }
        GradcheckMode::Amrb | GradcheckMode::Bptt => {
            let kind = if mode == GradcheckMode::Amrb { RolloutKind::Amrb } else { RolloutKind::Bptt };
            let r = run(kind)?;
            let name = if mode == GradcheckMode::Amrb { "amrb" } else { "bptt" };
            memory.insert(name.to_string(), r.report.memory);
            ("finite_difference", finite_difference_discrepancy(&params, &batch, &schedule, &r.report.grads, 4)?)
        }
    };
    Ok(GradcheckReport {
        mode,
        n_segments,
        seed,
        reference: reference.to_string(),
        max_relative_discrepancy,
        memory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree() {
        let report = gradcheck(3, 7, GradcheckMode::Both).unwrap();
        assert!(report.max_relative_discrepancy < 1e-10, "{}", report.max_relative_discrepancy);
        assert_eq!(report.memory.len(), 2);
    }

    #[test]
    fn amrb_matches_finite_differences() {
        let report = gradcheck(2, 1, GradcheckMode::Amrb).unwrap();
        assert!(report.max_relative_discrepancy < 1e-5, "{}", report.max_relative_discrepancy);
    }
}
