use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::config::{RunConfig, ScheduleKind};
use super::record::{EpochMetrics, RunRecord, RunStatus};
use super::tasks::{gen_task, Example};
use crate::amrb::{memory_report, rollout, Rollout};
use crate::error::{Error, Result};
use crate::model::{
    argmax, cross_entropy, forward_sequence, save_checkpoint, split_segments, Dropout, LossMode, ModelConfig, ModelParams,
    SegmentBatch, Target,
};
use crate::optim::AdamW;
use crate::retention::{uniform_schedule, RetentionSchedule, ScheduleCache};
use crate::rng::{derive_seed, fold, stream_rng, Stream};

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where `run.json`, `curves.csv`, `model.ckpt` and cached schedules go.
    pub out_dir: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

pub struct TrainOutcome {
    pub record: RunRecord,
    pub params: ModelParams,
    pub schedule: RetentionSchedule,
}

pub fn to_batch(example: &Example, config: &ModelConfig) -> Result<SegmentBatch> {
    let batch = split_segments(&example.tokens, config.seg_len, config.n_segments)?;
    let target = match config.loss_mode {
        LossMode::Final => Target::Final(example.label),
        LossMode::EverySegment => Target::PerSegment(vec![example.label; config.n_segments]),
    };
    Ok(batch.with_target(target))
}

/// The schedule a run uses: uniform, or derived from the macro model through
/// the on-disk cache when a cache directory is known.
pub fn resolve_schedule(config: &RunConfig, out_dir: Option<&Path>) -> Result<RetentionSchedule> {
    let n = config.model.n_segments;
    match config.retention.schedule {
        ScheduleKind::Uniform => uniform_schedule(n),
        ScheduleKind::Derived => {
            let dir = config.retention.cache_dir.clone().or_else(|| out_dir.map(|d| d.join("schedules")));
            match dir {
                Some(dir) => Ok(ScheduleCache::new(dir).get_or_compute(n, &config.retention.macro_model)?.0),
                None => crate::retention::retention_schedule(n, &config.retention.macro_model),
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean loss and accuracy of the final-segment prediction.
pub fn evaluate(params: &ModelParams, data: &[Example], schedule: &RetentionSchedule) -> Result<EvalMetrics> {
    let per_example: Vec<(f64, bool)> = data
        .par_iter()
        .map(|ex| {
            let batch = to_batch(ex, &params.config)?;
            let out = forward_sequence(params, &batch, schedule)?;
            Ok((cross_entropy(out.logits.row(0), ex.label), argmax(&out.logits) == ex.label))
        })
        .collect::<Result<_>>()?;
    let n = per_example.len().max(1) as f64;
    Ok(EvalMetrics {
        loss: per_example.iter().map(|p| p.0).sum::<f64>() / n,
        accuracy: per_example.iter().filter(|p| p.1).count() as f64 / n,
    })
}

pub fn train(config: &RunConfig, options: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let out_dir = options.out_dir.as_deref();
    let schedule = resolve_schedule(config, out_dir)?;
    let train_data = gen_task(&config.task_spec_train())?;
    let val_data = gen_task(&config.task_spec_val())?;
    let mut params = ModelParams::init(config.model.clone(), &mut stream_rng(config.seed, Stream::Init, 0))?;
    let mut optimizer = AdamW::for_model(config.train.optimizer, &params)?;

    let probe = to_batch(&train_data[0], &config.model)?;
    let report = memory_report(config.train.rollout, &params, &probe, &schedule)?;
    let mut record = RunRecord::new(config.clone(), schedule.factors.clone(), report)?;

    let dropout_root = derive_seed(config.seed, Stream::Dropout, 0);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut step = 0u64;
    'epochs: for epoch in 1..=config.train.epochs {
        let started = Instant::now();
        order.shuffle(&mut stream_rng(config.seed, Stream::Shuffle, epoch as u64));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(config.train.batch_size) {
            step += 1;
            let rollouts: Vec<Rollout> = chunk
                .iter()
                .map(|&i| {
                    let ex = &train_data[i];
                    let batch = to_batch(ex, &config.model)?;
                    let dropout = Dropout::new(config.model.dropout, fold(dropout_root, &[step, i as u64]));
                    rollout(config.train.rollout, &params, &batch, &params.mem_init, &schedule, &dropout)
                })
                .collect::<Result<_>>()?;
            let mut grads = params.zero_grads();
            for (r, &i) in rollouts.iter().zip(chunk) {
                grads.add_assign(&r.report.grads)?;
                loss_sum += r.report.total_loss();
                correct += usize::from(argmax(&r.report.final_logits) == train_data[i].label);
            }
            grads.scale(1.0 / chunk.len() as f64);
            if !loss_sum.is_finite() {
                record.status = RunStatus::Aborted { reason: format!("non-finite training loss at step {step}") };
                break 'epochs;
            }
            if let Err(e) = optimizer.step_model(&mut params, &grads) {
                match e {
                    Error::TrainingAbort(reason) => {
                        record.status = RunStatus::Aborted { reason };
                        break 'epochs;
                    }
                    other => return Err(other),
                }
            }
        }
        let val = evaluate(&params, &val_data, &schedule)?;
        let n = train_data.len() as f64;
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        if options.verbose {
            eprintln!(
                "epoch {epoch:>3}  train loss {:.4} acc {:.3}  val loss {:.4} acc {:.3}  ({:.1}s)",
                metrics.train_loss, metrics.train_accuracy, metrics.val_loss, metrics.val_accuracy, metrics.wall_seconds
            );
        }
        record.push_epoch(metrics);
        if !val.loss.is_finite() {
            record.status = RunStatus::Aborted { reason: format!("non-finite validation loss after epoch {epoch}") };
            break;
        }
        if config.train.target_accuracy.is_some_and(|target| val.accuracy >= target) {
            break;
        }
    }

    if let Some(dir) = out_dir {
        record.persist(dir)?;
        save_checkpoint(dir.join("model.ckpt"), &params)?;
    }
    Ok(TrainOutcome { record, params, schedule })
}
