use serde::{Deserialize, Serialize};

use super::config::PAD;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    #[default]
    None,
    /// One label for the whole sequence, scored after the last segment.
    Final(usize),
    /// One label per segment.
    PerSegment(Vec<usize>),
}

/// One sequence cut into `T` fixed-length segments.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentBatch {
    pub segments: Vec<Vec<usize>>,
    /// `true` for real tokens, `false` for padding.
    pub masks: Vec<Vec<bool>>,
    pub target: Target,
}

impl SegmentBatch {
    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn with_target(mut self, target: Target) -> Self {
        self.target = target;
        self
    }

    /// Label scored after segment `t` (1-based), if any.
    pub fn label_for(&self, t: usize) -> Option<usize> {
        match &self.target {
            Target::None => None,
            Target::Final(label) => (t == self.n_segments()).then_some(*label),
            Target::PerSegment(labels) => labels.get(t - 1).copied(),
        }
    }
}

/// Cut `sequence` into `n_segments` contiguous segments of `seg_len`
/// tokens, right-padding with [`PAD`].
pub fn split_segments(sequence: &[usize], seg_len: usize, n_segments: usize) -> Result<SegmentBatch> {
    if seg_len == 0 || n_segments == 0 {
        return Err(Error::InvalidArgument("seg_len and n_segments must be positive".into()));
    }
    if sequence.len() > seg_len * n_segments {
        return Err(Error::InvalidArgument(format!(
            "sequence of {} tokens exceeds {n_segments} segments of {seg_len}",
            sequence.len()
        )));
    }
    let mut segments = Vec::with_capacity(n_segments);
    let mut masks = Vec::with_capacity(n_segments);
    for t in 0..n_segments {
        let start = (t * seg_len).min(sequence.len());
        let end = ((t + 1) * seg_len).min(sequence.len());
        let mut ids = sequence[start..end].to_vec();
        let mut mask = vec![true; ids.len()];
        ids.resize(seg_len, PAD);
        mask.resize(seg_len, false);
        segments.push(ids);
        masks.push(mask);
    }
    Ok(SegmentBatch { segments, masks, target: Target::None })
}
