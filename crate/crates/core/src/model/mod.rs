//! Segment-recurrent encoder with memory tokens.

mod checkpoint;
mod config;
mod forward;
mod params;
mod segments;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{LossMode, ModelConfig, PAD};
pub(crate) use forward::check_schedule;
pub use forward::{
    apply_retention, apply_retention_var, argmax, classify, cross_entropy, forward_sequence, forward_sequence_from, segment_forward,
    Dropout, MemoryState, SegmentOutput, SequenceOutput,
};
pub use params::{LayerParams, LayerVars, ModelParams, ModelVars, ParamGrads};
pub use segments::{split_segments, SegmentBatch, Target};
