//! Reverse-mode differentiation for the attention block, encoder layers and
//! losses, including the two-call retained backward used by memory replay.

mod tape;

pub use tape::{decay_apply, elu_plus_one, softmax_in_place, LeafKind, Tape, Var, RECIPROCAL_EPS};
