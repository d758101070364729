//! Minimal neural-network substrate: autodiff tape, named parameters,
//! AdamW, and the binary checkpoint container.

pub mod checkpoint;
pub mod params;
pub mod tape;

pub use checkpoint::{
    read_checkpoint, write_checkpoint, MAGIC_ENCODER, MAGIC_FLOW, MAGIC_NOISE,
};
pub use params::{AdamW, ParamSet};
pub use tape::{Tape, Var};
