//! Rectified point flow at desk scale: synthetic multi-part data, an
//! overlap-pretrained point encoder, a conditional rectified-flow velocity
//! network with Euler inference, Procrustes pose recovery, symmetry tooling
//! and the evaluation metric suite.

pub mod data;
pub mod encoder;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod symmetry;

pub use error::{Error, Result};
