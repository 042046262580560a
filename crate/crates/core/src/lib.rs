//! Siamese sentence-encoder training and evaluation.

pub mod data;
pub mod encoder;
pub mod eval;
pub mod losses;
pub mod numerics;
pub mod pipeline;
pub mod synth;
