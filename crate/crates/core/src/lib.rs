//! Gradient similarity and ripple effects of knowledge edits.
//!
//! A from-scratch reverse-mode autodiff engine drives two model families:
//! a tiny decoder-only LM trained on a synthetic knowledge world, and a
//! two-head MLP for wide-network (NTK) experiments. On top of them sit the
//! editors, the GradSim measure, ripple metrics and the width-scan harness.
//! [`pipeline`] wires everything into the reproducible commands used by the
//! `ripple-lab` binary.

pub mod autodiff;
pub mod editing;
pub mod error;
pub mod format;
pub mod gradsim;
pub mod metrics;
pub mod models;
pub mod ntk;
pub mod pipeline;
mod seed;
#[cfg(test)]
mod testutil;
pub mod worldgen;

pub use error::{Error, Result};
