//! LSTM gait-signal classifier.
//!
//! Ingests vertical ground-reaction-force recordings, cuts them into
//! fixed-length 18-channel segments, trains a single-layer LSTM classifier
//! from scratch (hand-rolled forward, backprop-through-time, and Adam), and
//! reports precision / sensitivity / specificity / accuracy at segment and
//! subject level.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod seeds;
pub mod train;

pub use error::{Error, Result};
