//! Downlink scheduling over ON/OFF Markov channels with ARQ-only channel
//! knowledge.
//!
//! The crate provides the Whittle index of a belief state, the threshold
//! calibration on a truncated belief space, relaxed, stringent
//! (schedule-or-broadcast) and frame-based queue policies, a seeded Monte
//! Carlo simulator, and closed-form evaluation of the associated bounds.

pub mod bounds;
pub mod calibration;
pub mod channel;
pub mod error;
pub mod index;
pub mod policies;
pub mod simulator;

pub use error::{Error, Result};
