//! A self-contained training lab for online reinforcement learning with prior data.
//!
//! The lab trains soft actor-critic agents on small deterministic
//! continuous-control tasks, mixing a pre-collected offline dataset with a
//! growing online buffer via symmetric sampling. Its centerpiece is an
//! adaptive schedule that pauses environment interaction for offline
//! *stabilization phases* (critic-only training with the actor frozen) and
//! terminates each phase with a patience rule driven by an actor-aligned
//! Direct-Method off-policy evaluation signal computed on a held-out
//! validation split. Fixed-schedule baselines (plain SAC with prior data,
//! a high-UTD ensemble learner, and fixed-length stabilization) share the
//! same code path, and every run carries an exact FLOP ledger.
//!
//! Modules:
//! - [`numerics`]: minimal MLPs with analytic gradients, Adam, dropout,
//!   layer normalization, binary checkpoints.
//! - [`envlab`]: deterministic environments, dataset generation in three
//!   quality tiers, score anchors.
//! - [`replay`]: dual offline/online buffer, symmetric sampling,
//!   train/validation splits.
//! - [`agent`]: the SAC learner with a configurable critic ensemble.
//! - [`opestop`]: the DM estimator and the patience state machine.
//! - [`driver`]: training schedules, FLOP accounting, config, CLI plumbing.

pub mod agent;
pub mod driver;
pub mod envlab;
pub mod error;
pub mod numerics;
pub mod opestop;
pub mod replay;

pub use error::{Error, Result};
