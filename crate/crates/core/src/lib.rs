// SPDX-License-Identifier: MIT OR Apache-2.0

//! A desk-scale laboratory for intra-memory knowledge conflict.
//!
//! The pipeline synthesizes paired biographies where some persons carry two
//! contradictory facts, trains a small decoder-only transformer on the mixed
//! corpus and a sibling on the clean corpus, then localizes the conflict:
//!
//! - [`logitlens`] projects every residual-stream site through the
//!   unembedding and measures how much each attention and MLP block moves the
//!   probability of the competing tokens;
//! - [`patching`] swaps one component's output at the final prompt position
//!   with an activation from a clean donor prompt (same model) or from the
//!   clean model (cross-model) and records the probability shift;
//! - [`analysis`] bins those shifts, counts steering successes and ranks
//!   components per source token.

pub mod analysis;
pub mod config;
pub mod corpus;
pub mod error;
pub mod fsutil;
pub mod logitlens;
pub mod model;
pub mod nn;
pub mod patching;
pub mod pipeline;
pub mod verify;

pub use error::{ProbeError, Result};
