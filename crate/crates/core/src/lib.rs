//! Instructable perceptual rewards on a 2D tabletop.
//!
//! The crate covers the whole pipeline: a rule grammar that turns narration
//! into (subject, relation, object) triples, synthetic narrated demonstrations,
//! a BiLSTM-attention relation detector trained with a contrastive hinge over
//! hard negatives mined from demonstration dynamics, analysis-by-synthesis goal
//! sampling, and DQN pick-and-place policies driven by the learned reward.
//!
//! Data-parallel loops (benchmark evaluation, goal sampling, policy
//! evaluation, minibatch gradients) go through [`exec`], which uses rayon when
//! the `parallel` feature is enabled and runs sequentially otherwise. Results
//! are always collected in index order, so both paths are bitwise identical.

pub mod checkpoint;
pub mod config;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod langparse;
pub mod narrate;
pub mod nn;
pub mod policy;
pub mod rng;
pub mod synthesis;
pub mod world;

#[cfg(test)]
mod invariants;

pub use error::{Error, ParseError, Result};
pub use exec::Execution;
