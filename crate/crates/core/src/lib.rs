//! Duration-matched privileged soft targets for knowledge distillation.
//!
//! Original training words are paired with pool words of identical duration
//! structure; the pool word's teacher posteriors, frame-aligned to the
//! original word, become an extra soft-target view for student training.

pub mod cli;
pub mod corpus;
pub mod distill;
pub mod index;
pub mod io;
pub mod matcher;
pub mod sim;
pub mod targets;
