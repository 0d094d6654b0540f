//! Cohort-augmented learning on behaviour sequences.
//!
//! A frozen auxiliary encoder maps every training sample to a burn-in vector stored
//! in a labeled [`vecpool::VectorPool`]. Each target then retrieves its nearest
//! neighbours (its cohort), and the main model aggregates their transformed vectors
//! with bilinear attention before predicting. A contrastive loss on prediction logits
//! separates the target from opposite-label neighbours.

pub mod augment;
pub mod autodiff;
pub mod bench;
pub mod cohort;
pub mod config;
pub mod datagen;
pub mod encoders;
pub mod metrics;
pub mod objectives;
pub mod pipeline;
pub mod vecpool;
