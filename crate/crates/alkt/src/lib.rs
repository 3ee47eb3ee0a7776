//! Active learning with teacher-student knowledge-transfer uncertainty.
//!
//! Each AL cycle jointly trains a task model (teacher) and a shallower
//! student with an attention-transfer loss, scores unlabeled samples by the
//! KL divergence between the two posteriors, and annotates the top-M most
//! uncertain samples from a random candidate subset.

pub mod config;
pub mod datasets;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod nets;
pub mod optim;
pub mod selection;
pub mod selftest;
pub mod tensor;
pub mod uncertainty;

pub use error::{AlktError, Result};
