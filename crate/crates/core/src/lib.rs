//! Ensembles of low-rank expert adapters.
//!
//! A base adapter is tuned on the full instruction corpus, per-instance
//! instruction gradients are turned into unit directions, BIRCH clusters
//! them, one expert adapter is tuned per cluster, and at inference the
//! experts' logits are mixed with weights derived from gradient similarity.

// `!(x > 0.0)` is how NaN gets rejected along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![cfg_attr(test, allow(clippy::needless_range_loop))]

pub mod adapters;
pub mod checkpoint;
pub mod clusterer;
pub mod corpus;
pub mod ensemble;
pub mod error;
pub mod gradfeat;
pub mod model;
pub mod pipeline;
pub mod router;
pub mod seeding;
pub mod trainer;

pub use error::{Error, Result};
