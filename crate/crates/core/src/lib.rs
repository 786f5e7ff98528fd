//! Offline model-based optimization with learning-to-rank surrogates.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffnet`]: a small dense network with hand-written backprop and Adam.
//! - [`losses`]: ten pointwise, pairwise and listwise ranking losses with
//!   analytic gradients.
//! - [`metrics`]: AUPCC, precision@k, Spearman, NDCG and MSE.
//! - [`data`]: offline datasets, z-scoring, splits and list augmentation.
//! - [`trainer`]: surrogate training over ranked lists with best-epoch selection.
//! - [`searcher`]: output adaptation and gradient ascent over designs.
//! - [`bench`]: synthetic tasks with exact oracles, the heavy-tailed linear
//!   experiment and the generalization-bound calculator.
//! - [`harness`]: experiment configs, the end-to-end pipeline, the
//!   metric/score correlation study and report emission.
//!
//! Data-parallel loops (independent runs, ascent trajectories, sweep cells)
//! go through [`par`], which uses rayon when the `parallel` feature is on
//! and plain iterators otherwise. Every result is reduced in a fixed order,
//! so output is identical either way.

pub mod bench;
pub mod data;
pub mod diffnet;
mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod par;
pub mod searcher;
pub mod trainer;

pub use error::{Error, Result};
