//! Joint training from weakly-labeled bags and strongly-labeled instances.
//!
//! The crate provides a small feed-forward classifier with hand-written
//! backpropagation, the supervision schemes that combine slide-level (weak)
//! and patch-level (strong) labels — plain, MIL top-k and self-weighted
//! confidence scaling — covariate-shift reduction (color jitter, stain
//! transfer, MMD, CORAL, gradient reversal), a synthetic Gleason-style
//! bag/instance generator and the slide-level evaluation protocol
//! (ROC AUC, accuracy, Kendall's tau-b over 5-fold cross validation).

pub mod cli;
pub mod error;
pub mod evalmetrics;
pub mod image;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod schemes;
pub mod shift;
pub mod synthdata;

pub use error::{Error, Result};
