//! Correspondence-graph neural visual servoing at desk scale.

pub mod autodiff;
pub mod bench;
pub mod control;
pub mod correspondence;
pub mod env;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod plot;
pub mod policy;
pub mod scene;
pub mod train;

pub use error::{Error, Result};

/// Random generator used by every simulation component.
pub type SimRng = rand_chacha::ChaCha8Rng;
