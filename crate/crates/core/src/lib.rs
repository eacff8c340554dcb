//! Grid-world spatial planning, end to end: synthetic navigation and
//! manipulation environments, classical shortest-path oracles, a
//! transformer model that regresses whole-map action distances in a fixed
//! number of attention layers, a convolutional value-propagation baseline,
//! and an end-to-end mapper trained through a frozen planner without map
//! supervision.

pub mod autodiff;
pub mod error;
pub mod e2e;
pub mod eval;
pub mod grid;
pub mod mapgen;
pub mod oracle;
pub mod rng;
pub mod spt;
pub mod train;
pub mod vin;

pub use error::{Error, Result};
