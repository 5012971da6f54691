//! Neural cellular automata segmentation with per-domain adapters.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: tensors, random streams and the reverse-mode tape.
//! - [`nca`]: the two-level coarse-to-fine NCA backbone.
//! - [`adapt`]: domain adapters, freeze policies, parameter accounting and
//!   variance-based head selection.
//! - [`train`]: loss, Adam, EWC and the continual training driver.
//! - [`metrics`]: Dice, the stage-by-task Dice matrix and transfer metrics.
//! - [`data`]: the synthetic multi-domain benchmark and the RTI tensor format.
//! - [`persist`] and [`config`]: checkpoints and run configuration.

pub mod adapt;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nca;
pub mod persist;
pub mod train;

pub use error::{Error, ErrorKind, Result};
