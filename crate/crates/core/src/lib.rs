//! Infrared/visible image fusion guided by semantic priors mined from two
//! per-modality segmentation pilots.

pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod encoder;
pub mod error;
pub mod freqprobe;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod mraf;
pub mod nn;
mod ops;
pub mod optim;
pub mod pilot;
pub mod rfam;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
