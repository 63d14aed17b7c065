//! Trimap-based image matting at desk scale: data synthesis, a small
//! encoder-decoder with alignment operators and residual refinement,
//! prior-weighted losses, the four standard matting metrics and a
//! deterministic training harness.

pub mod augment;
pub mod compose;
pub mod dgm;
mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod pngio;
mod raster;
pub mod rng;
pub mod synth;
pub mod trimap;

pub use compose::composite;
pub use error::{Error, Result};
pub use raster::{AlphaMatte, Image};
pub use trimap::{Trimap, TrimapLabel};
