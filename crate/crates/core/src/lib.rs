//! Multi-granularity cross-modal alignment on synthetic paired data.
//!
//! Two small transformer towers encode patch grids and token sequences.
//! Training combines three contrastive objectives: instance-level InfoNCE
//! between global embeddings, token-level InfoNCE between each token and
//! its cross-attended counterpart, and swapped prototype prediction
//! supervised by Sinkhorn-Knopp codes.

pub mod config;
pub mod encoders;
mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod params;
pub mod rng;
pub mod sinkhorn;
pub mod synth;
pub mod trainer;

pub use config::{EvalConfig, RunConfig, TrainConfig};
pub use encoders::EncoderConfig;
pub use error::{MgcaError, Result};
pub use losses::{LossBreakdown, LossConfig};
pub use params::ParamStore;
pub use sinkhorn::SinkhornConfig;
pub use synth::{Dataset, SynthConfig};
pub use trainer::TrainState;
