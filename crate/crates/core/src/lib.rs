//! Cross-modal image registration via coarse-to-fine feature flow.
//!
//! The pipeline registers an image pair that shares geometry but not
//! appearance (e.g. two imaging modalities of the same scene). It runs in
//! three stages:
//!
//! 1. a shared convolutional encoder produces feature pyramids at 1/2, 1/4
//!    and 1/8 resolution for both images ([`encoder`]),
//! 2. the 1/8 features are enhanced with self/cross attention, correlated
//!    globally, and turned into an initial coarse flow by soft-argmax
//!    ([`coarse`]),
//! 3. per-coarse-pixel feature windows from the finer levels are fused
//!    ([`fine`]) and the flow is refined iteratively: warp, feature
//!    discrepancy, discrepancy-weighted flow attention, residual update,
//!    confidence-guided smoothing ([`refine`]).
//!
//! Everything is built on a small reverse-mode autodiff tape over dense
//! `f64` tensors ([`tensor`]), trained with decoupled-weight-decay Adam
//! ([`trainer`]) on deterministic synthetic cross-modal pairs ([`synth`]),
//! and evaluated with end-point-error metrics ([`metrics`]).
//!
//! All computation is deterministic: a (seed, config, dataset) triple
//! reproduces training bit for bit.

pub mod attention;
pub mod coarse;
pub mod encoder;
pub mod error;
pub mod fine;
pub mod flow;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod precise;
pub mod refine;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{CrftError, Result};
pub use flow::{FlowField, Resolution};
pub use tensor::{Tape, Tensor, TensorId};
