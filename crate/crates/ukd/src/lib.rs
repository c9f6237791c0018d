//! Unified knowledge distillation for pathology-style foundation models,
//! at desk scale.
//!
//! The crate pretrains a small vision transformer with three simultaneous
//! objectives: self-distillation between a student and an EMA teacher over
//! multi-crop views, masked-patch prediction against the EMA teacher, and
//! expert distillation from frozen external teacher networks. Around the
//! pretraining core sit the downstream evaluation tools used to compare
//! feature extractors: attention-based MIL classification, discrete-time
//! survival, linear probing, nearest-neighbor retrieval, and a statistics
//! layer (bootstrap intervals, signed-rank tests, average ranks with a
//! critical-difference threshold).
//!
//! Everything runs on a hand-rolled reverse-mode autodiff tape over `f64`
//! host vectors ([`tensor`]), deterministic given a seed: same seed, same
//! bytes out.
//!
//! Start with the runnable programs in `examples/`; the `ukd` binary wraps
//! the same library surface as subcommands.

pub mod backbone;
pub mod cli;
pub mod error;
pub mod eval;
pub mod expert;
pub mod io;
pub mod selfdistill;
pub(crate) mod interp;
pub mod nn;
pub mod pretrain;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod tensor;

pub use error::{Result, UkdError};
