//! File formats and dataset plumbing: the binary feature store, its JSONL
//! manifest, synthetic dataset generators, and run configuration.

mod feature_store;
mod manifest;
mod runconfig;

pub use feature_store::FeatureStore;
pub use manifest::{read_manifest, validate_manifest, write_manifest, ManifestEntry};
pub use runconfig::{EvalSection, GenSection, PathsSection, RunConfig, TrainSection, MODULES};
