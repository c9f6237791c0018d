//! Downstream evaluation of frozen features: attention-based MIL over bags,
//! discrete-time survival, linear probing, nearest-neighbor retrieval, and
//! the stratified splits feeding all of them.

pub mod abmil;
pub mod probe;
pub mod retrieval;
pub mod split;
pub mod survival;

pub use abmil::{
    abmil_forward, init_abmil, train_abmil, train_abmil_survival, AbmilConfig, FeatureBag,
};
pub use probe::{train_linear_probe, LinearProbeConfig, ProbeData};
pub use retrieval::{acc_at_k, Normalization, RetrievalIndex};
pub use split::{stratified_split, stratified_split_survival, StratifiedSplit};
pub use survival::{
    assign_bin, bin_survival_times, c_index, nll_surv_graph, nll_surv_loss, BinSpec,
    SurvivalRecord, N_BINS,
};

/// One line of a training trace, emitted as line-delimited JSON by the CLI.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Absent when no validation set was supplied.
    pub val_loss: Option<f64>,
}
