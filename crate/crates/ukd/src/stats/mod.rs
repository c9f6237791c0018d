//! Metric kernels and the model-comparison statistics behind the
//! benchmark harness: balanced accuracy, weighted F1, AUC, nonparametric
//! bootstrap intervals, Wilcoxon signed-rank tests, average-rank
//! aggregation, and Nemenyi critical differences.

pub mod bootstrap;
pub mod metrics;
pub mod qtable;
pub mod ranks;
pub mod wilcoxon;

pub use bootstrap::{bootstrap, MetricReport};
pub use metrics::{auc_binary, auc_macro_ovr, balanced_accuracy, weighted_f1};
pub use qtable::q_crit;
pub use ranks::{
    average_ranks, compare_models, nemenyi_cd, read_rank_csv, BenchmarkReport, CdResult,
    RankMatrix,
};
pub use wilcoxon::{wilcoxon_signed_rank, Alternative, WilcoxonResult};
