//! Metrics, experiment drivers, qualitative dumps and the gradient-check registry.

pub mod config;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod qualitative;

pub use config::{ExperimentConfig, ExperimentKind};
pub use experiment::{
    dump_qualitative, mean_noise, mean_split, mean_std, noisy_copy, run_backbone_sweep, run_condition_splits, run_noise_sweep,
    run_qualitative, write_if_changed, BackboneRow, CellKey, CellResult, NoiseRow, QualitativeRow, SplitRow, Workspace,
};
pub use gradcheck::{grad_check, GRAD_CHECK_OPS};
pub use metrics::{compute_miou, MetricsReport, MiouAccumulator};
