//! Training loop, experiment plans and report tables.

mod config;
mod experiment;
mod fit;
mod report;

pub use config::{TrainConfig, DESK_LEARNING_RATE};
pub use experiment::{
    constant_prior, effective_jobs, evaluate_constant, evaluate_samples, parallel_map, run_experiment,
    run_generality, run_performance, run_reliability, site_name, ExperimentKind, ExperimentPlan,
    GROUND_TRUTH_METHOD, SEQUENTIAL_ENV,
};
pub use fit::{evaluation_loss, fit, history_csv, sample_gradients, train, EpochRecord, TrainOutcome};
pub use report::{Report, SubjectRecord, Summary};
