//! Design-based estimation for incomplete block designs.
//!
//! Treatments are 0-based indices throughout the library API; files and the CLI use
//! 1-based labels.

pub mod design;
pub mod error;
pub mod estimate;
pub mod harness;
pub mod numeric;
pub mod oracle;
pub mod population;
pub mod randomize;
pub mod variance;

pub use design::{
    build_design, check_bibd, conditional_probs, incidence, AdjustedProbTable, BibdStatus,
    DesignSpec, IncidenceSummary,
};
pub use error::{Error, Result};
pub use randomize::{
    assign, assign_stage1, assign_stage2, count_assignments, enumerate_assignments, Assignment,
    AssignmentDistribution, SubsetAssignment,
};
pub use estimate::{
    adjusted, hajek, ht, EstimateReport, EstimatorKind, ObsRow, ObservedData, Validation,
};
pub use harness::{
    analyze_dataset, run_monte_carlo, se_ratio_sweep, AnalysisPlan, MetricsReport, Scenario,
    ScenarioConfig, Setting,
};
pub use oracle::{verify, IdentityCheck, VerifyOptions};
pub use population::{
    estimand, true_cov_ht, true_var_adjusted, true_var_bibd, Contrast, PotentialOutcomes,
    WeightKind, Weights,
};
pub use variance::{
    adjusted_var, confidence_interval, cov_bb, cov_wb, CovEstimate, CovKind, Flavor,
    IntervalReport,
};
