//! Error bounds, toy-problem oracles and rollout comparisons.

pub mod bounds;
pub mod compare;
pub mod oracle;
pub mod suite;

pub use bounds::{fm_bound, fm_limit, operator_bound, operator_limit, FmErrorModel, OperatorErrorModel};
pub use compare::{empirical_rollout_compare, ComparisonReport, TrainingBudget};
pub use oracle::{continuity_check, posterior_mean_oracle, BinGrid, ContinuityReport, OracleReport, TestFunction, ToyJoint};
