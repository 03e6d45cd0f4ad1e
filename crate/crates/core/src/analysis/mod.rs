//! Post-run analytics: per-client accuracy statistics and their density,
//! exact Shapley contributions, and paired t-tests.

mod contribution;
mod shapley;
mod stats;
mod ttest;

pub use contribution::{staleness_contribution_experiment, LevelContribution};
pub use shapley::{shapley, ShapleyReport, MAX_EXACT_PLAYERS};
pub use stats::{accuracy_stats, histogram_pdf, AccuracyStats, Histogram, DENSITY_POINTS};
pub use ttest::{paired_t_test, TTest};
