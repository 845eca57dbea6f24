//! Simulation scenarios, the Monte Carlo engine, and the complete-block data pipeline.

pub mod dataset;
pub mod monte_carlo;
pub mod scenario;

pub use dataset::{
    analyze_dataset, cbd_block_difference, read_dataset, subsample_cbd, AnalysisPlan, DatasetReport,
    DatasetRow, ReportRow, Subsample, SubsampleMode, SubsampleSpec,
};
pub use monte_carlo::{
    run_monte_carlo, run_on_population, sd_ratio, se_ratio_sweep, IntervalMetrics, MetricsReport,
    PointMetrics, SeRatio, SweepRow,
};
pub use scenario::{exchangeable_errors, Population, Scenario, ScenarioConfig, Setting};

use crate::error::{Error, Result};

/// Environment variable holding the number of worker threads.
pub const WORKERS_ENV: &str = "IBD_WORKERS";

/// Thread pool sized by [`WORKERS_ENV`], or by rayon's default when unset.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("{WORKERS_ENV}={v:?} is not a count")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

/// Split a seed into independent sub-seeds (splitmix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
