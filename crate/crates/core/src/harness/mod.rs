//! Experiment drivers: configs for the four model variants, the training
//! loop, evaluation, the ablation table, the convergence study and a quick
//! invariant self-test.

mod ablation;
mod config;
mod eval;
mod selftest;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use ablation::{
    repetition_config, run_ablation, write_ablation_csv, AblationRow, AblationSummary,
};
pub use config::{
    DatasetSpec, EvalSettings, ExperimentConfig, PriorSpec, RunPaths, Seeds, System, Variant,
};
pub use eval::{evaluate, forecast, write_plot_data, EvalMetrics};
pub use selftest::{selftest, toy_problem, CheckResult, ToyProblem};
pub use train::{
    apply_update, batch_loss, loss_and_gradients, new_adam, relative_grid, run_training,
    LoadedCheckpoint, MetricsRow, Model, TrainingOutcome,
};

use crate::error::Result;
use crate::sde::{convergence_study, ConvergenceReport, Oracle};

/// Folds `parts` into `base` with the SplitMix64 finalizer, giving
/// well-separated seeds for each (epoch, step, sequence, ...) coordinate.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    pub oracle: Oracle,
    pub dts: Vec<f64>,
    pub horizon: f64,
    pub samples: usize,
    pub seed: u64,
}

impl ConvergenceConfig {
    /// Step sizes `2^-4 .. 2^-9` over `[0, 1]` with 256 paths.
    pub fn standard(oracle: Oracle) -> Self {
        Self {
            oracle,
            dts: (4..=9).map(|p| 2f64.powi(-p)).collect(),
            horizon: 1.0,
            samples: 256,
            seed: 0,
        }
    }
}

/// Runs the strong-convergence study and, with `out`, writes the report as JSON.
pub fn run_convergence(cfg: &ConvergenceConfig, out: Option<&Path>) -> Result<ConvergenceReport> {
    let report = convergence_study(cfg.oracle, &cfg.dts, cfg.horizon, cfg.samples, cfg.seed)?;
    if let Some(path) = out {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}
