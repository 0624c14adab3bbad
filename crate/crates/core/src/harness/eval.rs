use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use super::train::{relative_grid, Model};
use crate::datagen::{Dataset, ObservationSequence};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::pacloss::{mc_marginal_nll, LogLikTable};
use crate::sde::repeat_rows;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Squared error of the Monte-Carlo mean trajectory, averaged over
    /// sequences, predicted steps and dimensions.
    pub mse: f64,
    /// Squared error averaged over individual rollouts as well.
    pub mse_per_sample: f64,
    /// Mean over sequences of the Monte-Carlo marginal negative log-likelihood.
    pub nll: f64,
    pub sequences: usize,
    pub horizon: usize,
    pub samples: usize,
}

/// `samples` rollouts of `horizon` steps from the first observation of
/// `seq`, as `[samples×(horizon+1)×P]`.
pub fn forecast(
    model: &Model,
    seq: &ObservationSequence,
    horizon: usize,
    samples: usize,
    seed: u64,
) -> Result<Tensor> {
    if seq.dim() != model.dim() {
        return Err(Error::invalid(format!(
            "sequence has dimension {}, model has {}",
            seq.dim(),
            model.dim()
        )));
    }
    if horizon == 0 || horizon >= seq.len() {
        return Err(Error::invalid(format!(
            "horizon {horizon} must lie in 1..{} for a sequence of length {}",
            seq.len(),
            seq.len()
        )));
    }
    let grid = relative_grid(seq, horizon + 1)?;
    let h0 = repeat_rows(&[seq.values.row(0).to_vec()], samples)?;
    model.sde.rollout(&h0, &grid, seed)
}

struct SequenceScore {
    sq_mean: f64,
    sq_sample: f64,
    nll: f64,
}

fn score(
    model: &Model,
    seq: &ObservationSequence,
    horizon: usize,
    samples: usize,
    seed: u64,
) -> Result<SequenceScore> {
    let states = forecast(model, seq, horizon, samples, seed)?;
    let p = model.dim();
    let len = horizon + 1;
    let obs = seq.window(0, len)?.values;
    let mut sq_mean = 0.0;
    let mut sq_sample = 0.0;
    for k in 1..len {
        for d in 0..p {
            let y = obs.row(k)[d];
            let mut mean = 0.0;
            for s in 0..samples {
                let h = states.data()[(s * len + k) * p + d];
                mean += h;
                sq_sample += (h - y).powi(2);
            }
            mean /= samples as f64;
            sq_mean += (mean - y).powi(2);
        }
    }
    let table = LogLikTable::from_states(&states, std::slice::from_ref(&obs), &model.likelihood)?;
    Ok(SequenceScore {
        sq_mean,
        sq_sample: sq_sample / samples as f64,
        nll: mc_marginal_nll(&table)?,
    })
}

/// Forecasts every test sequence from its first observation and scores
/// steps `1..=horizon` (default: the whole sequence). Sequences are scored
/// in parallel and reduced in index order.
pub fn evaluate(
    model: &Model,
    test: &Dataset,
    samples: usize,
    horizon: Option<usize>,
    seed: u64,
) -> Result<EvalMetrics> {
    if test.is_empty() || samples == 0 {
        return Err(Error::invalid(
            "evaluation needs at least one sequence and one sample",
        ));
    }
    let horizon =
        horizon.unwrap_or_else(|| test.sequences.iter().map(|s| s.len()).min().unwrap() - 1);
    let scores: Vec<Result<SequenceScore>> = test
        .sequences
        .par_iter()
        .enumerate()
        .map(|(i, seq)| score(model, seq, horizon, samples, derive_seed(seed, &[i as u64])))
        .collect();
    let mut totals = (0.0, 0.0, 0.0);
    for s in scores {
        let s = s?;
        totals.0 += s.sq_mean;
        totals.1 += s.sq_sample;
        totals.2 += s.nll;
    }
    let n = test.len() as f64;
    let cells = n * horizon as f64 * model.dim() as f64;
    Ok(EvalMetrics {
        mse: totals.0 / cells,
        mse_per_sample: totals.1 / cells,
        nll: totals.2 / n,
        sequences: test.len(),
        horizon,
        samples,
    })
}

/// Writes mean, standard deviation and a ±2σ envelope of `trajectories`
/// rollouts from the start of `seq`, beside the observations, one row per
/// (time, dimension).
pub fn write_plot_data(
    path: &Path,
    model: &Model,
    seq: &ObservationSequence,
    horizon: usize,
    trajectories: usize,
    seed: u64,
) -> Result<()> {
    if trajectories < 2 {
        return Err(Error::invalid("plot data needs at least two trajectories"));
    }
    let states = forecast(model, seq, horizon, trajectories, seed)?;
    let p = model.dim();
    let len = horizon + 1;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "t,dim,observed,mean,std,lower,upper")?;
    for k in 0..len {
        for d in 0..p {
            let xs: Vec<f64> = (0..trajectories)
                .map(|s| states.data()[(s * len + k) * p + d])
                .collect();
            let mean = xs.iter().sum::<f64>() / trajectories as f64;
            let var =
                xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (trajectories - 1) as f64;
            let sd = var.sqrt();
            writeln!(
                out,
                "{:e},{d},{:e},{mean:e},{sd:e},{:e},{:e}",
                seq.grid.times()[k],
                seq.values.row(k)[d],
                mean - 2.0 * sd,
                mean + 2.0 * sd
            )?;
        }
    }
    out.flush()?;
    Ok(())
}
