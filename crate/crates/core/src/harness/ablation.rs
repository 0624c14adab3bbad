use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, PriorSpec, Variant};
use super::eval::{evaluate, EvalMetrics};
use super::train::run_training;
use crate::datagen::GeneratedData;
use crate::error::{Error, Result};
use crate::priors::PriorKind;

/// One row group of the ablation table: the prior knowledge given to the
/// model and the variants trained with it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub prior: PriorSpec,
    pub variants: Vec<Variant>,
}

impl AblationRow {
    /// Row that reveals equation `eq` of the Lorenz system with its
    /// parameter distorted by unit Gaussian noise.
    pub fn lorenz_equation(eq: usize) -> Self {
        let mut gamma = vec![0.0; 3];
        gamma[eq] = 1.0;
        Self {
            name: format!("gamma_eq{}", eq + 1),
            prior: PriorSpec {
                kind: PriorKind::Lorenz,
                params: None,
                gamma,
                perturb_std: 1.0,
                perturb_components: Some(vec![eq]),
            },
            variants: vec![Variant::EBayesHybrid, Variant::EPacBayesHybrid],
        }
    }

    pub fn none(dim: usize) -> Self {
        Self {
            name: "none".into(),
            prior: PriorSpec::zero(dim),
            variants: vec![Variant::EBayes, Variant::EPacBayes],
        }
    }

    /// Full prior with every parameter distorted; trained as the PAC hybrid.
    pub fn lorenz_full() -> Self {
        Self {
            name: "gamma_all".into(),
            prior: PriorSpec {
                kind: PriorKind::Lorenz,
                params: None,
                gamma: vec![1.0; 3],
                perturb_std: 1.0,
                perturb_components: None,
            },
            variants: vec![Variant::EPacBayesHybrid],
        }
    }

    /// The five row groups of the Lorenz ablation.
    pub fn lorenz_table() -> Vec<Self> {
        let mut rows = vec![Self::none(3)];
        rows.extend((0..3).map(Self::lorenz_equation));
        rows.push(Self::lorenz_full());
        rows
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub prior_row: String,
    pub variant: Variant,
    pub mse_mean: f64,
    pub mse_stderr: f64,
    pub nll_mean: f64,
    pub nll_stderr: f64,
    pub n_ok: usize,
    /// Per-repetition results; `None` where the repetition failed.
    #[serde(skip)]
    pub runs: Vec<Option<EvalMetrics>>,
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Configuration of repetition `rep` of `variant` under `row`. The dataset
/// stays fixed; initialization, training noise and prior distortion seeds
/// move with the repetition.
pub fn repetition_config(
    base: &ExperimentConfig,
    row: &AblationRow,
    variant: Variant,
    rep: usize,
) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.variant = variant;
    cfg.prior = row.prior.clone();
    let r = rep as u64;
    cfg.seeds.init = base.seeds.init.wrapping_add(1000 * r);
    cfg.seeds.train = base.seeds.train.wrapping_add(1000 * r);
    cfg.seeds.perturb = base.seeds.perturb.wrapping_add(1000 * r);
    cfg.seeds.eval = base.seeds.eval.wrapping_add(1000 * r);
    cfg
}

/// Trains and evaluates every (row, variant, repetition) combination in
/// parallel on one generated dataset. A failed repetition is reported on
/// stderr and left out of the aggregates.
pub fn run_ablation(
    base: &ExperimentConfig,
    data: &GeneratedData,
    rows: &[AblationRow],
    reps: usize,
) -> Result<Vec<AblationSummary>> {
    if reps < 2 {
        return Err(Error::Config(format!(
            "ablation needs at least 2 repetitions, got {reps}"
        )));
    }
    let jobs: Vec<(usize, Variant, usize)> = rows
        .iter()
        .enumerate()
        .flat_map(|(i, row)| {
            row.variants
                .iter()
                .flat_map(move |&v| (0..reps).map(move |r| (i, v, r)))
        })
        .collect();
    for (i, v, _) in &jobs {
        repetition_config(base, &rows[*i], *v, 0).validate()?;
    }
    let results: Vec<Result<EvalMetrics>> = jobs
        .par_iter()
        .map(|&(i, v, r)| {
            let cfg = repetition_config(base, &rows[i], v, r);
            let trained = run_training(&cfg, &data.train, None)?;
            evaluate(
                &trained.model,
                &data.test,
                cfg.eval.samples,
                cfg.eval.horizon,
                cfg.seeds.eval,
            )
        })
        .collect();

    let mut summaries: Vec<AblationSummary> = Vec::new();
    for ((i, v, r), res) in jobs.iter().zip(results) {
        let run = match res {
            Ok(m) => Some(m),
            Err(e) => {
                eprintln!(
                    "warning: {} / {} repetition {r} failed: {e}",
                    rows[*i].name,
                    v.name()
                );
                None
            }
        };
        match summaries.last_mut() {
            Some(s) if s.prior_row == rows[*i].name && s.variant == *v => s.runs.push(run),
            _ => summaries.push(AblationSummary {
                prior_row: rows[*i].name.clone(),
                variant: *v,
                mse_mean: 0.0,
                mse_stderr: 0.0,
                nll_mean: 0.0,
                nll_stderr: 0.0,
                n_ok: 0,
                runs: vec![run],
            }),
        }
    }
    for s in &mut summaries {
        let ok: Vec<&EvalMetrics> = s.runs.iter().flatten().collect();
        let mse: Vec<f64> = ok.iter().map(|m| m.mse).collect();
        let nll: Vec<f64> = ok.iter().map(|m| m.nll).collect();
        (s.mse_mean, s.mse_stderr) = mean_stderr(&mse);
        (s.nll_mean, s.nll_stderr) = mean_stderr(&nll);
        s.n_ok = ok.len();
    }
    Ok(summaries)
}

pub fn write_ablation_csv(path: &Path, summaries: &[AblationSummary]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "prior_row,variant,mse_mean,mse_stderr,nll_mean,nll_stderr,n_ok"
    )?;
    for s in summaries {
        writeln!(
            out,
            "{},{},{:e},{:e},{:e},{:e},{}",
            s.prior_row,
            s.variant.name(),
            s.mse_mean,
            s.mse_stderr,
            s.nll_mean,
            s.nll_stderr,
            s.n_ok
        )?;
    }
    out.flush()?;
    Ok(())
}
