use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Variant};
use super::train::{batch_loss, Model};
use super::{run_convergence, ConvergenceConfig};
use crate::bnn::{init_posterior, Activation, MlpArch, PosteriorVars};
use crate::checkpoint::Checkpoint;
use crate::datagen::{generate_lotka_volterra, ObservationSequence};
use crate::diffcore::{finite_diff_check, finite_diff_check_many, Tensor};
use crate::error::Result;
use crate::optim::{AdamConfig, AdamState};
use crate::pacloss::{
    bound_chain, empirical_risk, log_uniform_bound, path_kl, LogLikTable, PacConfig,
};
use crate::sde::{DiffusionSpec, Oracle, TimeGrid};

/// A one-sequence Lotka-Volterra problem small enough for finite
/// differences: the hybrid PAC model with a [2,8,2] drift net and the first
/// `len` observations of the first training window.
pub struct ToyProblem {
    pub config: ExperimentConfig,
    pub model: Model,
    pub sequence: ObservationSequence,
    pub pac: PacConfig,
}

pub fn toy_problem(len: usize, seed: u64) -> Result<ToyProblem> {
    let mut config = ExperimentConfig::lotka_volterra_default(Variant::EPacBayesHybrid);
    config.arch = MlpArch::new(vec![2, 8, 2], Activation::Softplus);
    config.samples = 4;
    config.seeds.init = seed;
    let data = generate_lotka_volterra(config.seeds.data)?;
    let sequence = data.train.sequences[0].window(0, len)?;
    let model = Model::build(&config, init_posterior(&config.arch, seed)?)?;
    let pac = PacConfig::new(config.delta, 10, config.samples, len - 1)?;
    Ok(ToyProblem {
        config,
        model,
        sequence,
        pac,
    })
}

impl ToyProblem {
    /// Flat parameter tensors in canonical key order.
    pub fn parameters(&self) -> Vec<Tensor> {
        self.model
            .posterior()
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect()
    }

    /// Maximum relative error of the full objective gradient against central
    /// differences with frozen rollout noise.
    pub fn gradient_error(&self, step: f64, noise_seed: u64) -> Result<f64> {
        let arch = self.model.posterior().arch().clone();
        finite_diff_check_many(
            |tape, vars| {
                let net = PosteriorVars::from_vars(&arch, vars)?;
                let loss = batch_loss(
                    tape,
                    &net,
                    &self.model,
                    &[&self.sequence],
                    self.config.samples,
                    &self.pac,
                    true,
                    noise_seed,
                )?;
                Ok(loss.total)
            },
            &self.parameters(),
            step,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, outcome: Result<(bool, String)>) -> CheckResult {
    let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Quick invariant suite: finite-difference gradients, closed-form path KL,
/// bound ordering, Adam's first step, checkpoint round trip and Euler order.
pub fn selftest() -> Vec<CheckResult> {
    vec![
        check(
            "op_gradients",
            (|| {
                let x0 = Tensor::vector(vec![0.3, -1.2, 2.0]);
                let err = finite_diff_check(
                    |_, x| x.softplus()?.square()?.add_scalar(1.0)?.log()?.exp()?.sum(),
                    &x0,
                    1e-5,
                )?;
                Ok((err < 1e-6, format!("max relative error {err:.2e}")))
            })(),
        ),
        check(
            "training_loss_gradient",
            (|| {
                let toy = toy_problem(6, 3)?;
                let err = toy.gradient_error(1e-5, 11)?;
                Ok((err < 1e-4, format!("max relative error {err:.2e}")))
            })(),
        ),
        check(
            "path_kl_closed_form",
            (|| {
                let grid = TimeGrid::new(vec![0.0, 0.2, 0.25, 0.9, 1.3])?;
                let (c, g) = (1.7, 0.6);
                let kl = path_kl(
                    &Tensor::full(&[3, 4, 1], c),
                    &grid,
                    &DiffusionSpec::new(vec![g])?,
                )?;
                let want = 0.5 * 1.3 * c * c / (g * g);
                let rel = (kl - want).abs() / want;
                Ok((rel < 1e-12, format!("relative error {rel:.2e}")))
            })(),
        ),
        check(
            "bound_chain",
            (|| {
                let toy = toy_problem(6, 5)?;
                let log_bound = log_uniform_bound(&toy.model.likelihood, 5);
                let gaps = [0.2, 4.9, 1.5, 25.4, 0.9, 0.6];
                let table =
                    LogLikTable::new(gaps.iter().map(|g| log_bound - g).collect(), 2, 3, 5)?;
                let b = bound_chain(&table, &toy.model.likelihood, 3.0, &toy.pac)?;
                let risk = empirical_risk(&table, log_bound);
                let ok = b.linear <= b.marginal
                    && b.marginal <= b.jensen + 1e-12
                    && (0.0..=1.0).contains(&risk);
                Ok((
                    ok,
                    format!("{:.4} <= {:.4} <= {:.4}", b.linear, b.marginal, b.jensen),
                ))
            })(),
        ),
        check(
            "adam_first_step",
            (|| {
                let mut p = Tensor::vector(vec![0.0]);
                let mut adam = AdamState::new(AdamConfig::default(), &[("w".to_string(), &p)])?;
                adam.step(
                    &mut [("w".to_string(), &mut p)],
                    &[Tensor::vector(vec![1.0])],
                )?;
                let want = -1e-3 / (1.0 + 1e-8);
                Ok((
                    (p.item() - want).abs() < 1e-15,
                    format!("moved by {:.6e}", p.item()),
                ))
            })(),
        ),
        check(
            "checkpoint_round_trip",
            (|| {
                let toy = toy_problem(6, 7)?;
                let ck = toy.model.to_checkpoint(&toy.config, None, 0, 0);
                let back = Model::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()?)?)?;
                Ok((
                    back.model == toy.model,
                    "model rebuilt from bytes".to_string(),
                ))
            })(),
        ),
        check(
            "euler_order_deterministic",
            (|| {
                let mut cfg = ConvergenceConfig::standard(Oracle::default_linear());
                cfg.samples = 1;
                let r = run_convergence(&cfg, None)?;
                Ok((r.slope >= 0.95, format!("slope {:.3}", r.slope)))
            })(),
        ),
    ]
}
