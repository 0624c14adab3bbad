//! Objective-side math: bounded Gaussian likelihood, Monte-Carlo marginal
//! likelihood, path-space KL, the PAC complexity functional and the chain of
//! bounds that ends in the trainable loss.
//!
//! Sequences and samples are laid out batch-row-major: row `n·S + s` holds
//! sample `s` of sequence `n`. Observation index 0 is the initial condition
//! and is not scored; indices `1..=K` are.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::bnn::{weight_kl_var, PosteriorVars, WeightPrior};
use crate::diffcore::{Tensor, Var};
use crate::error::{Error, Result};
use crate::sde::{DiffusionSpec, LatentPath, TimeGrid};

/// Floor on the observation standard deviation; keeps the density bounded.
pub const MIN_OBS_STD: f64 = 1e-3;

/// Diagonal Gaussian observation model `y ~ N(h, diag(σ²))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodSpec {
    std: Vec<f64>,
    min_std: f64,
}

impl LikelihoodSpec {
    pub fn new(std: Vec<f64>, min_std: f64) -> Result<Self> {
        if !(min_std > 0.0) {
            return Err(Error::invalid(format!(
                "minimum std must be positive, got {min_std}"
            )));
        }
        if let Some(bad) = std.iter().find(|s| !(**s >= min_std) || !s.is_finite()) {
            return Err(Error::invalid(format!(
                "observation std {bad} is below the floor {min_std}"
            )));
        }
        Ok(Self { std, min_std })
    }

    pub fn isotropic(dim: usize, std: f64) -> Result<Self> {
        Self::new(vec![std; dim], MIN_OBS_STD)
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn dim(&self) -> usize {
        self.std.len()
    }

    /// `Σ_d −½ log(2πσ_d²)`: the log-density at the mode.
    pub fn log_mode_density(&self) -> f64 {
        self.std
            .iter()
            .map(|s| -0.5 * (2.0 * PI * s * s).ln())
            .sum()
    }

    fn half_precision(&self) -> Vec<f64> {
        self.std.iter().map(|s| 0.5 / (s * s)).collect()
    }
}

pub fn gaussian_loglik(y: &[f64], h: &[f64], spec: &LikelihoodSpec) -> Result<f64> {
    if y.len() != h.len() || y.len() != spec.dim() {
        return Err(Error::invalid(format!(
            "likelihood dimensions disagree: y {}, h {}, spec {}",
            y.len(),
            h.len(),
            spec.dim()
        )));
    }
    Ok(y.iter()
        .zip(h)
        .zip(spec.std())
        .map(|((y, h), s)| -0.5 * (2.0 * PI * s * s).ln() - (y - h).powi(2) / (2.0 * s * s))
        .sum())
}

/// `K log B̄`, the largest attainable log-likelihood of a `K`-step sequence.
pub fn log_uniform_bound(spec: &LikelihoodSpec, k: usize) -> f64 {
    k as f64 * spec.log_mode_density()
}

/// PAC-Bayes bookkeeping: confidence `δ`, training-set size `N`, Monte-Carlo
/// samples per sequence `S` and scored steps per sequence `K`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacConfig {
    pub delta: f64,
    pub n: usize,
    pub s: usize,
    pub k: usize,
}

impl PacConfig {
    pub fn new(delta: f64, n: usize, s: usize, k: usize) -> Result<Self> {
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::invalid(format!(
                "delta must lie in (0, 1], got {delta}"
            )));
        }
        if n == 0 || s == 0 {
            return Err(Error::invalid("N and S must be at least 1"));
        }
        Ok(Self { delta, n, s, k })
    }

    /// The bound is only proven for `N > 8`.
    pub fn bound_precondition_met(&self) -> bool {
        self.n > 8
    }
}

/// Summed log-likelihood `Σ_k log p(y_k^n | h_k^{n,s})` of every
/// (sequence, sample) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LogLikTable {
    values: Vec<f64>,
    sequences: usize,
    samples: usize,
    steps: usize,
}

impl LogLikTable {
    pub fn new(values: Vec<f64>, sequences: usize, samples: usize, steps: usize) -> Result<Self> {
        if values.len() != sequences * samples || samples == 0 || sequences == 0 {
            return Err(Error::invalid(format!(
                "{} log-likelihoods for {sequences} sequences × {samples} samples",
                values.len()
            )));
        }
        Ok(Self {
            values,
            sequences,
            samples,
            steps,
        })
    }

    /// Scores `[N·S × (K+1) × P]` states against `N` observation windows of
    /// shape `[(K+1) × D]`.
    pub fn from_states(
        states: &Tensor,
        observations: &[Tensor],
        spec: &LikelihoodSpec,
    ) -> Result<Self> {
        let n = observations.len();
        if n == 0 || states.rank() != 3 || !states.shape()[0].is_multiple_of(n) {
            return Err(Error::invalid(format!(
                "cannot split states {:?} across {n} sequences",
                states.shape()
            )));
        }
        let (rows, len, dim) = (states.shape()[0], states.shape()[1], states.shape()[2]);
        let samples = rows / n;
        for obs in observations {
            if obs.shape() != [len, dim] {
                return Err(Error::shape("loglik", obs.shape(), &[len, dim]));
            }
        }
        let mut values = Vec::with_capacity(rows);
        for r in 0..rows {
            let obs = &observations[r / samples];
            let mut total = 0.0;
            for k in 1..len {
                let h = &states.data()[(r * len + k) * dim..(r * len + k + 1) * dim];
                total += gaussian_loglik(obs.row(k), h, spec)?;
            }
            values.push(total);
        }
        Self::new(values, n, samples, len - 1)
    }

    pub fn sequences(&self) -> usize {
        self.sequences
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn per_sequence(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.samples)
    }
}

/// `1 − (1/NS) Σ_n Σ_s exp(Σ_k log p − K log B̄)`, in `[0, 1]`.
pub fn empirical_risk(table: &LogLikTable, log_bound: f64) -> f64 {
    let mean_ratio = table
        .values
        .iter()
        .map(|ll| (ll - log_bound).min(0.0).exp())
        .sum::<f64>()
        / table.values.len() as f64;
    (1.0 - mean_ratio).clamp(0.0, 1.0)
}

fn log_mean_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + (s / xs.len() as f64).ln()
}

/// `−(1/N) Σ_n log((1/S) Σ_s Π_k p(y_k^n | h_k^{n,s}))`, via log-sum-exp.
pub fn mc_marginal_nll(table: &LogLikTable) -> Result<f64> {
    let mut total = 0.0;
    for seq in table.per_sequence() {
        let lme = log_mean_exp(seq);
        if !lme.is_finite() {
            return Err(Error::NonFinite(
                "every sample of a sequence has zero likelihood".into(),
            ));
        }
        total -= lme;
    }
    Ok(total / table.sequences as f64)
}

/// `−(1/NS) Σ_n Σ_s Σ_k log p(y_k^n | h_k^{n,s})`.
pub fn jensen_nll(table: &LogLikTable) -> f64 {
    -table.values.iter().sum::<f64>() / table.values.len() as f64
}

/// `(1/rows) Σ_rows Σ_k ½ f_kᵀ J⁻¹ f_k Δt_k` for drift values `[rows×K×P]`.
pub fn path_kl(drifts: &Tensor, grid: &TimeGrid, diffusion: &DiffusionSpec) -> Result<f64> {
    if drifts.rank() != 3
        || drifts.shape()[1] != grid.steps()
        || drifts.shape()[2] != diffusion.dim()
    {
        return Err(Error::invalid(format!(
            "drift values {:?} do not match {} steps of dimension {}",
            drifts.shape(),
            grid.steps(),
            diffusion.dim()
        )));
    }
    let (rows, k, p) = (drifts.shape()[0], drifts.shape()[1], drifts.shape()[2]);
    let inv = diffusion.inverse_variance();
    let dts = grid.dts();
    let mut total = 0.0;
    for r in 0..rows {
        for (step, dt) in dts.iter().enumerate() {
            let f = &drifts.data()[(r * k + step) * p..(r * k + step + 1) * p];
            let quad: f64 = f.iter().zip(&inv).map(|(f, w)| f * f * w).sum();
            total += 0.5 * quad * dt;
        }
    }
    Ok(total / rows.max(1) as f64)
}

/// Complexity functional `√((KL + log(2√N) − log(δ/2)) / (2N))`.
///
/// Pass `delta / 2` for the confidence-split variant.
pub fn complexity(kl_total: f64, n: usize, delta: f64) -> Result<f64> {
    if kl_total < -1e-9 || !kl_total.is_finite() {
        return Err(Error::invalid(format!(
            "KL must be non-negative, got {kl_total}"
        )));
    }
    let n = n as f64;
    Ok(((kl_total.max(0.0) + complexity_offset(n, delta)) / (2.0 * n)).sqrt())
}

fn complexity_offset(n: f64, delta: f64) -> f64 {
    (2.0 * n.sqrt()).ln() - (delta / 2.0).ln()
}

/// Sampling slack `√(log(2N/δ) / (2S))`.
pub fn hoeffding_slack(pac: &PacConfig) -> f64 {
    ((2.0 * pac.n as f64 / pac.delta).ln() / (2.0 * pac.s as f64)).sqrt()
}

/// Right-hand sides of the three nested upper bounds on the expected true
/// risk, evaluated on one set of shared rollouts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundChain {
    /// Empirical risk + `C_{δ/2}` + sampling slack.
    pub linear: f64,
    /// Monte-Carlo marginal NLL + `C`.
    pub marginal: f64,
    /// Per-sample NLL + `C`.
    pub jensen: f64,
}

pub fn bound_chain(
    table: &LogLikTable,
    spec: &LikelihoodSpec,
    kl_total: f64,
    pac: &PacConfig,
) -> Result<BoundChain> {
    let log_bound = log_uniform_bound(spec, table.steps());
    let c_half = complexity(kl_total, pac.n, pac.delta / 2.0)?;
    let slack = hoeffding_slack(pac);
    let constant = c_half + slack + log_bound;
    Ok(BoundChain {
        linear: empirical_risk(table, log_bound) + c_half + slack,
        marginal: mc_marginal_nll(table)? + constant,
        jensen: jensen_nll(table) + constant,
    })
}

/// Per-step record of the objective and its diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean over (sequence, sample) of the summed log-likelihood.
    pub mll: f64,
    pub kl_path: f64,
    pub kl_weights: f64,
    /// Complexity term of the optimized objective; zero when it is disabled.
    pub complexity: f64,
    pub total: f64,
    /// Empirical risk + `C_{δ/2}` + sampling slack (not differentiated).
    pub pac_bound_linear: f64,
    pub risk_empirical: f64,
    /// `−mll / K`, comparable across sequence lengths.
    pub nll_per_step: f64,
}

/// Differentiable objective plus its diagnostics.
pub struct TrainingLoss<'t> {
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
}

/// Builds `−mll + C_δ(KL_path + KL_weights)` on the tape (the complexity
/// term only when `use_complexity`).
///
/// `observations` holds one `[(K+1)×D]` window per sequence, matching the
/// row layout of `path`.
#[allow(clippy::too_many_arguments)]
pub fn training_loss<'t>(
    path: &LatentPath<'t>,
    observations: &[Tensor],
    spec: &LikelihoodSpec,
    net: Option<&PosteriorVars<'t>>,
    prior: &WeightPrior,
    diffusion: &DiffusionSpec,
    pac: &PacConfig,
    use_complexity: bool,
) -> Result<TrainingLoss<'t>> {
    let tape = path.states[0].tape();
    let rows = path.rows();
    let n_seq = observations.len();
    if n_seq == 0 || !rows.is_multiple_of(n_seq) {
        return Err(Error::invalid(format!(
            "{rows} rollouts cannot be split over {n_seq} sequences"
        )));
    }
    let samples = rows / n_seq;
    let k = path.grid.steps();
    let dim = path.dim();
    if spec.dim() != dim {
        return Err(Error::invalid(format!(
            "likelihood has dimension {}, states have {dim}",
            spec.dim()
        )));
    }
    for obs in observations {
        if obs.shape() != [k + 1, dim] {
            return Err(Error::shape("training_loss", obs.shape(), &[k + 1, dim]));
        }
    }

    // Negative log-likelihood, Jensen form.
    let half_prec = tape.constant(Tensor::vector(spec.half_precision()));
    let mut sq_sum: Option<Var<'t>> = None;
    for step in 1..=k {
        let mut target = Vec::with_capacity(rows * dim);
        for obs in observations {
            for _ in 0..samples {
                target.extend_from_slice(obs.row(step));
            }
        }
        let y = tape.constant(Tensor::raw(vec![rows, dim], target));
        let term = path.states[step]
            .sub(y)?
            .square()?
            .mul_row(half_prec)?
            .sum()?;
        sq_sum = Some(match sq_sum {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    let normalizer = -(k as f64) * spec.log_mode_density();
    let nll = match sq_sum {
        Some(s) => s.scale(1.0 / rows as f64)?.add_scalar(normalizer)?,
        None => tape.scalar(0.0),
    };

    // Path KL, Monte-Carlo/Fubini form.
    let half_inv = tape.constant(Tensor::vector(
        diffusion
            .inverse_variance()
            .iter()
            .map(|w| 0.5 * w)
            .collect(),
    ));
    let mut kl_path: Option<Var<'t>> = None;
    for (step, f) in path.drifts.iter().enumerate() {
        let Some(f) = f else { continue };
        let term = f
            .square()?
            .mul_row(half_inv)?
            .sum()?
            .scale(path.grid.dt(step))?;
        kl_path = Some(match kl_path {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    let kl_path = match kl_path {
        Some(v) => v.scale(1.0 / rows as f64)?,
        None => tape.scalar(0.0),
    };
    let kl_weights = match net {
        Some(net) => weight_kl_var(net, prior)?,
        None => tape.scalar(0.0),
    };
    let kl_total = kl_path.add(kl_weights)?;

    let complexity_term = if use_complexity {
        Some(
            kl_total
                .add_scalar(complexity_offset(pac.n as f64, pac.delta))?
                .scale(1.0 / (2.0 * pac.n as f64))?
                .sqrt()?,
        )
    } else {
        None
    };
    let total = match complexity_term {
        Some(c) => nll.add(c)?,
        None => nll,
    };

    // Diagnostics on the same rollouts.
    let table = LogLikTable::from_states(&path.states_tensor(), observations, spec)?;
    let log_bound = log_uniform_bound(spec, k);
    let risk = empirical_risk(&table, log_bound);
    let kl_value = kl_total.item();
    let diag_pac = PacConfig {
        s: samples,
        k,
        ..*pac
    };
    let linear = risk + complexity(kl_value, pac.n, pac.delta / 2.0)? + hoeffding_slack(&diag_pac);

    let mll = -nll.item();
    Ok(TrainingLoss {
        total,
        breakdown: LossBreakdown {
            mll,
            kl_path: kl_path.item(),
            kl_weights: kl_weights.item(),
            complexity: complexity_term.map_or(0.0, |c| c.item()),
            total: total.item(),
            pac_bound_linear: linear,
            risk_empirical: risk,
            nll_per_step: if k > 0 { -mll / k as f64 } else { 0.0 },
        },
    })
}

/// Fractions of consecutive steps where a recorded bound strictly decreased
/// and where it did not increase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub strict_decrease: f64,
    pub non_increase: f64,
}

pub fn tied_gradient_audit(bound_trace: &[f64]) -> Result<AuditReport> {
    if bound_trace.len() < 2 {
        return Err(Error::invalid(format!(
            "audit needs at least 2 recorded steps, got {}",
            bound_trace.len()
        )));
    }
    let pairs = (bound_trace.len() - 1) as f64;
    let strict = bound_trace.windows(2).filter(|w| w[1] < w[0]).count() as f64;
    let non_inc = bound_trace.windows(2).filter(|w| w[1] <= w[0]).count() as f64;
    Ok(AuditReport {
        strict_decrease: strict / pairs,
        non_increase: non_inc / pairs,
    })
}
