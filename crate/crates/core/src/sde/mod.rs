//! Euler-Maruyama simulation of black-box, prior and hybrid SDEs
//!
//! `h_{k+1} = h_k + (f(h_k) + γ∘r(h_k))·Δt_k + g∘ΔW_k`, with constant
//! diagonal diffusion `g` shared by all three model families.

mod convergence;

pub use convergence::{convergence_study, ConvergenceReport, Oracle};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bnn::{drift_forward, PosteriorVars, WeightPosterior};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::priors::{GammaMask, PriorKind, PriorOde};

/// States beyond this magnitude abort a rollout.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Strictly increasing time points `t_0 < … < t_K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid(Vec<f64>);

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::invalid("time grid needs at least one point"));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("time grid contains non-finite points"));
        }
        if let Some(w) = times.windows(2).find(|w| !(w[1] > w[0])) {
            return Err(Error::invalid(format!(
                "time grid must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Self(times))
    }

    /// `steps + 1` points starting at `t0` spaced by `dt`.
    pub fn regular(t0: f64, dt: f64, steps: usize) -> Result<Self> {
        Self::new((0..=steps).map(|k| t0 + k as f64 * dt).collect())
    }

    pub fn times(&self) -> &[f64] {
        &self.0
    }

    /// Number of EM steps `K`.
    pub fn steps(&self) -> usize {
        self.0.len() - 1
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.0[k + 1] - self.0[k]
    }

    pub fn dts(&self) -> Vec<f64> {
        self.0.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn start(&self) -> f64 {
        self.0[0]
    }

    pub fn end(&self) -> f64 {
        *self.0.last().unwrap()
    }

    /// The first `steps + 1` points.
    pub fn truncate(&self, steps: usize) -> Result<Self> {
        if steps > self.steps() {
            return Err(Error::invalid(format!(
                "cannot take {steps} steps from a grid with {}",
                self.steps()
            )));
        }
        Ok(Self(self.0[..=steps].to_vec()))
    }
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = Error;

    fn try_from(times: Vec<f64>) -> Result<Self> {
        Self::new(times)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(grid: TimeGrid) -> Self {
        grid.0
    }
}

/// Constant diagonal diffusion `G = diag(g)`, so `J = diag(g²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DiffusionSpec(Vec<f64>);

impl DiffusionSpec {
    pub fn new(scale: Vec<f64>) -> Result<Self> {
        if scale.is_empty() || scale.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
            return Err(Error::invalid(format!(
                "diffusion scales must be positive, got {scale:?}"
            )));
        }
        Ok(Self(scale))
    }

    pub fn constant(dim: usize, g: f64) -> Result<Self> {
        Self::new(vec![g; dim])
    }

    pub fn scale(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Diagonal of `J⁻¹`.
    pub fn inverse_variance(&self) -> Vec<f64> {
        self.0.iter().map(|g| 1.0 / (g * g)).collect()
    }
}

impl TryFrom<Vec<f64>> for DiffusionSpec {
    type Error = Error;

    fn try_from(scale: Vec<f64>) -> Result<Self> {
        Self::new(scale)
    }
}

impl From<DiffusionSpec> for Vec<f64> {
    fn from(d: DiffusionSpec) -> Self {
        d.0
    }
}

/// Borrowed view of a hybrid drift `f_θ(h) + γ∘r(h)` for one tape.
#[derive(Clone, Copy)]
pub struct HybridDrift<'a, 't> {
    pub neural: Option<&'a PosteriorVars<'t>>,
    pub prior: Option<&'a PriorOde>,
    pub gamma: &'a GammaMask,
}

impl HybridDrift<'_, '_> {
    fn validate(&self, dim: usize) -> Result<()> {
        if self.neural.is_none() && self.prior.is_none() {
            return Err(Error::invalid(
                "hybrid drift needs a neural part, a prior, or both",
            ));
        }
        if self.gamma.dim() != dim {
            return Err(Error::invalid(format!(
                "gamma has dimension {}, state has {dim}",
                self.gamma.dim()
            )));
        }
        if let Some(net) = self.neural {
            net.arch().validate(dim)?;
        }
        if let Some(p) = self.prior {
            if p.dim() != dim {
                return Err(Error::invalid(format!(
                    "prior has dimension {}, state has {dim}",
                    p.dim()
                )));
            }
        }
        Ok(())
    }

    fn prior_active(&self) -> bool {
        self.prior.is_some_and(|p| p.kind() != PriorKind::Zero) && !self.gamma.is_zero()
    }
}

/// Random inputs of one EM step: Wiener increments and per-layer
/// standard-normal noise for the locally reparameterized drift net.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNoise {
    /// `[rows×P]`
    pub dw: Tensor,
    /// One `[rows×out_ℓ]` tensor per drift-net layer.
    pub layers: Vec<Tensor>,
}

/// Independent random streams, one per batch row, so that a row's draws do
/// not depend on how many other rows are simulated alongside it.
pub struct NoiseStreams {
    rngs: Vec<ChaCha8Rng>,
}

impl NoiseStreams {
    pub fn new(seed: u64, rows: usize) -> Self {
        let rngs = (0..rows)
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(r as u64);
                rng
            })
            .collect();
        Self { rngs }
    }

    pub fn rows(&self) -> usize {
        self.rngs.len()
    }

    /// Draws `ΔW ~ N(0, dt)` in `dim` coordinates followed by layer noise
    /// of the given widths, row by row.
    pub fn next_step(&mut self, dim: usize, dt: f64, layer_widths: &[usize]) -> StepNoise {
        let rows = self.rngs.len();
        let sd = dt.sqrt();
        let mut dw = Vec::with_capacity(rows * dim);
        let mut layers: Vec<Vec<f64>> = layer_widths
            .iter()
            .map(|w| Vec::with_capacity(rows * w))
            .collect();
        for rng in &mut self.rngs {
            for _ in 0..dim {
                let z: f64 = StandardNormal.sample(rng);
                dw.push(sd * z);
            }
            for (buf, &w) in layers.iter_mut().zip(layer_widths) {
                for _ in 0..w {
                    buf.push(StandardNormal.sample(rng));
                }
            }
        }
        StepNoise {
            dw: Tensor::raw(vec![rows, dim], dw),
            layers: layers
                .into_iter()
                .zip(layer_widths)
                .map(|(d, &w)| Tensor::raw(vec![rows, w], d))
                .collect(),
        }
    }
}

/// `ΔW_k ~ N(0, Δt_k·1_P)` as an `[S×K×P]` tensor, one stream per sample.
pub fn wiener_increments(grid: &TimeGrid, samples: usize, dim: usize, seed: u64) -> Result<Tensor> {
    if samples == 0 || dim == 0 {
        return Err(Error::invalid("need at least one sample and one dimension"));
    }
    let k = grid.steps();
    let mut streams = NoiseStreams::new(seed, samples);
    let mut out = vec![0.0; samples * k * dim];
    for (step, dt) in grid.dts().into_iter().enumerate() {
        let noise = streams.next_step(dim, dt, &[]);
        for s in 0..samples {
            let dst = (s * k + step) * dim;
            out[dst..dst + dim].copy_from_slice(noise.dw.row(s));
        }
    }
    Ok(Tensor::raw(vec![samples, k, dim], out))
}

/// One Euler-Maruyama step. Returns the next state and the neural drift
/// value `f_k` (absent when the drift has no neural part).
#[allow(clippy::too_many_arguments)]
pub fn em_step<'t>(
    h: Var<'t>,
    t: f64,
    dt: f64,
    drift: &HybridDrift<'_, 't>,
    diffusion: &DiffusionSpec,
    noise: &StepNoise,
    step_index: usize,
) -> Result<(Var<'t>, Option<Var<'t>>)> {
    if !(dt > 0.0) {
        return Err(Error::invalid(format!(
            "step size must be positive, got {dt}"
        )));
    }
    let tape = h.tape();
    let f = match drift.neural {
        Some(net) => Some(drift_forward(h, t, net, &noise.layers)?),
        None => None,
    };
    let r = if drift.prior_active() {
        let gamma = tape.constant(Tensor::vector(drift.gamma.values().to_vec()));
        Some(drift.prior.unwrap().eval_var(h)?.mul_row(gamma)?)
    } else {
        None
    };
    let total = match (f, r) {
        (Some(f), Some(r)) => Some(f.add(r)?),
        (Some(d), None) | (None, Some(d)) => Some(d),
        (None, None) => None,
    };

    let cols = diffusion.dim();
    let shock: Vec<f64> = noise
        .dw
        .data()
        .chunks_exact(cols)
        .flat_map(|row| row.iter().zip(diffusion.scale()).map(|(w, g)| w * g))
        .collect();
    let shock = tape.constant(Tensor::from_parts(noise.dw.shape().to_vec(), shock)?);

    let mut next = h;
    if let Some(d) = total {
        next = next.add(d.scale(dt)?)?;
    }
    next = next.add(shock)?;

    let bad_row = next.with_value(|v| {
        v.data()
            .iter()
            .position(|x| !x.is_finite() || x.abs() > DIVERGENCE_LIMIT)
            .map(|i| i / cols)
    });
    if let Some(sample) = bad_row {
        return Err(Error::Divergence {
            sample,
            step: step_index,
        });
    }
    Ok((next, f))
}

/// Differentiable rollout: the states `h_0..h_K` and neural drift values
/// `f_0..f_{K-1}` of every batch row, plus the noise that produced them.
pub struct LatentPath<'t> {
    pub states: Vec<Var<'t>>,
    pub drifts: Vec<Option<Var<'t>>>,
    pub noise: Vec<StepNoise>,
    pub grid: TimeGrid,
}

impl LatentPath<'_> {
    pub fn rows(&self) -> usize {
        self.states[0].shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.states[0].shape()[1]
    }

    /// States as `[rows×(K+1)×P]`.
    pub fn states_tensor(&self) -> Tensor {
        stack_steps(self.states.iter().map(|v| v.value()).collect())
    }

    /// Neural drift values as `[rows×K×P]`, if there is a neural part.
    pub fn drift_tensor(&self) -> Option<Tensor> {
        let vals: Option<Vec<Tensor>> = self.drifts.iter().map(|d| d.map(|v| v.value())).collect();
        vals.filter(|v| !v.is_empty()).map(stack_steps)
    }
}

/// Stacks `K` tensors of shape `[rows×P]` into `[rows×K×P]`.
fn stack_steps(steps: Vec<Tensor>) -> Tensor {
    let rows = steps[0].shape()[0];
    let dim = steps[0].shape()[1];
    let k = steps.len();
    let mut out = vec![0.0; rows * k * dim];
    for (step, t) in steps.iter().enumerate() {
        for r in 0..rows {
            let dst = (r * k + step) * dim;
            out[dst..dst + dim].copy_from_slice(t.row(r));
        }
    }
    Tensor::raw(vec![rows, k, dim], out)
}

fn layer_widths(drift: &HybridDrift<'_, '_>) -> Vec<usize> {
    drift
        .neural
        .map(|n| n.arch().widths[1..].to_vec())
        .unwrap_or_default()
}

/// Rolls every row of `h0` (`[rows×P]`) through the grid on `tape`.
///
/// Row `r` draws from its own random stream, so simulating rows together
/// or separately gives the same trajectories.
pub fn simulate<'t>(
    tape: &'t Tape,
    h0: &Tensor,
    grid: &TimeGrid,
    drift: &HybridDrift<'_, 't>,
    diffusion: &DiffusionSpec,
    seed: u64,
) -> Result<LatentPath<'t>> {
    let (rows, dim) = check_initial(h0, diffusion)?;
    drift.validate(dim)?;
    let widths = layer_widths(drift);
    let mut streams = NoiseStreams::new(seed, rows);

    let mut h = tape.constant(h0.clone());
    let mut states = vec![h];
    let mut drifts = Vec::with_capacity(grid.steps());
    let mut noise_log = Vec::with_capacity(grid.steps());
    for k in 0..grid.steps() {
        let dt = grid.dt(k);
        let noise = streams.next_step(dim, dt, &widths);
        let (next, f) = em_step(h, grid.times()[k], dt, drift, diffusion, &noise, k)?;
        h = next;
        states.push(h);
        drifts.push(f);
        noise_log.push(noise);
    }
    Ok(LatentPath {
        states,
        drifts,
        noise: noise_log,
        grid: grid.clone(),
    })
}

fn check_initial(h0: &Tensor, diffusion: &DiffusionSpec) -> Result<(usize, usize)> {
    if h0.rank() != 2 || h0.shape()[0] == 0 {
        return Err(Error::invalid(format!(
            "initial states must be [rows×P], got {:?}",
            h0.shape()
        )));
    }
    let dim = h0.shape()[1];
    if dim != diffusion.dim() {
        return Err(Error::invalid(format!(
            "state dimension {dim} does not match diffusion dimension {}",
            diffusion.dim()
        )));
    }
    Ok((h0.shape()[0], dim))
}

/// Repeats each initial state `samples` times: row `n·S + s`.
pub fn repeat_rows(states: &[Vec<f64>], samples: usize) -> Result<Tensor> {
    let dim = states.first().map_or(0, |s| s.len());
    let mut data = Vec::with_capacity(states.len() * samples * dim);
    for s in states {
        if s.len() != dim {
            return Err(Error::invalid("initial states differ in dimension"));
        }
        for _ in 0..samples {
            data.extend_from_slice(s);
        }
    }
    Tensor::from_parts(vec![states.len() * samples, dim], data)
}

/// Owned hybrid SDE: optional Bayesian drift net, optional prior drift with
/// its mask, and the shared diffusion.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridSde {
    pub posterior: Option<WeightPosterior>,
    pub prior: Option<PriorOde>,
    pub gamma: GammaMask,
    pub diffusion: DiffusionSpec,
}

impl HybridSde {
    pub fn new(
        posterior: Option<WeightPosterior>,
        prior: Option<PriorOde>,
        gamma: GammaMask,
        diffusion: DiffusionSpec,
    ) -> Result<Self> {
        let sde = Self {
            posterior,
            prior,
            gamma,
            diffusion,
        };
        let tape = Tape::new();
        let net = sde
            .posterior
            .as_ref()
            .map(|p| p.register(&tape, false))
            .transpose()?;
        sde.view(net.as_ref()).validate(sde.dim())?;
        Ok(sde)
    }

    pub fn dim(&self) -> usize {
        self.diffusion.dim()
    }

    pub fn view<'a, 't>(&'a self, net: Option<&'a PosteriorVars<'t>>) -> HybridDrift<'a, 't> {
        HybridDrift {
            neural: net,
            prior: self.prior.as_ref(),
            gamma: &self.gamma,
        }
    }

    /// Non-differentiable rollout returning `[rows×(K+1)×P]`. Uses the same
    /// random streams as [`simulate`], so values agree with it exactly.
    pub fn rollout(&self, h0: &Tensor, grid: &TimeGrid, seed: u64) -> Result<Tensor> {
        let (rows, dim) = check_initial(h0, &self.diffusion)?;
        let widths = self
            .posterior
            .as_ref()
            .map(|p| p.arch().widths[1..].to_vec())
            .unwrap_or_default();
        let mut streams = NoiseStreams::new(seed, rows);
        let mut states = vec![h0.clone()];
        let mut h = h0.clone();
        for k in 0..grid.steps() {
            let dt = grid.dt(k);
            let noise = streams.next_step(dim, dt, &widths);
            let tape = Tape::with_checks(false);
            let net = self
                .posterior
                .as_ref()
                .map(|p| p.register(&tape, false))
                .transpose()?;
            let drift = self.view(net.as_ref());
            let hv = tape.constant(h);
            let (next, _) = em_step(hv, grid.times()[k], dt, &drift, &self.diffusion, &noise, k)?;
            h = next.value();
            states.push(h.clone());
        }
        Ok(stack_steps(states))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bnn::{init_posterior, Activation, MlpArch};

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(vec![0.0, 0.1, 0.1]).is_err());
        assert!(TimeGrid::new(vec![0.0, -0.1]).is_err());
        assert!(TimeGrid::new(vec![]).is_err());
        let g = TimeGrid::new(vec![0.0, 0.1, 0.35]).unwrap();
        assert_eq!(g.steps(), 2);
        assert!((g.dts()[1] - 0.25).abs() < 1e-15);
        assert!(DiffusionSpec::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn wiener_increment_examples() {
        let grid = TimeGrid::regular(0.0, 0.01, 1000).unwrap();
        let dw = wiener_increments(&grid, 1000, 1, 42).unwrap();
        let n = dw.len() as f64;
        let mean = dw.sum() / n;
        let var = dw.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() - 0.1).abs() / 0.1 < 0.005, "std {}", var.sqrt());
        assert_eq!(dw, wiener_increments(&grid, 1000, 1, 42).unwrap());

        let degenerate = TimeGrid::new(vec![0.0]).unwrap();
        assert_eq!(wiener_increments(&degenerate, 3, 2, 1).unwrap().len(), 0);
    }

    #[test]
    fn em_step_hand_arithmetic() {
        // f = 2 from a 1->1 "network" with zero weight and bias mean 2.
        use crate::bnn::{BayesLayer, WeightPosterior};
        let arch = MlpArch::new(vec![1, 1], Activation::Softplus);
        let post = WeightPosterior::new(
            arch,
            vec![BayesLayer {
                mean: Tensor::matrix(1, 1, vec![0.0]).unwrap(),
                log_var: Tensor::matrix(1, 1, vec![0.0]).unwrap(),
                bias_mean: Tensor::vector(vec![2.0]),
                bias_log_var: Tensor::vector(vec![0.0]),
            }],
        )
        .unwrap();
        let tape = Tape::new();
        let net = post.register(&tape, false).unwrap();
        let gamma = GammaMask::zeros(1);
        let drift = HybridDrift {
            neural: Some(&net),
            prior: None,
            gamma: &gamma,
        };
        let g = DiffusionSpec::constant(1, 1.0).unwrap();
        let noise = StepNoise {
            dw: Tensor::matrix(1, 1, vec![0.05]).unwrap(),
            layers: vec![Tensor::zeros(&[1, 1])],
        };
        let h = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let (next, f) = em_step(h, 0.0, 0.01, &drift, &g, &noise, 0).unwrap();
        assert!((next.item() - 1.07).abs() < 1e-15);
        assert_eq!(f.unwrap().item(), 2.0);
    }

    #[test]
    fn zero_drift_zero_noise_is_identity() {
        let (prior, gamma) = (PriorOde::zero(1), GammaMask::ones(1));
        let g = DiffusionSpec::constant(1, 1.0).unwrap();
        let tape = Tape::new();
        let drift = HybridDrift {
            neural: None,
            prior: Some(&prior),
            gamma: &gamma,
        };
        let h = tape.constant(Tensor::matrix(1, 1, vec![3.25]).unwrap());
        let noise = StepNoise {
            dw: Tensor::zeros(&[1, 1]),
            layers: vec![],
        };
        let (next, f) = em_step(h, 0.0, 0.5, &drift, &g, &noise, 0).unwrap();
        assert_eq!(next.item(), 3.25);
        assert!(f.is_none());
    }

    #[test]
    fn prior_only_step_reduces_to_prior_sde() {
        let prior = PriorOde::lorenz(crate::priors::LORENZ_PARAMS);
        let gamma = GammaMask::ones(3);
        let g = DiffusionSpec::constant(3, 1.0).unwrap();
        let tape = Tape::new();
        let drift = HybridDrift {
            neural: None,
            prior: Some(&prior),
            gamma: &gamma,
        };
        let h0 = [1.0, 2.0, 20.0];
        let noise = StepNoise {
            dw: Tensor::matrix(1, 3, vec![0.01, -0.02, 0.03]).unwrap(),
            layers: vec![],
        };
        let h = tape.constant(Tensor::matrix(1, 3, h0.to_vec()).unwrap());
        let (next, f) = em_step(h, 0.0, 0.01, &drift, &g, &noise, 0).unwrap();
        assert!(f.is_none());
        let r = prior.eval(&h0);
        for d in 0..3 {
            let expect = h0[d] + r[d] * 0.01 + noise.dw.data()[d];
            assert!((next.value().data()[d] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn divergence_is_reported_with_location() {
        let prior = PriorOde::lotka_volterra([2.0, 1.0, 4.0, 1.0]);
        let gamma = GammaMask::ones(2);
        let g = DiffusionSpec::constant(2, 1e-9).unwrap();
        let tape = Tape::new();
        let drift = HybridDrift {
            neural: None,
            prior: Some(&prior),
            gamma: &gamma,
        };
        let h0 = Tensor::matrix(2, 2, vec![4.0, 2.0, 50.0, 0.0]).unwrap();
        let grid = TimeGrid::regular(0.0, 0.1, 200).unwrap();
        match simulate(&tape, &h0, &grid, &drift, &g, 1) {
            Err(Error::Divergence { sample, step }) => {
                assert_eq!(sample, 1);
                assert!(step > 0 && step < 200);
            }
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn tape_and_detached_rollouts_agree() {
        let arch = MlpArch::new(vec![3, 6, 3], Activation::Softplus);
        let post = init_posterior(&arch, 3).unwrap();
        let sde = HybridSde::new(
            Some(post),
            Some(PriorOde::lorenz(crate::priors::LORENZ_PARAMS)),
            GammaMask::new(vec![0.0, 1.0, 0.0]).unwrap(),
            DiffusionSpec::constant(3, 1.0).unwrap(),
        )
        .unwrap();
        let h0 = repeat_rows(&[vec![1.0, 1.0, 28.0], vec![-3.0, 2.0, 15.0]], 2).unwrap();
        let grid = TimeGrid::regular(0.0, 0.01, 20).unwrap();
        let detached = sde.rollout(&h0, &grid, 77).unwrap();

        let tape = Tape::new();
        let net = sde
            .posterior
            .as_ref()
            .unwrap()
            .register(&tape, true)
            .unwrap();
        let path = simulate(&tape, &h0, &grid, &sde.view(Some(&net)), &sde.diffusion, 77).unwrap();
        assert_eq!(path.states_tensor(), detached);
    }

    #[test]
    fn rows_are_independent_of_batch_composition() {
        let arch = MlpArch::new(vec![2, 4, 2], Activation::Relu);
        let sde = HybridSde::new(
            Some(init_posterior(&arch, 1).unwrap()),
            None,
            GammaMask::zeros(2),
            DiffusionSpec::new(vec![0.2, 0.3]).unwrap(),
        )
        .unwrap();
        let grid = TimeGrid::regular(0.0, 0.01, 10).unwrap();
        let both = sde
            .rollout(&repeat_rows(&[vec![1.0, 2.0]], 2).unwrap(), &grid, 5)
            .unwrap();
        let one = sde
            .rollout(&repeat_rows(&[vec![1.0, 2.0]], 1).unwrap(), &grid, 5)
            .unwrap();
        assert_eq!(&both.data()[..one.len()], one.data());
        assert_ne!(&both.data()[one.len()..], one.data());
    }
}
