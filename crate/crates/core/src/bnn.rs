//! Bayesian MLP drift network with a factorized Gaussian weight distribution.
//!
//! Every weight and bias carries a mean and a log-variance. Forward passes
//! use the local reparameterization trick: instead of sampling weights, each
//! layer samples its pre-activations from the Gaussian they induce,
//! `N(xM + b, x²·exp(L) + exp(c))`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Log-variance every weight starts from.
pub const INIT_LOG_VAR: f64 = -6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Softplus,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpArch {
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// Append `t` as an extra input coordinate.
    #[serde(default)]
    pub time_input: bool,
}

impl MlpArch {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Self {
        Self {
            widths,
            activation,
            time_input: false,
        }
    }

    /// Checks the widths against a state dimension.
    pub fn validate(&self, state_dim: usize) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::invalid(format!(
                "architecture needs at least two positive widths, got {:?}",
                self.widths
            )));
        }
        let want_in = state_dim + usize::from(self.time_input);
        if self.widths[0] != want_in {
            return Err(Error::invalid(format!(
                "first width {} must equal the drift input dimension {want_in}",
                self.widths[0]
            )));
        }
        if *self.widths.last().unwrap() != state_dim {
            return Err(Error::invalid(format!(
                "last width {} must equal the state dimension {state_dim}",
                self.widths.last().unwrap()
            )));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Number of weights plus biases.
    pub fn num_weights(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Number of stored reals in a posterior: a mean and a log-variance per weight.
    pub fn param_count(&self) -> usize {
        2 * self.num_weights()
    }
}

/// Gaussian factors of one dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BayesLayer {
    /// `[in×out]`
    pub mean: Tensor,
    /// `[in×out]`
    pub log_var: Tensor,
    /// `[out]`
    pub bias_mean: Tensor,
    /// `[out]`
    pub bias_log_var: Tensor,
}

impl BayesLayer {
    pub fn in_dim(&self) -> usize {
        self.mean.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.mean.shape()[1]
    }
}

/// Factorized Gaussian distribution over all drift-net weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightPosterior {
    arch: MlpArch,
    layers: Vec<BayesLayer>,
}

const FIELD_KEYS: [&str; 4] = ["M", "L", "b", "c"];

impl WeightPosterior {
    pub fn new(arch: MlpArch, layers: Vec<BayesLayer>) -> Result<Self> {
        if layers.len() != arch.num_layers() {
            return Err(Error::invalid(format!(
                "{} layers supplied for an architecture with {}",
                layers.len(),
                arch.num_layers()
            )));
        }
        for (i, (layer, w)) in layers.iter().zip(arch.widths.windows(2)).enumerate() {
            let (i_dim, o_dim) = (w[0], w[1]);
            let ok = layer.mean.shape() == [i_dim, o_dim]
                && layer.log_var.shape() == [i_dim, o_dim]
                && layer.bias_mean.shape() == [o_dim]
                && layer.bias_log_var.shape() == [o_dim];
            if !ok {
                return Err(Error::invalid(format!(
                    "layer {i} does not match widths {i_dim}->{o_dim}"
                )));
            }
            let finite_var = |t: &Tensor| {
                t.data()
                    .iter()
                    .all(|l| l.exp().is_finite() && l.exp() > 0.0)
            };
            if !finite_var(&layer.log_var)
                || !finite_var(&layer.bias_log_var)
                || !layer.mean.is_finite()
                || !layer.bias_mean.is_finite()
            {
                return Err(Error::invalid(format!(
                    "layer {i} has non-finite parameters or variances"
                )));
            }
        }
        Ok(Self { arch, layers })
    }

    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    pub fn layers(&self) -> &[BayesLayer] {
        &self.layers
    }

    /// Parameters in canonical order with keys `layer{i}.{M|L|b|c}`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [&l.mean, &l.log_var, &l.bias_mean, &l.bias_log_var]
                    .into_iter()
                    .zip(FIELD_KEYS)
                    .map(move |(t, k)| (format!("layer{i}.{k}"), t))
            })
            .collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    &mut l.mean,
                    &mut l.log_var,
                    &mut l.bias_mean,
                    &mut l.bias_log_var,
                ]
                .into_iter()
                .zip(FIELD_KEYS)
                .map(move |(t, k)| (format!("layer{i}.{k}"), t))
            })
            .collect()
    }

    /// Rebuilds a posterior from keyed tensors (checkpoint loading).
    pub fn from_named(
        arch: MlpArch,
        mut lookup: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(arch.num_layers());
        for i in 0..arch.num_layers() {
            let mut take = |k: &str| {
                let key = format!("layer{i}.{k}");
                lookup(&key).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))
            };
            layers.push(BayesLayer {
                mean: take("M")?,
                log_var: take("L")?,
                bias_mean: take("b")?,
                bias_log_var: take("c")?,
            });
        }
        Self::new(arch, layers)
    }

    /// Registers every parameter on `tape`.
    pub fn register<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<PosteriorVars<'t>> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let log_var = leaf(&l.log_var);
                let bias_log_var = leaf(&l.bias_log_var);
                Ok(LayerVars {
                    mean: leaf(&l.mean),
                    log_var,
                    bias_mean: leaf(&l.bias_mean),
                    bias_log_var,
                    weight_var: log_var.exp()?,
                    bias_var: bias_log_var.exp()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(PosteriorVars {
            arch: self.arch.clone(),
            layers,
        })
    }
}

/// Draws a posterior with Xavier-scaled means and constant log-variance.
pub fn init_posterior(arch: &MlpArch, seed: u64) -> Result<WeightPosterior> {
    if arch.widths.len() < 2 || arch.widths.contains(&0) {
        return Err(Error::invalid(format!("invalid widths {:?}", arch.widths)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = arch
        .widths
        .windows(2)
        .map(|w| {
            let (i, o) = (w[0], w[1]);
            let normal = Normal::new(0.0, (2.0 / (i + o) as f64).sqrt()).unwrap();
            let mean = (0..i * o).map(|_| normal.sample(&mut rng)).collect();
            BayesLayer {
                mean: Tensor::matrix(i, o, mean).unwrap(),
                log_var: Tensor::full(&[i, o], INIT_LOG_VAR),
                bias_mean: Tensor::zeros(&[o]),
                bias_log_var: Tensor::full(&[o], INIT_LOG_VAR),
            }
        })
        .collect();
    WeightPosterior::new(arch.clone(), layers)
}

/// Tape handles for one layer. The variances are computed once per tape and
/// shared by every forward pass recorded on it.
#[derive(Clone, Copy)]
pub struct LayerVars<'t> {
    pub mean: Var<'t>,
    pub log_var: Var<'t>,
    pub bias_mean: Var<'t>,
    pub bias_log_var: Var<'t>,
    weight_var: Var<'t>,
    bias_var: Var<'t>,
}

pub struct PosteriorVars<'t> {
    arch: MlpArch,
    layers: Vec<LayerVars<'t>>,
}

impl<'t> PosteriorVars<'t> {
    /// Wraps already-registered leaves given in canonical key order.
    pub fn from_vars(arch: &MlpArch, vars: &[Var<'t>]) -> Result<Self> {
        if vars.len() != 4 * arch.num_layers() {
            return Err(Error::invalid(format!(
                "{} tensors for {} layers",
                vars.len(),
                arch.num_layers()
            )));
        }
        let layers = vars
            .chunks_exact(4)
            .map(|c| {
                Ok(LayerVars {
                    mean: c[0],
                    log_var: c[1],
                    bias_mean: c[2],
                    bias_log_var: c[3],
                    weight_var: c[1].exp()?,
                    bias_var: c[3].exp()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            arch: arch.clone(),
            layers,
        })
    }

    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerVars<'t>] {
        &self.layers
    }

    /// Gradients in the order of [`WeightPosterior::named_tensors`].
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [l.mean, l.log_var, l.bias_mean, l.bias_log_var])
            .map(|v| grads.get(v))
            .collect()
    }

    /// Shapes of the noise tensors a forward pass over `rows` inputs needs.
    pub fn noise_shapes(&self, rows: usize) -> Vec<[usize; 2]> {
        self.arch.widths[1..].iter().map(|&o| [rows, o]).collect()
    }
}

/// One locally reparameterized layer: `μ + σ ∘ noise` with `μ = xM + b` and
/// `σ² = x²·exp(L) + exp(c)`.
pub fn sample_layer_output<'t>(
    x: Var<'t>,
    layer: &LayerVars<'t>,
    noise: &Tensor,
) -> Result<Var<'t>> {
    let tape = x.tape();
    let mu = x.matmul(layer.mean)?.add_bias(layer.bias_mean)?;
    let mu_shape = mu.shape();
    if noise.shape() != mu_shape.as_slice() {
        return Err(Error::shape(
            "sample_layer_output",
            &mu_shape,
            noise.shape(),
        ));
    }
    if noise.data().iter().all(|&z| z == 0.0) {
        return Ok(mu);
    }
    let var = x
        .square()?
        .matmul(layer.weight_var)?
        .add_bias(layer.bias_var)?;
    let eps = tape.constant(noise.clone());
    mu.add(var.sqrt()?.mul(eps)?)
}

/// Full drift-net pass `f(h, t)` for a `[rows×P]` batch; `noise` holds one
/// `[rows×out_ℓ]` standard-normal tensor per layer.
pub fn drift_forward<'t>(
    h: Var<'t>,
    t: f64,
    net: &PosteriorVars<'t>,
    noise: &[Tensor],
) -> Result<Var<'t>> {
    if noise.len() != net.layers.len() {
        return Err(Error::invalid(format!(
            "{} noise tensors for {} layers",
            noise.len(),
            net.layers.len()
        )));
    }
    let mut x = if net.arch.time_input {
        let rows = h.shape()[0];
        let tcol = h.tape().constant(Tensor::full(&[rows, 1], t));
        h.tape().concat_cols(&[h, tcol])?
    } else {
        h
    };
    let last = net.layers.len() - 1;
    for (i, (layer, eps)) in net.layers.iter().zip(noise).enumerate() {
        x = sample_layer_output(x, layer, eps)?;
        if i < last {
            x = match net.arch.activation {
                Activation::Softplus => x.softplus()?,
                Activation::Relu => x.relu()?,
            };
        }
    }
    Ok(x)
}

/// Isotropic Gaussian prior over every weight and bias.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightPrior {
    pub mean: f64,
    pub var: f64,
}

impl Default for WeightPrior {
    fn default() -> Self {
        Self {
            mean: 0.0,
            var: 1.0,
        }
    }
}

/// Closed-form `KL(posterior || prior)` summed over all weights and biases.
pub fn weight_kl(posterior: &WeightPosterior, prior: &WeightPrior) -> f64 {
    let (m0, v0) = (prior.mean, prior.var);
    posterior
        .layers
        .iter()
        .flat_map(|l| {
            l.mean
                .data()
                .iter()
                .zip(l.log_var.data())
                .chain(l.bias_mean.data().iter().zip(l.bias_log_var.data()))
        })
        .map(|(&m, &lv)| 0.5 * (lv.exp() / v0 + (m - m0).powi(2) / v0 - 1.0 + v0.ln() - lv))
        .sum()
}

/// [`weight_kl`] recorded on the tape.
pub fn weight_kl_var<'t>(net: &PosteriorVars<'t>, prior: &WeightPrior) -> Result<Var<'t>> {
    let (m0, v0) = (prior.mean, prior.var);
    let mut total: Option<Var<'t>> = None;
    let mut count = 0usize;
    for l in &net.layers {
        for (mean, log_var, var) in [
            (l.mean, l.log_var, l.weight_var),
            (l.bias_mean, l.bias_log_var, l.bias_var),
        ] {
            count += mean.with_value(|t| t.len());
            let term = var
                .sum()?
                .scale(1.0 / v0)?
                .add(mean.add_scalar(-m0)?.square()?.sum()?.scale(1.0 / v0)?)?
                .sub(log_var.sum()?)?;
            total = Some(match total {
                Some(acc) => acc.add(term)?,
                None => term,
            });
        }
    }
    let total = total.ok_or_else(|| Error::invalid("empty network"))?;
    total.add_scalar(count as f64 * (v0.ln() - 1.0))?.scale(0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_diff_check_many;

    fn single_weight(m: f64, log_var: f64) -> WeightPosterior {
        // A 1->1 layer whose bias matches the prior exactly.
        let arch = MlpArch::new(vec![1, 1], Activation::Softplus);
        WeightPosterior::new(
            arch,
            vec![BayesLayer {
                mean: Tensor::matrix(1, 1, vec![m]).unwrap(),
                log_var: Tensor::matrix(1, 1, vec![log_var]).unwrap(),
                bias_mean: Tensor::vector(vec![0.0]),
                bias_log_var: Tensor::vector(vec![0.0]),
            }],
        )
        .unwrap()
    }

    #[test]
    fn parameter_count_for_three_layer_arch() {
        let arch = MlpArch::new(vec![3, 100, 100, 3], Activation::Softplus);
        assert_eq!(
            arch.num_weights(),
            3 * 100 + 100 * 100 + 100 * 3 + 100 + 100 + 3
        );
        assert_eq!(arch.num_weights(), 10_803);
        assert_eq!(arch.param_count(), 21_606);
        let post = init_posterior(&arch, 1).unwrap();
        let stored: usize = post.named_tensors().iter().map(|(_, t)| t.len()).sum();
        assert_eq!(stored, 21_606);
    }

    #[test]
    fn init_is_deterministic_and_narrow() {
        let arch = MlpArch::new(vec![3, 16, 3], Activation::Softplus);
        assert_eq!(
            init_posterior(&arch, 9).unwrap(),
            init_posterior(&arch, 9).unwrap()
        );
        assert_ne!(
            init_posterior(&arch, 9).unwrap(),
            init_posterior(&arch, 10).unwrap()
        );
        assert!(((INIT_LOG_VAR / 2.0).exp() - 0.0498).abs() < 1e-4);
    }

    #[test]
    fn weight_kl_examples() {
        let prior = WeightPrior::default();
        assert_eq!(weight_kl(&single_weight(0.0, 0.0), &prior), 0.0);
        assert!((weight_kl(&single_weight(1.0, 0.0), &prior) - 0.5).abs() < 1e-15);
        let expected = 0.5 * ((-6.0f64).exp() - 1.0 + 6.0);
        let got = weight_kl(&single_weight(0.0, -6.0), &prior);
        assert!((got - expected).abs() < 1e-14);
        assert!((got - 2.5012).abs() < 1e-4);
    }

    #[test]
    fn weight_kl_tape_matches_closed_form() {
        let arch = MlpArch::new(vec![2, 5, 2], Activation::Relu);
        let post = init_posterior(&arch, 4).unwrap();
        let prior = WeightPrior {
            mean: 0.3,
            var: 2.0,
        };
        let tape = Tape::new();
        let vars = post.register(&tape, true).unwrap();
        let kl = weight_kl_var(&vars, &prior).unwrap().item();
        let plain = weight_kl(&post, &prior);
        assert!(
            (kl - plain).abs() < 1e-9 * plain.abs().max(1.0),
            "{kl} vs {plain}"
        );
    }

    #[test]
    fn only_bias_contributes_at_zero_input() {
        let tape = Tape::new();
        let post = single_weight(2.0, 1.0);
        let mut layers = post.layers().to_vec();
        layers[0].bias_mean = Tensor::vector(vec![0.75]);
        layers[0].bias_log_var = Tensor::vector(vec![-1.0]);
        let post = WeightPosterior::new(post.arch().clone(), layers).unwrap();
        let vars = post.register(&tape, false).unwrap();
        let x = tape.constant(Tensor::zeros(&[1, 1]));
        let noise = Tensor::matrix(1, 1, vec![1.3]).unwrap();
        let out = sample_layer_output(x, &vars.layers()[0], &noise)
            .unwrap()
            .item();
        assert!((out - (0.75 + (-0.5f64).exp() * 1.3)).abs() < 1e-14);
    }

    #[test]
    fn zero_noise_gives_mean_preactivation() {
        let arch = MlpArch::new(vec![2, 3], Activation::Softplus);
        let post = init_posterior(&arch, 5).unwrap();
        let tape = Tape::new();
        let vars = post.register(&tape, false).unwrap();
        let xv = Tensor::matrix(1, 2, vec![0.4, -1.2]).unwrap();
        let x = tape.constant(xv.clone());
        let out = sample_layer_output(x, &vars.layers()[0], &Tensor::zeros(&[1, 3])).unwrap();
        let expect = xv.matmul(&post.layers()[0].mean).unwrap();
        assert_eq!(out.value().data(), expect.data());
    }

    #[test]
    fn zero_means_and_noise_give_zero_drift() {
        let arch = MlpArch::new(vec![3, 8, 8, 3], Activation::Softplus);
        let mut post = init_posterior(&arch, 5).unwrap();
        for (key, t) in post.named_tensors_mut() {
            if key.ends_with(".M") || key.ends_with(".b") {
                t.data_mut().fill(0.0);
            }
        }
        let tape = Tape::new();
        let vars = post.register(&tape, false).unwrap();
        let h = tape.constant(Tensor::matrix(2, 3, vec![1.0, -4.0, 30.0, 0.0, 2.0, 7.5]).unwrap());
        let noise: Vec<Tensor> = vars
            .noise_shapes(2)
            .iter()
            .map(|s| Tensor::zeros(s))
            .collect();
        let out = drift_forward(h, 0.0, &vars, &noise).unwrap();
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn distinct_noise_gives_distinct_outputs() {
        let arch = MlpArch::new(vec![3, 8, 3], Activation::Softplus);
        let post = init_posterior(&arch, 2).unwrap();
        let tape = Tape::new();
        let vars = post.register(&tape, false).unwrap();
        let h = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap());
        let noise = vec![
            Tensor::matrix(2, 8, (0..16).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap(),
            Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.9, 0.4, -1.0]).unwrap(),
        ];
        let out = drift_forward(h, 0.0, &vars, &noise).unwrap().value();
        assert_ne!(out.row(0), out.row(1));
        let again = drift_forward(h, 0.0, &vars, &noise).unwrap().value();
        assert_eq!(out, again);
    }

    #[test]
    fn time_input_is_appended() {
        let mut arch = MlpArch::new(vec![3, 4, 2], Activation::Relu);
        arch.time_input = true;
        assert!(arch.validate(2).is_ok());
        let post = init_posterior(&arch, 0).unwrap();
        let tape = Tape::new();
        let vars = post.register(&tape, false).unwrap();
        let h = tape.constant(Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap());
        let noise: Vec<Tensor> = vars
            .noise_shapes(1)
            .iter()
            .map(|s| Tensor::zeros(s))
            .collect();
        let a = drift_forward(h, 0.0, &vars, &noise).unwrap().value();
        let b = drift_forward(h, 3.0, &vars, &noise).unwrap().value();
        assert_ne!(a, b);
    }

    #[test]
    fn noise_shape_mismatch_is_an_error() {
        let arch = MlpArch::new(vec![2, 3], Activation::Softplus);
        let post = init_posterior(&arch, 5).unwrap();
        let tape = Tape::new();
        let vars = post.register(&tape, false).unwrap();
        let x = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(sample_layer_output(x, &vars.layers()[0], &Tensor::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn weight_kl_gradient_matches_finite_differences() {
        let arch = MlpArch::new(vec![2, 3, 2], Activation::Softplus);
        let post = init_posterior(&arch, 8).unwrap();
        let xs: Vec<Tensor> = post
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect();
        let prior = WeightPrior::default();
        let err = finite_diff_check_many(
            |_, vars| weight_kl_var(&PosteriorVars::from_vars(&arch, vars)?, &prior),
            &xs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
