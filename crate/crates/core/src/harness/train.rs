use std::fs::File;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, RunPaths};
use super::derive_seed;
use crate::bnn::{init_posterior, MlpArch, PosteriorVars, WeightPosterior, WeightPrior};
use crate::checkpoint::Checkpoint;
use crate::datagen::{Dataset, ObservationSequence};
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::pacloss::{
    training_loss, LikelihoodSpec, LossBreakdown, PacConfig, TrainingLoss, MIN_OBS_STD,
};
use crate::priors::{GammaMask, PriorKind, PriorOde};
use crate::sde::{repeat_rows, simulate, DiffusionSpec, HybridSde, TimeGrid};

/// A trained or in-training model: the SDE and its observation model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub sde: HybridSde,
    pub likelihood: LikelihoodSpec,
}

impl Model {
    /// Assembles the model of `cfg.variant` around `posterior`. Black-box
    /// variants get no prior drift at all.
    pub fn build(cfg: &ExperimentConfig, posterior: WeightPosterior) -> Result<Self> {
        let dim = cfg.dim();
        let (prior, gamma) = if cfg.variant.is_hybrid() {
            let (p, g) = cfg.prior.resolve(dim, cfg.seeds.perturb)?;
            (Some(p), g)
        } else {
            (None, GammaMask::zeros(dim))
        };
        let sde = HybridSde::new(
            Some(posterior),
            prior,
            gamma,
            DiffusionSpec::new(cfg.diffusion())?,
        )?;
        let likelihood = LikelihoodSpec::isotropic(dim, cfg.obs_std)?;
        Ok(Self { sde, likelihood })
    }

    pub fn posterior(&self) -> &WeightPosterior {
        self.sde
            .posterior
            .as_ref()
            .expect("model always carries a drift net")
    }

    pub fn posterior_mut(&mut self) -> &mut WeightPosterior {
        self.sde
            .posterior
            .as_mut()
            .expect("model always carries a drift net")
    }

    pub fn dim(&self) -> usize {
        self.sde.dim()
    }

    /// Serializes parameters, optimizer state and everything needed to
    /// rebuild the model without the original config.
    pub fn to_checkpoint(
        &self,
        cfg: &ExperimentConfig,
        adam: Option<&AdamState>,
        epoch: usize,
        step: usize,
    ) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = self
            .posterior()
            .named_tensors()
            .into_iter()
            .map(|(k, t)| (k, t.clone()))
            .collect();
        if let Some(a) = adam {
            tensors.extend(a.named_tensors());
        }
        let meta = serde_json::json!({
            "config": cfg,
            "arch": self.posterior().arch(),
            "prior_kind": self.sde.prior.as_ref().map(|p| p.kind()),
            "prior_params": self.sde.prior.as_ref().map(|p| p.params().to_vec()),
            "gamma": self.sde.gamma.values(),
            "diffusion": self.sde.diffusion.scale(),
            "obs_std": self.likelihood.std(),
            "epoch": epoch,
            "step": step,
        });
        Checkpoint::new(tensors, meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<LoadedCheckpoint> {
        let field = |name: &str| {
            ck.meta
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{name}`")))
        };
        let arch: MlpArch = serde_json::from_value(field("arch")?)?;
        let posterior = WeightPosterior::from_named(arch, |k| ck.get(k).cloned())?;
        let dim = posterior.arch().state_dim();
        let kind: Option<PriorKind> = serde_json::from_value(field("prior_kind")?)?;
        let params: Option<Vec<f64>> = serde_json::from_value(field("prior_params")?)?;
        let prior = match (kind, params) {
            (Some(k), Some(p)) => Some(PriorOde::new(k, p, dim)?),
            _ => None,
        };
        let gamma = GammaMask::new(serde_json::from_value(field("gamma")?)?)?;
        let diffusion = DiffusionSpec::new(serde_json::from_value(field("diffusion")?)?)?;
        let obs_std: Vec<f64> = serde_json::from_value(field("obs_std")?)?;
        let config: ExperimentConfig = serde_json::from_value(field("config")?)?;
        let model = Model {
            sde: HybridSde::new(Some(posterior), prior, gamma, diffusion)?,
            likelihood: LikelihoodSpec::new(obs_std, MIN_OBS_STD)?,
        };
        let keys: Vec<String> = model
            .posterior()
            .named_tensors()
            .into_iter()
            .map(|(k, _)| k)
            .collect();
        let adam = if ck.get("adam.tau").is_some() {
            Some(AdamState::from_named(
                AdamConfig::with_lr(config.lr),
                &keys,
                |k| ck.get(k).cloned(),
            )?)
        } else {
            None
        };
        Ok(LoadedCheckpoint {
            model,
            adam,
            config,
            epoch: serde_json::from_value(field("epoch")?)?,
            step: serde_json::from_value(field("step")?)?,
        })
    }
}

pub struct LoadedCheckpoint {
    pub model: Model,
    pub adam: Option<AdamState>,
    pub config: ExperimentConfig,
    pub epoch: usize,
    pub step: usize,
}

/// One optimizer step's record in the metrics CSV.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub mll: f64,
    pub kl_path: f64,
    pub kl_weights: f64,
    pub complexity: f64,
    pub total: f64,
    pub pac_bound_linear: f64,
    pub risk_empirical: f64,
    pub nll_per_step: f64,
}

impl MetricsRow {
    pub const HEADER: &'static str =
        "step,epoch,mll,kl_path,kl_weights,complexity,total,pac_bound_linear,risk_empirical,nll_per_step";

    fn new(step: usize, epoch: usize, b: &LossBreakdown) -> Self {
        Self {
            step,
            epoch,
            mll: b.mll,
            kl_path: b.kl_path,
            kl_weights: b.kl_weights,
            complexity: b.complexity,
            total: b.total,
            pac_bound_linear: b.pac_bound_linear,
            risk_empirical: b.risk_empirical,
            nll_per_step: b.nll_per_step,
        }
    }

    fn write(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step,
            self.epoch,
            self.mll,
            self.kl_path,
            self.kl_weights,
            self.complexity,
            self.total,
            self.pac_bound_linear,
            self.risk_empirical,
            self.nll_per_step
        )
    }
}

/// Grid shared by a minibatch: times relative to each window's first
/// observation, taken from the first window.
pub fn relative_grid(seq: &ObservationSequence, len: usize) -> Result<TimeGrid> {
    let times = seq.grid.times();
    if len == 0 || len > times.len() {
        return Err(Error::invalid(format!(
            "window of {len} points from a sequence of {}",
            times.len()
        )));
    }
    TimeGrid::new(times[..len].iter().map(|t| t - times[0]).collect())
}

fn check_batch(batch: &[&ObservationSequence], dim: usize) -> Result<TimeGrid> {
    let first = batch
        .first()
        .ok_or_else(|| Error::invalid("empty minibatch"))?;
    let len = first.len();
    let grid = relative_grid(first, len)?;
    for seq in batch {
        if seq.len() != len || seq.dim() != dim {
            return Err(Error::invalid(format!(
                "minibatch mixes sequences of shape [{}×{}] and [{len}×{dim}]",
                seq.len(),
                seq.dim()
            )));
        }
        let other = relative_grid(seq, len)?;
        let same = grid
            .times()
            .iter()
            .zip(other.times())
            .all(|(a, b)| (a - b).abs() <= 1e-9);
        if !same {
            return Err(Error::invalid(format!(
                "sequence {} is sampled on a different grid",
                seq.id
            )));
        }
    }
    if len < 2 {
        return Err(Error::invalid("sequences need at least two observations"));
    }
    Ok(grid)
}

/// Records the objective for one minibatch on `tape`, with the drift net
/// given by `net`. `seed` fixes every random draw of the rollouts.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<'t>(
    tape: &'t Tape,
    net: &PosteriorVars<'t>,
    model: &Model,
    batch: &[&ObservationSequence],
    samples: usize,
    pac: &PacConfig,
    use_complexity: bool,
    seed: u64,
) -> Result<TrainingLoss<'t>> {
    let grid = check_batch(batch, model.dim())?;
    let drift = model.sde.view(Some(net));
    let h0: Vec<Vec<f64>> = batch.iter().map(|s| s.values.row(0).to_vec()).collect();
    let path = simulate(
        tape,
        &repeat_rows(&h0, samples)?,
        &grid,
        &drift,
        &model.sde.diffusion,
        seed,
    )?;
    let observations: Vec<Tensor> = batch.iter().map(|s| s.values.clone()).collect();
    let pac = PacConfig {
        s: samples,
        k: grid.steps(),
        ..*pac
    };
    training_loss(
        &path,
        &observations,
        &model.likelihood,
        Some(net),
        &WeightPrior::default(),
        &model.sde.diffusion,
        &pac,
        use_complexity,
    )
}

/// Objective value and gradient for one minibatch; equal seeds give equal
/// results.
pub fn loss_and_gradients(
    model: &Model,
    batch: &[&ObservationSequence],
    samples: usize,
    pac: &PacConfig,
    use_complexity: bool,
    seed: u64,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let tape = Tape::new();
    let net = model.posterior().register(&tape, true)?;
    let loss = batch_loss(
        &tape,
        &net,
        model,
        batch,
        samples,
        pac,
        use_complexity,
        seed,
    )?;
    let grads = tape.backward(loss.total)?;
    Ok((loss.breakdown, net.gradients(&grads)))
}

/// Applies one Adam update to the model's posterior.
pub fn apply_update(model: &mut Model, adam: &mut AdamState, grads: &[Tensor]) -> Result<()> {
    let mut params: Vec<(String, &mut Tensor)> = model.posterior_mut().named_tensors_mut();
    adam.step(&mut params, grads)
}

pub fn new_adam(model: &Model, lr: f64) -> Result<AdamState> {
    let named = model.posterior().named_tensors();
    let refs: Vec<(String, &Tensor)> = named.into_iter().collect();
    AdamState::new(AdamConfig::with_lr(lr), &refs)
}

pub struct TrainingOutcome {
    pub model: Model,
    pub adam: AdamState,
    pub metrics: Vec<MetricsRow>,
}

/// Trains `cfg` on `train`. With `out`, streams the metrics CSV, writes
/// per-epoch wall-clock times to a separate file, and checkpoints every
/// `cfg.checkpoint_every` epochs and at the end. On a divergent rollout the
/// error is returned and the files written so far are left in place.
pub fn run_training(
    cfg: &ExperimentConfig,
    train: &Dataset,
    out: Option<&RunPaths>,
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if train.dim() != cfg.dim() {
        return Err(Error::invalid(format!(
            "training data has dimension {}, config expects {}",
            train.dim(),
            cfg.dim()
        )));
    }
    let mut model = Model::build(cfg, init_posterior(&cfg.arch, cfg.seeds.init)?)?;
    let mut adam = new_adam(&model, cfg.lr)?;
    let pac = PacConfig::new(cfg.delta, train.len(), cfg.samples, 0)?;

    let mut files = match out {
        Some(paths) => {
            std::fs::create_dir_all(&paths.dir)?;
            std::fs::write(paths.dir.join("config.json"), cfg.to_json()?)?;
            let mut metrics = std::io::BufWriter::new(File::create(paths.metrics())?);
            writeln!(metrics, "{}", MetricsRow::HEADER)?;
            let mut timing = std::io::BufWriter::new(File::create(paths.timing())?);
            writeln!(timing, "epoch,seconds")?;
            Some((paths, metrics, timing))
        }
        None => None,
    };

    let mut rows = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seeds.train, &[epoch as u64]));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.minibatch) {
            let batch: Vec<&ObservationSequence> =
                chunk.iter().map(|&i| &train.sequences[i]).collect();
            let seed = derive_seed(cfg.seeds.train, &[epoch as u64, step as u64]);
            let result = loss_and_gradients(
                &model,
                &batch,
                cfg.samples,
                &pac,
                cfg.variant.uses_complexity(),
                seed,
            )
            .and_then(|(b, g)| apply_update(&mut model, &mut adam, &g).map(|_| b));
            let breakdown = match result {
                Ok(b) => b,
                Err(e) => {
                    if let Some((_, m, t)) = files.as_mut() {
                        m.flush()?;
                        t.flush()?;
                    }
                    return Err(e);
                }
            };
            step += 1;
            let row = MetricsRow::new(step, epoch, &breakdown);
            if let Some((_, m, _)) = files.as_mut() {
                row.write(m)?;
            }
            rows.push(row);
        }
        if let Some((paths, m, t)) = files.as_mut() {
            writeln!(t, "{epoch},{:.6}", started.elapsed().as_secs_f64())?;
            m.flush()?;
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                model
                    .to_checkpoint(cfg, Some(&adam), epoch, step)
                    .save(&paths.checkpoint(epoch))?;
            }
        }
    }
    if let Some((paths, mut m, mut t)) = files {
        m.flush()?;
        t.flush()?;
        model
            .to_checkpoint(cfg, Some(&adam), cfg.epochs, step)
            .save(&paths.final_checkpoint())?;
    }
    Ok(TrainingOutcome {
        model,
        adam,
        metrics: rows,
    })
}
