use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bnn::{Activation, MlpArch};
use crate::datagen::{self, GeneratedData, Protocol};
use crate::error::{Error, Result};
use crate::priors::{
    perturb_params, GammaMask, PriorKind, PriorOde, LORENZ_PARAMS, LOTKA_VOLTERRA_PARAMS,
};

/// The four model variants: PAC complexity term on/off × prior drift on/off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    EBayes,
    EPacBayes,
    EBayesHybrid,
    EPacBayesHybrid,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::EBayes,
        Variant::EPacBayes,
        Variant::EBayesHybrid,
        Variant::EPacBayesHybrid,
    ];

    pub fn uses_complexity(self) -> bool {
        matches!(self, Variant::EPacBayes | Variant::EPacBayesHybrid)
    }

    pub fn is_hybrid(self) -> bool {
        matches!(self, Variant::EBayesHybrid | Variant::EPacBayesHybrid)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::EBayes => "e_bayes",
            Variant::EPacBayes => "e_pac_bayes",
            Variant::EBayesHybrid => "e_bayes_hybrid",
            Variant::EPacBayesHybrid => "e_pac_bayes_hybrid",
        }
    }

    /// Same PAC setting with the prior drift switched on.
    pub fn hybrid_counterpart(self) -> Variant {
        if self.uses_complexity() {
            Variant::EPacBayesHybrid
        } else {
            Variant::EBayesHybrid
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Lorenz,
    LotkaVolterra,
}

impl System {
    pub fn default_protocol(self) -> Protocol {
        match self {
            System::Lorenz => Protocol::lorenz(),
            System::LotkaVolterra => Protocol::lotka_volterra(),
        }
    }

    pub fn prior_kind(self) -> PriorKind {
        match self {
            System::Lorenz => PriorKind::Lorenz,
            System::LotkaVolterra => PriorKind::LotkaVolterra,
        }
    }

    pub fn true_params(self) -> Vec<f64> {
        match self {
            System::Lorenz => LORENZ_PARAMS.to_vec(),
            System::LotkaVolterra => LOTKA_VOLTERRA_PARAMS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub system: System,
    /// Overrides the generator protocol of `system`.
    #[serde(default)]
    pub protocol: Option<Protocol>,
}

impl DatasetSpec {
    pub fn protocol(&self) -> Protocol {
        self.protocol
            .clone()
            .unwrap_or_else(|| self.system.default_protocol())
    }

    pub fn generate(&self, seed: u64) -> Result<GeneratedData> {
        match self.system {
            System::Lorenz => datagen::generate_lorenz_with(seed, &self.protocol()),
            System::LotkaVolterra => datagen::generate_lotka_volterra_with(seed, &self.protocol()),
        }
    }
}

/// Prior knowledge handed to the hybrid variants: which physics, its
/// (possibly distorted) parameters and where it enters the drift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub kind: PriorKind,
    /// Parameters before perturbation; the system's true values if absent.
    #[serde(default)]
    pub params: Option<Vec<f64>>,
    pub gamma: Vec<f64>,
    #[serde(default)]
    pub perturb_std: f64,
    /// Indices of the perturbed parameters; all of them if absent.
    #[serde(default)]
    pub perturb_components: Option<Vec<usize>>,
}

impl PriorSpec {
    pub fn zero(dim: usize) -> Self {
        Self {
            kind: PriorKind::Zero,
            params: None,
            gamma: vec![0.0; dim],
            perturb_std: 0.0,
            perturb_components: None,
        }
    }

    pub fn is_informative(&self) -> bool {
        self.kind != PriorKind::Zero && self.gamma.iter().any(|&g| g != 0.0)
    }

    /// The prior ODE after perturbation with `seed`, plus its mask.
    pub fn resolve(&self, dim: usize, seed: u64) -> Result<(PriorOde, GammaMask)> {
        let gamma = GammaMask::new(self.gamma.clone())?;
        if gamma.dim() != dim {
            return Err(Error::Config(format!(
                "gamma has {} entries, state has {dim}",
                gamma.dim()
            )));
        }
        let base = match (&self.params, self.kind) {
            (Some(p), _) => p.clone(),
            (None, PriorKind::Lorenz) => LORENZ_PARAMS.to_vec(),
            (None, PriorKind::LotkaVolterra) => LOTKA_VOLTERRA_PARAMS.to_vec(),
            (None, PriorKind::Zero) => Vec::new(),
        };
        let params = perturb_params(
            &base,
            self.perturb_std,
            seed,
            self.perturb_components.as_deref(),
        )?;
        Ok((PriorOde::new(self.kind, params, dim)?, gamma))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub train: u64,
    pub perturb: u64,
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 0,
            init: 1,
            train: 2,
            perturb: 3,
            eval: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub samples: usize,
    /// Predicted steps per test sequence; all but the first observation if absent.
    #[serde(default)]
    pub horizon: Option<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            samples: 32,
            horizon: None,
        }
    }
}

fn default_delta() -> f64 {
    0.05
}
fn default_obs_std() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    1e-3
}
fn default_minibatch() -> usize {
    2
}
fn default_samples() -> usize {
    8
}
fn default_checkpoint_every() -> usize {
    25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub dataset: DatasetSpec,
    pub arch: MlpArch,
    /// Used by the hybrid variants only.
    pub prior: PriorSpec,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_obs_std")]
    pub obs_std: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    pub epochs: usize,
    #[serde(default = "default_minibatch")]
    pub minibatch: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seeds: Seeds,
    /// Per-dimension diffusion of the model; the generator's if absent.
    #[serde(default)]
    pub diffusion: Option<Vec<f64>>,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub eval: EvalSettings,
}

impl ExperimentConfig {
    /// Lorenz protocol at desk scale: [3,64,64,3] softplus net, the
    /// second-equation prior with κ distorted by unit noise.
    pub fn lorenz_default(variant: Variant) -> Self {
        Self {
            variant,
            dataset: DatasetSpec {
                system: System::Lorenz,
                protocol: None,
            },
            arch: MlpArch::new(vec![3, 64, 64, 3], Activation::Softplus),
            prior: PriorSpec {
                kind: PriorKind::Lorenz,
                params: None,
                gamma: vec![0.0, 1.0, 0.0],
                perturb_std: 1.0,
                perturb_components: Some(vec![1]),
            },
            delta: default_delta(),
            obs_std: default_obs_std(),
            lr: default_lr(),
            epochs: 100,
            minibatch: default_minibatch(),
            samples: default_samples(),
            seeds: Seeds::default(),
            diffusion: None,
            checkpoint_every: default_checkpoint_every(),
            eval: EvalSettings::default(),
        }
    }

    /// Lotka-Volterra protocol: [2,50,50,50,2] ReLU net, 50 epochs, every
    /// prior parameter distorted with standard deviation 0.5.
    pub fn lotka_volterra_default(variant: Variant) -> Self {
        Self {
            variant,
            dataset: DatasetSpec {
                system: System::LotkaVolterra,
                protocol: None,
            },
            arch: MlpArch::new(vec![2, 50, 50, 50, 2], Activation::Relu),
            prior: PriorSpec {
                kind: PriorKind::LotkaVolterra,
                params: None,
                gamma: vec![1.0, 1.0],
                perturb_std: 0.5,
                perturb_components: None,
            },
            epochs: 50,
            ..Self::lorenz_default(variant)
        }
    }

    pub fn dim(&self) -> usize {
        self.dataset.protocol().start.len()
    }

    pub fn diffusion(&self) -> Vec<f64> {
        self.diffusion
            .clone()
            .unwrap_or_else(|| self.dataset.protocol().diffusion)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let dim = self.dim();
        if self.arch.validate(dim).is_err() {
            return fail(format!(
                "arch {:?} does not map dimension {dim} to itself",
                self.arch.widths
            ));
        }
        if self.variant.is_hybrid() && !self.prior.is_informative() {
            return fail(format!(
                "variant {} needs a non-zero prior",
                self.variant.name()
            ));
        }
        if self.variant.uses_complexity() && !(self.delta > 0.0 && self.delta <= 1.0) {
            return fail(format!("delta must lie in (0, 1], got {}", self.delta));
        }
        if self.epochs == 0 || self.minibatch == 0 || self.samples == 0 || self.eval.samples == 0 {
            return fail("epochs, minibatch, samples and eval.samples must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.obs_std >= crate::pacloss::MIN_OBS_STD) {
            return fail("lr must be positive and obs_std at least the 1e-3 floor".into());
        }
        let diffusion = self.diffusion();
        if diffusion.len() != dim || diffusion.iter().any(|g| !(*g > 0.0)) {
            return fail(format!(
                "model diffusion {diffusion:?} must be {dim} positive values"
            ));
        }
        if self.variant.is_hybrid() {
            self.prior
                .resolve(dim, self.seeds.perturb)
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Reads JSON, or TOML when the file name ends in `.toml`.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Output locations of a training run.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn timing(&self) -> PathBuf {
        self.dir.join("timing.csv")
    }

    pub fn checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:04}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }
}
