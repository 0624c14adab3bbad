//! Known-physics prior drifts and the per-dimension mask that decides where
//! they enter the hybrid drift.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Var;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// `(ζ(y−x), x(κ−z)−y, xy−ρz)` with params `(ζ, κ, ρ)`.
    Lorenz,
    /// `(θ1x − θ2xy, −θ3y + θ4xy)` with params `(θ1, θ2, θ3, θ4)`.
    LotkaVolterra,
    /// No prior knowledge; the drift is identically zero.
    Zero,
}

pub const LORENZ_PARAMS: [f64; 3] = [10.0, 28.0, 2.67];
pub const LOTKA_VOLTERRA_PARAMS: [f64; 4] = [2.0, 1.0, 4.0, 1.0];

/// Prior ODE `dh = r(h) dt` with fixed parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorOde {
    kind: PriorKind,
    params: Vec<f64>,
    dim: usize,
}

impl PriorOde {
    pub fn new(kind: PriorKind, params: Vec<f64>, dim: usize) -> Result<Self> {
        let (want_dim, want_params) = match kind {
            PriorKind::Lorenz => (Some(3), 3),
            PriorKind::LotkaVolterra => (Some(2), 4),
            PriorKind::Zero => (None, 0),
        };
        if want_dim.is_some_and(|d| d != dim) {
            return Err(Error::invalid(format!(
                "{kind:?} prior is {}-dimensional, got {dim}",
                want_dim.unwrap()
            )));
        }
        if params.len() != want_params {
            return Err(Error::invalid(format!(
                "{kind:?} prior takes {want_params} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("prior parameters must be finite"));
        }
        Ok(Self { kind, params, dim })
    }

    pub fn lorenz(params: [f64; 3]) -> Self {
        Self::new(PriorKind::Lorenz, params.to_vec(), 3).unwrap()
    }

    pub fn lotka_volterra(params: [f64; 4]) -> Self {
        Self::new(PriorKind::LotkaVolterra, params.to_vec(), 2).unwrap()
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(PriorKind::Zero, Vec::new(), dim).unwrap()
    }

    pub fn kind(&self) -> PriorKind {
        self.kind
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Evaluates `r(h)` for a single state.
    pub fn eval(&self, h: &[f64]) -> Vec<f64> {
        match self.kind {
            PriorKind::Lorenz => lorenz_drift(h, &self.params).to_vec(),
            PriorKind::LotkaVolterra => lotka_volterra_drift(h, &self.params).to_vec(),
            PriorKind::Zero => vec![0.0; self.dim],
        }
    }

    /// Evaluates `r(h)` on the tape for a `[rows×P]` batch of states.
    pub fn eval_var<'t>(&self, h: Var<'t>) -> Result<Var<'t>> {
        let tape = h.tape();
        let p = &self.params;
        match self.kind {
            PriorKind::Lorenz => {
                let (x, y, z) = (h.column(0)?, h.column(1)?, h.column(2)?);
                let dx = y.sub(x)?.scale(p[0])?;
                let dy = x.mul(z.neg()?.add_scalar(p[1])?)?.sub(y)?;
                let dz = x.mul(y)?.sub(z.scale(p[2])?)?;
                tape.concat_cols(&[dx, dy, dz])
            }
            PriorKind::LotkaVolterra => {
                let (x, y) = (h.column(0)?, h.column(1)?);
                let xy = x.mul(y)?;
                let dx = x.scale(p[0])?.sub(xy.scale(p[1])?)?;
                let dy = xy.scale(p[3])?.sub(y.scale(p[2])?)?;
                tape.concat_cols(&[dx, dy])
            }
            PriorKind::Zero => h.scale(0.0),
        }
    }
}

/// Lorenz drift `(ζ(y−x), x(κ−z)−y, xy−ρz)`.
pub fn lorenz_drift(h: &[f64], params: &[f64]) -> [f64; 3] {
    let (x, y, z) = (h[0], h[1], h[2]);
    let (zeta, kappa, rho) = (params[0], params[1], params[2]);
    [zeta * (y - x), x * (kappa - z) - y, x * y - rho * z]
}

/// Lotka-Volterra drift `(θ1x − θ2xy, −θ3y + θ4xy)`.
pub fn lotka_volterra_drift(h: &[f64], params: &[f64]) -> [f64; 2] {
    let (x, y) = (h[0], h[1]);
    [
        params[0] * x - params[1] * x * y,
        -params[2] * y + params[3] * x * y,
    ]
}

/// Per-dimension weights `γ ∈ [0,1]^P` on the prior drift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct GammaMask(Vec<f64>);

impl GammaMask {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|g| !(0.0..=1.0).contains(*g)) {
            return Err(Error::invalid(format!(
                "gamma components must lie in [0, 1], got {bad}"
            )));
        }
        Ok(Self(values))
    }

    pub fn ones(dim: usize) -> Self {
        Self(vec![1.0; dim])
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&g| g == 0.0)
    }
}

impl TryFrom<Vec<f64>> for GammaMask {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<GammaMask> for Vec<f64> {
    fn from(mask: GammaMask) -> Self {
        mask.0
    }
}

/// Elementwise `γ ∘ r`.
pub fn apply_mask(r: &[f64], gamma: &GammaMask) -> Result<Vec<f64>> {
    if r.len() != gamma.dim() {
        return Err(Error::invalid(format!(
            "mask of dimension {} applied to drift of dimension {}",
            gamma.dim(),
            r.len()
        )));
    }
    Ok(r.iter().zip(gamma.values()).map(|(r, g)| r * g).collect())
}

/// Adds `std · N(0,1)` noise to the selected parameters (all when
/// `components` is `None`). Draws for unselected components are still
/// consumed so a given seed perturbs each component identically whatever
/// the selection.
pub fn perturb_params(
    params: &[f64],
    std: f64,
    seed: u64,
    components: Option<&[usize]>,
) -> Result<Vec<f64>> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::invalid(format!(
            "perturbation std must be finite and >= 0, got {std}"
        )));
    }
    if let Some(bad) = components.and_then(|c| c.iter().find(|&&i| i >= params.len())) {
        return Err(Error::invalid(format!(
            "perturbed component {bad} out of range"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(params
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            let selected = components.is_none_or(|c| c.contains(&i));
            if selected {
                p + std * z
            } else {
                p
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Tape, Tensor};

    #[test]
    fn lorenz_examples() {
        assert_eq!(
            lorenz_drift(&[0.0, 0.0, 0.0], &LORENZ_PARAMS),
            [0.0, 0.0, 0.0]
        );
        let d = lorenz_drift(&[1.0, 1.0, 28.0], &LORENZ_PARAMS);
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], -1.0);
        assert!((d[2] - (-73.76)).abs() < 1e-12);
        assert_eq!(
            lorenz_drift(&[1.0, 1.0, 28.0], &[123.0, 28.0, 2.67])[0],
            0.0
        );
    }

    #[test]
    fn lotka_volterra_examples() {
        let p = LOTKA_VOLTERRA_PARAMS;
        assert_eq!(lotka_volterra_drift(&[4.0, 2.0], &p), [0.0, 0.0]);
        assert_eq!(lotka_volterra_drift(&[0.0, 3.0], &p), [0.0, -12.0]);
        assert_eq!(lotka_volterra_drift(&[1.0, 1.0], &p), [1.0, -3.0]);
    }

    #[test]
    fn mask_examples() {
        let r = [1.5, -2.0, 7.0];
        let g = GammaMask::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(apply_mask(&r, &g).unwrap(), vec![0.0, -2.0, 0.0]);
        assert_eq!(apply_mask(&r, &GammaMask::ones(3)).unwrap(), r.to_vec());
        assert_eq!(apply_mask(&r, &GammaMask::zeros(3)).unwrap(), vec![0.0; 3]);
        assert!(apply_mask(&r, &GammaMask::ones(2)).is_err());
        assert!(GammaMask::new(vec![0.5, 1.5]).is_err());
    }

    #[test]
    fn perturbation_examples() {
        let xi = LORENZ_PARAMS;
        assert_eq!(perturb_params(&xi, 0.0, 3, None).unwrap(), xi.to_vec());
        let only_second = perturb_params(&xi, 1.0, 11, Some(&[1])).unwrap();
        assert_eq!(only_second[0], xi[0]);
        assert_ne!(only_second[1], xi[1]);
        assert_eq!(only_second[2], xi[2]);
        assert_eq!(
            perturb_params(&xi, 1.0, 11, Some(&[1])).unwrap(),
            only_second
        );
        let all = perturb_params(&xi, 1.0, 11, None).unwrap();
        assert_eq!(all[1], only_second[1]);
        assert!(perturb_params(&xi, -1.0, 0, None).is_err());
    }

    #[test]
    fn dimension_checks() {
        assert!(PriorOde::new(PriorKind::Lorenz, vec![1.0; 3], 2).is_err());
        assert!(PriorOde::new(PriorKind::LotkaVolterra, vec![1.0; 3], 2).is_err());
        assert!(PriorOde::new(PriorKind::Zero, vec![], 5).is_ok());
    }

    #[test]
    fn tape_evaluation_matches_plain() {
        let states = [[1.0, -2.0, 30.0], [0.3, 0.4, 0.5]];
        let tape = Tape::new();
        let h = tape.constant(Tensor::matrix(2, 3, states.concat()).unwrap());
        let prior = PriorOde::lorenz([9.0, 27.0, 3.0]);
        let out = prior.eval_var(h).unwrap().value();
        for (r, s) in states.iter().enumerate() {
            assert_eq!(out.row(r), prior.eval(s).as_slice());
        }
        let lv = PriorOde::lotka_volterra([2.0, 1.0, 4.0, 1.0]);
        let h = tape.constant(Tensor::matrix(1, 2, vec![1.5, 0.5]).unwrap());
        assert_eq!(
            lv.eval_var(h).unwrap().value().data(),
            lv.eval(&[1.5, 0.5]).as_slice()
        );
    }
}
