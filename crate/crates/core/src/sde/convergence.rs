use serde::{Deserialize, Serialize};

use super::NoiseStreams;
use crate::error::{Error, Result};

/// Scalar test SDEs whose strong solution is known on every Wiener path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Oracle {
    /// `dX = μX dt + σX dW`, solved by `x0·exp((μ − σ²/2)t + σW_t)`.
    Gbm { mu: f64, sigma: f64, x0: f64 },
    /// `dX = −θX dt + σ dW`. The reference solution integrates the
    /// variation-of-constants formula on a grid 64× finer than the finest
    /// tested step.
    Ou { theta: f64, sigma: f64, x0: f64 },
    /// `dX = aX dt`, solved by `x0·exp(at)`.
    Linear { a: f64, x0: f64 },
}

impl Oracle {
    pub fn name(&self) -> &'static str {
        match self {
            Oracle::Gbm { .. } => "gbm",
            Oracle::Ou { .. } => "ou",
            Oracle::Linear { .. } => "linear",
        }
    }

    pub fn default_gbm() -> Self {
        Oracle::Gbm {
            mu: 2.0,
            sigma: 1.0,
            x0: 1.0,
        }
    }

    pub fn default_ou() -> Self {
        Oracle::Ou {
            theta: 1.0,
            sigma: 1.0,
            x0: 1.0,
        }
    }

    pub fn default_linear() -> Self {
        Oracle::Linear { a: 1.0, x0: 1.0 }
    }

    fn refinement(&self) -> usize {
        match self {
            Oracle::Ou { .. } => 64,
            _ => 1,
        }
    }

    fn drift(&self, x: f64) -> f64 {
        match *self {
            Oracle::Gbm { mu, .. } => mu * x,
            Oracle::Ou { theta, .. } => -theta * x,
            Oracle::Linear { a, .. } => a * x,
        }
    }

    fn diffusion(&self, x: f64) -> f64 {
        match *self {
            Oracle::Gbm { sigma, .. } => sigma * x,
            Oracle::Ou { sigma, .. } => sigma,
            Oracle::Linear { .. } => 0.0,
        }
    }

    fn x0(&self) -> f64 {
        match *self {
            Oracle::Gbm { x0, .. } | Oracle::Ou { x0, .. } | Oracle::Linear { x0, .. } => x0,
        }
    }

    /// Reference solution at every fine grid point given the fine increments.
    fn reference(&self, fine_dt: f64, dw: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(dw.len() + 1);
        out.push(self.x0());
        match *self {
            Oracle::Gbm { mu, sigma, x0 } => {
                let mut w = 0.0;
                for (j, inc) in dw.iter().enumerate() {
                    w += inc;
                    let t = (j + 1) as f64 * fine_dt;
                    out.push(x0 * ((mu - 0.5 * sigma * sigma) * t + sigma * w).exp());
                }
            }
            Oracle::Ou { theta, sigma, x0 } => {
                let decay = (-theta * fine_dt).exp();
                let mid = (-0.5 * theta * fine_dt).exp();
                let mut x = x0;
                for inc in dw {
                    x = decay * x + sigma * mid * inc;
                    out.push(x);
                }
            }
            Oracle::Linear { a, x0 } => {
                for j in 1..=dw.len() {
                    out.push(x0 * (a * j as f64 * fine_dt).exp());
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub oracle: String,
    pub dts: Vec<f64>,
    pub errors: Vec<f64>,
    pub slope: f64,
}

/// Strong-error study of Euler-Maruyama against an oracle.
///
/// For each step size the EM path and the reference share one Wiener path;
/// the error is the mean over `samples` paths of the largest deviation over
/// the coarse grid points in `[0, horizon]`. Returns the least-squares slope
/// of `log error` against `log Δt`.
pub fn convergence_study(
    oracle: Oracle,
    dts: &[f64],
    horizon: f64,
    samples: usize,
    seed: u64,
) -> Result<ConvergenceReport> {
    if dts.len() < 3 {
        return Err(Error::invalid(format!(
            "convergence study needs at least 3 step sizes, got {}",
            dts.len()
        )));
    }
    if samples == 0 || !(horizon > 0.0) {
        return Err(Error::invalid("need samples >= 1 and a positive horizon"));
    }
    let finest = dts.iter().copied().fold(f64::INFINITY, f64::min);
    let fine_dt = finest / oracle.refinement() as f64;
    let fine_steps = ratio(horizon, fine_dt)?;
    let blocks: Vec<usize> = dts
        .iter()
        .map(|&dt| ratio(dt, fine_dt))
        .collect::<Result<_>>()?;
    if let Some(b) = blocks.iter().find(|&&b| fine_steps % b != 0) {
        return Err(Error::invalid(format!(
            "step {} does not divide the horizon {horizon}",
            *b as f64 * fine_dt
        )));
    }

    let mut streams = NoiseStreams::new(seed, samples);
    let mut sums = vec![0.0; dts.len()];
    let mut dw = vec![vec![0.0; fine_steps]; samples];
    for j in 0..fine_steps {
        let step = streams.next_step(1, fine_dt, &[]);
        for (s, path) in dw.iter_mut().enumerate() {
            path[j] = step.dw.data()[s];
        }
    }

    for path in &dw {
        let exact = oracle.reference(fine_dt, path);
        for (acc, &block) in sums.iter_mut().zip(&blocks) {
            let dt = block as f64 * fine_dt;
            let mut x = oracle.x0();
            let mut worst: f64 = 0.0;
            for (k, chunk) in path.chunks_exact(block).enumerate() {
                let inc: f64 = chunk.iter().sum();
                x += oracle.drift(x) * dt + oracle.diffusion(x) * inc;
                worst = worst.max((x - exact[(k + 1) * block]).abs());
            }
            *acc += worst;
        }
    }
    let errors: Vec<f64> = sums.iter().map(|s| s / samples as f64).collect();
    let slope = log_log_slope(dts, &errors)?;
    Ok(ConvergenceReport {
        oracle: oracle.name().to_string(),
        dts: dts.to_vec(),
        errors,
        slope,
    })
}

fn ratio(a: f64, b: f64) -> Result<usize> {
    let r = a / b;
    let n = r.round();
    if n < 1.0 || (r - n).abs() > 1e-9 * n {
        return Err(Error::invalid(format!(
            "{a} is not an integer multiple of {b}"
        )));
    }
    Ok(n as usize)
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if ys.iter().any(|&y| !(y > 0.0)) {
        return Err(Error::invalid("log-log fit needs positive errors"));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dts() -> Vec<f64> {
        (4..=9).map(|p| 2f64.powi(-p)).collect()
    }

    #[test]
    fn too_few_step_sizes() {
        assert!(convergence_study(Oracle::default_ou(), &[0.1, 0.05], 1.0, 4, 0).is_err());
    }

    #[test]
    fn deterministic_euler_halving_ratio() {
        let report = convergence_study(Oracle::default_linear(), &dts(), 1.0, 1, 0).unwrap();
        for w in report.errors.windows(2) {
            let r = w[0] / w[1];
            assert!((r - 2.0).abs() < 0.1, "ratio {r}");
        }
        assert!(report.slope >= 0.95);
    }

    #[test]
    fn slope_of_exact_power_law() {
        let xs = [0.1, 0.2, 0.4];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(0.5)).collect();
        assert!((log_log_slope(&xs, &ys).unwrap() - 0.5).abs() < 1e-12);
    }
}
