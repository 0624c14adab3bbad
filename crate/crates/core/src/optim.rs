//! Adam over a set of named parameter tensors.

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// First and second moments of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub key: String,
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub tau: u64,
    pub moments: Vec<Moments>,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[(String, &Tensor)]) -> Result<Self> {
        config.validate()?;
        let moments = params
            .iter()
            .map(|(key, t)| Moments {
                key: key.clone(),
                m: Tensor::zeros(t.shape()),
                v: Tensor::zeros(t.shape()),
            })
            .collect();
        Ok(Self {
            config,
            tau: 0,
            moments,
        })
    }

    /// One bias-corrected Adam update. `params` and `grads` must follow the
    /// key order the state was created with. Nothing is modified when any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != self.moments.len() {
            return Err(Error::invalid(format!(
                "Adam state tracks {} tensors, got {} parameters and {} gradients",
                self.moments.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((key, p), (g, mom)) in params.iter().zip(grads.iter().zip(&self.moments)) {
            if *key != mom.key {
                return Err(Error::invalid(format!(
                    "parameter `{key}` where `{}` was expected",
                    mom.key
                )));
            }
            if p.shape() != g.shape() || p.shape() != mom.m.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { key: key.clone() });
            }
        }

        self.tau += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powf(self.tau as f64);
        let c2 = 1.0 - beta2.powf(self.tau as f64);
        for ((_, p), (g, mom)) in params
            .iter_mut()
            .zip(grads.iter().zip(self.moments.iter_mut()))
        {
            let p = p.data_mut();
            let m = mom.m.data_mut();
            let v = mom.v.data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Checkpoint view: `adam.m.<key>`, `adam.v.<key>` and `adam.tau`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.moments.len() + 1);
        for mom in &self.moments {
            out.push((format!("adam.m.{}", mom.key), mom.m.clone()));
            out.push((format!("adam.v.{}", mom.key), mom.v.clone()));
        }
        out.push(("adam.tau".to_string(), Tensor::scalar(self.tau as f64)));
        out
    }

    /// Inverse of [`AdamState::named_tensors`] for the given parameter keys.
    pub fn from_named(
        config: AdamConfig,
        keys: &[String],
        mut lookup: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<Self> {
        let mut fetch = |name: String| {
            lookup(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        let tau = fetch("adam.tau".to_string())?;
        if !tau.is_scalar() || tau.item() < 0.0 || tau.item().fract() != 0.0 {
            return Err(Error::Checkpoint(
                "adam.tau must be a non-negative integer scalar".into(),
            ));
        }
        let moments = keys
            .iter()
            .map(|key| {
                Ok(Moments {
                    key: key.clone(),
                    m: fetch(format!("adam.m.{key}"))?,
                    v: fetch(format!("adam.v.{key}"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            tau: tau.item() as u64,
            moments,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(values: Vec<f64>) -> (Tensor, AdamState) {
        let p = Tensor::vector(values);
        let state = AdamState::new(AdamConfig::default(), &[("w".into(), &p)]).unwrap();
        (p, state)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut p, mut st) = setup(vec![0.5, -2.0]);
        st.step(&mut [("w".into(), &mut p)], &[Tensor::full(&[2], 1.0)])
            .unwrap();
        let expect = -1e-3 / (1.0 + 1e-8);
        assert!((p.data()[0] - 0.5 - expect).abs() < 1e-15);
        assert!((p.data()[1] + 2.0 - expect).abs() < 1e-15);
        assert_eq!(st.tau, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (mut p, mut st) = setup(vec![0.5, -2.0]);
        st.step(&mut [("w".into(), &mut p)], &[Tensor::zeros(&[2])])
            .unwrap();
        assert_eq!(p.data(), &[0.5, -2.0]);
    }

    #[test]
    fn non_finite_gradient_names_key_and_leaves_state() {
        let (mut p, mut st) = setup(vec![1.0]);
        let bad = Tensor::from_parts(vec![1], vec![f64::NAN]).unwrap();
        let err = st.step(&mut [("w".into(), &mut p)], &[bad]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref key } if key == "w"));
        assert_eq!(st.tau, 0);
        assert_eq!(p.data(), &[1.0]);
    }

    #[test]
    fn bounded_steps_under_constant_gradient() {
        let (mut p, mut st) = setup(vec![0.0, 0.0, 0.0]);
        let g = Tensor::vector(vec![3.0, -0.01, 250.0]);
        for _ in 0..100 {
            let before = p.clone();
            st.step(&mut [("w".into(), &mut p)], std::slice::from_ref(&g))
                .unwrap();
            for (a, b) in p.data().iter().zip(before.data()) {
                assert!((a - b).abs() <= 1e-3 * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn identical_inputs_give_identical_trajectories() {
        let run = || {
            let (mut p, mut st) = setup(vec![0.3, 0.7]);
            for k in 0..20 {
                let g = Tensor::vector(vec![(k as f64).sin(), (k as f64 * 0.3).cos()]);
                st.step(&mut [("w".into(), &mut p)], &[g]).unwrap();
            }
            (p, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn named_round_trip() {
        let (mut p, mut st) = setup(vec![0.3, 0.7]);
        st.step(
            &mut [("w".into(), &mut p)],
            &[Tensor::vector(vec![0.1, 0.2])],
        )
        .unwrap();
        let named = st.named_tensors();
        let back = AdamState::from_named(st.config, &["w".into()], |k| {
            named.iter().find(|(n, _)| n == k).map(|(_, t)| t.clone())
        })
        .unwrap();
        assert_eq!(back, st);
    }
}
