//! Planar point mass with Gaussian transition noise.
//!
//! `s' = clip(s + a·dt + ε)`, `ε ~ N(0, σ² I)`, reward `-‖s'‖`. The
//! transition density is the unclipped Gaussian; it is exact whenever no
//! coordinate of `s'` sits on the clip boundary.

use alloc::vec::Vec;

use super::{Environment, Expert, Step, TransitionDensity};
use crate::data::{Action, ActionSpace, EnvDescriptor};
use crate::error::{Error, Result};
use crate::math;
use crate::rng::{self, Rng};

pub const STATE_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PointMass {
    pub dt: f64,
    pub sigma: f64,
    /// States are clipped to `[-bound, bound]²`.
    pub bound: f64,
    /// Initial states are uniform on `[-start, start]²`.
    pub start: f64,
    pub horizon: usize,
}

impl Default for PointMass {
    fn default() -> Self {
        Self {
            dt: 0.1,
            sigma: 0.1,
            bound: 2.0,
            start: 0.8,
            horizon: 100,
        }
    }
}

impl PointMass {
    pub fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous {
            dim: STATE_DIM,
            low: -1.0,
            high: 1.0,
        }
    }

    fn check(&self, state: &[f64], action: &Action) -> Result<Vec<f64>> {
        if state.len() != STATE_DIM || state.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidState(alloc::format!("{state:?}")));
        }
        match action {
            Action::Continuous(a) if a.len() == STATE_DIM && a.iter().all(|v| v.abs() <= 1.0) => Ok(a.clone()),
            other => Err(Error::ActionRange(alloc::format!("{other:?} outside [-1, 1]^2"))),
        }
    }

    pub fn mean_next(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        state.iter().zip(action).map(|(s, a)| s + a * self.dt).collect()
    }
}

impl Environment for PointMass {
    fn descriptor(&self) -> EnvDescriptor {
        EnvDescriptor {
            name: "pointmass".into(),
            state_dim: STATE_DIM,
            action_space: self.action_space(),
            horizon: self.horizon,
        }
    }

    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        (0..STATE_DIM).map(|_| rng::uniform(rng, -self.start, self.start)).collect()
    }

    fn step(&self, state: &[f64], action: &Action, rng: &mut Rng) -> Result<Step> {
        let a = self.check(state, action)?;
        let next: Vec<f64> = self
            .mean_next(state, &a)
            .into_iter()
            .map(|m| (m + self.sigma * rng::normal(rng)).clamp(-self.bound, self.bound))
            .collect();
        let reward = -math::sqrt(next.iter().map(|x| x * x).sum());
        Ok(Step {
            next,
            reward,
            done: false,
        })
    }

    fn transition_logpdf(&self, state: &[f64], action: &Action, next: &[f64]) -> Result<TransitionDensity> {
        let a = self.check(state, action)?;
        if next.len() != STATE_DIM {
            return Err(Error::InvalidState(alloc::format!("{next:?}")));
        }
        let mean = self.mean_next(state, &a);
        let log_density = next
            .iter()
            .zip(&mean)
            .map(|(&x, &m)| math::normal_logpdf(x, m, self.sigma))
            .sum();
        let exact = next.iter().all(|v| v.abs() < self.bound);
        Ok(TransitionDensity { log_density, exact })
    }
}

/// Proportional controller `a = clip(-k_p s) + N(0, noise²)`, clipped to the
/// action box. `logpdf` is the unclipped Gaussian around `clip(-k_p s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMassExpert {
    pub env: PointMass,
    pub gain: f64,
    pub noise: f64,
}

impl PointMassExpert {
    pub fn new(env: PointMass) -> Self {
        Self {
            env,
            gain: 1.0,
            noise: 0.05,
        }
    }

    pub fn mean_action(&self, state: &[f64]) -> Vec<f64> {
        state.iter().map(|s| (-self.gain * s).clamp(-1.0, 1.0)).collect()
    }
}

impl Expert for PointMassExpert {
    fn act(&self, state: &[f64], rng: &mut Rng) -> Result<Action> {
        if state.len() != STATE_DIM {
            return Err(Error::InvalidState(alloc::format!("{state:?}")));
        }
        let a = self
            .mean_action(state)
            .into_iter()
            .map(|m| (m + self.noise * rng::normal(rng)).clamp(-1.0, 1.0))
            .collect();
        Ok(Action::Continuous(a))
    }

    fn logpdf(&self, state: &[f64], action: &Action) -> Result<f64> {
        let Action::Continuous(a) = action else {
            return Err(Error::ActionRange("point-mass actions are continuous".into()));
        };
        Ok(self
            .mean_action(state)
            .iter()
            .zip(a)
            .map(|(&m, &x)| math::normal_logpdf(x, m, self.noise))
            .sum())
    }
}
