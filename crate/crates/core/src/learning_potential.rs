//! TD errors, generalized advantage estimation and the positive value loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_GAMMA: f64 = 0.99;
pub const DEFAULT_LAMBDA: f64 = 0.9;

#[derive(Debug, Error, PartialEq)]
pub enum PotentialError {
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("rewards ({rewards}) and values ({values}) differ in length")]
    LengthMismatch { rewards: usize, values: usize },
    #[error("empty sequence")]
    Empty,
    #[error("{name} = {value} outside its valid range")]
    BadParameter { name: &'static str, value: f64 },
}

/// One episode's rewards and value estimates; `bootstrap_value` is V of the
/// state after the last transition (0 when that state is terminal).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub bootstrap_value: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

fn check_finite(xs: &[f64]) -> Result<(), PotentialError> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(PotentialError::NonFinite(i)),
        None => Ok(()),
    }
}

pub fn td_errors(traj: &Trajectory, gamma: f64) -> Result<Vec<f64>, PotentialError> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(PotentialError::BadParameter {
            name: "gamma",
            value: gamma,
        });
    }
    if traj.rewards.len() != traj.values.len() {
        return Err(PotentialError::LengthMismatch {
            rewards: traj.rewards.len(),
            values: traj.values.len(),
        });
    }
    check_finite(&traj.rewards)?;
    check_finite(&traj.values)?;
    if !traj.bootstrap_value.is_finite() {
        return Err(PotentialError::NonFinite(traj.len()));
    }
    let t = traj.len();
    Ok((0..t)
        .map(|i| {
            let next = if i + 1 < t {
                traj.values[i + 1]
            } else {
                traj.bootstrap_value
            };
            traj.rewards[i] + gamma * next - traj.values[i]
        })
        .collect())
}

/// Backward recursion `A_t = δ_t + γλ A_{t+1}`.
pub fn gae(deltas: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>, PotentialError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(PotentialError::BadParameter {
            name: "lambda",
            value: lambda,
        });
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(PotentialError::BadParameter {
            name: "gamma",
            value: gamma,
        });
    }
    check_finite(deltas)?;
    let decay = gamma * lambda;
    let mut out = vec![0.0; deltas.len()];
    let mut acc = 0.0;
    for (i, d) in deltas.iter().enumerate().rev() {
        acc = d + decay * acc;
        out[i] = acc;
    }
    Ok(out)
}

/// Mean of the positively clamped advantages.
pub fn positive_value_loss(deltas: &[f64], gamma: f64, lambda: f64) -> Result<f64, PotentialError> {
    if deltas.is_empty() {
        return Err(PotentialError::Empty);
    }
    let adv = gae(deltas, gamma, lambda)?;
    Ok(adv.iter().map(|a| a.max(0.0)).sum::<f64>() / adv.len() as f64)
}

/// Positive value loss of a whole trajectory.
pub fn score_trajectory(traj: &Trajectory, gamma: f64, lambda: f64) -> Result<f64, PotentialError> {
    positive_value_loss(&td_errors(traj, gamma)?, gamma, lambda)
}
