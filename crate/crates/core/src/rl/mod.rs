//! TD3 for continuous control with actions squashed into the defense's
//! action space.

mod checkpoint;
mod replay;
mod td3;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use replay::{ReplayBuffer, Transition};
pub use td3::{soft_update, td3_target, Td3Agent, TrainStats};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Raw action width of the defense policy: four cue weights and a threshold.
pub const ACTION_DIM: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Td3Config {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub tau: f64,
    pub policy_delay: usize,
    pub target_noise: f64,
    pub noise_clip: f64,
    pub explore_noise: f64,
    pub warmup: usize,
    pub capacity: usize,
}

impl Default for Td3Config {
    fn default() -> Self {
        Td3Config {
            hidden: vec![256, 256],
            lr: 1e-5,
            batch_size: 64,
            gamma: 0.99,
            tau: 0.005,
            policy_delay: 2,
            target_noise: 0.2,
            noise_clip: 0.5,
            explore_noise: 0.1,
            warmup: 20,
            capacity: 100_000,
        }
    }
}

impl Td3Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(invalid(format!("td3 gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(invalid(format!("td3 tau must lie in (0, 1], got {}", self.tau)));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.policy_delay == 0 || self.capacity < self.batch_size {
            return Err(invalid("td3 needs a positive lr, batch size and policy delay, and capacity ≥ batch size"));
        }
        if self.hidden.contains(&0) {
            return Err(invalid("td3 hidden layer widths must be positive"));
        }
        if self.target_noise < 0.0 || self.noise_clip < 0.0 || self.explore_noise < 0.0 {
            return Err(invalid("td3 noise scales must be non-negative"));
        }
        Ok(())
    }
}

/// Cue weights on the 4-simplex and a threshold fraction in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub a: [f64; 4],
    pub b: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `a = softmax(raw[0..4])`, `b = sigmoid(raw[4])`.
pub fn squash_action(raw: &[f64]) -> Result<Action> {
    if raw.len() != ACTION_DIM {
        return Err(Error::DimensionMismatch { expected: ACTION_DIM, actual: raw.len() });
    }
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("raw action".into()));
    }
    let max = raw[..4].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut a = [0.0; 4];
    for (ai, r) in a.iter_mut().zip(&raw[..4]) {
        *ai = (r - max).exp();
    }
    let s: f64 = a.iter().sum();
    for ai in &mut a {
        *ai /= s;
    }
    Ok(Action { a, b: sigmoid(raw[4]) })
}
