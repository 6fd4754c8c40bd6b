//! Per-step reward shaping and discounted returns.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub r_hit: f64,
    pub lambda_step: f64,
    pub lambda_timeout: f64,
    pub gamma: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { r_hit: 10.0, lambda_step: 0.05, lambda_timeout: 1.0, gamma: 0.99 }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.r_hit > 0.0) {
            return Err(format!("r_hit must be positive, got {}", self.r_hit));
        }
        if !(self.lambda_step >= 0.0) || !(self.lambda_timeout >= 0.0) {
            return Err("step and timeout penalties must be non-negative".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        Ok(())
    }
}

/// What happened on one action.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepEvent {
    pub new_hits: usize,
    pub is_terminal_timeout: bool,
}

/// `new_hits·r_hit − λ_step − [timeout]·λ_timeout`. The step penalty is
/// charged on every action, including the one that lands on a target.
pub fn step_reward(event: StepEvent, cfg: &RewardConfig) -> f64 {
    let mut r = event.new_hits as f64 * cfg.r_hit - cfg.lambda_step;
    if event.is_terminal_timeout {
        r -= cfg.lambda_timeout;
    }
    r
}

/// `G_t = r_t + γ G_{t+1}`, accumulated from the back.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (g, r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *g = acc;
    }
    out
}

/// Exponential moving average: `b ← β b + (1 − β) G`.
pub fn update_baseline(baseline: f64, beta: f64, episode_return: f64) -> f64 {
    beta * baseline + (1.0 - beta) * episode_return
}
