use serde::{Deserialize, Serialize};

use super::RewardError;

/// Groups whose reward spread falls below this get all-zero advantages.
pub const DEGENERATE_STD: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdMode {
    /// Divide by G.
    #[default]
    Population,
    /// Divide by G - 1.
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoParams {
    pub epsilon: f64,
    pub kl_beta: f64,
    pub group_size: usize,
    pub std_mode: StdMode,
}

impl Default for GrpoParams {
    fn default() -> Self {
        GrpoParams {
            epsilon: 0.2,
            kl_beta: 0.04,
            group_size: 4,
            std_mode: StdMode::Population,
        }
    }
}

impl GrpoParams {
    pub fn validate(&self) -> Result<(), RewardError> {
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(RewardError::OutOfRange { field: "epsilon", value: self.epsilon });
        }
        if !self.kl_beta.is_finite() || self.kl_beta < 0.0 {
            return Err(RewardError::OutOfRange { field: "kl_beta", value: self.kl_beta });
        }
        if self.group_size < 2 {
            return Err(RewardError::GroupTooSmall(self.group_size));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryGroup {
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl TrajectoryGroup {
    pub fn new(rewards: Vec<f64>, mode: StdMode) -> Result<Self, RewardError> {
        let advantages = group_advantages_with(&rewards, mode)?;
        Ok(TrajectoryGroup { rewards, advantages })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Within-group z-scores using the population standard deviation.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, RewardError> {
    group_advantages_with(rewards, StdMode::Population)
}

pub fn group_advantages_with(rewards: &[f64], mode: StdMode) -> Result<Vec<f64>, RewardError> {
    let g = rewards.len();
    if g < 2 {
        return Err(RewardError::GroupTooSmall(g));
    }
    if let Some(&bad) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(RewardError::NonFinite(bad));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let ss: f64 = rewards.iter().map(|r| (r - mean) * (r - mean)).sum();
    let denom = match mode {
        StdMode::Population => g as f64,
        StdMode::Sample => (g - 1) as f64,
    };
    let std = (ss / denom).sqrt();
    if std < DEGENERATE_STD {
        return Ok(vec![0.0; g]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `r - ln r - 1` with `r = exp(logp_ref - logp_theta)`, evaluated as
/// `expm1(d) - d` so values near `r = 1` keep their precision.
pub fn kl_estimate(logp_theta: f64, logp_ref: f64) -> Result<f64, RewardError> {
    if !logp_theta.is_finite() {
        return Err(RewardError::NonFinite(logp_theta));
    }
    if !logp_ref.is_finite() {
        return Err(RewardError::NonFinite(logp_ref));
    }
    let d = logp_ref - logp_theta;
    let v = d.exp_m1() - d;
    if !v.is_finite() {
        return Err(RewardError::Overflow(d));
    }
    Ok(v.max(0.0))
}

/// Negated clipped surrogate minus the KL penalty, averaged over the group.
/// Any `epsilon >= 1` leaves the lower clip bound inactive for positive
/// ratios; `f64::INFINITY` disables clipping.
pub fn grpo_objective(
    ratios: &[f64],
    advantages: &[f64],
    kls: &[f64],
    epsilon: f64,
    beta: f64,
) -> Result<f64, RewardError> {
    let g = ratios.len();
    if g == 0 {
        return Err(RewardError::GroupTooSmall(0));
    }
    if advantages.len() != g || kls.len() != g {
        return Err(RewardError::LengthMismatch {
            ratios: g,
            advantages: advantages.len(),
            kls: kls.len(),
        });
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(RewardError::OutOfRange { field: "epsilon", value: epsilon });
    }
    if !beta.is_finite() || beta < 0.0 {
        return Err(RewardError::OutOfRange { field: "beta", value: beta });
    }
    let mut sum = 0.0;
    for i in 0..g {
        let (r, a) = (ratios[i], advantages[i]);
        let clipped = r.clamp(1.0 - epsilon, 1.0 + epsilon);
        sum += (r * a).min(clipped * a) - beta * kls[i];
    }
    Ok(-sum / g as f64)
}
