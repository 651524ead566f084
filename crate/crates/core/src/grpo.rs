//! Group-relative policy optimization: rollouts, groups, advantages and the
//! clipped surrogate objective.
//!
//! Advantages use the population standard deviation. A zero-variance group
//! gets all-zero advantages plus a [`Degeneracy`] flag instead of NaNs; the
//! flag separates an all-fail group (the resample trigger) from an all-pass
//! group (nothing to learn).

use serde::{Deserialize, Serialize};

use crate::toy::Token;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Resampled,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingContext {
    Naive,
    Perturbed { delta_id: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub tokens: Vec<Token>,
    pub reward: f64,
    /// Per-token log-probabilities under the sampling policy.
    pub old_logprobs: Vec<f64>,
    pub provenance: Provenance,
    pub sampling_context: SamplingContext,
    /// Prompt the rollout is trained against when it differs from the one it
    /// was sampled under. Set by [`crate::engine::pseudo_rollout`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_prompt: Option<String>,
}

impl Rollout {
    pub fn original(tokens: Vec<Token>, reward: f64, old_logprobs: Vec<f64>) -> Self {
        Rollout {
            tokens,
            reward,
            old_logprobs,
            provenance: Provenance::Original,
            sampling_context: SamplingContext::Naive,
            training_prompt: None,
        }
    }

    /// Resampled rollouts from a naive-prompt baseline carry
    /// [`SamplingContext::Naive`]; those drawn under a perturbation carry its id.
    pub fn resampled(
        tokens: Vec<Token>,
        reward: f64,
        old_logprobs: Vec<f64>,
        sampling_context: SamplingContext,
    ) -> Self {
        Rollout {
            tokens,
            reward,
            old_logprobs,
            provenance: Provenance::Resampled,
            sampling_context,
            training_prompt: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.old_logprobs.len() != self.tokens.len() {
            return Err(Error::structural(format!(
                "rollout has {} tokens but {} old log-probabilities",
                self.tokens.len(),
                self.old_logprobs.len()
            )));
        }
        if self.reward != 0.0 && self.reward != 1.0 {
            return Err(Error::structural(format!(
                "reward {} is not binary",
                self.reward
            )));
        }
        if self.provenance == Provenance::Original
            && matches!(self.sampling_context, SamplingContext::Perturbed { .. })
        {
            return Err(Error::structural(
                "original rollouts are sampled in the naive context",
            ));
        }
        Ok(())
    }

    /// Whether the training-time log-probability is evaluated with the
    /// perturbation active. Pseudo-rollouts train in the naive context.
    pub fn trains_perturbed(&self) -> bool {
        self.training_prompt.is_none()
            && matches!(self.sampling_context, SamplingContext::Perturbed { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub question_id: String,
    pub prompt: String,
    pub rollouts: Vec<Rollout>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantages: Option<Vec<f64>>,
}

impl Group {
    pub fn new(
        question_id: impl Into<String>,
        prompt: impl Into<String>,
        rollouts: Vec<Rollout>,
    ) -> Result<Self> {
        let group = Group {
            question_id: question_id.into(),
            prompt: prompt.into(),
            rollouts,
            advantages: None,
        };
        group.validate()?;
        Ok(group)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rollouts.len() < 2 {
            return Err(Error::structural("a group needs at least 2 rollouts"));
        }
        for r in &self.rollouts {
            r.validate()?;
        }
        if let Some(a) = &self.advantages {
            if a.len() != self.rollouts.len() {
                return Err(Error::structural("one advantage per rollout required"));
            }
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.rollouts.len()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }

    /// Fills `advantages` with [`group_advantage`] and returns the degeneracy flag.
    pub fn compute_advantages(&mut self) -> Option<Degeneracy> {
        let adv = group_advantage(&self.rewards());
        self.advantages = Some(adv.values);
        adv.degenerate
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapingConfig {
    #[serde(default = "defaults::group_size")]
    pub group_size: usize,
    #[serde(default = "defaults::resample_size")]
    pub resample_size: usize,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default = "defaults::temperature")]
    pub temperature: f64,
}

mod defaults {
    pub fn group_size() -> usize {
        8
    }
    pub fn resample_size() -> usize {
        24
    }
    pub fn epsilon() -> f64 {
        0.2
    }
    pub fn gamma() -> f64 {
        0.1
    }
    pub fn temperature() -> f64 {
        1.0
    }
}

impl Default for ShapingConfig {
    fn default() -> Self {
        ShapingConfig {
            group_size: defaults::group_size(),
            resample_size: defaults::resample_size(),
            epsilon: defaults::epsilon(),
            beta: 0.0,
            gamma: defaults::gamma(),
            temperature: defaults::temperature(),
        }
    }
}

impl ShapingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::config("group_size must be at least 2"));
        }
        if self.resample_size < 1 {
            return Err(Error::config("resample_size must be at least 1"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::config("gamma must be positive"));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::config("beta must be non-negative"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        Ok(())
    }
}

/// Why a group's advantages vanished.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degeneracy {
    AllFailed,
    AllPassed,
    /// Constant but non-binary rewards.
    Constant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupAdvantage {
    pub values: Vec<f64>,
    pub degenerate: Option<Degeneracy>,
}

/// Scores `scored` against the mean and population standard deviation of
/// `population`. `None` when the population has zero variance.
pub(crate) fn standardize(population: &[f64], scored: &[f64]) -> Option<Vec<f64>> {
    let n = population.len() as f64;
    let mean = population.iter().sum::<f64>() / n;
    let var = population
        .iter()
        .map(|r| (r - mean) * (r - mean))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if !(std > 0.0) {
        return None;
    }
    Some(scored.iter().map(|r| (r - mean) / std).collect())
}

/// `A_i = (r_i - mean(r)) / std(r)` with the population standard deviation.
pub fn group_advantage(rewards: &[f64]) -> GroupAdvantage {
    match standardize(rewards, rewards) {
        Some(values) => GroupAdvantage {
            values,
            degenerate: None,
        },
        None => {
            let degenerate = if is_zero_advantage(rewards) {
                Degeneracy::AllFailed
            } else if rewards.iter().all(|&r| r == 1.0) {
                Degeneracy::AllPassed
            } else {
                Degeneracy::Constant
            };
            GroupAdvantage {
                values: vec![0.0; rewards.len()],
                degenerate: Some(degenerate),
            }
        }
    }
}

/// True iff every reward is zero: every sampled response failed.
pub fn is_zero_advantage(rewards: &[f64]) -> bool {
    !rewards.is_empty() && rewards.iter().all(|&r| r == 0.0)
}

/// `rho_t = exp(new_t - old_t)`.
pub fn importance_ratio(new_logprobs: &[f64], old_logprobs: &[f64]) -> Result<Vec<f64>> {
    if new_logprobs.len() != old_logprobs.len() {
        return Err(Error::structural(format!(
            "{} new log-probabilities against {} old",
            new_logprobs.len(),
            old_logprobs.len()
        )));
    }
    Ok(new_logprobs
        .iter()
        .zip(old_logprobs)
        .map(|(n, o)| (n - o).exp())
        .collect())
}

pub fn clip(rho: f64, epsilon: f64) -> f64 {
    rho.clamp(1.0 - epsilon, 1.0 + epsilon)
}

/// `min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)`.
pub fn clipped_token_term(rho: f64, advantage: f64, epsilon: f64) -> f64 {
    (rho * advantage).min(clip(rho, epsilon) * advantage)
}

/// `d/d rho` of [`clipped_token_term`]: `A` while the unclipped branch is
/// the minimum, zero once the clipped constant takes over.
pub fn clipped_token_slope(rho: f64, advantage: f64, epsilon: f64) -> f64 {
    if rho * advantage <= clip(rho, epsilon) * advantage {
        advantage
    } else {
        0.0
    }
}

/// `beta * (exp(x) - x - 1)` with `x = ref - policy` (the k3 estimator).
pub fn kl_penalty(policy_logprob: f64, ref_logprob: f64, beta: f64) -> f64 {
    if beta == 0.0 {
        return 0.0;
    }
    let x = ref_logprob - policy_logprob;
    beta * (x.exp() - x - 1.0)
}

/// `d/d policy_logprob` of [`kl_penalty`].
pub fn kl_penalty_slope(policy_logprob: f64, ref_logprob: f64, beta: f64) -> f64 {
    if beta == 0.0 {
        return 0.0;
    }
    beta * (1.0 - (ref_logprob - policy_logprob).exp())
}

/// Anything that exposes `dJ / d log pi_theta(o_t)` per rollout and token.
pub trait GradientWeights {
    fn grad_weights(&self) -> Vec<&[f64]>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveTerms {
    pub value: f64,
    pub ratios: Vec<Vec<f64>>,
    /// Per-token contribution to `value` before the `1/(G |o_i|)` factors.
    pub contributions: Vec<Vec<f64>>,
    /// Per-token `dJ / d log pi_theta(o_t)`, all factors included.
    pub weights: Vec<Vec<f64>>,
}

impl GradientWeights for ObjectiveTerms {
    fn grad_weights(&self) -> Vec<&[f64]> {
        self.weights.iter().map(Vec::as_slice).collect()
    }
}

/// `(1/G) sum_i (1/|o_i|) sum_t [clipped term - KL]`, with fixed summation
/// order. `ref_logprobs` is required only when `beta > 0`.
pub fn grpo_objective(
    group: &Group,
    new_logprobs: &[Vec<f64>],
    ref_logprobs: Option<&[Vec<f64>]>,
    config: &ShapingConfig,
) -> Result<ObjectiveTerms> {
    let advantages = group
        .advantages
        .as_ref()
        .ok_or_else(|| Error::structural("advantages must be computed before the objective"))?;
    if new_logprobs.len() != group.size() || advantages.len() != group.size() {
        return Err(Error::structural(
            "one log-probability vector per rollout required",
        ));
    }
    if config.beta > 0.0 {
        match ref_logprobs {
            Some(r) if r.len() == group.size() => {}
            _ => {
                return Err(Error::structural(
                    "beta > 0 requires reference log-probabilities",
                ))
            }
        }
    }
    let g = group.size() as f64;
    let mut total = 0.0;
    let mut terms = ObjectiveTerms {
        value: 0.0,
        ratios: Vec::with_capacity(group.size()),
        contributions: Vec::with_capacity(group.size()),
        weights: Vec::with_capacity(group.size()),
    };
    for (i, rollout) in group.rollouts.iter().enumerate() {
        let rho = importance_ratio(&new_logprobs[i], &rollout.old_logprobs)?;
        let len = token_count(rollout)?;
        let adv = advantages[i];
        let refs = match ref_logprobs {
            Some(r) if config.beta > 0.0 => {
                if r[i].len() != rho.len() {
                    return Err(Error::structural("reference log-probabilities misaligned"));
                }
                Some(&r[i])
            }
            _ => None,
        };
        let mut sum = 0.0;
        let mut contrib = Vec::with_capacity(rho.len());
        let mut weights = Vec::with_capacity(rho.len());
        for (t, &r) in rho.iter().enumerate() {
            let mut c = clipped_token_term(r, adv, config.epsilon);
            let mut w = clipped_token_slope(r, adv, config.epsilon) * r;
            if let Some(refs) = refs {
                c -= kl_penalty(new_logprobs[i][t], refs[t], config.beta);
                w -= kl_penalty_slope(new_logprobs[i][t], refs[t], config.beta);
            }
            sum += c;
            contrib.push(c);
            weights.push(w / (g * len));
        }
        total += sum / len;
        terms.ratios.push(rho);
        terms.contributions.push(contrib);
        terms.weights.push(weights);
    }
    terms.value = total / g;
    Ok(terms)
}

pub(crate) fn token_count(rollout: &Rollout) -> Result<f64> {
    if rollout.tokens.is_empty() {
        return Err(Error::structural(
            "empty rollouts cannot be length-normalized",
        ));
    }
    if rollout.tokens.len() != rollout.old_logprobs.len() {
        return Err(Error::structural(
            "rollout tokens and log-probabilities misaligned",
        ));
    }
    Ok(rollout.tokens.len() as f64)
}
