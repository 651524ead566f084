//! Resample, regroup and reshape.
//!
//! A group whose `G` rollouts all failed triggers a resample of `G'`
//! responses under a perturbed prompt. Up to `G - 1` of the correct ones
//! replace original failures, so at least one failure always remains. The
//! replacements are trained against the naive prompt while keeping the
//! log-probabilities they were sampled with, which makes them off-policy:
//! their ratio compares the naive-context policy to the perturbed-context
//! sampler.
//!
//! Training signal shaping has two independent switches:
//!
//! - policy shaping replaces the clipped term of resampled tokens with
//!   `f(rho) * A`, `f(rho) = rho / (rho + gamma)`, unclipped;
//! - advantage shaping normalizes rewards over all `G + G'` responses while
//!   updating only the `G` selected ones.
//!
//! There is no KL term on any path through this module.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::grpo::{
    clipped_token_slope, clipped_token_term, importance_ratio, is_zero_advantage, standardize,
    token_count, GradientWeights, Group, Provenance, Rollout, SamplingContext, ShapingConfig,
};
use crate::perturbgen::Perturbation;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResamplePool {
    pub question_id: String,
    /// `None` for naive-prompt resampling baselines.
    pub perturbation: Option<Perturbation>,
    pub rollouts: Vec<Rollout>,
    pub correct_count: usize,
}

impl ResamplePool {
    pub fn new(
        question_id: impl Into<String>,
        perturbation: Option<Perturbation>,
        rollouts: Vec<Rollout>,
    ) -> Result<Self> {
        if rollouts.is_empty() {
            return Err(Error::structural("resample pool is empty"));
        }
        for r in &rollouts {
            r.validate()?;
            if r.provenance != Provenance::Resampled {
                return Err(Error::structural("resample pool holds an original rollout"));
            }
            let perturbed = matches!(r.sampling_context, SamplingContext::Perturbed { .. });
            if perturbed != perturbation.is_some() {
                return Err(Error::structural(
                    "pool rollouts must be sampled in the pool's context",
                ));
            }
        }
        let correct_count = rollouts.iter().filter(|r| r.reward == 1.0).count();
        Ok(ResamplePool {
            question_id: question_id.into(),
            perturbation,
            rollouts,
            correct_count,
        })
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegroupedGroup {
    pub question_id: String,
    /// The naive prompt every selected rollout is trained against.
    pub prompt: String,
    /// `n_s` resampled successes first, then the `G - n_s` retained failures.
    pub selected: Vec<Rollout>,
    pub n_s: usize,
    /// Original rewards followed by resampled rewards.
    pub r_all: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_id: Option<String>,
}

impl RegroupedGroup {
    /// Wraps a group that never went through resampling: `n_s = 0` and
    /// `r_all` is the group's own rewards.
    pub fn from_original(group: &Group) -> Self {
        RegroupedGroup {
            question_id: group.question_id.clone(),
            prompt: group.prompt.clone(),
            selected: group.rollouts.clone(),
            n_s: 0,
            r_all: group.rewards(),
            delta_id: None,
        }
    }

    pub fn size(&self) -> usize {
        self.selected.len()
    }

    pub fn selected_rewards(&self) -> Vec<f64> {
        self.selected.iter().map(|r| r.reward).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RegroupOutcome {
    Regrouped(RegroupedGroup),
    /// The resample pool had no correct response; the question contributes
    /// no gradient this step.
    Skipped {
        question_id: String,
    },
}

pub fn trigger_resample(group: &Group) -> bool {
    is_zero_advantage(&group.rewards())
}

/// Replaces `N_s = min(c, G - 1)` original failures with correct resampled
/// rollouts. Both the successes and the replaced failures are drawn
/// uniformly without replacement; survivors keep their relative order.
pub fn regroup<R: Rng + ?Sized>(
    group: &Group,
    pool: &ResamplePool,
    rng: &mut R,
) -> Result<RegroupOutcome> {
    if group.question_id != pool.question_id {
        return Err(Error::structural(format!(
            "pool for question {} offered to question {}",
            pool.question_id, group.question_id
        )));
    }
    if !trigger_resample(group) {
        return Err(Error::structural("regroup requires an all-fail group"));
    }
    let correct: Vec<usize> = pool
        .rollouts
        .iter()
        .enumerate()
        .filter(|(_, r)| r.reward == 1.0)
        .map(|(i, _)| i)
        .collect();
    if correct.is_empty() {
        return Ok(RegroupOutcome::Skipped {
            question_id: group.question_id.clone(),
        });
    }
    let g = group.size();
    let n_s = correct.len().min(g - 1);

    let mut picked = index::sample(rng, correct.len(), n_s).into_vec();
    picked.sort_unstable();
    let mut replaced = index::sample(rng, g, n_s).into_vec();
    replaced.sort_unstable();

    let mut selected = Vec::with_capacity(g);
    for &k in &picked {
        selected.push(pseudo_rollout(&pool.rollouts[correct[k]], &group.prompt)?);
    }
    selected.extend(
        group
            .rollouts
            .iter()
            .enumerate()
            .filter(|(i, _)| replaced.binary_search(i).is_err())
            .map(|(_, r)| r.clone()),
    );

    let mut r_all = group.rewards();
    r_all.extend(pool.rewards());
    Ok(RegroupOutcome::Regrouped(RegroupedGroup {
        question_id: group.question_id.clone(),
        prompt: group.prompt.clone(),
        selected,
        n_s,
        r_all,
        delta_id: pool.perturbation.as_ref().map(Perturbation::id),
    }))
}

/// Re-pairs a resampled response with the naive prompt. Tokens, rewards,
/// sampling context and the sampling-time log-probabilities are unchanged.
pub fn pseudo_rollout(resampled: &Rollout, naive_prompt: &str) -> Result<Rollout> {
    if resampled.provenance != Provenance::Resampled {
        return Err(Error::structural(
            "only resampled rollouts become pseudo-rollouts",
        ));
    }
    Ok(Rollout {
        training_prompt: Some(naive_prompt.to_owned()),
        ..resampled.clone()
    })
}

/// Off-policy ratio of a pseudo-rollout: naive-context policy over the
/// perturbed-context sampler, token by token.
pub fn lope_is_ratio(new_logprob_naive: &[f64], old_logprob_perturbed: &[f64]) -> Result<Vec<f64>> {
    importance_ratio(new_logprob_naive, old_logprob_perturbed)
}

/// `f(rho) = rho / (rho + gamma)`.
pub fn policy_shape(rho: f64, gamma: f64) -> f64 {
    rho / (rho + gamma)
}

/// `f'(rho) = gamma / (rho + gamma)^2`.
pub fn policy_shape_derivative(rho: f64, gamma: f64) -> f64 {
    gamma / ((rho + gamma) * (rho + gamma))
}

/// Advantage of `reward` against the statistics of `r_all`; `None` (skip)
/// when `r_all` has zero variance.
pub fn shaped_advantage(r_all: &[f64], reward: f64) -> Option<f64> {
    standardize(r_all, &[reward]).map(|v| v[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SignalShaping {
    pub policy: bool,
    pub advantage: bool,
}

impl SignalShaping {
    pub const NONE: SignalShaping = SignalShaping {
        policy: false,
        advantage: false,
    };
    pub const FULL: SignalShaping = SignalShaping {
        policy: true,
        advantage: true,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutTerms {
    pub ratios: Vec<f64>,
    /// `f(rho)` for shaped tokens, `clip(rho, 1 - eps, 1 + eps)` otherwise.
    pub weights: Vec<f64>,
    pub advantage: f64,
    pub shaped: bool,
    pub contributions: Vec<f64>,
    /// Per-token `dJ / d log pi_theta(o_t)`, all factors included.
    pub grad_weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapedObjectiveTerms {
    pub value: f64,
    pub rollouts: Vec<RolloutTerms>,
}

impl GradientWeights for ShapedObjectiveTerms {
    fn grad_weights(&self) -> Vec<&[f64]> {
        self.rollouts
            .iter()
            .map(|r| r.grad_weights.as_slice())
            .collect()
    }
}

/// Advantages of the selected rollouts: normalized over `r_all` with
/// advantage shaping, over the selected rewards alone without it. Zero
/// variance yields zeros.
pub fn regrouped_advantages(rg: &RegroupedGroup, advantage_shaping: bool) -> Vec<f64> {
    let selected = rg.selected_rewards();
    let population = if advantage_shaping {
        &rg.r_all
    } else {
        &selected
    };
    standardize(population, &selected).unwrap_or_else(|| vec![0.0; selected.len()])
}

/// The combined objective
///
/// `(1/G) [ sum_{originals} (1/|o_i|) sum_t min(rho A, clip(rho) A)
///        + sum_{resampled} (1/|o_i|) sum_t f(rho) A ]`
///
/// with `f` active only under policy shaping (otherwise resampled tokens use
/// the clipped term too). Rollouts are summed in `selected` order.
pub fn lope_objective(
    rg: &RegroupedGroup,
    new_logprobs: &[Vec<f64>],
    config: &ShapingConfig,
    shaping: SignalShaping,
) -> Result<ShapedObjectiveTerms> {
    if new_logprobs.len() != rg.size() {
        return Err(Error::structural(
            "one log-probability vector per selected rollout required",
        ));
    }
    if rg.selected[..rg.n_s]
        .iter()
        .any(|r| r.provenance != Provenance::Resampled)
    {
        return Err(Error::structural(
            "the first n_s selected rollouts must be resampled",
        ));
    }
    let advantages = regrouped_advantages(rg, shaping.advantage);
    let g = rg.size() as f64;
    let mut total = 0.0;
    let mut out = Vec::with_capacity(rg.size());
    for (i, rollout) in rg.selected.iter().enumerate() {
        let rho = importance_ratio(&new_logprobs[i], &rollout.old_logprobs)?;
        let len = token_count(rollout)?;
        let adv = advantages[i];
        let shaped = shaping.policy && rollout.provenance == Provenance::Resampled;
        let mut sum = 0.0;
        let mut weights = Vec::with_capacity(rho.len());
        let mut contributions = Vec::with_capacity(rho.len());
        let mut grad_weights = Vec::with_capacity(rho.len());
        for &r in &rho {
            let (w, c, slope) = if shaped {
                let f = policy_shape(r, config.gamma);
                (f, f * adv, policy_shape_derivative(r, config.gamma) * adv)
            } else {
                (
                    crate::grpo::clip(r, config.epsilon),
                    clipped_token_term(r, adv, config.epsilon),
                    clipped_token_slope(r, adv, config.epsilon),
                )
            };
            sum += c;
            weights.push(w);
            contributions.push(c);
            grad_weights.push(slope * r / (g * len));
        }
        total += sum / len;
        out.push(RolloutTerms {
            ratios: rho,
            weights,
            advantage: adv,
            shaped,
            contributions,
            grad_weights,
        });
    }
    Ok(ShapedObjectiveTerms {
        value: total / g,
        rollouts: out,
    })
}
