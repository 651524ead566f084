#![allow(dead_code)]

use lope::engine::{
    lope_objective, regroup, RegroupOutcome, RegroupedGroup, ResamplePool, SignalShaping,
};
use lope::grpo::{grpo_objective, Group, Rollout, SamplingContext, ShapingConfig};
use lope::perturbgen::{Perturbation, PerturbationKind};
use lope::toy::{objective_grad, PolicyParams};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_params(rng: &mut ChaCha8Rng, v: usize, l: usize) -> PolicyParams {
    let positional = rng.random_bool(0.5);
    let mut p = PolicyParams::random(v, l, positional, 1.0, rng).unwrap();
    p.context_shift = (0..v).map(|_| rng.random_range(-1.5..1.5)).collect();
    p
}

pub fn jitter(params: &PolicyParams, rng: &mut ChaCha8Rng, scale: f64) -> PolicyParams {
    let mut p = params.clone();
    for k in 0..p.param_count() {
        p.set_param(k, p.param(k) + rng.random_range(-scale..scale));
    }
    p
}

/// Central differences of `f` over every scalar parameter.
pub fn finite_difference(
    params: &PolicyParams,
    h: f64,
    f: impl Fn(&PolicyParams) -> f64,
) -> Vec<f64> {
    let mut p = params.clone();
    (0..params.param_count())
        .map(|k| {
            let x = params.param(k);
            p.set_param(k, x + h);
            let up = f(&p);
            p.set_param(k, x - h);
            let down = f(&p);
            p.set_param(k, x);
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / ||b||`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm
}

pub fn logprobs(params: &PolicyParams, rollouts: &[Rollout]) -> Vec<Vec<f64>> {
    rollouts
        .iter()
        .map(|r| params.logprob_seq(&r.tokens, r.trains_perturbed()).unwrap())
        .collect()
}

fn near_clip_edge(ratios: &[Vec<f64>], eps: f64) -> bool {
    ratios
        .iter()
        .flatten()
        .any(|&r| (r - (1.0 + eps)).abs() < 1e-4 || (r - (1.0 - eps)).abs() < 1e-4)
}

pub struct GrpoInstance {
    pub theta: PolicyParams,
    pub group: Group,
    pub config: ShapingConfig,
}

/// Mixed-reward group sampled from a policy near `theta`, away from the
/// clip boundaries.
pub fn grpo_instance(rng: &mut ChaCha8Rng) -> GrpoInstance {
    loop {
        let v = rng.random_range(2..=4);
        let l = rng.random_range(1..=3);
        let old = random_params(rng, v, l);
        let theta = jitter(&old, rng, 0.15);
        let g = rng.random_range(2..=8);
        let mut rewards: Vec<f64> = (0..g)
            .map(|_| f64::from(u8::from(rng.random_bool(0.5))))
            .collect();
        rewards[0] = 1.0;
        rewards[1] = 0.0;
        let rollouts = rewards
            .iter()
            .map(|&r| {
                let s = old.sample_seq(rng, 1.0, false).unwrap();
                Rollout::original(s.tokens, r, s.logprobs)
            })
            .collect();
        let mut group = Group::new("q", "prompt", rollouts).unwrap();
        group.compute_advantages();
        let config = ShapingConfig {
            beta: 0.0,
            ..ShapingConfig::default()
        };
        let terms =
            grpo_objective(&group, &logprobs(&theta, &group.rollouts), None, &config).unwrap();
        let grad = objective_grad(&theta, &group.rollouts, &terms).unwrap();
        if !near_clip_edge(&terms.ratios, config.epsilon) && grad.norm() > 1e-6 {
            return GrpoInstance {
                theta,
                group,
                config,
            };
        }
    }
}

pub fn grpo_value(inst: &GrpoInstance, params: &PolicyParams) -> f64 {
    grpo_objective(
        &inst.group,
        &logprobs(params, &inst.group.rollouts),
        None,
        &inst.config,
    )
    .unwrap()
    .value
}

pub fn grpo_grad(inst: &GrpoInstance) -> Vec<f64> {
    let terms = grpo_objective(
        &inst.group,
        &logprobs(&inst.theta, &inst.group.rollouts),
        None,
        &inst.config,
    )
    .unwrap();
    objective_grad(&inst.theta, &inst.group.rollouts, &terms)
        .unwrap()
        .flat()
}

pub fn all_fail_group(old: &PolicyParams, g: usize, rng: &mut ChaCha8Rng) -> Group {
    let rollouts = (0..g)
        .map(|_| {
            let s = old.sample_seq(rng, 1.0, false).unwrap();
            Rollout::original(s.tokens, 0.0, s.logprobs)
        })
        .collect();
    let mut group = Group::new("q", "prompt", rollouts).unwrap();
    group.compute_advantages();
    group
}

pub fn perturbation_stub(seed: u64) -> Perturbation {
    Perturbation {
        text: format!("lorem {seed}"),
        token_len: 2,
        kind: PerturbationKind::Lorem,
        seed_used: seed,
    }
}

/// Pool of `total` perturbed-context samples from `sampler` with exactly `c`
/// successes at random positions.
pub fn pool_with(
    sampler: &PolicyParams,
    total: usize,
    c: usize,
    rng: &mut ChaCha8Rng,
) -> ResamplePool {
    let delta = perturbation_stub(rng.random());
    let ctx = SamplingContext::Perturbed {
        delta_id: delta.id(),
    };
    let mut rewards = vec![0.0; total];
    for i in rand::seq::index::sample(rng, total, c) {
        rewards[i] = 1.0;
    }
    let rollouts = rewards
        .iter()
        .map(|&r| {
            let s = sampler.sample_seq(rng, 1.0, true).unwrap();
            Rollout::resampled(s.tokens, r, s.logprobs, ctx.clone())
        })
        .collect();
    ResamplePool::new("q", Some(delta), rollouts).unwrap()
}

pub struct LopeInstance {
    pub theta: PolicyParams,
    pub regrouped: RegroupedGroup,
    pub config: ShapingConfig,
    pub shaping: SignalShaping,
}

pub fn lope_instance(rng: &mut ChaCha8Rng, shaping: SignalShaping) -> LopeInstance {
    loop {
        let v = rng.random_range(2..=4);
        let l = rng.random_range(1..=3);
        let old = random_params(rng, v, l);
        let theta = jitter(&old, rng, 0.15);
        let g = rng.random_range(2..=8);
        let g_prime = rng.random_range(1..=24);
        let c = rng.random_range(1..=g_prime);
        let group = all_fail_group(&old, g, rng);
        let pool = pool_with(&old, g_prime, c, rng);
        let RegroupOutcome::Regrouped(regrouped) = regroup(&group, &pool, rng).unwrap() else {
            unreachable!("c >= 1")
        };
        let config = ShapingConfig {
            beta: 0.0,
            ..ShapingConfig::default()
        };
        let inst = LopeInstance {
            theta,
            regrouped,
            config,
            shaping,
        };
        let terms = lope_objective(
            &inst.regrouped,
            &logprobs(&inst.theta, &inst.regrouped.selected),
            &inst.config,
            shaping,
        )
        .unwrap();
        let ratios: Vec<Vec<f64>> = terms
            .rollouts
            .iter()
            .filter(|r| !r.shaped)
            .map(|r| r.ratios.clone())
            .collect();
        let grad = objective_grad(&inst.theta, &inst.regrouped.selected, &terms).unwrap();
        if !near_clip_edge(&ratios, inst.config.epsilon) && grad.norm() > 1e-6 {
            return inst;
        }
    }
}

pub fn lope_value(inst: &LopeInstance, params: &PolicyParams) -> f64 {
    lope_objective(
        &inst.regrouped,
        &logprobs(params, &inst.regrouped.selected),
        &inst.config,
        inst.shaping,
    )
    .unwrap()
    .value
}

pub fn lope_grad(inst: &LopeInstance) -> Vec<f64> {
    let terms = lope_objective(
        &inst.regrouped,
        &logprobs(&inst.theta, &inst.regrouped.selected),
        &inst.config,
        inst.shaping,
    )
    .unwrap();
    objective_grad(&inst.theta, &inst.regrouped.selected, &terms)
        .unwrap()
        .flat()
}
