mod common;

use lope::engine::{lope_is_ratio, SignalShaping};
use lope::grpo::{grpo_objective, importance_ratio, Group, Rollout, ShapingConfig};
use lope::sim::evaluate;
use lope::toy::{
    enumerate_expectation, for_each_sequence, shift_for_text, Functional, PolicyParams,
    QuestionSpec,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn sequence_probabilities_normalize(seed in any::<u64>(), v in 2usize..5, l in 1usize..5, t in 0.3f64..2.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = common::random_params(&mut rng, v, l);
        for perturbed in [false, true] {
            let mut total = 0.0;
            for_each_sequence(v, l, |s| {
                total += p.logprob_seq_at(s, perturbed, t).unwrap().iter().sum::<f64>().exp();
            }).unwrap();
            prop_assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences(seed in any::<u64>(), v in 2usize..5, l in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = common::random_params(&mut rng, v, l);
        let seq = p.sample_seq(&mut rng, 1.0, true).unwrap().tokens;
        for perturbed in [false, true] {
            let an = p.grad_logprob(&seq, perturbed).unwrap().flat();
            let fd = common::finite_difference(&p, 1e-6, |q| q.logprob_seq(&seq, perturbed).unwrap().iter().sum());
            let err = an.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(err < 1e-8, "{err}");
        }
    }

    #[test]
    fn is_corrected_gradient_is_unbiased(seed in any::<u64>(), v in 2usize..4, l in 2usize..4, baseline in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = common::random_params(&mut rng, v, l);
        let sampler = target.with_shift(shift_for_text(&format!("delta {seed}"), v, 1.5)).unwrap();
        let q = QuestionSpec::new("q", vec![vec![0], vec![v - 1, 0]], &target).unwrap();
        let on = enumerate_expectation(&target, &q, Functional::ScoreGradient { baseline }, false).unwrap();
        let is = enumerate_expectation(&sampler, &q, Functional::ImportanceWeightedGradient { target: &target, baseline }, true).unwrap();
        prop_assert!(on.gradient().unwrap().max_abs_diff(is.gradient().unwrap()) < 1e-10);
    }

    #[test]
    fn lope_ratio_is_naive_over_shifted(seed in any::<u64>(), v in 2usize..5, l in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = common::random_params(&mut rng, v, l);
        let s = p.sample_seq(&mut rng, 1.0, true).unwrap();
        let naive = p.logprob_seq(&s.tokens, false).unwrap();
        let shifted = p.logprob_seq(&s.tokens, true).unwrap();
        prop_assert_eq!(lope_is_ratio(&naive, &s.logprobs).unwrap(), importance_ratio(&naive, &shifted).unwrap());
    }

    #[test]
    fn shift_changes_sampling_not_reward(seed in any::<u64>(), v in 2usize..5, l in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = common::random_params(&mut rng, v, l);
        p.context_shift = shift_for_text(&format!("lorem {seed}"), v, 1.0);
        let mut tv = 0.0;
        for_each_sequence(v, l, |s| {
            let a: f64 = p.logprob_seq(s, false).unwrap().iter().sum::<f64>().exp();
            let b: f64 = p.logprob_seq(s, true).unwrap().iter().sum::<f64>().exp();
            tv += 0.5 * (a - b).abs();
        }).unwrap();
        prop_assert!(tv > 0.0);
        let q = QuestionSpec::new("q", vec![vec![1 % v]], &p).unwrap();
        let unshifted = PolicyParams { context_shift: vec![0.0; v], ..p.clone() };
        let q2 = QuestionSpec::new("q", vec![vec![1 % v]], &unshifted).unwrap();
        for_each_sequence(v, l, |s| assert_eq!(q.reward(s), q2.reward(s))).unwrap();
    }
}

#[test]
fn monte_carlo_success_within_three_sigma() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = common::random_params(&mut rng, 3, 4);
    let q = QuestionSpec::new("q", vec![vec![0, 1], vec![2]], &p).unwrap();
    for perturbed in [false, true] {
        let exact = enumerate_expectation(&p, &q, Functional::SuccessProbability, perturbed)
            .unwrap()
            .scalar()
            .unwrap();
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| q.reward(&p.sample_seq(&mut rng, 1.0, perturbed).unwrap().tokens) == 1.0)
            .count();
        let sigma = (exact * (1.0 - exact) / n as f64).sqrt();
        assert!((hits as f64 / n as f64 - exact).abs() < 3.0 * sigma);
        assert!((q.success_probability(&p, perturbed, 1.0).unwrap() - exact).abs() < 1e-12);
    }
}

/// Exact expected objective value over every ordered pair of sampled
/// rollouts, against a Monte Carlo average of sampled groups.
#[test]
fn grpo_objective_matches_enumerated_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let old = common::random_params(&mut rng, 2, 2);
    let theta = common::jitter(&old, &mut rng, 0.3);
    let q = QuestionSpec::new("q", vec![vec![1, 0]], &old).unwrap();
    let config = ShapingConfig {
        beta: 0.0,
        ..ShapingConfig::default()
    };
    let value = |seqs: [&[usize]; 2]| {
        let rollouts: Vec<Rollout> = seqs
            .iter()
            .map(|s| Rollout::original(s.to_vec(), q.reward(s), old.logprob_seq(s, false).unwrap()))
            .collect();
        let mut group = Group::new("q", "p", rollouts).unwrap();
        group.compute_advantages();
        grpo_objective(
            &group,
            &common::logprobs(&theta, &group.rollouts),
            None,
            &config,
        )
        .unwrap()
        .value
    };
    let mut seqs = Vec::new();
    for_each_sequence(2, 2, |s| seqs.push(s.to_vec())).unwrap();
    let prob = |s: &[usize]| old.logprob_seq(s, false).unwrap().iter().sum::<f64>().exp();
    let mut exact = 0.0;
    for a in &seqs {
        for b in &seqs {
            exact += prob(a) * prob(b) * value([a, b]);
        }
    }
    let n = 100_000;
    let samples: Vec<f64> = (0..n)
        .map(|_| {
            let a = old.sample_seq(&mut rng, 1.0, false).unwrap().tokens;
            let b = old.sample_seq(&mut rng, 1.0, false).unwrap().tokens;
            value([&a, &b])
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!(exact != 0.0);
    assert!(
        (mean - exact).abs() < 4.0 * (var / n as f64).sqrt(),
        "mc {mean} vs exact {exact}"
    );
}

#[test]
fn shaped_gradient_fidelity_on_many_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let inst = common::lope_instance(
            &mut rng,
            SignalShaping {
                policy: true,
                advantage: false,
            },
        );
        let fd = common::finite_difference(&inst.theta, 1e-6, |p| common::lope_value(&inst, p));
        assert!(common::relative_error(&common::lope_grad(&inst), &fd) < 1e-6);
    }
}

#[test]
fn evaluate_trivial_bank() {
    let p = PolicyParams::uniform(3, 2).unwrap();
    let everything = QuestionSpec::new("all", vec![vec![]], &p).unwrap();
    let e = evaluate(&p, &[everything], 8, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!((e.pass_at_g, e.mean_at_g), (1.0, 1.0));
}

#[test]
fn evaluate_pass_rate_matches_analytic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = common::random_params(&mut rng, 4, 3);
    let q = QuestionSpec::new("q", vec![vec![1, 2]], &p).unwrap();
    let p0 = q.difficulty;
    let want = 1.0 - (1.0 - p0).powi(8);
    let repeats = 4000;
    let bank = vec![q; repeats];
    let e = evaluate(&p, &bank, 8, 1.0, &mut rng).unwrap();
    let sigma = (want * (1.0 - want) / repeats as f64).sqrt();
    assert!(
        (e.pass_at_g - want).abs() < 3.0 * sigma,
        "{} vs {want}",
        e.pass_at_g
    );
}

#[test]
fn evaluate_mean_follows_difficulty_ladder() {
    let p = PolicyParams::uniform(5, 2).unwrap();
    let ladder: Vec<QuestionSpec> = (1..=5)
        .map(|k| QuestionSpec::new(format!("q{k}"), (0..k).map(|t| vec![t]).collect(), &p).unwrap())
        .collect();
    let e = evaluate(&p, &ladder, 4000, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    for (w, q) in e.per_question.windows(2).zip(ladder.windows(2)) {
        assert!(q[0].difficulty < q[1].difficulty);
        assert!(w[0].mean < w[1].mean);
    }
}
