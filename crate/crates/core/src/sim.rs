//! End-to-end training simulator on the toy policy.
//!
//! One step: pick a batch of questions, sample `G` naive rollouts for each,
//! and, when a resampling strategy sees an all-fail group, draw `G'` more
//! (under a perturbation for the LoPE strategies, under the naive prompt for
//! the baselines), regroup, evaluate the strategy's objective, and take one
//! gradient-ascent step on the averaged gradient.
//!
//! Every step is a deterministic function of the incoming state and the
//! random stream. Sampling consumes one uniform per token regardless of the
//! parameters, and the objective and update never touch the stream, so two
//! strategies that differ only in their training signal draw identical
//! rollouts from identical states.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::engine::{
    lope_objective, regroup, trigger_resample, RegroupOutcome, ResamplePool, SignalShaping,
};
use crate::grpo::{grpo_objective, Degeneracy, Group, Rollout, SamplingContext, ShapingConfig};
use crate::perturbgen::{self, PerturbationSpec};
use crate::toy::{self, objective_grad, PolicyGrad, PolicyParams, QuestionSpec};
use crate::{Error, Result};

/// Resampling temperature of the high-temperature baseline.
pub const HOT_TEMPERATURE: f64 = 1.2;

pub const SEED_ENV: &str = "LOPE_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Grpo,
    NaiveResample,
    NaiveResampleHot,
    Lope,
    LopeShaped,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Grpo,
        Strategy::NaiveResample,
        Strategy::NaiveResampleHot,
        Strategy::Lope,
        Strategy::LopeShaped,
    ];

    pub fn resamples(self) -> bool {
        self != Strategy::Grpo
    }

    pub fn perturbs(self) -> bool {
        matches!(self, Strategy::Lope | Strategy::LopeShaped)
    }

    pub fn shaping(self) -> SignalShaping {
        if self == Strategy::LopeShaped {
            SignalShaping::FULL
        } else {
            SignalShaping::NONE
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Grpo => "grpo",
            Strategy::NaiveResample => "naive_resample",
            Strategy::NaiveResampleHot => "naive_resample_hot",
            Strategy::Lope => "lope",
            Strategy::LopeShaped => "lope_shaped",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name.replace('-', "_"))
    }
}

fn default_shift_magnitude() -> f64 {
    1.0
}

fn default_hot_temperature() -> f64 {
    HOT_TEMPERATURE
}

/// A full experiment, stored as a single JSON document. Unknown keys are
/// rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub shaping: ShapingConfig,
    pub perturbation: PerturbationSpec,
    pub policy: PolicyParams,
    pub question_bank: Vec<QuestionSpec>,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch: usize,
    pub seed: u64,
    pub strategy: Strategy,
    /// Scale of the context shift a perturbation induces on the policy.
    #[serde(default = "default_shift_magnitude")]
    pub shift_magnitude: f64,
    #[serde(default = "default_hot_temperature")]
    pub hot_temperature: f64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.shaping.validate()?;
        self.perturbation.validate()?;
        self.policy.validate()?;
        if self.question_bank.is_empty() {
            return Err(Error::config("question bank is empty"));
        }
        if self.batch == 0 || self.batch > self.question_bank.len() {
            return Err(Error::config(format!(
                "batch {} must lie in [1, {}]",
                self.batch,
                self.question_bank.len()
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.hot_temperature > 0.0) || !(self.shift_magnitude >= 0.0) {
            return Err(Error::config(
                "hot_temperature must be positive, shift_magnitude non-negative",
            ));
        }
        for q in &self.question_bank {
            q.validate(&self.policy)?;
        }
        Ok(())
    }

    pub fn with_strategy(&self, strategy: Strategy) -> Self {
        ExperimentConfig {
            strategy,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        ExperimentConfig {
            seed,
            ..self.clone()
        }
    }

    /// Parses and validates a config file, honouring `LOPE_SEED`.
    pub fn load(path: &Path) -> Result<Self> {
        let mut config: ExperimentConfig = serde_json::from_slice(&std::fs::read(path)?)?;
        config.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        config.validate()?;
        Ok(config)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: PolicyParams,
    /// Frozen initial parameters, the KL reference when `beta > 0`.
    pub reference: PolicyParams,
    pub step: usize,
    pub trigger_counts: BTreeMap<String, u32>,
}

impl TrainState {
    pub fn new(params: PolicyParams) -> Self {
        TrainState {
            reference: params.clone(),
            params,
            step: 0,
            trigger_counts: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Share of resampled questions with at least one correct resample
    /// (pass@G'); `None` when nothing was resampled.
    pub question_pass_rate: Option<f64>,
    /// Mean fraction of correct resamples (mean@G').
    pub response_accuracy: Option<f64>,
    /// Share of batch questions whose original group had zero variance.
    pub zero_advantage_fraction: f64,
    /// Share of batch questions whose original group failed entirely.
    pub all_fail_fraction: f64,
    /// Share of batch questions resampled without a single success.
    pub skipped_fraction: f64,
    pub batch: usize,
    pub resampled: usize,
    pub resample_passes: usize,
    pub retriggered: usize,
    pub rollouts: usize,
    /// Mean reward of the original rollouts.
    pub original_accuracy: f64,
    pub objective: f64,
    pub grad_norm: f64,
}

/// Everything sampled during a step, in sampling order.
#[derive(Clone, Debug, PartialEq, Default, Serialize)]
pub struct StepTrace {
    pub groups: Vec<Group>,
    pub pools: Vec<ResamplePool>,
    pub objectives: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub state: TrainState,
    pub metrics: MetricsRecord,
    pub trace: StepTrace,
    pub gradient: PolicyGrad,
}

fn prompt_for(q: &QuestionSpec) -> String {
    format!("Question {}", q.id)
}

fn sample_rollouts<R: Rng + ?Sized>(
    sampler: &PolicyParams,
    q: &QuestionSpec,
    n: usize,
    temperature: f64,
    perturbed: bool,
    context: Option<&SamplingContext>,
    rng: &mut R,
) -> Result<Vec<Rollout>> {
    (0..n)
        .map(|_| {
            let s = sampler.sample_seq(rng, temperature, perturbed)?;
            let reward = q.reward(&s.tokens);
            Ok(match context {
                None => Rollout::original(s.tokens, reward, s.logprobs),
                Some(ctx) => Rollout::resampled(s.tokens, reward, s.logprobs, ctx.clone()),
            })
        })
        .collect()
}

fn training_logprobs(params: &PolicyParams, rollouts: &[Rollout]) -> Result<Vec<Vec<f64>>> {
    rollouts
        .iter()
        .map(|r| params.logprob_seq(&r.tokens, r.trains_perturbed()))
        .collect()
}

/// One training step from `state`.
pub fn run_step<R: Rng + ?Sized>(
    state: &TrainState,
    config: &ExperimentConfig,
    rng: &mut R,
) -> Result<StepOutput> {
    let cfg = &config.shaping;
    let old = &state.params;
    let strategy = config.strategy;
    let beta = if strategy == Strategy::Grpo {
        cfg.beta
    } else {
        0.0
    };
    let objective_cfg = ShapingConfig {
        beta,
        ..cfg.clone()
    };

    let picks = index::sample(rng, config.question_bank.len(), config.batch).into_vec();
    let mut grad = PolicyGrad::zeros_like(old);
    let mut trace = StepTrace::default();
    let mut trigger_counts = state.trigger_counts.clone();
    let mut m = MetricsRecord {
        step: state.step,
        question_pass_rate: None,
        response_accuracy: None,
        zero_advantage_fraction: 0.0,
        all_fail_fraction: 0.0,
        skipped_fraction: 0.0,
        batch: config.batch,
        resampled: 0,
        resample_passes: 0,
        retriggered: 0,
        rollouts: 0,
        original_accuracy: 0.0,
        objective: 0.0,
        grad_norm: 0.0,
    };
    let (mut zero_adv, mut all_fail, mut skipped, mut correct_resamples, mut reward_sum) =
        (0usize, 0usize, 0usize, 0usize, 0.0);

    for &qi in &picks {
        let q = &config.question_bank[qi];
        let rollouts = sample_rollouts(old, q, cfg.group_size, cfg.temperature, false, None, rng)?;
        m.rollouts += rollouts.len();
        reward_sum += rollouts.iter().map(|r| r.reward).sum::<f64>();
        let mut group = Group::new(q.id.clone(), prompt_for(q), rollouts)?;
        let degenerate = group.compute_advantages();
        if degenerate.is_some() {
            zero_adv += 1;
        }
        if degenerate == Some(Degeneracy::AllFailed) {
            all_fail += 1;
        }

        if strategy.resamples() && trigger_resample(&group) {
            let count = trigger_counts.entry(q.id.clone()).or_insert(0);
            if *count > 0 {
                m.retriggered += 1;
            }
            *count += 1;

            let pool = if strategy.perturbs() {
                let delta = perturbgen::generate(&config.perturbation.with_seed(rng.random()))?;
                let shift =
                    toy::shift_for_text(&delta.text, old.vocab_size, config.shift_magnitude);
                let sampler = old.with_shift(shift)?;
                let ctx = SamplingContext::Perturbed {
                    delta_id: delta.id(),
                };
                let rs = sample_rollouts(
                    &sampler,
                    q,
                    cfg.resample_size,
                    cfg.temperature,
                    true,
                    Some(&ctx),
                    rng,
                )?;
                ResamplePool::new(q.id.clone(), Some(delta), rs)?
            } else {
                let temperature = if strategy == Strategy::NaiveResampleHot {
                    config.hot_temperature
                } else {
                    cfg.temperature
                };
                let rs = sample_rollouts(
                    old,
                    q,
                    cfg.resample_size,
                    temperature,
                    false,
                    Some(&SamplingContext::Naive),
                    rng,
                )?;
                ResamplePool::new(q.id.clone(), None, rs)?
            };
            m.rollouts += pool.rollouts.len();
            m.resampled += 1;
            correct_resamples += pool.correct_count;
            if pool.correct_count > 0 {
                m.resample_passes += 1;
            }

            match regroup(&group, &pool, rng)? {
                RegroupOutcome::Skipped { .. } => skipped += 1,
                RegroupOutcome::Regrouped(rg) => {
                    let new = training_logprobs(old, &rg.selected)?;
                    let terms = lope_objective(&rg, &new, &objective_cfg, strategy.shaping())?;
                    grad.add_scaled(&objective_grad(old, &rg.selected, &terms)?, 1.0);
                    m.objective += terms.value;
                    trace.objectives.push(terms.value);
                }
            }
            trace.pools.push(pool);
        } else {
            let new = training_logprobs(old, &group.rollouts)?;
            let refs = if beta > 0.0 {
                Some(training_logprobs(&state.reference, &group.rollouts)?)
            } else {
                None
            };
            let terms = grpo_objective(&group, &new, refs.as_deref(), &objective_cfg)?;
            grad.add_scaled(&objective_grad(old, &group.rollouts, &terms)?, 1.0);
            m.objective += terms.value;
            trace.objectives.push(terms.value);
        }
        trace.groups.push(group);
    }

    let b = config.batch as f64;
    grad.scale(1.0 / b);
    m.objective /= b;
    m.grad_norm = grad.norm();
    m.zero_advantage_fraction = zero_adv as f64 / b;
    m.all_fail_fraction = all_fail as f64 / b;
    m.skipped_fraction = skipped as f64 / b;
    m.original_accuracy = reward_sum / (b * cfg.group_size as f64);
    if m.resampled > 0 {
        m.question_pass_rate = Some(m.resample_passes as f64 / m.resampled as f64);
        m.response_accuracy =
            Some(correct_resamples as f64 / (m.resampled * cfg.resample_size) as f64);
    }

    let mut params = old.clone();
    params.ascend(&grad, config.learning_rate);
    let state = TrainState {
        params,
        reference: state.reference.clone(),
        step: state.step + 1,
        trigger_counts,
    };
    Ok(StepOutput {
        state,
        metrics: m,
        trace,
        gradient: grad,
    })
}

#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub final_state: TrainState,
    pub metrics: Vec<MetricsRecord>,
}

/// Runs `config.steps` steps from the configured policy with a generator
/// seeded from `config.seed`.
pub fn train(config: &ExperimentConfig) -> Result<TrainingRun> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = TrainState::new(config.policy.clone());
    let mut metrics = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let out = run_step(&state, config, &mut rng)?;
        metrics.push(out.metrics);
        state = out.state;
    }
    Ok(TrainingRun {
        final_state: state,
        metrics,
    })
}

pub const METRICS_CSV_HEADER: &str = "step,question_pass_rate,response_accuracy,zero_advantage_fraction,all_fail_fraction,skipped_fraction,batch,resampled,resample_passes,retriggered,rollouts,original_accuracy,objective,grad_norm";

pub fn write_metrics_csv<W: Write>(records: &[MetricsRecord], mut out: W) -> Result<()> {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    writeln!(out, "{METRICS_CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            opt(r.question_pass_rate),
            opt(r.response_accuracy),
            r.zero_advantage_fraction,
            r.all_fail_fraction,
            r.skipped_fraction,
            r.batch,
            r.resampled,
            r.resample_passes,
            r.retriggered,
            r.rollouts,
            r.original_accuracy,
            r.objective,
            r.grad_norm
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionEval {
    pub id: String,
    pub pass: bool,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_question: Vec<QuestionEval>,
    /// Fraction of questions solved by at least one of `G_eval` samples.
    pub pass_at_g: f64,
    /// Mean success fraction over questions.
    pub mean_at_g: f64,
}

/// Samples `g_eval` naive rollouts per question.
pub fn evaluate<R: Rng + ?Sized>(
    params: &PolicyParams,
    bank: &[QuestionSpec],
    g_eval: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Evaluation> {
    if bank.is_empty() || g_eval == 0 {
        return Err(Error::config(
            "evaluation needs questions and at least one sample",
        ));
    }
    let mut per_question = Vec::with_capacity(bank.len());
    for q in bank {
        let mut hits = 0usize;
        for _ in 0..g_eval {
            let s = params.sample_seq(rng, temperature, false)?;
            if q.reward(&s.tokens) == 1.0 {
                hits += 1;
            }
        }
        per_question.push(QuestionEval {
            id: q.id.clone(),
            pass: hits > 0,
            mean: hits as f64 / g_eval as f64,
        });
    }
    let n = bank.len() as f64;
    Ok(Evaluation {
        pass_at_g: per_question.iter().filter(|e| e.pass).count() as f64 / n,
        mean_at_g: per_question.iter().map(|e| e.mean).sum::<f64>() / n,
        per_question,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub trial: usize,
    pub seed: u64,
    pub step: usize,
    pub a_question_pass_rate: Option<f64>,
    pub b_question_pass_rate: Option<f64>,
    pub a_response_accuracy: Option<f64>,
    pub b_response_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub seed: u64,
    /// Resampled questions with a success over all resampled questions,
    /// pooled across the run.
    pub a_question_pass_rate: Option<f64>,
    pub b_question_pass_rate: Option<f64>,
    pub a_response_accuracy: Option<f64>,
    pub b_response_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided p-value for "A beats B".
    pub p_greater: f64,
    pub p_two_sided: f64,
}

impl SignTest {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (f64, f64)>) -> Self {
        let (mut wins, mut losses, mut ties) = (0, 0, 0);
        for (a, b) in pairs {
            if a > b {
                wins += 1;
            } else if a < b {
                losses += 1;
            } else {
                ties += 1;
            }
        }
        let n = (wins + losses) as u64;
        let (p_greater, p_less) = if n == 0 {
            (1.0, 1.0)
        } else {
            let dist = Binomial::new(0.5, n).expect("valid binomial");
            let upper = if wins == 0 {
                1.0
            } else {
                dist.sf(wins as u64 - 1)
            };
            (upper, dist.cdf(wins as u64))
        };
        SignTest {
            wins,
            losses,
            ties,
            p_greater,
            p_two_sided: (2.0 * p_greater.min(p_less)).min(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub a: Strategy,
    pub b: Strategy,
    pub rows: Vec<PairedRow>,
    pub trials: Vec<TrialSummary>,
    pub question_pass_sign_test: SignTest,
    pub response_accuracy_sign_test: SignTest,
}

fn pooled_rates(metrics: &[MetricsRecord], resample_size: usize) -> (Option<f64>, Option<f64>) {
    let resampled: usize = metrics.iter().map(|m| m.resampled).sum();
    if resampled == 0 {
        return (None, None);
    }
    let passes: usize = metrics.iter().map(|m| m.resample_passes).sum();
    let correct: f64 = metrics
        .iter()
        .filter_map(|m| {
            m.response_accuracy
                .map(|a| a * (m.resampled * resample_size) as f64)
        })
        .sum();
    (
        Some(passes as f64 / resampled as f64),
        Some(correct / (resampled * resample_size) as f64),
    )
}

/// Trains both configs on `trials` matched seeds (`a.seed + t`) and pairs
/// their metrics step by step.
pub fn compare_strategies(
    a: &ExperimentConfig,
    b: &ExperimentConfig,
    trials: usize,
) -> Result<ComparisonReport> {
    if a.question_bank != b.question_bank
        || a.policy != b.policy
        || a.steps != b.steps
        || a.batch != b.batch
        || a.shaping.group_size != b.shaping.group_size
        || a.shaping.resample_size != b.shaping.resample_size
    {
        return Err(Error::config(
            "compared configs must share bank, policy and budgets",
        ));
    }
    let mut rows = Vec::with_capacity(trials * a.steps);
    let mut summaries = Vec::with_capacity(trials);
    for trial in 0..trials {
        let seed = a.seed.wrapping_add(trial as u64);
        let ra = train(&a.with_seed(seed))?;
        let rb = train(&b.with_seed(seed))?;
        for (ma, mb) in ra.metrics.iter().zip(&rb.metrics) {
            rows.push(PairedRow {
                trial,
                seed,
                step: ma.step,
                a_question_pass_rate: ma.question_pass_rate,
                b_question_pass_rate: mb.question_pass_rate,
                a_response_accuracy: ma.response_accuracy,
                b_response_accuracy: mb.response_accuracy,
            });
        }
        let (ap, aa) = pooled_rates(&ra.metrics, a.shaping.resample_size);
        let (bp, ba) = pooled_rates(&rb.metrics, b.shaping.resample_size);
        summaries.push(TrialSummary {
            trial,
            seed,
            a_question_pass_rate: ap,
            b_question_pass_rate: bp,
            a_response_accuracy: aa,
            b_response_accuracy: ba,
        });
    }
    let pass = SignTest::from_pairs(
        summaries
            .iter()
            .filter_map(|s| Some((s.a_question_pass_rate?, s.b_question_pass_rate?))),
    );
    let acc = SignTest::from_pairs(
        summaries
            .iter()
            .filter_map(|s| Some((s.a_response_accuracy?, s.b_response_accuracy?))),
    );
    Ok(ComparisonReport {
        a: a.strategy,
        b: b.strategy,
        rows,
        trials: summaries,
        question_pass_sign_test: pass,
        response_accuracy_sign_test: acc,
    })
}

pub const PAIRED_CSV_HEADER: &str =
    "trial,seed,step,a_question_pass_rate,b_question_pass_rate,a_response_accuracy,b_response_accuracy";

pub fn write_paired_csv<W: Write>(rows: &[PairedRow], mut out: W) -> Result<()> {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    writeln!(out, "{PAIRED_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.trial,
            r.seed,
            r.step,
            opt(r.a_question_pass_rate),
            opt(r.b_question_pass_rate),
            opt(r.a_response_accuracy),
            opt(r.b_response_accuracy)
        )?;
    }
    Ok(())
}

/// Generator for question banks where exploration under a context shift
/// pays off.
///
/// The policy gets random first-order logits. A set of probe shifts is drawn
/// from the same Gaussian family as perturbation-induced shifts. Each
/// candidate full-length sequence whose naive probability is at most
/// `max_naive_prob` is scored by how much the probes raise its
/// `pass@resample_size` on average; the best-scoring distinct sequences
/// become the accepting sets, one per question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticBank {
    pub vocab_size: usize,
    pub max_len: usize,
    pub questions: usize,
    pub logit_scale: f64,
    pub shift_magnitude: f64,
    pub probe_shifts: usize,
    pub resample_size: usize,
    pub max_naive_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticBank {
    fn default() -> Self {
        SyntheticBank {
            vocab_size: 6,
            max_len: 4,
            questions: 48,
            logit_scale: 1.5,
            shift_magnitude: 1.0,
            probe_shifts: 32,
            resample_size: 24,
            max_naive_prob: 0.01,
            seed: 20_240_601,
        }
    }
}

fn pass_at(p: f64, k: usize) -> f64 {
    1.0 - (1.0 - p).powi(k as i32)
}

impl SyntheticBank {
    pub fn build(&self) -> Result<(PolicyParams, Vec<QuestionSpec>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let policy = PolicyParams::random(
            self.vocab_size,
            self.max_len,
            false,
            self.logit_scale,
            &mut rng,
        )?;
        let probes: Vec<PolicyParams> = (0..self.probe_shifts)
            .map(|_| {
                let shift = (0..self.vocab_size)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        self.shift_magnitude * z
                    })
                    .collect();
                policy.with_shift(shift)
            })
            .collect::<Result<_>>()?;

        let mut candidates: Vec<(f64, Vec<usize>)> = Vec::new();
        let mut failure = None;
        toy::for_each_sequence(self.vocab_size, self.max_len, |seq| {
            let score = || -> Result<Option<f64>> {
                let naive: f64 = policy.logprob_seq(seq, false)?.iter().sum::<f64>().exp();
                if naive > self.max_naive_prob {
                    return Ok(None);
                }
                let mut lifted = 0.0;
                for probe in &probes {
                    let p: f64 = probe.logprob_seq(seq, true)?.iter().sum::<f64>().exp();
                    lifted += pass_at(p, self.resample_size);
                }
                lifted /= probes.len().max(1) as f64;
                Ok(Some(lifted - pass_at(naive, self.resample_size)))
            };
            match score() {
                Ok(Some(s)) => candidates.push((s, seq.to_vec())),
                Ok(None) => {}
                Err(e) => failure = Some(e),
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        if candidates.len() < self.questions {
            return Err(Error::config(format!(
                "only {} sequences fall below the naive probability cap",
                candidates.len()
            )));
        }
        let bank = candidates
            .into_iter()
            .take(self.questions)
            .enumerate()
            .map(|(i, (_, seq))| QuestionSpec::new(format!("q{i:03}"), vec![seq], &policy))
            .collect::<Result<_>>()?;
        Ok((policy, bank))
    }

    /// A ready-to-run experiment on this bank: `G = 8`, `G' = 24`, a 100 to
    /// 300 word Lorem Ipsum perturbation, batch 8 and learning rate 0.5.
    pub fn experiment(
        &self,
        strategy: Strategy,
        steps: usize,
        seed: u64,
    ) -> Result<ExperimentConfig> {
        let (policy, question_bank) = self.build()?;
        let config = ExperimentConfig {
            shaping: ShapingConfig {
                resample_size: self.resample_size,
                ..ShapingConfig::default()
            },
            perturbation: PerturbationSpec::lorem(0),
            policy,
            question_bank,
            steps,
            learning_rate: 0.5,
            batch: 8,
            seed,
            strategy,
            shift_magnitude: self.shift_magnitude,
            hot_temperature: HOT_TEMPERATURE,
        };
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(strategy: Strategy) -> ExperimentConfig {
        let bank = SyntheticBank {
            questions: 12,
            vocab_size: 4,
            max_len: 3,
            max_naive_prob: 0.05,
            ..Default::default()
        };
        let mut c = bank.experiment(strategy, 5, 3).unwrap();
        c.batch = 4;
        c
    }

    #[test]
    fn strategy_names() {
        for s in Strategy::ALL {
            assert_eq!(Strategy::from_name(s.name()), Some(s));
        }
        assert!(!Strategy::Grpo.resamples());
        assert_eq!(Strategy::LopeShaped.shaping(), SignalShaping::FULL);
    }

    #[test]
    fn budget_accounting() {
        for s in Strategy::ALL {
            let c = small(s);
            let run = train(&c).unwrap();
            for m in &run.metrics {
                assert_eq!(m.rollouts, m.batch * 8 + m.resampled * 24);
                if s == Strategy::Grpo {
                    assert_eq!(m.resampled, 0);
                }
                for v in [
                    m.zero_advantage_fraction,
                    m.all_fail_fraction,
                    m.skipped_fraction,
                ] {
                    assert!((0.0..=1.0).contains(&v));
                }
                assert!(m.skipped_fraction <= m.all_fail_fraction);
                assert_eq!(
                    m.resampled as f64,
                    m.all_fail_fraction * m.batch as f64 * f64::from(u8::from(s.resamples()))
                );
            }
        }
    }

    #[test]
    fn replay_is_identical() {
        let c = small(Strategy::Lope);
        let a = train(&c).unwrap();
        let b = train(&c).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.final_state, b.final_state);
    }

    #[test]
    fn seed_override() {
        let mut c = small(Strategy::Grpo);
        c.apply_seed_override(Some("99")).unwrap();
        assert_eq!(c.seed, 99);
        assert!(c.apply_seed_override(Some("x")).is_err());
        c.apply_seed_override(None).unwrap();
        assert_eq!(c.seed, 99);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let c = small(Strategy::Grpo);
        let mut v = serde_json::to_value(&c).unwrap();
        v["surprise"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
        let back: ExperimentConfig =
            serde_json::from_value(serde_json::to_value(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn config_validation() {
        let mut c = small(Strategy::Grpo);
        c.batch = 100;
        assert!(c.validate().is_err());
        let mut c = small(Strategy::Grpo);
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn sign_test_values() {
        let all = SignTest::from_pairs((0..20).map(|_| (1.0, 0.0)));
        assert_eq!(all.wins, 20);
        assert!((all.p_greater - 0.5f64.powi(20)).abs() < 1e-15);
        assert!((all.p_two_sided - 2.0 * 0.5f64.powi(20)).abs() < 1e-15);
        let none = SignTest::from_pairs((0..5).map(|_| (0.3, 0.3)));
        assert_eq!((none.ties, none.p_two_sided), (5, 1.0));
    }

    #[test]
    fn identical_configs_compare_equal() {
        let c = small(Strategy::Lope);
        let r = compare_strategies(&c, &c, 2).unwrap();
        assert_eq!(r.rows.len(), 2 * c.steps);
        for row in &r.rows {
            assert_eq!(row.a_question_pass_rate, row.b_question_pass_rate);
            assert_eq!(row.a_response_accuracy, row.b_response_accuracy);
        }
        assert_eq!(
            r.question_pass_sign_test.wins + r.question_pass_sign_test.losses,
            0
        );
    }

    #[test]
    fn metrics_csv() {
        let run = train(&small(Strategy::NaiveResample)).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&run.metrics, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), run.metrics.len() + 1);
        assert!(text.starts_with(METRICS_CSV_HEADER));
    }
}
