//! Toy softmax sequence policy.
//!
//! Sequences have a fixed length `max_len` over a vocabulary of `vocab_size`
//! tokens. The next-token logits come from a table indexed by the previous
//! token (first-order Markov); with `positional` set, every position has its
//! own table. A prompt perturbation is modelled as `context_shift`, a vector
//! added to all logits whenever the perturbed context is active.
//!
//! Sampling logits are `logits / temperature + shift`: the temperature is
//! applied first and the shift is added afterwards.
//!
//! Everything here is exact: log-probabilities, the softmax Jacobian
//! gradient, and expectations by enumerating all `vocab_size^max_len`
//! sequences.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::grpo::{GradientWeights, Rollout};
use crate::{Error, Result};

pub type Token = usize;

pub const PARAMS_VERSION: u32 = 1;

/// Largest number of sequences [`enumerate_expectation`] will visit.
pub const ENUMERATION_BUDGET: u128 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyParams {
    pub version: u32,
    pub vocab_size: usize,
    pub max_len: usize,
    #[serde(default)]
    pub positional: bool,
    /// One row of `vocab_size` logits per context. Row `0` is the start
    /// context, row `k + 1` follows token `k`. Positional tables stack
    /// `max_len` such blocks.
    pub logits: Vec<Vec<f64>>,
    pub context_shift: Vec<f64>,
}

impl PolicyParams {
    pub fn uniform(vocab_size: usize, max_len: usize) -> Result<Self> {
        Self::from_rows(vocab_size, max_len, false, |_, _| 0.0)
    }

    /// Logits drawn i.i.d. from `N(0, scale^2)`; zero context shift.
    pub fn random<R: Rng + ?Sized>(
        vocab_size: usize,
        max_len: usize,
        positional: bool,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::from_rows(vocab_size, max_len, positional, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
    }

    fn from_rows(
        vocab_size: usize,
        max_len: usize,
        positional: bool,
        mut init: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let rows = context_rows(vocab_size, max_len, positional);
        let logits = (0..rows)
            .map(|r| (0..vocab_size).map(|c| init(r, c)).collect())
            .collect();
        let params = PolicyParams {
            version: PARAMS_VERSION,
            vocab_size,
            max_len,
            positional,
            logits,
            context_shift: vec![0.0; vocab_size],
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != PARAMS_VERSION {
            return Err(Error::Version(self.version));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("policy vocabulary needs at least 2 tokens"));
        }
        if self.max_len < 1 {
            return Err(Error::config("policy max_len must be at least 1"));
        }
        let rows = context_rows(self.vocab_size, self.max_len, self.positional);
        if self.logits.len() != rows {
            return Err(Error::structural(format!(
                "expected {rows} logit rows, found {}",
                self.logits.len()
            )));
        }
        if self.logits.iter().any(|r| r.len() != self.vocab_size) {
            return Err(Error::structural("logit row width differs from vocab_size"));
        }
        if self.context_shift.len() != self.vocab_size {
            return Err(Error::structural(
                "context_shift length differs from vocab_size",
            ));
        }
        let finite = self
            .logits
            .iter()
            .flatten()
            .chain(&self.context_shift)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("policy parameters must be finite"));
        }
        Ok(())
    }

    /// Copy of these parameters with a different perturbation shift.
    pub fn with_shift(&self, shift: Vec<f64>) -> Result<Self> {
        if shift.len() != self.vocab_size {
            return Err(Error::structural("shift length differs from vocab_size"));
        }
        Ok(PolicyParams {
            context_shift: shift,
            ..self.clone()
        })
    }

    fn row(&self, pos: usize, prev: Option<Token>) -> usize {
        let ctx = prev.map_or(0, |t| t + 1);
        if self.positional {
            pos * (self.vocab_size + 1) + ctx
        } else {
            ctx
        }
    }

    /// Next-token log-probabilities at `pos` after `prev`.
    pub fn log_distribution(
        &self,
        pos: usize,
        prev: Option<Token>,
        temperature: f64,
        perturbed: bool,
    ) -> Vec<f64> {
        let row = &self.logits[self.row(pos, prev)];
        let z: Vec<f64> = row
            .iter()
            .zip(&self.context_shift)
            .map(|(&l, &s)| {
                if perturbed {
                    l / temperature + s
                } else {
                    l / temperature
                }
            })
            .collect();
        log_softmax(&z)
    }

    pub fn distribution(
        &self,
        pos: usize,
        prev: Option<Token>,
        temperature: f64,
        perturbed: bool,
    ) -> Vec<f64> {
        self.log_distribution(pos, prev, temperature, perturbed)
            .into_iter()
            .map(f64::exp)
            .collect()
    }

    fn check_seq(&self, seq: &[Token]) -> Result<()> {
        if seq.len() > self.max_len {
            return Err(Error::structural(format!(
                "sequence of length {} exceeds max_len {}",
                seq.len(),
                self.max_len
            )));
        }
        if let Some(&token) = seq.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::TokenOutOfVocab {
                token,
                vocab_size: self.vocab_size,
            });
        }
        Ok(())
    }

    /// Per-token log-probabilities at temperature 1.
    pub fn logprob_seq(&self, seq: &[Token], perturbed: bool) -> Result<Vec<f64>> {
        self.logprob_seq_at(seq, perturbed, 1.0)
    }

    pub fn logprob_seq_at(
        &self,
        seq: &[Token],
        perturbed: bool,
        temperature: f64,
    ) -> Result<Vec<f64>> {
        self.check_seq(seq)?;
        let mut prev = None;
        let mut out = Vec::with_capacity(seq.len());
        for (pos, &tok) in seq.iter().enumerate() {
            out.push(self.log_distribution(pos, prev, temperature, perturbed)[tok]);
            prev = Some(tok);
        }
        Ok(out)
    }

    /// Ancestral sample of a full-length sequence. One uniform draw per
    /// position, so the random stream consumed does not depend on the
    /// parameters.
    pub fn sample_seq<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        temperature: f64,
        perturbed: bool,
    ) -> Result<SampledSeq> {
        if !(temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        let mut tokens = Vec::with_capacity(self.max_len);
        let mut logprobs = Vec::with_capacity(self.max_len);
        let mut prev = None;
        for pos in 0..self.max_len {
            let logp = self.log_distribution(pos, prev, temperature, perturbed);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = self.vocab_size - 1;
            for (tok, lp) in logp.iter().enumerate() {
                acc += lp.exp();
                if u < acc {
                    pick = tok;
                    break;
                }
            }
            tokens.push(pick);
            logprobs.push(logp[pick]);
            prev = Some(pick);
        }
        Ok(SampledSeq { tokens, logprobs })
    }

    /// Gradient of the sequence log-probability (temperature 1).
    pub fn grad_logprob(&self, seq: &[Token], perturbed: bool) -> Result<PolicyGrad> {
        let weights = vec![1.0; seq.len()];
        let mut grad = PolicyGrad::zeros_like(self);
        self.accumulate_grad(&mut grad, seq, &weights, perturbed, 1.0)?;
        Ok(grad)
    }

    /// Adds `sum_t weights[t] * d log pi(seq[t]) / d params` into `grad`.
    pub fn accumulate_grad(
        &self,
        grad: &mut PolicyGrad,
        seq: &[Token],
        weights: &[f64],
        perturbed: bool,
        temperature: f64,
    ) -> Result<()> {
        self.check_seq(seq)?;
        if weights.len() != seq.len() {
            return Err(Error::structural("one weight per token required"));
        }
        let mut prev = None;
        for (pos, (&tok, &w)) in seq.iter().zip(weights).enumerate() {
            if w != 0.0 {
                let probs = self.distribution(pos, prev, temperature, perturbed);
                let row = self.row(pos, prev);
                for (tau, p) in probs.iter().enumerate() {
                    let ind = if tau == tok { 1.0 } else { 0.0 };
                    let d = w * (ind - p);
                    grad.logits[row][tau] += d / temperature;
                    if perturbed {
                        grad.shift[tau] += d;
                    }
                }
            }
            prev = Some(tok);
        }
        Ok(())
    }

    /// Gradient ascent step. Entries with an exactly-zero gradient are left
    /// untouched, so a zero gradient leaves the parameters bit-identical.
    pub fn ascend(&mut self, grad: &PolicyGrad, learning_rate: f64) {
        for (row, grow) in self.logits.iter_mut().zip(&grad.logits) {
            for (p, g) in row.iter_mut().zip(grow) {
                if *g != 0.0 {
                    *p += learning_rate * g;
                }
            }
        }
        for (p, g) in self.context_shift.iter_mut().zip(&grad.shift) {
            if *g != 0.0 {
                *p += learning_rate * g;
            }
        }
    }

    /// Number of scalar parameters, logits first then the shift.
    pub fn param_count(&self) -> usize {
        self.logits.len() * self.vocab_size + self.vocab_size
    }

    pub fn param(&self, k: usize) -> f64 {
        let v = self.vocab_size;
        if k < self.logits.len() * v {
            self.logits[k / v][k % v]
        } else {
            self.context_shift[k - self.logits.len() * v]
        }
    }

    pub fn set_param(&mut self, k: usize, value: f64) {
        let v = self.vocab_size;
        if k < self.logits.len() * v {
            self.logits[k / v][k % v] = value;
        } else {
            let n = self.logits.len() * v;
            self.context_shift[k - n] = value;
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let params: PolicyParams = serde_json::from_slice(&std::fs::read(path)?)?;
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

fn context_rows(vocab_size: usize, max_len: usize, positional: bool) -> usize {
    if positional {
        max_len * (vocab_size + 1)
    } else {
        vocab_size + 1
    }
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledSeq {
    pub tokens: Vec<Token>,
    /// Log-probabilities under the sampling distribution (temperature and
    /// shift included).
    pub logprobs: Vec<f64>,
}

/// Gradient with the same layout as [`PolicyParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyGrad {
    pub logits: Vec<Vec<f64>>,
    pub shift: Vec<f64>,
}

impl PolicyGrad {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        PolicyGrad {
            logits: vec![vec![0.0; params.vocab_size]; params.logits.len()],
            shift: vec![0.0; params.vocab_size],
        }
    }

    pub fn add_scaled(&mut self, other: &PolicyGrad, scale: f64) {
        for (a, b) in self.logits.iter_mut().zip(&other.logits) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
        for (x, y) in self.shift.iter_mut().zip(&other.shift) {
            *x += scale * y;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.logits.iter_mut().flatten().for_each(|x| *x *= s);
        self.shift.iter_mut().for_each(|x| *x *= s);
    }

    pub fn flat(&self) -> Vec<f64> {
        self.logits
            .iter()
            .flatten()
            .chain(&self.shift)
            .copied()
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.flat().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.flat().iter().all(|&x| x == 0.0)
    }

    pub fn max_abs_diff(&self, other: &PolicyGrad) -> f64 {
        self.flat()
            .iter()
            .zip(other.flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Deterministic shift direction for a perturbation text, scaled to
/// `magnitude`: entries are `magnitude * N(0, 1)` from a generator seeded
/// by the SHA-256 of the text.
pub fn shift_for_text(text: &str, vocab_size: usize, magnitude: f64) -> Vec<f64> {
    let digest = Sha256::digest(text.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    (0..vocab_size)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            magnitude * z
        })
        .collect()
}

/// Synthetic verifiable question: a response earns reward 1 iff one of the
/// accepting sequences is a prefix of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionSpec {
    pub id: String,
    pub accepting: Vec<Vec<Token>>,
    /// Probability mass of the accepting set under the reference policy.
    #[serde(default)]
    pub difficulty: f64,
}

impl QuestionSpec {
    pub fn new(
        id: impl Into<String>,
        accepting: Vec<Vec<Token>>,
        reference: &PolicyParams,
    ) -> Result<Self> {
        let mut q = QuestionSpec {
            id: id.into(),
            accepting,
            difficulty: 0.0,
        };
        q.validate(reference)?;
        q.difficulty = q.success_probability(reference, false, 1.0)?;
        Ok(q)
    }

    pub fn validate(&self, params: &PolicyParams) -> Result<()> {
        if self.accepting.is_empty() {
            return Err(Error::config(format!(
                "question {} has no accepting sequences",
                self.id
            )));
        }
        for seq in &self.accepting {
            params.check_seq(seq)?;
        }
        Ok(())
    }

    pub fn reward(&self, tokens: &[Token]) -> f64 {
        if self.accepting.iter().any(|a| tokens.starts_with(a)) {
            1.0
        } else {
            0.0
        }
    }

    /// Exact success probability. Accepting sequences that extend another
    /// accepting sequence are dropped; the remaining prefix events are
    /// disjoint, so their probabilities add.
    pub fn success_probability(
        &self,
        params: &PolicyParams,
        perturbed: bool,
        temperature: f64,
    ) -> Result<f64> {
        let mut total = 0.0;
        for (i, a) in self.accepting.iter().enumerate() {
            let dominated = self
                .accepting
                .iter()
                .enumerate()
                .any(|(j, b)| j != i && a.starts_with(b) && (a.len() > b.len() || j < i));
            if !dominated {
                let lp: f64 = params
                    .logprob_seq_at(a, perturbed, temperature)?
                    .iter()
                    .sum();
                total += lp.exp();
            }
        }
        Ok(total)
    }
}

/// Calls `f` on every token sequence of length `len`, in lexicographic order.
pub fn for_each_sequence(vocab_size: usize, len: usize, mut f: impl FnMut(&[Token])) -> Result<()> {
    let size = (vocab_size as u128)
        .checked_pow(len as u32)
        .unwrap_or(u128::MAX);
    if size > ENUMERATION_BUDGET {
        return Err(Error::EnumerationBudget {
            size,
            budget: ENUMERATION_BUDGET,
        });
    }
    let mut seq = vec![0; len];
    loop {
        f(&seq);
        let mut i = len;
        loop {
            if i == 0 {
                return Ok(());
            }
            i -= 1;
            seq[i] += 1;
            if seq[i] < vocab_size {
                break;
            }
            seq[i] = 0;
        }
    }
}

/// Quantities whose exact expectation over sampled sequences can be
/// computed by [`enumerate_expectation`].
pub enum Functional<'a> {
    /// `P(reward = 1)`.
    SuccessProbability,
    /// `E[g(o)]` for an arbitrary scalar function.
    Scalar(&'a dyn Fn(&[Token]) -> f64),
    /// On-policy score-function gradient `E[grad log pi(o) * (r(o) - baseline)]`
    /// of the sampling distribution itself.
    ScoreGradient { baseline: f64 },
    /// Importance-weighted gradient of a target policy evaluated in the naive
    /// context: `E[rho(o) * grad log pi_target(o) * (r(o) - baseline)]` with
    /// `rho = pi_target(o) / pi_sampling(o)` at sequence level.
    ImportanceWeightedGradient {
        target: &'a PolicyParams,
        baseline: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expectation {
    Scalar(f64),
    Gradient(PolicyGrad),
}

impl Expectation {
    pub fn scalar(&self) -> Option<f64> {
        match self {
            Expectation::Scalar(v) => Some(*v),
            Expectation::Gradient(_) => None,
        }
    }

    pub fn gradient(&self) -> Option<&PolicyGrad> {
        match self {
            Expectation::Gradient(g) => Some(g),
            Expectation::Scalar(_) => None,
        }
    }
}

/// Exact expectation under `params` at temperature 1, sampling in the
/// perturbed context when `perturbed_sampling` is set.
pub fn enumerate_expectation(
    params: &PolicyParams,
    question: &QuestionSpec,
    functional: Functional<'_>,
    perturbed_sampling: bool,
) -> Result<Expectation> {
    let mut scalar = 0.0;
    let mut grad = PolicyGrad::zeros_like(params);
    let mut failure = None;
    for_each_sequence(params.vocab_size, params.max_len, |seq| {
        if failure.is_some() {
            return;
        }
        let mut step = || -> Result<()> {
            let logp: f64 = params.logprob_seq(seq, perturbed_sampling)?.iter().sum();
            let prob = logp.exp();
            match &functional {
                Functional::SuccessProbability => scalar += prob * question.reward(seq),
                Functional::Scalar(g) => scalar += prob * g(seq),
                Functional::ScoreGradient { baseline } => {
                    let adv = question.reward(seq) - baseline;
                    grad.add_scaled(&params.grad_logprob(seq, perturbed_sampling)?, prob * adv);
                }
                Functional::ImportanceWeightedGradient { target, baseline } => {
                    let adv = question.reward(seq) - baseline;
                    let target_logp: f64 = target.logprob_seq(seq, false)?.iter().sum();
                    let rho = (target_logp - logp).exp();
                    grad.add_scaled(&target.grad_logprob(seq, false)?, prob * rho * adv);
                }
            }
            Ok(())
        };
        if let Err(e) = step() {
            failure = Some(e);
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(match functional {
        Functional::SuccessProbability | Functional::Scalar(_) => Expectation::Scalar(scalar),
        _ => Expectation::Gradient(grad),
    })
}

/// Analytic gradient of an assembled objective: for every rollout, the
/// per-token weights `dJ / d log pi_theta(o_t)` times the softmax Jacobian,
/// evaluated in the rollout's training context at temperature 1.
pub fn objective_grad(
    params: &PolicyParams,
    rollouts: &[Rollout],
    terms: &dyn GradientWeights,
) -> Result<PolicyGrad> {
    let weights = terms.grad_weights();
    if weights.len() != rollouts.len() {
        return Err(Error::structural("one weight vector per rollout required"));
    }
    let mut grad = PolicyGrad::zeros_like(params);
    for (rollout, w) in rollouts.iter().zip(weights) {
        params.accumulate_grad(
            &mut grad,
            &rollout.tokens,
            w,
            rollout.trains_perturbed(),
            1.0,
        )?;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn uniform_logits_give_uniform_logprobs() {
        let p = PolicyParams::uniform(4, 3).unwrap();
        for lp in p.logprob_seq(&[0, 3, 2], false).unwrap() {
            assert!((lp - 0.25f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_shift_makes_contexts_identical() {
        let p = PolicyParams::random(5, 3, false, 1.0, &mut rng(1)).unwrap();
        let seq = [4, 0, 2];
        assert_eq!(
            p.logprob_seq(&seq, true).unwrap(),
            p.logprob_seq(&seq, false).unwrap()
        );
    }

    #[test]
    fn probabilities_sum_to_one_over_all_sequences() {
        for &(positional, temp) in &[(false, 1.0), (true, 0.7), (false, 1.3)] {
            let mut p = PolicyParams::random(3, 4, positional, 1.5, &mut rng(2)).unwrap();
            p.context_shift = vec![0.8, -1.1, 0.3];
            for perturbed in [false, true] {
                let mut total = 0.0;
                for_each_sequence(3, 4, |s| {
                    let lp: f64 = p.logprob_seq_at(s, perturbed, temp).unwrap().iter().sum();
                    total += lp.exp();
                })
                .unwrap();
                assert!((total - 1.0).abs() < 1e-10, "total {total}");
            }
        }
    }

    #[test]
    fn jacobian_by_hand_for_two_tokens() {
        let p = PolicyParams::uniform(2, 1).unwrap();
        let g = p.grad_logprob(&[0], false).unwrap();
        assert_eq!(g.logits[0], vec![0.5, -0.5]);
        assert!(g.logits[1..].iter().flatten().all(|&x| x == 0.0));
        assert_eq!(g.shift, vec![0.0, 0.0]);
    }

    #[test]
    fn jacobian_rows_sum_to_zero() {
        let mut p = PolicyParams::random(4, 3, true, 1.0, &mut rng(3)).unwrap();
        p.context_shift = vec![0.1, 0.2, -0.3, 0.4];
        let g = p.grad_logprob(&[1, 1, 3], true).unwrap();
        for row in &g.logits {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
        assert!(g.shift.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn grad_logprob_matches_central_differences() {
        let mut p = PolicyParams::random(3, 3, false, 1.0, &mut rng(4)).unwrap();
        p.context_shift = vec![0.5, -0.2, 0.9];
        let seq = [2, 0, 1];
        for perturbed in [false, true] {
            let g = p.grad_logprob(&seq, perturbed).unwrap().flat();
            let h = 1e-5;
            let mut fd = Vec::new();
            for k in 0..p.param_count() {
                let mut hi = p.clone();
                hi.set_param(k, p.param(k) + h);
                let mut lo = p.clone();
                lo.set_param(k, p.param(k) - h);
                let f =
                    |q: &PolicyParams| q.logprob_seq(&seq, perturbed).unwrap().iter().sum::<f64>();
                fd.push((f(&hi) - f(&lo)) / (2.0 * h));
            }
            let err: f64 = g
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(err / scale < 1e-6, "relative error {}", err / scale);
        }
    }

    #[test]
    fn tiny_temperature_is_greedy() {
        let mut p = PolicyParams::uniform(3, 3).unwrap();
        p.logits[0] = vec![0.0, 1.0, 0.0];
        p.logits[2] = vec![0.0, 0.0, 2.0];
        p.logits[3] = vec![1.5, 0.0, 0.0];
        let s = p.sample_seq(&mut rng(9), 1e-4, false).unwrap();
        assert_eq!(s.tokens, vec![1, 2, 0]);
    }

    #[test]
    fn sampled_logprobs_are_sampling_distribution() {
        let mut p = PolicyParams::random(4, 3, false, 1.0, &mut rng(5)).unwrap();
        p.context_shift = vec![1.0, 0.0, -1.0, 0.5];
        let s = p.sample_seq(&mut rng(6), 1.2, true).unwrap();
        assert_eq!(s.logprobs, p.logprob_seq_at(&s.tokens, true, 1.2).unwrap());
        let again = p.sample_seq(&mut rng(6), 1.2, true).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn length_one_frequencies_match_softmax() {
        let mut p = PolicyParams::uniform(3, 1).unwrap();
        p.logits[0] = vec![0.3, -0.4, 1.0];
        let probs = p.distribution(0, None, 1.0, false);
        let n = 100_000;
        let mut counts = [0usize; 3];
        let mut r = rng(7);
        for _ in 0..n {
            counts[p.sample_seq(&mut r, 1.0, false).unwrap().tokens[0]] += 1;
        }
        for (c, pr) in counts.iter().zip(&probs) {
            let sd = (n as f64 * pr * (1.0 - pr)).sqrt();
            assert!((*c as f64 - n as f64 * pr).abs() < 3.0 * sd);
        }
    }

    #[test]
    fn out_of_vocab_token_is_rejected() {
        let p = PolicyParams::uniform(2, 2).unwrap();
        assert!(matches!(
            p.logprob_seq(&[0, 2], false),
            Err(Error::TokenOutOfVocab { .. })
        ));
        assert!(matches!(
            p.logprob_seq(&[0, 0, 0], false),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn question_with_empty_prefix_always_succeeds() {
        let p = PolicyParams::random(3, 3, false, 1.0, &mut rng(8)).unwrap();
        let q = QuestionSpec::new("all", vec![vec![]], &p).unwrap();
        let e = enumerate_expectation(&p, &q, Functional::SuccessProbability, false).unwrap();
        assert!((e.scalar().unwrap() - 1.0).abs() < 1e-12);
        assert!((q.difficulty - 1.0).abs() < 1e-12);
    }

    #[test]
    fn success_probability_matches_enumeration() {
        let p = PolicyParams::random(3, 3, false, 1.0, &mut rng(10)).unwrap();
        let q = QuestionSpec::new(
            "q",
            vec![vec![0, 1], vec![0, 1, 2], vec![2, 2, 2], vec![1]],
            &p,
        )
        .unwrap();
        let e = enumerate_expectation(&p, &q, Functional::SuccessProbability, false).unwrap();
        assert!((e.scalar().unwrap() - q.difficulty).abs() < 1e-12);
    }

    #[test]
    fn importance_weighting_recovers_on_policy_gradient() {
        let mut r = rng(11);
        let old = PolicyParams::random(3, 3, false, 1.0, &mut r)
            .unwrap()
            .with_shift(vec![1.2, -0.7, 0.4])
            .unwrap();
        let target = PolicyParams::random(3, 3, false, 1.0, &mut r).unwrap();
        let q = QuestionSpec::new("q", vec![vec![1, 0]], &target).unwrap();
        let off = enumerate_expectation(
            &old,
            &q,
            Functional::ImportanceWeightedGradient {
                target: &target,
                baseline: 0.2,
            },
            true,
        )
        .unwrap();
        let on = enumerate_expectation(
            &target,
            &q,
            Functional::ScoreGradient { baseline: 0.2 },
            false,
        )
        .unwrap();
        assert!(off.gradient().unwrap().max_abs_diff(on.gradient().unwrap()) < 1e-10);
    }

    #[test]
    fn nonzero_shift_moves_the_distribution() {
        let base = PolicyParams::random(3, 2, false, 1.0, &mut rng(12)).unwrap();
        let shifted = base
            .with_shift(shift_for_text("lorem ipsum", 3, 1.0))
            .unwrap();
        let mut tv = 0.0;
        for_each_sequence(3, 2, |s| {
            let a: f64 = base.logprob_seq(s, false).unwrap().iter().sum();
            let b: f64 = shifted.logprob_seq(s, true).unwrap().iter().sum();
            tv += 0.5 * (a.exp() - b.exp()).abs();
        })
        .unwrap();
        assert!(tv > 0.0);
        assert_eq!(
            shift_for_text("lorem ipsum", 3, 1.0),
            shift_for_text("lorem ipsum", 3, 1.0)
        );
    }

    #[test]
    fn budget_is_enforced() {
        assert!(matches!(
            for_each_sequence(10, 7, |_| {}),
            Err(Error::EnumerationBudget { .. })
        ));
    }

    #[test]
    fn params_json_round_trip() {
        let p = PolicyParams::random(3, 2, true, 1.0, &mut rng(13)).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        let back: PolicyParams = serde_json::from_str(&s).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn zero_gradient_step_is_bit_identical() {
        let mut p = PolicyParams::random(3, 2, false, 1.0, &mut rng(14)).unwrap();
        p.logits[0][0] = -0.0;
        let before = p.clone();
        p.ascend(&PolicyGrad::zeros_like(&before), 0.5);
        assert_eq!(format!("{:?}", p), format!("{:?}", before));
        assert!(p.logits[0][0].is_sign_negative());
    }
}
