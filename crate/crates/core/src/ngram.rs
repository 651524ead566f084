//! Count-based n-gram language models with additive smoothing.
//!
//! Every sequence is padded with `n - 1` start markers. When the end marker
//! is modelled (the default for trained models) it takes part in the
//! probability mass and counts as one scored step, so
//! `perplexity = exp(-logprob / (len + 1))`. Models built for fixed-length
//! generators, such as a uniform pool, can leave it out.
//!
//! Scoring is smoothed: `P(w | ctx) = (count(ctx, w) + alpha) / (total(ctx) + alpha * |V|)`
//! where `V` includes the end marker when it is modelled. Sampling draws from
//! the raw counts, so every sampled transition was seen in training.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const START: &str = "<s>";
pub const END: &str = "</s>";
pub const MODEL_VERSION: u32 = 1;
pub const DEFAULT_ALPHA: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitLevel {
    /// Whitespace-delimited words.
    #[default]
    Word,
    /// Unicode scalar values.
    Char,
}

impl UnitLevel {
    pub fn split(self, text: &str) -> Vec<String> {
        match self {
            UnitLevel::Word => text.split_whitespace().map(str::to_owned).collect(),
            UnitLevel::Char => text.chars().map(String::from).collect(),
        }
    }

    pub fn join(self, units: &[String]) -> String {
        match self {
            UnitLevel::Word => units.join(" "),
            UnitLevel::Char => units.concat(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct NGramModel {
    order: usize,
    alpha: f64,
    end_marker: bool,
    level: UnitLevel,
    vocab: BTreeSet<String>,
    counts: BTreeMap<Vec<String>, BTreeMap<String, u64>>,
    totals: BTreeMap<Vec<String>, u64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub end_marker: bool,
    pub level: UnitLevel,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            end_marker: true,
            level: UnitLevel::Word,
        }
    }
}

impl NGramModel {
    pub fn train(corpus: &[Vec<String>], order: usize, alpha: f64) -> Result<Self> {
        Self::train_with(corpus, order, alpha, TrainOptions::default())
    }

    pub fn train_with(
        corpus: &[Vec<String>],
        order: usize,
        alpha: f64,
        options: TrainOptions,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Training("corpus is empty".into()));
        }
        if order < 1 {
            return Err(Error::Training("order must be at least 1".into()));
        }
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::Training(
                "smoothing constant must be finite and non-negative".into(),
            ));
        }
        let mut model = NGramModel {
            order,
            alpha,
            end_marker: options.end_marker,
            level: options.level,
            vocab: BTreeSet::new(),
            counts: BTreeMap::new(),
            totals: BTreeMap::new(),
        };
        for seq in corpus {
            let mut history: Vec<String> = vec![START.to_owned(); order - 1];
            for unit in seq {
                if unit == START || unit == END {
                    return Err(Error::Training(format!(
                        "corpus contains reserved unit {unit}"
                    )));
                }
                model.vocab.insert(unit.clone());
                model.observe(&history, unit);
                history.push(unit.clone());
            }
            if options.end_marker {
                model.observe(&history, END);
            }
        }
        if model.counts.is_empty() {
            return Err(Error::Training("corpus produced no events".into()));
        }
        Ok(model)
    }

    /// Unigram model assigning `1 / |words|` to every word and no end mass.
    pub fn uniform(words: &[String]) -> Result<Self> {
        let corpus = vec![words.to_vec()];
        Self::train_with(
            &corpus,
            1,
            0.0,
            TrainOptions {
                end_marker: false,
                level: UnitLevel::Word,
            },
        )
    }

    fn observe(&mut self, history: &[String], unit: &str) {
        let ctx = self.context_of(history);
        *self
            .counts
            .entry(ctx.clone())
            .or_default()
            .entry(unit.to_owned())
            .or_insert(0) += 1;
        *self.totals.entry(ctx).or_insert(0) += 1;
    }

    fn context_of(&self, history: &[String]) -> Vec<String> {
        let k = self.order - 1;
        history[history.len() - k..].to_vec()
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn level(&self) -> UnitLevel {
        self.level
    }

    pub fn models_end(&self) -> bool {
        self.end_marker
    }

    pub fn vocab(&self) -> &BTreeSet<String> {
        &self.vocab
    }

    pub fn is_trained(&self) -> bool {
        !self.counts.is_empty()
    }

    pub fn contexts(&self) -> impl Iterator<Item = &[String]> {
        self.counts.keys().map(Vec::as_slice)
    }

    /// Number of outcomes the smoothing mass is spread over.
    fn outcomes(&self) -> usize {
        self.vocab.len() + usize::from(self.end_marker)
    }

    /// Outcomes the model assigns mass to: the vocabulary, plus the end
    /// marker when modelled.
    pub fn outcome_units(&self) -> Vec<String> {
        let mut out: Vec<String> = self.vocab.iter().cloned().collect();
        if self.end_marker {
            out.push(END.to_owned());
        }
        out
    }

    /// Smoothed `P(unit | context)`, `context` being the last `n - 1` units
    /// (start markers included).
    pub fn prob(&self, context: &[String], unit: &str) -> f64 {
        let count = self
            .counts
            .get(context)
            .and_then(|m| m.get(unit))
            .copied()
            .unwrap_or(0);
        let total = self.totals.get(context).copied().unwrap_or(0);
        let denom = total as f64 + self.alpha * self.outcomes() as f64;
        if denom == 0.0 {
            return 0.0;
        }
        (count as f64 + self.alpha) / denom
    }

    /// Per-step log-probabilities, the end marker last when modelled.
    pub fn step_logprobs(&self, seq: &[String]) -> Vec<f64> {
        let mut history: Vec<String> = vec![START.to_owned(); self.order - 1];
        let mut out = Vec::with_capacity(seq.len() + 1);
        for unit in seq {
            out.push(self.prob(&self.context_of(&history), unit).ln());
            history.push(unit.clone());
        }
        if self.end_marker {
            out.push(self.prob(&self.context_of(&history), END).ln());
        }
        out
    }

    /// Sequence log-probability; `-inf` when an event has zero probability.
    pub fn logprob(&self, seq: &[String]) -> f64 {
        self.step_logprobs(seq).iter().sum()
    }

    /// Number of scored steps for `seq`.
    pub fn scored_len(&self, seq: &[String]) -> usize {
        seq.len() + usize::from(self.end_marker)
    }

    pub fn perplexity(&self, seq: &[String]) -> Result<f64> {
        let lp = self.logprob(seq);
        let n = self.scored_len(seq);
        if !lp.is_finite() {
            return Err(Error::Undefined(
                "perplexity overflow: zero-probability event".into(),
            ));
        }
        if n == 0 {
            return Err(Error::Undefined(
                "perplexity of an empty unscored sequence".into(),
            ));
        }
        Ok((-lp / n as f64).exp())
    }

    /// Ancestral sample from the start context until the end marker, an
    /// unseen context, or `max_len` units.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, max_len: usize) -> Vec<String> {
        let mut history: Vec<String> = vec![START.to_owned(); self.order - 1];
        let mut out = Vec::new();
        while out.len() < max_len {
            let ctx = self.context_of(&history);
            let (Some(next), Some(&total)) = (self.counts.get(&ctx), self.totals.get(&ctx)) else {
                break;
            };
            let mut u = rng.random_range(0..total);
            let mut pick = None;
            for (unit, &c) in next {
                if u < c {
                    pick = Some(unit);
                    break;
                }
                u -= c;
            }
            match pick {
                Some(unit) if unit != END => {
                    out.push(unit.clone());
                    history.push(unit.clone());
                }
                _ => break,
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    order: usize,
    alpha: f64,
    end_marker: bool,
    level: UnitLevel,
    vocab: Vec<String>,
    contexts: Vec<ContextRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContextRecord {
    context: Vec<String>,
    next: BTreeMap<String, u64>,
}

impl From<NGramModel> for ModelFile {
    fn from(m: NGramModel) -> Self {
        ModelFile {
            version: MODEL_VERSION,
            order: m.order,
            alpha: m.alpha,
            end_marker: m.end_marker,
            level: m.level,
            vocab: m.vocab.into_iter().collect(),
            contexts: m
                .counts
                .into_iter()
                .map(|(context, next)| ContextRecord { context, next })
                .collect(),
        }
    }
}

impl TryFrom<ModelFile> for NGramModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        if f.version != MODEL_VERSION {
            return Err(Error::Version(f.version));
        }
        if f.order < 1 {
            return Err(Error::Training("order must be at least 1".into()));
        }
        let mut counts = BTreeMap::new();
        let mut totals = BTreeMap::new();
        for rec in f.contexts {
            if rec.context.len() != f.order - 1 {
                return Err(Error::structural("context width differs from model order"));
            }
            let total: u64 = rec.next.values().sum();
            if total == 0 {
                return Err(Error::structural("stored context has zero total count"));
            }
            totals.insert(rec.context.clone(), total);
            counts.insert(rec.context, rec.next);
        }
        Ok(NGramModel {
            order: f.order,
            alpha: f.alpha,
            end_marker: f.end_marker,
            level: f.level,
            vocab: f.vocab.into_iter().collect(),
            counts,
            totals,
        })
    }
}
