//! Prompt-space perturbation generators.
//!
//! Every generator is a pure function of its [`PerturbationSpec`]: the
//! `seed` field drives a ChaCha8 stream, so identical specs give byte-identical text.
//!
//! Lengths are counted in generator units, not tokenizer tokens: words for
//! the pool, fake-English and random-token generators, fixed-width chunks for
//! random ASCII, model units for n-gram chains, and scorer units for
//! filtered corpora. The boundary instruction is appended after the length
//! budget is spent and does not count toward it.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ngram::NGramModel;
use crate::{Error, Result};

/// Appended after a perturbation to steer the model back to the task.
pub const BOUNDARY_INSTRUCTION: &str =
    "\nPlease reason step by step, and put your final answer within \\boxed{}.";

const FAKE_SENTENCE_MIN: usize = 4;
const FAKE_SENTENCE_MAX: usize = 12;
const FAKE_COMMA_PROB: f64 = 0.1;
const TERMINALS: [char; 3] = ['.', '?', '!'];

pub const DEFAULT_ASCII_CHUNK: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPool")]
pub struct WordPool {
    pub name: String,
    pub words: Vec<String>,
}

#[derive(Deserialize)]
struct RawPool {
    name: String,
    words: Vec<String>,
}

impl TryFrom<RawPool> for WordPool {
    type Error = Error;

    fn try_from(raw: RawPool) -> Result<Self> {
        WordPool::new(raw.name, raw.words)
    }
}

impl WordPool {
    pub fn new(name: impl Into<String>, words: Vec<String>) -> Result<Self> {
        let name = name.into();
        if words.is_empty() {
            return Err(Error::config(format!("word pool {name} is empty")));
        }
        let mut seen = BTreeSet::new();
        for w in &words {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::config(format!("pool {name}: invalid word {w:?}")));
            }
            if !seen.insert(w.as_str()) {
                return Err(Error::config(format!("pool {name}: duplicate word {w:?}")));
            }
        }
        Ok(WordPool { name, words })
    }

    /// One word per line; blank lines and `#` comments are ignored.
    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self> {
        let words = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect();
        WordPool::new(name, words)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let name = path
            .file_stem()
            .map_or_else(|| "pool".into(), |s| s.to_string_lossy().into_owned());
        WordPool::parse(name, &std::fs::read_to_string(path)?)
    }

    /// The 63 distinct words of the classic placeholder paragraph.
    pub fn lorem() -> Self {
        Self::parse("lorem", include_str!("../data/lorem.txt")).expect("bundled pool")
    }

    pub fn english_top50() -> Self {
        Self::parse("english_top50", include_str!("../data/english_top50.txt"))
            .expect("bundled pool")
    }

    pub fn latin_top50() -> Self {
        Self::parse("latin_top50", include_str!("../data/latin_top50.txt")).expect("bundled pool")
    }

    /// Common English words for the fake-English generator.
    pub fn english_words() -> Self {
        Self::parse("english_words", include_str!("../data/english_words.txt"))
            .expect("bundled pool")
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "lorem" => Some(Self::lorem()),
            "english_top50" => Some(Self::english_top50()),
            "latin_top50" => Some(Self::latin_top50()),
            "english_words" => Some(Self::english_words()),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.iter().any(|w| w == word)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    Lorem,
    FakeEnglish,
    RandomAscii,
    RandomToken,
    Unigram,
    Ngram,
    CorpusFiltered,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 7] = [
        PerturbationKind::Lorem,
        PerturbationKind::FakeEnglish,
        PerturbationKind::RandomAscii,
        PerturbationKind::RandomToken,
        PerturbationKind::Unigram,
        PerturbationKind::Ngram,
        PerturbationKind::CorpusFiltered,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::Lorem => "lorem",
            PerturbationKind::FakeEnglish => "fake_english",
            PerturbationKind::RandomAscii => "random_ascii",
            PerturbationKind::RandomToken => "random_token",
            PerturbationKind::Unigram => "unigram",
            PerturbationKind::Ngram => "ngram",
            PerturbationKind::CorpusFiltered => "corpus_filtered",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name.replace('-', "_"))
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What a generator draws from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationSource {
    /// Lorem, unigram and fake-English generators.
    Pool(WordPool),
    Ascii {
        chunk_width: usize,
    },
    Vocab {
        vocab: WordPool,
        special: BTreeSet<String>,
    },
    Ngram(NGramModel),
    Corpus {
        entries: Vec<String>,
        scorer: NGramModel,
        band: [f64; 2],
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    pub source: PerturbationSource,
    #[serde(default)]
    pub append_boundary: bool,
}

impl PerturbationSpec {
    /// Lorem perturbation of 100 to 300 words with the boundary instruction.
    pub fn lorem(seed: u64) -> Self {
        PerturbationSpec {
            kind: PerturbationKind::Lorem,
            min_len: 100,
            max_len: 300,
            seed,
            source: PerturbationSource::Pool(WordPool::lorem()),
            append_boundary: true,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        PerturbationSpec {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_len < 1 || self.min_len > self.max_len {
            return Err(Error::config(format!(
                "length range [{}, {}] is invalid",
                self.min_len, self.max_len
            )));
        }
        use PerturbationKind as K;
        use PerturbationSource as S;
        let matches = matches!(
            (self.kind, &self.source),
            (K::Lorem | K::Unigram | K::FakeEnglish, S::Pool(_))
                | (K::RandomAscii, S::Ascii { .. })
                | (K::RandomToken, S::Vocab { .. })
                | (K::Ngram, S::Ngram(_))
                | (K::CorpusFiltered, S::Corpus { .. })
        );
        if !matches {
            return Err(Error::config(format!(
                "source does not fit generator {}",
                self.kind
            )));
        }
        if let S::Ascii { chunk_width: 0 } = self.source {
            return Err(Error::config("ASCII chunk width must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perturbation {
    pub text: String,
    pub token_len: usize,
    pub kind: PerturbationKind,
    pub seed_used: u64,
}

impl Perturbation {
    /// Stable identifier: kind, seed and a content digest.
    pub fn id(&self) -> String {
        let digest = Sha256::digest(self.text.as_bytes());
        let hex: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
        format!("{}-{}-{}", self.kind, self.seed_used, hex)
    }
}

/// Runs the generator selected by `spec.kind` with a fresh generator seeded
/// from `spec.seed`, then appends the boundary instruction if requested.
pub fn generate(spec: &PerturbationSpec) -> Result<Perturbation> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let p = match &spec.source {
        PerturbationSource::Pool(pool) => match spec.kind {
            PerturbationKind::FakeEnglish => gen_fake_english(spec, &mut rng, pool)?,
            _ => gen_pool_sequence(spec, &mut rng, pool)?,
        },
        PerturbationSource::Ascii { chunk_width } => {
            gen_random_ascii(spec, &mut rng, *chunk_width)?
        }
        PerturbationSource::Vocab { vocab, special } => {
            gen_random_token(spec, &mut rng, vocab, special)?
        }
        PerturbationSource::Ngram(model) => gen_ngram_sequence(spec, &mut rng, model)?,
        PerturbationSource::Corpus {
            entries,
            scorer,
            band,
        } => gen_corpus_filtered(spec, &mut rng, entries, scorer, *band)?,
    };
    Ok(if spec.append_boundary {
        apply_boundary_instruction(p)
    } else {
        p
    })
}

/// Uniform over `[min_len, max_len]`.
pub fn sample_length<R: Rng + ?Sized>(spec: &PerturbationSpec, rng: &mut R) -> usize {
    rng.random_range(spec.min_len..=spec.max_len)
}

fn finish(spec: &PerturbationSpec, text: String, token_len: usize) -> Perturbation {
    Perturbation {
        text,
        token_len,
        kind: spec.kind,
        seed_used: spec.seed,
    }
}

/// Space-joined words drawn uniformly from `pool`.
pub fn gen_pool_sequence<R: Rng + ?Sized>(
    spec: &PerturbationSpec,
    rng: &mut R,
    pool: &WordPool,
) -> Result<Perturbation> {
    if pool.is_empty() {
        return Err(Error::config("word pool is empty"));
    }
    let n = sample_length(spec, rng);
    let words: Vec<&str> = (0..n)
        .map(|_| pool.words[rng.random_range(0..pool.len())].as_str())
        .collect();
    Ok(finish(spec, words.join(" "), n))
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Sentence-shaped filler: sentences of 4 to 12 words (the last one may be
/// cut short by the length budget), capitalized first word, terminal `.`,
/// `?` or `!`, and a comma after a non-final word with probability 0.1.
pub fn gen_fake_english<R: Rng + ?Sized>(
    spec: &PerturbationSpec,
    rng: &mut R,
    pool: &WordPool,
) -> Result<Perturbation> {
    if pool.is_empty() {
        return Err(Error::config("word pool is empty"));
    }
    let n = sample_length(spec, rng);
    let mut sentences = Vec::new();
    let mut remaining = n;
    while remaining > 0 {
        let len = rng
            .random_range(FAKE_SENTENCE_MIN..=FAKE_SENTENCE_MAX)
            .min(remaining);
        remaining -= len;
        let mut sentence = String::new();
        for i in 0..len {
            let word = &pool.words[rng.random_range(0..pool.len())];
            if i == 0 {
                sentence.push_str(&capitalize(word));
            } else {
                sentence.push(' ');
                sentence.push_str(word);
            }
            if i + 1 < len && rng.random_bool(FAKE_COMMA_PROB) {
                sentence.push(',');
            }
        }
        sentence.push(TERMINALS[rng.random_range(0..TERMINALS.len())]);
        sentences.push(sentence);
    }
    Ok(finish(spec, sentences.join(" "), n))
}

/// Space-separated chunks of `chunk_width` printable ASCII characters
/// (0x20 to 0x7E), each drawn uniformly.
pub fn gen_random_ascii<R: Rng + ?Sized>(
    spec: &PerturbationSpec,
    rng: &mut R,
    chunk_width: usize,
) -> Result<Perturbation> {
    if chunk_width == 0 {
        return Err(Error::config("ASCII chunk width must be positive"));
    }
    let n = sample_length(spec, rng);
    let mut text = String::with_capacity(n * (chunk_width + 1));
    for i in 0..n {
        if i > 0 {
            text.push(' ');
        }
        for _ in 0..chunk_width {
            text.push(char::from(rng.random_range(0x20u8..=0x7E)));
        }
    }
    Ok(finish(spec, text, n))
}

/// Uniform draws from `vocab` with the `special` entries removed.
pub fn gen_random_token<R: Rng + ?Sized>(
    spec: &PerturbationSpec,
    rng: &mut R,
    vocab: &WordPool,
    special: &BTreeSet<String>,
) -> Result<Perturbation> {
    let allowed: Vec<&str> = vocab
        .words
        .iter()
        .filter(|w| !special.contains(*w))
        .map(String::as_str)
        .collect();
    if allowed.is_empty() {
        return Err(Error::config(
            "every vocabulary entry is excluded as special",
        ));
    }
    let n = sample_length(spec, rng);
    let tokens: Vec<&str> = (0..n)
        .map(|_| allowed[rng.random_range(0..allowed.len())])
        .collect();
    Ok(finish(spec, tokens.join(" "), n))
}

/// Chains sampled from `model`, restarted from the start context whenever a
/// chain ends early, truncated to the sampled length.
pub fn gen_ngram_sequence<R: Rng + ?Sized>(
    spec: &PerturbationSpec,
    rng: &mut R,
    model: &NGramModel,
) -> Result<Perturbation> {
    if !model.is_trained() {
        return Err(Error::config("n-gram model has no counts"));
    }
    let n = sample_length(spec, rng);
    let mut units = Vec::with_capacity(n);
    while units.len() < n {
        let chain = model.sample(rng, n - units.len());
        if chain.is_empty() {
            return Err(Error::config(
                "n-gram model cannot produce a non-empty chain",
            ));
        }
        units.extend(chain);
    }
    Ok(finish(spec, model.level().join(&units), n))
}

/// Indices of corpus entries whose scorer perplexity lies in `band` and whose
/// length (in scorer units) lies in `[min_len, max_len]`. Entries with an
/// undefined perplexity are excluded.
pub fn filter_corpus(
    entries: &[String],
    scorer: &NGramModel,
    band: [f64; 2],
    min_len: usize,
    max_len: usize,
) -> Vec<usize> {
    entries
        .iter()
        .enumerate()
        .filter(|(_, e)| {
            let units = scorer.level().split(e);
            (min_len..=max_len).contains(&units.len())
                && scorer
                    .perplexity(&units)
                    .is_ok_and(|p| p >= band[0] && p <= band[1])
        })
        .map(|(i, _)| i)
        .collect()
}

/// Uniform draw from the perplexity- and length-filtered corpus.
pub fn gen_corpus_filtered<R: Rng + ?Sized>(
    spec: &PerturbationSpec,
    rng: &mut R,
    entries: &[String],
    scorer: &NGramModel,
    band: [f64; 2],
) -> Result<Perturbation> {
    if !(band[0] < band[1]) {
        return Err(Error::config(format!(
            "perplexity band [{}, {}] is empty",
            band[0], band[1]
        )));
    }
    let eligible = filter_corpus(entries, scorer, band, spec.min_len, spec.max_len);
    if eligible.is_empty() {
        return Err(Error::EmptyFilteredPool(format!(
            "no entry of {} has perplexity in [{}, {}] and length in [{}, {}]",
            entries.len(),
            band[0],
            band[1],
            spec.min_len,
            spec.max_len
        )));
    }
    let pick = &entries[eligible[rng.random_range(0..eligible.len())]];
    let len = scorer.level().split(pick).len();
    Ok(finish(spec, pick.clone(), len))
}

/// Appends [`BOUNDARY_INSTRUCTION`]. Not idempotent: applying it twice
/// appends it twice.
pub fn apply_boundary_instruction(p: Perturbation) -> Perturbation {
    Perturbation {
        text: p.text + BOUNDARY_INSTRUCTION,
        ..p
    }
}

/// `delta` and `prompt` joined by a single newline.
pub fn perturb_prompt(delta: &Perturbation, prompt: &str) -> String {
    format!("{}\n{}", delta.text, prompt)
}

/// One sequence per line, or JSON lines with a `text` field when `json_lines`
/// is set (for sequences that contain newlines).
pub fn parse_corpus(text: &str, json_lines: bool) -> Result<Vec<String>> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Record {
        text: String,
    }
    let lines = text.lines().filter(|l| !l.trim().is_empty());
    if json_lines {
        lines
            .map(|l| Ok(serde_json::from_str::<Record>(l)?.text))
            .collect()
    } else {
        Ok(lines.map(str::to_owned).collect())
    }
}

/// Reads a corpus file; `.jsonl` files are parsed as JSON lines.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let json = path.extension().is_some_and(|e| e == "jsonl");
    parse_corpus(&std::fs::read_to_string(path)?, json)
}
