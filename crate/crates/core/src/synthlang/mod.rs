//! Synthetic regex-seeded language data.
//!
//! A handful of random regex trees act as seeds; each training sentence is a
//! reverse sample from one seed. The vocabulary is fixed: `0 = BOS`,
//! `1 = EOS`, `2..28 = 'a'..'z'`.

mod dataset;
pub mod regex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dataset::{build_dataset, read_dataset, write_dataset, DatasetSplit, GenerationConfig};
pub use regex::{parse, GrammarConfig, Node};

pub const BOS: u16 = 0;
pub const EOS: u16 = 1;
pub const VOCAB_SIZE: usize = 28;

/// Default upper bound on tokenized length (BOS and EOS included).
pub const DEFAULT_MAX_SEQ_LEN: usize = 64;

const SAMPLE_RETRIES: usize = 1000;
const SEED_RETRIES_PER_SEED: usize = 200;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("character {0:?} is outside the a-z alphabet")]
    OutOfAlphabet(char),
    #[error("token id {0} is not a letter")]
    BadToken(u16),
    #[error("regex parse error at offset {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("grammar: {0}")]
    Grammar(String),
    #[error("could only construct {found} distinct seeds of the {wanted} requested; the grammar is too small")]
    NotEnoughSeeds { wanted: usize, found: usize },
    #[error("seed {seed} cannot produce a non-empty string of at most {max_chars} characters")]
    Unsatisfiable { seed: String, max_chars: usize },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: text {text:?} does not match seed {seed}")]
    NotInLanguage { line: usize, text: String, seed: String },
    #[error("header mismatch: {0}")]
    Header(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn letter_id(c: char) -> Result<u16, SynthError> {
    if c.is_ascii_lowercase() {
        Ok(2 + (c as u8 - b'a') as u16)
    } else {
        Err(SynthError::OutOfAlphabet(c))
    }
}

pub fn id_letter(id: u16) -> Result<char, SynthError> {
    if (2..VOCAB_SIZE as u16).contains(&id) {
        Ok((b'a' + (id - 2) as u8) as char)
    } else {
        Err(SynthError::BadToken(id))
    }
}

/// Tokenizes `text` as `[BOS, letters.., EOS]`.
pub fn encode(text: &str) -> Result<Vec<u16>, SynthError> {
    let mut out = Vec::with_capacity(text.len() + 2);
    out.push(BOS);
    for c in text.chars() {
        out.push(letter_id(c)?);
    }
    out.push(EOS);
    Ok(out)
}

/// Inverse of [`encode`]; BOS/EOS are dropped wherever they appear.
pub fn decode(tokens: &[u16]) -> Result<String, SynthError> {
    tokens
        .iter()
        .filter(|&&t| t != BOS && t != EOS)
        .map(|&t| id_letter(t))
        .collect()
}

/// A seed regex with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct RegexSeed {
    pub seed_id: u16,
    pub ast: Node,
}

impl RegexSeed {
    pub fn display(&self) -> String {
        self.ast.to_string()
    }
}

/// One tokenized sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub seed_id: u16,
    pub tokens: Vec<u16>,
    pub text: String,
}

impl TokenSequence {
    pub fn new(seed_id: u16, text: String) -> Result<Self, SynthError> {
        let tokens = encode(&text)?;
        Ok(Self { seed_id, tokens, text })
    }

    /// Number of supervised positions (every token except EOS predicts its successor).
    pub fn n_targets(&self) -> usize {
        self.tokens.len().saturating_sub(1)
    }
}

/// Builds `n_seeds` random seeds with pairwise distinct canonical strings.
pub fn gen_seeds(n_seeds: usize, rng_seed: u64, grammar: &GrammarConfig) -> Result<Vec<RegexSeed>, SynthError> {
    if n_seeds == 0 {
        return Err(SynthError::Grammar("n_seeds must be at least 1".into()));
    }
    grammar.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut seen = std::collections::HashSet::new();
    let mut seeds = Vec::with_capacity(n_seeds);
    let budget = SEED_RETRIES_PER_SEED * n_seeds;
    for _ in 0..budget {
        if seeds.len() == n_seeds {
            break;
        }
        let ast = grammar.random_tree(&mut rng);
        if seen.insert(ast.to_string()) {
            seeds.push(RegexSeed {
                seed_id: seeds.len() as u16,
                ast,
            });
        }
    }
    if seeds.len() < n_seeds {
        return Err(SynthError::NotEnoughSeeds {
            wanted: n_seeds,
            found: seeds.len(),
        });
    }
    Ok(seeds)
}

/// Reverse-samples one sentence of at most `max_len` tokens from `seed`.
///
/// Empty and overlong strings are rejected and redrawn.
pub fn sample_sequence<R: Rng + ?Sized>(
    seed: &RegexSeed,
    rng: &mut R,
    max_len: usize,
) -> Result<TokenSequence, SynthError> {
    if max_len < 3 {
        return Err(SynthError::Grammar("max_len must be at least 3".into()));
    }
    let max_chars = max_len - 2;
    let unsat = || SynthError::Unsatisfiable {
        seed: seed.display(),
        max_chars,
    };
    if seed.ast.min_len() > max_chars {
        return Err(unsat());
    }
    let mut text = String::new();
    for _ in 0..SAMPLE_RETRIES {
        text.clear();
        seed.ast.sample(rng, &mut text);
        if !text.is_empty() && text.len() <= max_chars {
            return TokenSequence::new(seed.seed_id, text);
        }
    }
    Err(unsat())
}

/// Shuffled copy of indices `0..n` driven by `rng`.
pub fn shuffled_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
