//! Action and instruction tokenization.
//!
//! Each of the seven action dimensions is quantized into one of 256 uniform
//! bins over `[-1, 1]`. Action tokens occupy the last 256 ids of the
//! vocabulary; instruction words occupy the front.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ACTION_DIMS: usize = 7;
pub const BINS_PER_DIM: usize = 256;
pub const BIN_WIDTH: f64 = 2.0 / BINS_PER_DIM as f64;
pub const PAD_TOKEN: usize = 0;
/// Reserved end-of-text marker.
pub const END_TOKEN: usize = 1;
/// Default instruction length in tokens.
pub const INSTRUCTION_LEN: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TokenizerError {
    #[error("action component {index} is not finite")]
    NonFinite { index: usize },
    #[error("expected {expected} action tokens, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("token {token} at position {position} is outside the action range")]
    OutOfRange { position: usize, token: usize },
    #[error("unknown word `{0}`")]
    UnknownWord(String),
    #[error("malformed vocabulary line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

/// Continuous 7-DoF action `(dx, dy, dz, droll, dpitch, dyaw, grip)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionVector(pub [f64; ACTION_DIMS]);

impl ActionVector {
    pub const ZERO: ActionVector = ActionVector([0.0; ACTION_DIMS]);

    /// Clamps every component into `[-1, 1]`.
    pub fn clamped(self) -> Self {
        Self(self.0.map(|x| x.clamp(-1.0, 1.0)))
    }

    pub fn dx(&self) -> f64 {
        self.0[0]
    }
    pub fn dy(&self) -> f64 {
        self.0[1]
    }
    pub fn dz(&self) -> f64 {
        self.0[2]
    }
    pub fn dyaw(&self) -> f64 {
        self.0[5]
    }
    pub fn grip(&self) -> f64 {
        self.0[6]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Bin index of one action component. Values are clamped first; `+1.0`
/// lands in the last bin.
pub fn bin_of(x: f64) -> usize {
    let x = x.clamp(-1.0, 1.0);
    let b = ((x + 1.0) / 2.0 * BINS_PER_DIM as f64).floor() as usize;
    b.min(BINS_PER_DIM - 1)
}

/// Center of bin `b`.
pub fn bin_center(b: usize) -> f64 {
    -1.0 + (b as f64 + 0.5) * BIN_WIDTH
}

/// Closed instruction vocabulary plus the action-token block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: BTreeMap<String, usize>,
    action_token_base: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from the words of the given instructions. Words are
    /// numbered in sorted order after the two marker ids.
    pub fn from_instructions<'a>(instructions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set: Vec<String> = instructions
            .into_iter()
            .flat_map(|s| s.split_whitespace().map(str::to_string))
            .collect();
        set.sort();
        set.dedup();
        let words = set.into_iter().enumerate().map(|(i, w)| (w, i + 2)).collect();
        Self::from_words(words)
    }

    fn from_words(words: BTreeMap<String, usize>) -> Self {
        let action_token_base = words.values().max().map_or(2, |m| m + 1);
        Self { words, action_token_base }
    }

    pub fn action_token_base(&self) -> usize {
        self.action_token_base
    }

    pub fn size(&self) -> usize {
        self.action_token_base + BINS_PER_DIM
    }

    /// Number of ids that can appear in an instruction (markers + words).
    pub fn instruction_ids(&self) -> usize {
        self.action_token_base
    }

    pub fn word_id(&self, w: &str) -> Option<usize> {
        self.words.get(w).copied()
    }

    pub fn words(&self) -> impl Iterator<Item = (&str, usize)> {
        self.words.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn encode_action(&self, a: &ActionVector) -> Result<TokenSequence, TokenizerError> {
        let bins = encode_bins(a)?;
        Ok(TokenSequence(bins.iter().map(|b| self.action_token_base + b).collect()))
    }

    pub fn decode_tokens(&self, v: &TokenSequence) -> Result<ActionVector, TokenizerError> {
        if v.len() != ACTION_DIMS {
            return Err(TokenizerError::WrongLength { expected: ACTION_DIMS, got: v.len() });
        }
        let mut bins = [0usize; ACTION_DIMS];
        for (i, (&t, b)) in v.0.iter().zip(bins.iter_mut()).enumerate() {
            if t < self.action_token_base || t >= self.size() {
                return Err(TokenizerError::OutOfRange { position: i, token: t });
            }
            *b = t - self.action_token_base;
        }
        Ok(decode_bins(&bins))
    }

    /// Word ids of `text`, padded or truncated to `len` tokens.
    pub fn tokenize_instruction(&self, text: &str, len: usize) -> Result<TokenSequence, TokenizerError> {
        let mut out = Vec::with_capacity(len);
        for w in text.split_whitespace() {
            let id = self.word_id(w).ok_or_else(|| TokenizerError::UnknownWord(w.to_string()))?;
            if out.len() < len {
                out.push(id);
            }
        }
        out.resize(len, PAD_TOKEN);
        Ok(TokenSequence(out))
    }

    /// `word<TAB>id` per line, sorted by word.
    pub fn to_tsv(&self) -> String {
        self.words.iter().map(|(w, id)| format!("{w}\t{id}\n")).collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self, TokenizerError> {
        let mut words = BTreeMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let (w, id) = line
                .split_once('\t')
                .ok_or_else(|| TokenizerError::Malformed { line: i + 1, msg: "missing tab".into() })?;
            let id: usize = id
                .parse()
                .map_err(|e| TokenizerError::Malformed { line: i + 1, msg: format!("{e}") })?;
            if id < 2 || words.values().any(|&v| v == id) || words.insert(w.to_string(), id).is_some() {
                return Err(TokenizerError::Malformed { line: i + 1, msg: "duplicate or reserved id".into() });
            }
        }
        Ok(Self::from_words(words))
    }
}

impl fmt::Display for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_tsv())
    }
}

/// Per-dimension bins of an action.
pub fn encode_bins(a: &ActionVector) -> Result<[usize; ACTION_DIMS], TokenizerError> {
    let mut out = [0; ACTION_DIMS];
    for (i, (&x, o)) in a.0.iter().zip(out.iter_mut()).enumerate() {
        if !x.is_finite() {
            return Err(TokenizerError::NonFinite { index: i });
        }
        *o = bin_of(x);
    }
    Ok(out)
}

/// The post-processing map from bins to a continuous action.
pub fn decode_bins(bins: &[usize; ACTION_DIMS]) -> ActionVector {
    ActionVector(bins.map(bin_center))
}
