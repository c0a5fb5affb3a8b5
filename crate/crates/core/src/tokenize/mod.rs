//! Discrete and continuous input schemes for the sequence model.
//!
//! Every token vocabulary reserves ids 0–3 for [`PAD`], [`SOS`], [`EOS`] and
//! [`SEP`]; content tokens start at [`FIRST_CONTENT`].

mod codebook;
mod dict;
mod grid;
mod tokenizer;

pub use codebook::{fit_codebook, kmeans, Codebook, KMeansOptions, KMeansResult, CODEBOOK_MAGIC};
pub use dict::{dict_decode, dict_encode, nearest_centroid};
pub use grid::{grid_decode, grid_encode, GridEncoding, GridSpec};
pub use tokenizer::Tokenizer;

use crate::error::{Error, Result};
use crate::sketch::{to_stroke5, Stroke3Seq, Stroke5Seq};

pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const FIRST_CONTENT: u32 = 4;
pub const NUM_SPECIAL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Dict,
    Grid,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Dict => "dict",
            Scheme::Grid => "grid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub vocab_size: usize,
    pub scheme: Scheme,
}

impl TokenSequence {
    /// Checks the framing invariants: leading SOS, exactly one EOS, nothing
    /// but PAD after it, no PAD or SOS before it, all ids in the vocabulary.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Decode(msg));
        if self.tokens.first() != Some(&SOS) {
            return bad("sequence must start with SOS".into());
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return bad(format!("token {t} outside vocabulary of {}", self.vocab_size));
        }
        let eos = match self.tokens.iter().position(|&t| t == EOS) {
            Some(i) => i,
            None => return bad("sequence has no EOS".into()),
        };
        if self.tokens[eos + 1..].iter().any(|&t| t != PAD) {
            return bad("non-PAD token after EOS".into());
        }
        if self.tokens[1..eos].iter().any(|&t| t == PAD || t == SOS) {
            return bad("PAD or SOS inside the content".into());
        }
        Ok(())
    }

    /// Tokens up to and including EOS.
    pub fn content(&self) -> &[u32] {
        let end = self
            .tokens
            .iter()
            .position(|&t| t == EOS)
            .map_or(self.tokens.len(), |i| i + 1);
        &self.tokens[..end]
    }

    pub fn to_text(&self) -> String {
        self.tokens
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Frames content tokens as `SOS … EOS PAD…` of exactly `max_len` tokens.
pub(crate) fn frame(
    content: Vec<u32>,
    vocab_size: usize,
    scheme: Scheme,
    max_len: usize,
) -> Result<TokenSequence> {
    let required = content.len() + 2;
    if required > max_len {
        return Err(Error::Truncation { required, max_len });
    }
    let mut tokens = Vec::with_capacity(max_len);
    tokens.push(SOS);
    tokens.extend(content);
    tokens.push(EOS);
    tokens.resize(max_len, PAD);
    Ok(TokenSequence {
        tokens,
        vocab_size,
        scheme,
    })
}

/// The continuous scheme: stroke-5 packing.
pub fn continuous_pack(seq: &Stroke3Seq, max_len: usize) -> Result<Stroke5Seq> {
    to_stroke5(seq, max_len)
}
