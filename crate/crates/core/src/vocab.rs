use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::{EOS_TOKEN, PAD_TOKEN, UNK_TOKEN};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;

/// Token to id map with the reserved ids `PAD = 0`, `EOS = 1`, `UNK = 2`.
/// Tokens are lowercased before lookup unless `lowercase` is off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_freq: usize,
    lowercase: bool,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    min_freq: usize,
    lowercase: bool,
}

impl From<VocabFile> for Vocabulary {
    fn from(f: VocabFile) -> Self {
        Vocabulary::from_tokens(f.tokens, f.min_freq, f.lowercase)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile {
            tokens: v.tokens,
            min_freq: v.min_freq,
            lowercase: v.lowercase,
        }
    }
}

fn is_special(t: &str) -> bool {
    t == PAD_TOKEN || t == EOS_TOKEN || t == UNK_TOKEN
}

impl Vocabulary {
    /// Builds from an ordered token list. The reserved tokens are moved to the
    /// front; duplicates after normalisation keep their first occurrence.
    pub fn from_tokens(tokens: Vec<String>, min_freq: usize, lowercase: bool) -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
            min_freq,
            lowercase,
        };
        for s in [PAD_TOKEN, EOS_TOKEN, UNK_TOKEN] {
            v.push(s.to_string());
        }
        for t in tokens {
            if !is_special(&t) {
                let n = v.normalize(&t);
                if !v.index.contains_key(&n) {
                    v.push(n);
                }
            }
        }
        v
    }

    fn push(&mut self, t: String) {
        self.index.insert(t.clone(), self.tokens.len());
        self.tokens.push(t);
    }

    pub fn normalize(&self, token: &str) -> String {
        if self.lowercase && !is_special(token) {
            token.to_lowercase()
        } else {
            token.to_string()
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    /// Id of `token`, or [`UNK`] when it is not in the vocabulary.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        if is_special(token) {
            return self.index.get(token).copied();
        }
        self.index.get(&self.normalize(token)).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.get(token).is_some()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Counts normalised tokens and assigns ids by descending frequency, ties in
/// lexicographic order. Tokens seen fewer than `min_freq` times are left out
/// and therefore look up as UNK.
pub fn build_vocab<S: AsRef<str>>(corpus: &[Vec<S>], min_freq: usize) -> Result<Vocabulary> {
    build_vocab_with(corpus, min_freq, true)
}

pub fn build_vocab_with<S: AsRef<str>>(
    corpus: &[Vec<S>],
    min_freq: usize,
    lowercase: bool,
) -> Result<Vocabulary> {
    let probe = Vocabulary::from_tokens(Vec::new(), min_freq, lowercase);
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut total = 0usize;
    for seq in corpus {
        for t in seq {
            let t = t.as_ref();
            total += 1;
            if !is_special(t) {
                *counts.entry(probe.normalize(t)).or_default() += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Data(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }
    let mut entries: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_freq.max(1))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(Vocabulary::from_tokens(
        entries.into_iter().map(|(t, _)| t).collect(),
        min_freq,
        lowercase,
    ))
}
