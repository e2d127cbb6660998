//! Word-level vocabulary over the controlled annotation words.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;
pub const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

/// Lowercases and splits on anything that is not a letter or digit.
pub fn normalize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(String::from)
        .collect()
}

impl Vocab {
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: BTreeMap<String, usize> = tokens
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, t)| (t, i))
            .collect();
        for w in words {
            let w = w.as_ref();
            if w.is_empty() || normalize(w) != [w] {
                return Err(Error::data(format!("`{w}` is not a normalized word")));
            }
            if index.insert(w.to_string(), tokens.len()).is_some() {
                return Err(Error::data(format!("duplicate vocabulary word `{w}`")));
            }
            tokens.push(w.to_string());
        }
        Ok(Self { tokens, index })
    }

    /// The vocabulary covering every template, answer and caption the corpus can produce.
    pub fn controlled() -> Self {
        Self::from_words(crate::data::templates::vocabulary_words())
            .expect("template words are normalized and unique")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.get(word).is_some_and(|&i| i >= SPECIALS.len())
    }

    /// Word ids without framing tokens.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        normalize(text).iter().map(|w| self.id(w)).collect()
    }

    /// `BOS words EOS`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(text));
        ids.push(EOS);
        ids
    }

    /// Joins word tokens with spaces; framing tokens are dropped and unknown ids print as `<unk>`.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS | SEP))
            .map(|&i| match i {
                UNK => SPECIALS[UNK],
                i => self.token(i).unwrap_or(SPECIALS[UNK]),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One non-special token per line; line `n` (0-based) has id `n + 5`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for t in &self.tokens[SPECIALS.len()..] {
            text.push_str(t);
            text.push('\n');
        }
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_words(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }
}
