//! Word-level vocabulary built from a corpus by frequency.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Result, TcdError};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Splits on whitespace and isolates ASCII punctuation as separate tokens.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut start = 0;
        for (i, c) in word.char_indices() {
            if c.is_ascii_punctuation() {
                if start < i {
                    out.push(&word[start..i]);
                }
                out.push(&word[i..i + 1]);
                start = i + 1;
            }
        }
        if start < word.len() {
            out.push(&word[start..]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(TcdError::Parse(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Reserved tokens first, then corpus tokens by descending count (ties
    /// broken lexicographically), truncated to `max_size` entries in total.
    pub fn build(corpus: &str, max_size: usize) -> Result<Self> {
        if max_size < RESERVED.len() {
            return Err(TcdError::Config(format!("vocabulary size must be >= {}", RESERVED.len())));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for tok in tokenize(corpus) {
            *counts.entry(tok).or_default() += 1;
        }
        if counts.is_empty() {
            return Err(TcdError::Empty("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|(t, _)| !RESERVED.contains(t)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
            .take(max_size)
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).into_iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Fraction of corpus tokens that fall outside the vocabulary.
    pub fn oov_fraction(&self, text: &str) -> f64 {
        let toks = tokenize(text);
        if toks.is_empty() {
            return 0.0;
        }
        toks.iter().filter(|t| !self.index.contains_key(**t)).count() as f64 / toks.len() as f64
    }

    /// Ids never selected for masking.
    pub fn is_special(id: usize) -> bool {
        matches!(id, PAD | CLS | SEP | MASK)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| TcdError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TcdError::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(TcdError::Corruption(format!("{}: reserved tokens missing", path.display())));
        }
        Self::from_tokens(tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_order_after_reserved() {
        let v = Vocab::build("a a b", 7).unwrap();
        assert_eq!(v.len(), 7);
        assert!(v.id("a") < v.id("b"));
        assert_eq!((v.id("a"), v.id("b")), (5, 6));
        assert_eq!(v.token(MASK), Some("[MASK]"));
    }

    #[test]
    fn truncation_and_unknowns() {
        let v = Vocab::build("c c c b b a", 7).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("a"), UNK);
        assert_eq!(v.id("zebra"), UNK);
        assert!((v.oov_fraction("c a zebra") - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn punctuation_splits_and_round_trip() {
        assert_eq!(tokenize("the cat, sleeps."), vec!["the", "cat", ",", "sleeps", "."]);
        let v = Vocab::build("the cat , sleeps .", 100).unwrap();
        let text = "the cat , sleeps .";
        assert_eq!(v.decode(&v.encode(text)), text);
    }

    #[test]
    fn empty_corpus_errors() {
        assert!(matches!(Vocab::build("  \n ", 10), Err(TcdError::Empty(_))));
        assert!(Vocab::build("a", 3).is_err());
    }

    #[test]
    fn save_load() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocab::build("x y y z z z", 50).unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
        std::fs::write(&p, "a\nb\n").unwrap();
        assert!(matches!(Vocab::load(&p), Err(TcdError::Corruption(_))));
    }
}
