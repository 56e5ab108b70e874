use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{detokenize, tokenize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token strings with reserved ids 0..4 (pad, begin, end, unknown).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Most frequent tokens first, ties broken lexicographically.
    /// `max_size` counts the reserved entries.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Self> {
        if max_size <= RESERVED.len() {
            return Err(Error::Config(format!(
                "vocabulary size {max_size} leaves no room beyond the reserved tokens"
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for tok in tokenize(text.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        counts.retain(|t, _| !RESERVED.contains(&t.as_str()));
        if counts.is_empty() {
            return Err(Error::Ingestion(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED.len());
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t));
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Ingestion(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Ingestion(format!(
                    "duplicate vocabulary entry {t:?}"
                )));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::Vocabulary {
                id,
                size: self.len(),
            })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Text of the non-reserved ids, stopping at the first end token.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            if id == EOS {
                break;
            }
            let tok = self.token(id)?;
            if !Self::is_reserved(id) {
                words.push(tok);
            }
        }
        Ok(detokenize(&words))
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_then_by_frequency() {
        let v = Vocab::build(&["a b a"], 16).unwrap();
        assert_eq!(v.tokens(), ["<pad>", "<s>", "</s>", "<unk>", "a", "b"]);
    }

    #[test]
    fn punctuation_split_vocabulary() {
        let v = Vocab::build(&["x=1\ny=2"], 16).unwrap();
        let mut words: Vec<&str> = v.tokens()[4..].iter().map(String::as_str).collect();
        words.sort();
        assert_eq!(words, ["1", "2", "=", "x", "y"]);
        // "=" occurs twice so it ranks first; the rest tie and sort lexicographically.
        assert_eq!(&v.tokens()[4..], ["=", "1", "2", "x", "y"]);
    }

    #[test]
    fn deterministic_and_truncated() {
        let corpus = ["c b a c b c", "d"];
        let a = Vocab::build(&corpus, 6).unwrap();
        let b = Vocab::build(&corpus, 6).unwrap();
        assert_eq!(a, b);
        assert_eq!(&a.tokens()[4..], ["c", "b"]);
        assert_eq!(a.id("d"), UNK);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(
            Vocab::build::<&str>(&[], 10),
            Err(Error::Ingestion(_))
        ));
        assert!(matches!(
            Vocab::build(&["  "], 10),
            Err(Error::Ingestion(_))
        ));
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocab::build(&["if a == b : return a"], 32).unwrap();
        let ids = v.encode("if a==b: return a");
        assert_eq!(v.decode(&ids).unwrap(), "if a == b : return a");
        let mut with_end = ids.clone();
        with_end.push(EOS);
        with_end.push(v.id("a"));
        assert_eq!(v.decode(&with_end).unwrap(), "if a == b : return a");
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocab::build(&["a b c"], 32).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(v, back);
    }
}
