//! Fixed caption vocabulary: one token per line, line index is the id.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const COLOR_WORDS: [&str; 8] = ["red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple"];
pub const KIND_WORDS: [&str; 3] = ["disc", "rectangle", "triangle"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Validation(format!("vocabulary line {} is not a single token: {:?}", i, t)));
            }
            if tokens[..i].contains(t) {
                return Err(Error::Validation(format!("duplicate vocabulary token {:?}", t)));
            }
        }
        Ok(Self { tokens })
    }

    /// Colour words followed by shape words.
    pub fn synthetic() -> Self {
        let tokens = COLOR_WORDS.iter().chain(KIND_WORDS.iter()).map(|s| s.to_string()).collect();
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.tokens.iter().position(|t| t == word).ok_or_else(|| Error::Vocabulary(word.to_string()))
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&i| self.tokens.get(i).map(String::as_str).ok_or_else(|| Error::Vocabulary(format!("#{}", i))))
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    pub fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.len()) {
            Some(i) => Err(Error::Vocabulary(format!("#{}", i))),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// SHA-256 of the file representation, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_over_every_token() {
        let v = Vocabulary::synthetic();
        for i in 0..v.len() {
            assert_eq!(v.tokenize(&v.detokenize(&[i]).unwrap()).unwrap(), vec![i]);
        }
        let all: Vec<usize> = (0..v.len()).rev().collect();
        assert_eq!(v.tokenize(&v.detokenize(&all).unwrap()).unwrap(), all);
        assert_eq!(Vocabulary::parse(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn unknown_words_fail() {
        let v = Vocabulary::synthetic();
        assert!(matches!(v.tokenize("red pink"), Err(Error::Vocabulary(w)) if w == "pink"));
        assert!(v.detokenize(&[99]).is_err());
        assert!(Vocabulary::parse("a\na\n").is_err());
    }
}
