//! Closed-vocabulary tokenizer for the caption grammar.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every word the caption grammar can produce, plus a padding token.
pub const GRAMMAR_WORDS: [&str; 14] = [
    "a", "small", "large", "red", "green", "blue", "yellow", "square", "circle", "triangle",
    "on", "background", "sand", "gray",
];

pub const PAD_TOKEN: &str = "<pad>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut words: Vec<String> = GRAMMAR_WORDS.iter().map(|s| s.to_string()).collect();
        words.push(PAD_TOKEN.to_string());
        Self { words }
    }
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if !words.iter().any(|w| w == PAD_TOKEN) {
            return Err(Error::Config("vocab missing padding token".into()));
        }
        Ok(Self { words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn pad_id(&self) -> usize {
        self.words
            .iter()
            .position(|w| w == PAD_TOKEN)
            .expect("constructor guarantees a pad token")
    }

    pub fn token_id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    /// Whitespace tokenization over the closed vocabulary.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|word| {
                self.token_id(&word.to_lowercase()).ok_or_else(|| Error::Vocabulary {
                    token: word.to_string(),
                    prompt: text.to_string(),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar_caption_tokenizes() {
        let v = Vocab::default();
        let ids = v.tokenize("a large red square on a blue background").unwrap();
        assert_eq!(ids.len(), 8);
        assert_eq!(ids[0], ids[5], "both `a` occurrences share an id");
    }

    #[test]
    fn unknown_word_is_named_in_the_error() {
        let v = Vocab::default();
        match v.tokenize("a purple blob") {
            Err(Error::Vocabulary { token, .. }) => assert_eq!(token, "purple"),
            other => panic!("expected vocabulary error, got {other:?}"),
        }
    }
}
