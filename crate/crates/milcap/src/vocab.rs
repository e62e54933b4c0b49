//! Token/index bookkeeping. Indices 0..=3 are reserved for the padding,
//! begin, end, and unknown markers; corpus text can never produce them
//! because the tokenizer lowercases and splits on whitespace while the
//! reserved spellings use angle brackets.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Lowercased whitespace split.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

impl Vocabulary {
    /// Build from training captions only: reserved tokens first, then the
    /// distinct caption tokens in sorted order, so the mapping is a pure
    /// function of the token set.
    pub fn build<'a>(train_captions: impl IntoIterator<Item = &'a str>) -> Vocabulary {
        let mut distinct: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        for caption in train_captions {
            for tok in tokenize(caption) {
                distinct.insert(tok);
            }
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(distinct);
        Self::from_tokens(tokens).expect("reserved prefix is well-formed")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Vocabulary> {
        if tokens.len() < 4 || tokens[..4] != RESERVED.map(str::to_string) {
            return Err(Error::Format(
                "vocabulary must start with the four reserved tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the reserved prefix is always present
    }

    pub fn index_of(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&UNK)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// Caption text to [BOS, tokens..., EOS]; unknown tokens become UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = vec![BOS];
        out.extend(tokenize(text).iter().map(|t| self.index_of(t)));
        out.push(EOS);
        out
    }

    /// Token indices to space-joined text, skipping structural markers.
    pub fn decode_to_text(&self, indices: &[usize]) -> String {
        indices
            .iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, line number = index.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        Self::from_tokens(tokens)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}
