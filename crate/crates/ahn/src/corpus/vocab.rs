//! Frequency-capped vocabulary over training-split tokens.

use super::tokenize::tokenize;
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

/// Index of the padding token.
pub const PAD: u32 = 0;
/// Index of the unknown token.
pub const UNK: u32 = 1;

const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Token-to-index map. Index 0 is padding, 1 is unknown; real tokens start
/// at 2, ordered by descending training frequency with ties broken
/// alphabetically, so the build is deterministic for a given corpus.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn build<'a>(train_texts: impl Iterator<Item = &'a str>, max_tokens: usize) -> Vocabulary {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in train_texts {
            for sent in tokenize(text) {
                for tok in sent.tokens {
                    *counts.entry(tok).or_insert(0) += 1;
                }
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_tokens);

        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(ranked.into_iter().map(|(t, _)| t));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Vocabulary {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Total entries including padding and unknown.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encode(&self, token: &str) -> u32 {
        *self.index.get(token).unwrap_or(&UNK)
    }

    pub fn token(&self, idx: u32) -> Option<&str> {
        self.tokens.get(idx as usize).map(|s| s.as_str())
    }

    /// One token per line; the line number is the index.
    pub fn save(&self, path: &Path) -> io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        for tok in &self.tokens {
            writeln!(f, "{tok}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> io::Result<Vocabulary> {
        let f = std::fs::File::open(path)?;
        let mut tokens = Vec::new();
        for line in BufReader::new(f).lines() {
            tokens.push(line?);
        }
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "vocabulary file must start with <pad> and <unk>",
            ));
        }
        Ok(Self::from_tokens(tokens))
    }

    /// SHA-256 over the newline-joined token list; identifies the vocabulary
    /// a checkpoint was trained against.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for tok in &self.tokens {
            hasher.update(tok.as_bytes());
            hasher.update(b"\n");
        }
        hasher.finalize().into()
    }
}
