use std::collections::HashMap;

use super::{DocumentTree, IdTree, Tree};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const MASK: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<PAD>", "<EoS>", "<MASK>", "<UNK>"];

/// Dense token/id bijection; ids 0..4 are the reserved tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(extra: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        for t in extra {
            if index.contains_key(&t) {
                return Err(Error::Validation(format!(
                    "duplicate vocabulary token {t:?}"
                )));
            }
            index.insert(t.clone(), tokens.len());
            tokens.push(t);
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// One non-reserved token per line; line `n` holds id `n + 4`.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut lines = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.contains(char::is_whitespace) {
                return Err(Error::Parse {
                    line: i + 1,
                    column: 1,
                    message: format!("invalid vocabulary entry {line:?}"),
                });
            }
            lines.push(line.to_string());
        }
        Self::from_tokens(lines)
    }
}

/// Tokens with frequency at least `min_freq`, most frequent first (ties
/// broken lexicographically), truncated so the vocabulary has at most
/// `max_size` entries including the reserved ones.
pub fn build_vocab(trees: &[DocumentTree], min_freq: usize, max_size: usize) -> Result<Vocabulary> {
    if max_size < RESERVED.len() {
        return Err(Error::Config(format!(
            "max vocabulary size {max_size} cannot hold the {} reserved tokens",
            RESERVED.len()
        )));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in trees {
        for leaf in t.root.leaves() {
            *counts.entry(leaf.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_freq.max(1) && !RESERVED.contains(&t))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.truncate(max_size - RESERVED.len());
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()))
}

/// Maps every leaf to its id, unknown tokens to `UNK`.
pub fn encode_ids(tree: &DocumentTree, vocab: &Vocabulary) -> IdTree {
    Tree {
        levels: tree.levels.clone(),
        root: tree.root.map(&|t: &String| vocab.id(t)),
    }
}
