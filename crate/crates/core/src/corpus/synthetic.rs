use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{level_names, DocumentTree, Node, Tree};

/// Shape of a generated corpus.
#[derive(Clone, Copy, Debug)]
pub struct SyntheticSpec {
    pub documents: usize,
    pub paragraphs: usize,
    pub sentences: usize,
    /// Tokens per sentence are drawn from `min_tokens..=max_tokens`.
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub vocabulary: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            documents: 4,
            paragraphs: 2,
            sentences: 3,
            min_tokens: 4,
            max_tokens: 8,
            vocabulary: 24,
        }
    }
}

const NAMES: [&str; 8] = ["ada", "bram", "cleo", "dov", "eli", "fern", "gus", "hana"];

/// Seeded depth-3 documents of common words, each document with its own
/// recurring name.
pub fn synthetic_corpus(spec: &SyntheticSpec, seed: u64) -> Vec<DocumentTree> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..spec.vocabulary).map(|i| format!("w{i}")).collect();
    (0..spec.documents)
        .map(|d| {
            let name = NAMES[d % NAMES.len()];
            let paragraphs = (0..spec.paragraphs)
                .map(|_| {
                    let sentences = (0..spec.sentences)
                        .map(|_| {
                            let n = rng.random_range(spec.min_tokens..=spec.max_tokens);
                            let at = rng.random_range(0..n);
                            let tokens = (0..n)
                                .map(|i| {
                                    let t = if i == at {
                                        name.to_string()
                                    } else {
                                        words.choose(&mut rng).unwrap().clone()
                                    };
                                    Node::Leaf(t)
                                })
                                .collect();
                            Node::Branch(tokens)
                        })
                        .collect();
                    Node::Branch(sentences)
                })
                .collect();
            Tree {
                levels: level_names(3),
                root: Node::Branch(paragraphs),
            }
        })
        .collect()
}
