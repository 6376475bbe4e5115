//! Nested documents: parsing, vocabularies, id trees and padded batches.

mod batch;
mod parse;
mod synthetic;
mod vocab;

pub use batch::{make_batches, Batch, LevelBatch, Slot};
pub use parse::{parse_nested, serialize_nested, tokenize};
pub use synthetic::{synthetic_corpus, SyntheticSpec};
pub use vocab::{build_vocab, encode_ids, Vocabulary, EOS, MASK, PAD, RESERVED, UNK};

use crate::error::{Error, Result};

/// A node of a uniform-depth document tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Node<L> {
    Branch(Vec<Node<L>>),
    Leaf(L),
}

impl<L> Node<L> {
    pub fn children(&self) -> &[Node<L>] {
        match self {
            Node::Branch(c) => c,
            Node::Leaf(_) => &[],
        }
    }

    fn height(&self) -> Option<usize> {
        match self {
            Node::Leaf(_) => Some(0),
            Node::Branch(children) => {
                let first = children.first()?.height()?;
                children
                    .iter()
                    .all(|c| c.height() == Some(first))
                    .then_some(first + 1)
            }
        }
    }

    pub fn leaves(&self) -> Vec<&L> {
        match self {
            Node::Leaf(l) => vec![l],
            Node::Branch(c) => c.iter().flat_map(|n| n.leaves()).collect(),
        }
    }

    pub fn map<M>(&self, f: &impl Fn(&L) -> M) -> Node<M> {
        match self {
            Node::Leaf(l) => Node::Leaf(f(l)),
            Node::Branch(c) => Node::Branch(c.iter().map(|n| n.map(f)).collect()),
        }
    }
}

/// Document tree with level names listed bottom-up
/// (`token`, `sentence`, `paragraph`, [`chapter`,] `document`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tree<L> {
    pub levels: Vec<String>,
    pub root: Node<L>,
}

pub type DocumentTree = Tree<String>;
pub type IdTree = Tree<usize>;

impl<L> Tree<L> {
    pub fn new(levels: Vec<String>, root: Node<L>) -> Result<Self> {
        let t = Self { levels, root };
        t.validate()?;
        Ok(t)
    }

    /// Number of encoding hops (edges from the root to a leaf).
    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        match self.root.height() {
            Some(h) if h == self.depth() => Ok(()),
            Some(h) => Err(Error::Validation(format!(
                "tree height {h} does not match {} configured levels",
                self.levels.len()
            ))),
            None => Err(Error::Validation(
                "tree is empty or not of uniform depth".into(),
            )),
        }
    }

    /// Child counts of every node at `height` (1 = sentences), in order.
    pub fn child_counts(&self, height: usize) -> Vec<usize> {
        fn walk<L>(n: &Node<L>, h: usize, target: usize, out: &mut Vec<usize>) {
            if h == target {
                out.push(n.children().len());
            } else {
                for c in n.children() {
                    walk(c, h - 1, target, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.root, self.depth(), height, &mut out);
        out
    }
}

pub fn level_names(depth: usize) -> Vec<String> {
    let names: &[&str] = match depth {
        3 => &["token", "sentence", "paragraph", "document"],
        4 => &["token", "sentence", "paragraph", "chapter", "document"],
        _ => &[],
    };
    if names.is_empty() {
        let mut v = vec!["token".to_string()];
        v.extend((1..depth).map(|i| format!("level{i}")));
        v.push("document".into());
        v
    } else {
        names.iter().map(|s| s.to_string()).collect()
    }
}
