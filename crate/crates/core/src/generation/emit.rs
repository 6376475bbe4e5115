use serde::Serialize;

use super::decode::{greedy_token, GenNode, GeneratedDvt};
use crate::corpus::{serialize_nested, DocumentTree, Node, Vocabulary, EOS};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmittedText {
    /// Nested-format JSON, `None` when every sentence came out empty.
    pub text: Option<String>,
    /// Paths (from the generated root) of dropped empty nodes, with their level.
    pub empty: Vec<(usize, Vec<usize>)>,
}

/// Greedy words of one sentence node's logits up to the first EoS.
pub fn sentence_ids(node: &GenNode) -> Vec<usize> {
    node.logits
        .iter()
        .map(|l| greedy_token(l))
        .take_while(|&id| id != EOS)
        .collect()
}

fn build(
    n: &GenNode,
    height: usize,
    vocab: &Vocabulary,
    path: &mut Vec<usize>,
    empty: &mut Vec<(usize, Vec<usize>)>,
) -> Option<Node<String>> {
    let children: Vec<Node<String>> = if height == 1 {
        sentence_ids(n)
            .into_iter()
            .map(|id| {
                Node::Leaf(
                    vocab
                        .token(id)
                        .unwrap_or(crate::corpus::RESERVED[crate::corpus::UNK])
                        .to_string(),
                )
            })
            .collect()
    } else {
        let mut out = Vec::new();
        for (i, c) in n.children.iter().enumerate() {
            path.push(i);
            out.extend(build(c, height - 1, vocab, path, empty));
            path.pop();
        }
        out
    };
    if children.is_empty() {
        empty.push((height, path.clone()));
        None
    } else {
        Some(Node::Branch(children))
    }
}

/// Greedy text of a generated tree in the nested corpus format. A root
/// below the document level is wrapped in single-child ancestors.
pub fn emit_text(dvt: &GeneratedDvt, vocab: &Vocabulary) -> Result<EmittedText> {
    let mut empty = Vec::new();
    let Some(mut root) = build(&dvt.root, dvt.level, vocab, &mut Vec::new(), &mut empty) else {
        return Ok(EmittedText { text: None, empty });
    };
    for _ in dvt.level..dvt.levels.len() - 1 {
        root = Node::Branch(vec![root]);
    }
    let tree = DocumentTree::new(dvt.levels.clone(), root)?;
    Ok(EmittedText {
        text: Some(serialize_nested(&tree)?),
        empty,
    })
}
