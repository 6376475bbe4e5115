use serde::{Deserialize, Serialize};

use super::{level_names, DocumentTree, Node, Tree};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    chapters: Option<Vec<ChapterFile>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    paragraphs: Option<Vec<ParagraphFile>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChapterFile {
    paragraphs: Vec<ParagraphFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParagraphFile {
    sentences: Vec<String>,
}

/// Whitespace tokenizer with lowercasing.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence
        .split_whitespace()
        .map(|t| t.to_lowercase())
        .collect()
}

fn paragraphs(list: Vec<ParagraphFile>, at: &str) -> Result<Node<String>> {
    if list.is_empty() {
        return Err(Error::Validation(format!("{at}has no paragraphs")));
    }
    let mut out = Vec::with_capacity(list.len());
    for (pi, p) in list.into_iter().enumerate() {
        if p.sentences.is_empty() {
            return Err(Error::Validation(format!(
                "{at}paragraph {pi} has no sentences"
            )));
        }
        let mut sentences = Vec::with_capacity(p.sentences.len());
        for (si, s) in p.sentences.iter().enumerate() {
            let toks = tokenize(s);
            if toks.is_empty() {
                return Err(Error::Validation(format!(
                    "{at}paragraph {pi} sentence {si} is empty"
                )));
            }
            sentences.push(Node::Branch(toks.into_iter().map(Node::Leaf).collect()));
        }
        out.push(Node::Branch(sentences));
    }
    Ok(Node::Branch(out))
}

/// Parses one corpus document.
pub fn parse_nested(text: &str) -> Result<DocumentTree> {
    let file: DocFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    match (file.chapters, file.paragraphs) {
        (Some(_), Some(_)) => Err(Error::Validation(
            "document has both chapters and top-level paragraphs".into(),
        )),
        (None, None) => Err(Error::Validation(
            "document has neither chapters nor paragraphs".into(),
        )),
        (None, Some(ps)) => {
            let Node::Branch(ps) = paragraphs(ps, "")? else {
                unreachable!()
            };
            Tree::new(level_names(3), Node::Branch(ps))
        }
        (Some(chapters), None) => {
            if chapters.is_empty() {
                return Err(Error::Validation("document has no chapters".into()));
            }
            let mut out = Vec::with_capacity(chapters.len());
            for (ci, c) in chapters.into_iter().enumerate() {
                out.push(paragraphs(c.paragraphs, &format!("chapter {ci} "))?);
            }
            Tree::new(level_names(4), Node::Branch(out))
        }
    }
}

fn to_paragraph_files(paragraphs: &[Node<String>]) -> Vec<ParagraphFile> {
    paragraphs
        .iter()
        .map(|p| ParagraphFile {
            sentences: p
                .children()
                .iter()
                .map(|s| {
                    s.leaves()
                        .into_iter()
                        .cloned()
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect(),
        })
        .collect()
}

/// Inverse of [`parse_nested`] for depth-3 and depth-4 trees.
pub fn serialize_nested(tree: &DocumentTree) -> Result<String> {
    tree.validate()?;
    let file = match tree.depth() {
        3 => DocFile {
            chapters: None,
            paragraphs: Some(to_paragraph_files(tree.root.children())),
        },
        4 => DocFile {
            chapters: Some(
                tree.root
                    .children()
                    .iter()
                    .map(|c| ChapterFile {
                        paragraphs: to_paragraph_files(c.children()),
                    })
                    .collect(),
            ),
            paragraphs: None,
        },
        d => {
            return Err(Error::Validation(format!(
                "cannot serialize a depth-{d} tree"
            )))
        }
    };
    Ok(serde_json::to_string(&file)?)
}
