use serde::Serialize;

use super::noise::NoiseStats;
use crate::corpus::{EOS, MASK, PAD};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Graph, Tensor, Var};
use crate::pndb::read_and_update;
use crate::recon_losses::{decode_children, decompress, token_logits};
use crate::scalar::Scalar;

/// One node of a generated tree. Sentence nodes (height 1) carry the token
/// logits of every emitted slot and the greedy ids, EoS included.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenNode {
    pub vector: Vec<f64>,
    pub children: Vec<GenNode>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub logits: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub tokens: Vec<usize>,
}

impl GenNode {
    /// Nodes `height` levels below this one, left to right.
    pub fn descendants(&self, height: usize) -> Vec<&GenNode> {
        if height == 0 {
            return vec![self];
        }
        self.children
            .iter()
            .flat_map(|c| c.descendants(height - 1))
            .collect()
    }

    pub(crate) fn get_mut(&mut self, path: &[usize]) -> &mut GenNode {
        match path.split_first() {
            None => self,
            Some((&i, rest)) => self.children[i].get_mut(rest),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GeneratedDvt {
    /// Level of the root (`depth` for whole documents).
    pub level: usize,
    pub levels: Vec<String>,
    pub root: GenNode,
    /// Answer rows the token decoder read from, `[q][D_token]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answers: Option<Vec<Vec<f64>>>,
}

impl GeneratedDvt {
    /// All nodes of vector or token level `level`.
    pub fn nodes(&self, level: usize) -> Vec<&GenNode> {
        if level > self.level {
            return Vec::new();
        }
        self.root.descendants(self.level - level)
    }
}

/// Greedy id of a logit row. Pad and mask are never emitted.
pub fn greedy_token(logits: &[f64]) -> usize {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (i, &l) in logits.iter().enumerate() {
        if i != PAD && i != MASK && l > best.1 {
            best = (i, l);
        }
    }
    best.0
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

fn row<T: Scalar>(v: &[f64]) -> Tensor<T> {
    Tensor::row(v.iter().map(|&x| T::lit(x)).collect())
}

/// Greedy top-down expansion with a frozen model.
pub struct Decoder<'a, T> {
    model: &'a Model<T>,
    stats: Option<&'a NoiseStats>,
    answers: Option<Tensor<T>>,
}

impl<'a, T: Scalar> Decoder<'a, T> {
    /// `stats` supplies the level means used as non-EoS stop prototypes;
    /// `answers` (`[q, D_token]`) feeds the memory read when the model has one.
    pub fn new(
        model: &'a Model<T>,
        stats: Option<&'a NoiseStats>,
        answers: Option<Tensor<T>>,
    ) -> Result<Self> {
        match (&answers, model.pndb.is_some()) {
            (Some(a), true) => {
                let q = model.config.pndb.questions;
                if a.shape() != [q, model.dim(0)] {
                    return Err(Error::shape("Decoder", format!("answers {:?}", a.shape())));
                }
            }
            (Some(_), false) => {
                return Err(Error::Config(
                    "answers given to a model without memory".into(),
                ))
            }
            (None, true) => {
                return Err(Error::Config(
                    "model with memory needs answer rows to decode".into(),
                ))
            }
            (None, false) => {}
        }
        Ok(Self {
            model,
            stats,
            answers,
        })
    }

    pub fn model(&self) -> &Model<T> {
        self.model
    }

    /// Full subtree below a level-`height` vector.
    pub fn expand(&self, height: usize, vector: &[f64]) -> Result<GenNode> {
        if height == 1 {
            let (tokens, logits) = self.tokens(vector)?;
            return Ok(GenNode {
                vector: vector.to_vec(),
                children: Vec::new(),
                logits,
                tokens,
            });
        }
        let children = self
            .child_vectors(height - 1, vector)?
            .iter()
            .map(|c| self.expand(height - 1, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(GenNode {
            vector: vector.to_vec(),
            children,
            logits: Vec::new(),
            tokens: Vec::new(),
        })
    }

    fn prototypes(&self, k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        let hop = &self.model.hops[k];
        let store = &self.model.store;
        let eos = to_f64(store.value(hop.eos.expect("vector level")));
        let mut others = vec![to_f64(store.value(hop.mask.expect("vector level")))];
        if let Some(s) = self.stats.filter(|s| s.updates[k] > 0) {
            others.push(s.mean[k].clone());
        }
        (eos, others)
    }

    /// Free-running children of a level-`k + 1` vector at vector level `k`:
    /// at least one child, at most `S_k − 1`, stopping at the first output
    /// whose cosine-nearest prototype is the level EoS vector.
    pub fn child_vectors(&self, k: usize, parent: &[f64]) -> Result<Vec<Vec<f64>>> {
        let model = self.model;
        let s = model.cap(k);
        let (eos, others) = self.prototypes(k);
        let mut g = Graph::new();
        let p = g.constant(row::<T>(parent));
        let memory = decompress(&mut g, model, k, p, s)?;
        let mut inputs = vec![g.param(&model.store, model.hops[k].pad)];
        let mut out = Vec::new();
        for t in 0..s - 1 {
            let teacher = g.concat_rows(&inputs)?;
            let y = decode_children(
                &mut g,
                model,
                k,
                memory,
                teacher,
                vec![true; t + 1],
                1,
                t + 1,
            )?;
            let yt = g.gather(y, vec![t])?;
            let v = to_f64(g.value(yt));
            if t > 0 {
                let ce = cosine(&v, &eos);
                if others.iter().all(|o| ce > cosine(&v, o)) {
                    break;
                }
            }
            out.push(v);
            inputs.push(yt);
        }
        Ok(out)
    }

    fn read(&self, g: &mut Graph<T>, y: Var, len: usize) -> Result<Var> {
        match &self.answers {
            Some(a) => {
                let a = g.constant(a.clone());
                read_and_update(g, self.model, y, a, 1, len)
            }
            None => Ok(y),
        }
    }

    /// Greedy tokens of a sentence vector, stopping after EoS or at the cap.
    pub fn tokens(&self, sentence: &[f64]) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
        let model = self.model;
        let s = model.cap(0);
        let mut g = Graph::new();
        let p = g.constant(row::<T>(sentence));
        let memory = decompress(&mut g, model, 0, p, s)?;
        let e = g.param(&model.store, model.tokens.embedding);
        let mut inputs = vec![g.param(&model.store, model.hops[0].pad)];
        let (mut tokens, mut logits) = (Vec::new(), Vec::new());
        for t in 0..s {
            let teacher = g.concat_rows(&inputs)?;
            let y = decode_children(
                &mut g,
                model,
                0,
                memory,
                teacher,
                vec![true; t + 1],
                1,
                t + 1,
            )?;
            let y = self.read(&mut g, y, t + 1)?;
            let yt = g.gather(y, vec![t])?;
            let l = token_logits(&mut g, model, yt)?;
            let l = to_f64(g.value(l));
            let id = greedy_token(&l);
            logits.push(l);
            tokens.push(id);
            if id == EOS {
                break;
            }
            inputs.push(g.gather(e, vec![id])?);
        }
        Ok((tokens, logits))
    }
}

/// Decodes a level-`level` vector into a full generated tree.
pub fn hierarchical_decode<T: Scalar>(
    decoder: &Decoder<T>,
    level: usize,
    vector: &[f64],
) -> Result<GeneratedDvt> {
    let model = decoder.model;
    if level == 0 || level > model.depth() {
        return Err(Error::Config(format!("cannot decode from level {level}")));
    }
    if vector.len() != model.dim(level) {
        return Err(Error::shape(
            "hierarchical_decode",
            format!("vector of {} for width {}", vector.len(), model.dim(level)),
        ));
    }
    Ok(GeneratedDvt {
        level,
        levels: model.level_names(),
        root: decoder.expand(level, vector)?,
        answers: decoder.answers.as_ref().map(|a| {
            (0..a.rows())
                .map(|r| a.row_slice(r).iter().map(|v| v.as_f64()).collect())
                .collect()
        }),
    })
}
