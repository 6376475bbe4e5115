use serde::Serialize;

use super::decode::{Decoder, GenNode, GeneratedDvt};
use crate::corpus::{LevelBatch, Slot};
use crate::error::{Error, Result};
use crate::hier_encoder::{encode_children, gather_table};
use crate::inlevel_coherence::mlm_logits;
use crate::numerics::{Graph, Tensor};
use crate::scalar::Scalar;

/// One node update of a copyedit pass.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EditRecord {
    pub iteration: usize,
    pub level: usize,
    /// Position of the node among the level's nodes, left to right.
    pub node: usize,
    pub old: Vec<f64>,
    pub mlm: Vec<f64>,
    pub new: Vec<f64>,
}

fn paths(node: &GenNode, height: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if height == 0 {
        out.push(prefix.clone());
        return;
    }
    for (i, c) in node.children.iter().enumerate() {
        prefix.push(i);
        paths(c, height - 1, prefix, out);
        prefix.pop();
    }
}

/// Paths (from the root) of every level-`level` node.
fn level_paths(dvt: &GeneratedDvt, level: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    paths(&dvt.root, dvt.level - level, &mut Vec::new(), &mut out);
    out
}

/// Masked reconstruction of every level-`level` node: the node is replaced
/// by the level mask among its siblings and the prediction is the softmax
/// expectation over all current nodes of the level.
pub fn mlm_reconstruction<T: Scalar>(
    decoder: &Decoder<T>,
    dvt: &GeneratedDvt,
    level: usize,
) -> Result<Vec<Vec<f64>>> {
    let model = decoder.model();
    if level == 0 || level >= dvt.level {
        return Err(Error::Config(format!(
            "no masked reconstruction at level {level}"
        )));
    }
    let nodes = dvt.nodes(level);
    let ps = level_paths(dvt, level);
    let n = nodes.len();
    let d = model.dim(level);
    let s = model.cap(level);
    let data: Vec<T> = nodes
        .iter()
        .flat_map(|v| v.vector.iter().map(|&x| T::lit(x)))
        .collect();
    let items = Tensor::matrix(n, d, data)?;

    let mut g = Graph::new();
    let items = g.constant(items);
    let (table, layout) = gather_table(&mut g, model, level, Some(items))?;
    let mut slots = Vec::with_capacity(n * s);
    let mut index = Vec::with_capacity(n * s);
    let mut lengths = Vec::with_capacity(n);
    let mut picks = Vec::with_capacity(n);
    for (i, p) in ps.iter().enumerate() {
        let parent = &p[..p.len() - 1];
        let siblings: Vec<usize> = (0..n)
            .filter(|&j| ps[j][..ps[j].len() - 1] == *parent)
            .collect();
        if siblings.len() >= s {
            return Err(Error::shape(
                "mlm_reconstruction",
                format!("{} siblings over cap {s}", siblings.len()),
            ));
        }
        for t in 0..s {
            match siblings.get(t) {
                Some(&j) => {
                    slots.push(Slot::Item(j));
                    index.push(if j == i { layout.mask } else { j });
                    if j == i {
                        picks.push(i * s + t);
                    }
                }
                None if t == siblings.len() => {
                    slots.push(Slot::Eos);
                    index.push(layout.eos);
                }
                None => {
                    slots.push(Slot::Pad);
                    index.push(layout.pad);
                }
            }
        }
        lengths.push(siblings.len() + 1);
    }
    let batch = LevelBatch {
        cap: s,
        slots,
        lengths,
        document: vec![0; n],
    };
    let inputs = g.gather(table, index)?;
    let ctx = encode_children(&mut g, model, level, inputs, &vec![0; n * s], &batch)?;
    let rows = g.gather(ctx, picks)?;
    let logits = mlm_logits(&mut g, model, level, rows, items, None)?;
    let p = g.softmax(logits);
    let out = g.matmul(p, items)?;
    let out = g.value(out);
    Ok((0..n)
        .map(|r| out.row_slice(r).iter().map(|v| v.as_f64()).collect())
        .collect())
}

/// `T` iterations of `N ← ε·N_MLM + (1 − ε)·N` over the vector levels below
/// the root, top-down. Nodes that change have their subtree regenerated.
pub fn copyedit_pass<T: Scalar>(
    decoder: &Decoder<T>,
    dvt: &GeneratedDvt,
    eps: f64,
    iterations: usize,
) -> Result<(GeneratedDvt, Vec<EditRecord>)> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::Config(format!(
            "copyedit epsilon {eps} outside [0, 1]"
        )));
    }
    let mut dvt = dvt.clone();
    let mut trace = Vec::new();
    for iteration in 0..iterations {
        for level in (1..dvt.level).rev() {
            let mlm = mlm_reconstruction(decoder, &dvt, level)?;
            let ps = level_paths(&dvt, level);
            let olds: Vec<Vec<f64>> = dvt.nodes(level).iter().map(|n| n.vector.clone()).collect();
            for (node, ((path, old), m)) in ps.iter().zip(olds).zip(mlm).enumerate() {
                let new: Vec<f64> = old
                    .iter()
                    .zip(&m)
                    .map(|(o, x)| eps * x + (1.0 - eps) * o)
                    .collect();
                if new
                    .iter()
                    .zip(&old)
                    .any(|(a, b)| a.to_bits() != b.to_bits())
                {
                    *dvt.root.get_mut(path) = decoder.expand(level, &new)?;
                }
                trace.push(EditRecord {
                    iteration,
                    level,
                    node,
                    old,
                    mlm: m,
                    new,
                });
            }
        }
    }
    Ok((dvt, trace))
}
