//! Bottom-up encoding: token embeddings, per-level encoders and
//! compressors, and the document vector tree.

use serde::Serialize;

use crate::corpus::{Batch, IdTree, LevelBatch, Slot, EOS, MASK, PAD};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::layers::LstmInput;
use crate::numerics::{Graph, SeqLayout, Tensor, Var};
use crate::scalar::Scalar;

/// Row positions of the special vectors in a level's gather table. The
/// table is the level's item vectors followed by its special vectors (the
/// token level uses the embedding matrix plus the pad vector).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TableLayout {
    pub items: usize,
    pub pad: usize,
    pub eos: usize,
    pub mask: usize,
}

impl TableLayout {
    pub fn new(level: usize, items: usize) -> Self {
        if level == 0 {
            Self {
                items,
                pad: items,
                eos: EOS,
                mask: MASK,
            }
        } else {
            Self {
                items,
                pad: items,
                eos: items + 1,
                mask: items + 2,
            }
        }
    }

    pub fn index(&self, slot: Slot) -> usize {
        match slot {
            Slot::Item(i) => i,
            Slot::Eos => self.eos,
            Slot::Pad => self.pad,
        }
    }
}

/// Gather table of level `k`. `items` are the level's vectors (the
/// previous hop's parents); ignored at the token level.
pub fn gather_table<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    k: usize,
    items: Option<Var>,
) -> Result<(Var, TableLayout)> {
    let hop = &model.hops[k];
    let pad = g.param(&model.store, hop.pad);
    if k == 0 {
        let e = g.param(&model.store, model.tokens.embedding);
        let t = g.concat_rows(&[e, pad])?;
        return Ok((t, TableLayout::new(0, model.vocab_size)));
    }
    let items = items.ok_or_else(|| Error::shape("gather_table", "missing level vectors"))?;
    let eos = g.param(
        &model.store,
        hop.eos.expect("vector levels own an EoS vector"),
    );
    let mask = g.param(
        &model.store,
        hop.mask.expect("vector levels own a mask vector"),
    );
    let n = g.shape(items).0;
    let t = g.concat_rows(&[items, pad, eos, mask])?;
    Ok((t, TableLayout::new(k, n)))
}

pub fn slot_indices(level: &LevelBatch, layout: &TableLayout) -> Vec<usize> {
    level.slots.iter().map(|&s| layout.index(s)).collect()
}

/// Embedding rows of `ids`; `PAD` maps to the trainable pad vector.
pub fn embed_tokens<T: Scalar>(g: &mut Graph<T>, model: &Model<T>, ids: &[usize]) -> Result<Var> {
    if let Some(&bad) = ids.iter().find(|&&i| i >= model.vocab_size) {
        return Err(Error::Validation(format!(
            "token id {bad} outside vocabulary of {}",
            model.vocab_size
        )));
    }
    let (table, layout) = gather_table(g, model, 0, None)?;
    g.gather(
        table,
        ids.iter()
            .map(|&i| if i == PAD { layout.pad } else { i })
            .collect(),
    )
}

/// Adds position and segment embeddings (`segments[i]` is 0 for A, 1 for
/// B) and runs the level encoder with pad slots masked as keys.
pub fn encode_children<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    k: usize,
    inputs: Var,
    segments: &[usize],
    level: &LevelBatch,
) -> Result<Var> {
    let (n, s) = (level.sequences(), level.cap);
    let (rows, d) = g.shape(inputs);
    if rows != n * s || d != model.dim(k) || segments.len() != rows {
        return Err(Error::shape(
            "encode_children",
            format!(
                "[{rows},{d}] for {n} sequences of {s} at width {}",
                model.dim(k)
            ),
        ));
    }
    let hop = &model.hops[k];
    let pos = g.param(&model.store, hop.positions);
    let pos = g.gather(pos, (0..rows).map(|i| i % s).collect())?;
    let seg = g.param(&model.store, hop.segments);
    let seg = g.gather(seg, segments.to_vec())?;
    let x = g.add(inputs, pos)?;
    let x = g.add(x, seg)?;
    let layout = SeqLayout {
        sequences: n,
        len: s,
        valid: level.valid(),
    };
    hop.encoder
        .forward(g, &model.store, x, &layout, None, false)
}

/// Final states of the bidirectional compressor over the non-pad slots.
pub fn compress<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    k: usize,
    contextual: Var,
    level: &LevelBatch,
) -> Result<Var> {
    let out = model.hops[k].compressor.forward(
        g,
        &model.store,
        LstmInput::Rows(contextual),
        level.sequences(),
        level.cap,
        &level.lengths,
        None,
        false,
    )?;
    Ok(out.last)
}

/// Intermediate values of one hop.
#[derive(Clone, Debug)]
pub struct HopEncoding {
    pub table: Var,
    pub layout: TableLayout,
    /// Clean table index of every slot.
    pub index: Vec<usize>,
    /// Gathered child vectors, `[n * S, D_k]`.
    pub inputs: Var,
    /// Encoder output, `[n * S, D_k]`.
    pub contextual: Var,
    /// Compressed level-`k + 1` vectors, `[n, D_{k+1}]`.
    pub parents: Var,
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub hops: Vec<HopEncoding>,
}

impl Encoded {
    /// Level-`k` vectors for `k ≥ 1`.
    pub fn vectors(&self, k: usize) -> Var {
        self.hops[k - 1].parents
    }

    pub fn documents(&self) -> Var {
        self.hops.last().expect("at least one hop").parents
    }
}

/// Runs one hop from explicit table indices and segment labels.
pub fn encode_hop<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    k: usize,
    table: Var,
    index: &[usize],
    segments: &[usize],
    level: &LevelBatch,
) -> Result<(Var, Var, Var)> {
    let inputs = g.gather(table, index.to_vec())?;
    let contextual = encode_children(g, model, k, inputs, segments, level)?;
    let parents = compress(g, model, k, contextual, level)?;
    Ok((inputs, contextual, parents))
}

/// Clean bottom-up pass over a batch.
pub fn encode_batch<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    batch: &Batch,
) -> Result<Encoded> {
    if batch.depth() != model.depth() {
        return Err(Error::shape(
            "encode_batch",
            format!("batch depth {} vs model {}", batch.depth(), model.depth()),
        ));
    }
    let mut hops: Vec<HopEncoding> = Vec::with_capacity(batch.depth());
    for (k, level) in batch.levels.iter().enumerate() {
        if level.cap != model.cap(k) {
            return Err(Error::shape(
                "encode_batch",
                format!("level {k} cap {} vs {}", level.cap, model.cap(k)),
            ));
        }
        let (table, layout) = gather_table(g, model, k, hops.last().map(|h| h.parents))?;
        let index = slot_indices(level, &layout);
        let segments = vec![0; index.len()];
        let (inputs, contextual, parents) =
            encode_hop(g, model, k, table, &index, &segments, level)?;
        hops.push(HopEncoding {
            table,
            layout,
            index,
            inputs,
            contextual,
            parents,
        });
    }
    Ok(Encoded { hops })
}

/// One node of a document vector tree.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DvtNode {
    pub level: String,
    /// Child positions from the root.
    pub path: Vec<usize>,
    pub vector: Vec<f64>,
    /// Encoder output over the children, EoS row included.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub contextual: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<DvtNode>,
}

impl DvtNode {
    /// All nodes at `level` (0 = tokens), left to right.
    pub fn at_level(&self, level: usize, height: usize) -> Vec<&DvtNode> {
        if height == level {
            return vec![self];
        }
        self.children
            .iter()
            .flat_map(|c| c.at_level(level, height - 1))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Dvt {
    pub depth: usize,
    pub root: DvtNode,
}

impl Dvt {
    pub fn level(&self, level: usize) -> Vec<&DvtNode> {
        self.root.at_level(level, self.depth)
    }
}

fn rows<T: Scalar>(t: &Tensor<T>, range: std::ops::Range<usize>) -> Vec<Vec<f64>> {
    range
        .map(|r| t.row_slice(r).iter().map(|v| v.as_f64()).collect())
        .collect()
}

/// Document vector tree of a single document.
pub fn build_dvt<T: Scalar>(model: &Model<T>, tree: &IdTree) -> Result<Dvt> {
    let batch = Batch::from_trees(&[tree], &model.config.caps)?;
    let mut g = Graph::new();
    let enc = encode_batch(&mut g, model, &batch)?;
    g.check_finite()?;
    let names = model.level_names();
    let depth = model.depth();
    let embedding = model.store.value(model.tokens.embedding);

    struct Ctx<'a, T> {
        g: &'a Graph<T>,
        enc: &'a Encoded,
        batch: &'a Batch,
        names: &'a [String],
        embedding: &'a Tensor<T>,
    }
    fn node<T: Scalar>(
        c: &Ctx<T>,
        h: usize,
        seq: usize,
        vector: Vec<f64>,
        path: Vec<usize>,
    ) -> DvtNode {
        let level = &c.batch.levels[h - 1];
        let cap = level.cap;
        let ctx = c.g.value(c.enc.hops[h - 1].contextual);
        let contextual = rows(ctx, seq * cap..seq * cap + level.lengths[seq]);
        let mut children = Vec::new();
        for (i, slot) in level.sequence(seq).iter().enumerate() {
            let Slot::Item(item) = *slot else { continue };
            let mut p = path.clone();
            p.push(i);
            if h == 1 {
                children.push(DvtNode {
                    level: c.names[0].clone(),
                    path: p,
                    vector: rows(c.embedding, item..item + 1).remove(0),
                    contextual: Vec::new(),
                    children: Vec::new(),
                });
            } else {
                let v = rows(c.g.value(c.enc.vectors(h - 1)), item..item + 1).remove(0);
                children.push(node(c, h - 1, item, v, p));
            }
        }
        DvtNode {
            level: c.names[h].clone(),
            path,
            vector,
            contextual,
            children,
        }
    }
    let ctx = Ctx {
        g: &g,
        enc: &enc,
        batch: &batch,
        names: &names,
        embedding,
    };
    let top = rows(g.value(enc.documents()), 0..1).remove(0);
    Ok(Dvt {
        depth,
        root: node(&ctx, depth, 0, top, Vec::new()),
    })
}

/// Attention score evaluations of a clean pass over one document.
pub fn attention_op_count<T: Scalar>(model: &Model<T>, tree: &IdTree) -> Result<u64> {
    let batch = Batch::from_trees(&[tree], &model.config.caps)?;
    let mut g = Graph::new();
    encode_batch(&mut g, model, &batch)?;
    Ok(g.attention_ops())
}

/// Control: the token encoder run once over the whole flattened document.
pub fn flat_attention_op_count<T: Scalar>(model: &Model<T>, tree: &IdTree) -> Result<u64> {
    let ids: Vec<usize> = tree.root.leaves().into_iter().copied().collect();
    let mut g = Graph::new();
    let x = embed_tokens(&mut g, model, &ids)?;
    let layout = SeqLayout::dense(1, ids.len());
    model.hops[0]
        .encoder
        .forward(&mut g, &model.store, x, &layout, None, false)?;
    Ok(g.attention_ops())
}
