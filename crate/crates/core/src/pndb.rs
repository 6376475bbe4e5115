//! Proper-noun memory: gated attention writes over token contexts, pooled
//! answers, gated reads on the decoder side, and answer generation.

use log::warn;

use crate::corpus::LevelBatch;
use crate::error::{Error, Result};
use crate::model::{GateParams, Model, PndbParams};
use crate::numerics::layers::conv1d_unigram;
use crate::numerics::{AttentionSpec, Graph, ParameterStore, Tensor, Var};
use crate::scalar::Scalar;

const GATE_GROUP: usize = 8;

fn params<T>(model: &Model<T>) -> Result<&PndbParams> {
    model
        .pndb
        .as_ref()
        .ok_or_else(|| Error::Config("the PNDB is disabled in this model".into()))
}

/// Per-row gate value in (0, 1): unigram filters, softmax over groups of
/// 8 filters, and one logistic unit over all filter activations.
pub fn gate<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    p: &GateParams,
    x: Var,
) -> Result<Var> {
    let f = g.param(store, p.filters);
    if !g.shape(f).1.is_multiple_of(GATE_GROUP) {
        return Err(Error::Config(format!(
            "{} gate filters not divisible by 8",
            g.shape(f).1
        )));
    }
    let h = conv1d_unigram(g, x, f)?;
    let h = g.group_softmax(h, GATE_GROUP)?;
    let z = p.unit.forward(g, store, h)?;
    Ok(g.sigmoid(z))
}

/// `V[t] = E[t] · gate(E[t])`.
pub fn ignore_gate<T: Scalar>(g: &mut Graph<T>, model: &Model<T>, e: Var) -> Result<Var> {
    let p = params(model)?;
    let w = gate(g, &model.store, &p.ignore, e)?;
    g.mul_col(e, w)
}

/// Sentence groups for pooling: with `leave_one_out`, sentence `j` pools
/// the other sentences of its document; otherwise every sentence of the
/// document. Single-sentence documents fall back to their only answer;
/// those sentences are returned second.
pub fn pool_groups(documents: &[usize], leave_one_out: bool) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut groups = Vec::with_capacity(documents.len());
    let mut fallback = Vec::new();
    for (j, &d) in documents.iter().enumerate() {
        let all: Vec<usize> = (0..documents.len())
            .filter(|&i| documents[i] == d)
            .collect();
        if !leave_one_out {
            groups.push(all);
        } else if all.len() == 1 {
            fallback.push(j);
            groups.push(all);
        } else {
            groups.push(all.into_iter().filter(|&i| i != j).collect());
        }
    }
    (groups, fallback)
}

fn tile(q: usize, n: usize) -> Vec<usize> {
    (0..n * q).map(|i| i % q).collect()
}

#[derive(Clone, Debug)]
pub struct PndbWrite {
    /// `A_i` of every sentence, `[n * q, D]`.
    pub per_sentence: Var,
    /// Mean over each document's sentences, `[documents * q, D]`.
    pub documents: Var,
    /// Answers each sentence reads from, `[n * q, D]`.
    pub pooled: Var,
    /// Sentences whose leave-one-out pool fell back to the global answer.
    pub fallback: Vec<usize>,
}

/// `A_i = softmax(Q K_iᵀ / √D) V_i` with `K_i = E_i W_k` and `V_i` the
/// ignore-gated contexts, then per-document pooling.
pub fn pndb_write<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    contextual: Var,
    level: &LevelBatch,
    leave_one_out: bool,
) -> Result<PndbWrite> {
    let p = params(model)?;
    let q = model.config.pndb.questions;
    let (n, s) = (level.sequences(), level.cap);
    let qm = g.param(&model.store, p.questions);
    let qt = g.gather(qm, tile(q, n))?;
    let wk = g.param(&model.store, p.write_key);
    let k = g.matmul(contextual, wk)?;
    let v = ignore_gate(g, model, contextual)?;
    let spec = AttentionSpec {
        heads: 1,
        blocks: n,
        q_len: q,
        k_len: s,
        key_valid: level.valid(),
        causal: false,
    };
    let a = g.attention(qt, k, v, spec)?;
    let docs = level.document.iter().max().map_or(0, |&d| d + 1);
    let by_doc: Vec<Vec<usize>> = (0..docs)
        .map(|d| (0..n).filter(|&i| level.document[i] == d).collect())
        .collect();
    let documents = g.pool_blocks(a, q, by_doc)?;
    let (groups, fallback) = pool_groups(&level.document, leave_one_out);
    if !fallback.is_empty() {
        warn!(
            "{} single-sentence document(s): leave-one-out answers fall back to the global pool",
            fallback.len()
        );
    }
    let pooled = g.pool_blocks(a, q, groups)?;
    Ok(PndbWrite {
        per_sentence: a,
        documents,
        pooled,
        fallback,
    })
}

/// Mean of all `A_i` blocks except block `j` (global mean with a warning
/// when only one block exists).
pub fn pooled_answers_leave_one_out<T: Scalar>(
    g: &mut Graph<T>,
    stack: Var,
    q: usize,
    j: usize,
) -> Result<Var> {
    let n = g.shape(stack).0 / q.max(1);
    if j >= n {
        return Err(Error::shape(
            "leave_one_out",
            format!("sentence {j} of {n}"),
        ));
    }
    let group: Vec<usize> = if n == 1 {
        warn!("leave-one-out over a single sentence falls back to the global pool");
        vec![0]
    } else {
        (0..n).filter(|&i| i != j).collect()
    };
    g.pool_blocks(stack, q, vec![group])
}

/// `A2 = softmax(K2 Qᵀ / √D) · A` per sequence with `K2 = E2 W_k2`;
/// `answers` holds one `[q, D]` block per sequence.
pub fn pndb_read<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    e2: Var,
    answers: Var,
    sequences: usize,
    len: usize,
) -> Result<Var> {
    let p = params(model)?;
    let q = model.config.pndb.questions;
    let (ar, ad) = g.shape(answers);
    let d = g.shape(e2).1;
    if ar != sequences * q || ad != d {
        return Err(Error::shape(
            "pndb_read",
            format!("answers [{ar},{ad}] for {sequences} sequences of width {d}"),
        ));
    }
    let wk2 = g.param(&model.store, p.read_key);
    let k2 = g.matmul(e2, wk2)?;
    let qm = g.param(&model.store, p.questions);
    let keys = g.gather(qm, tile(q, sequences))?;
    let spec = AttentionSpec {
        heads: 1,
        blocks: sequences,
        q_len: len,
        k_len: q,
        key_valid: vec![true; sequences * q],
        causal: false,
    };
    g.attention(k2, keys, answers, spec)
}

/// `E3[t] = w(t)·A2[t] + (1 − w(t))·E2[t]` with `w` the update gate on
/// `E2` (pinned at 0 when the config closes it).
pub fn update_gate<T: Scalar>(g: &mut Graph<T>, model: &Model<T>, e2: Var, a2: Var) -> Result<Var> {
    let p = params(model)?;
    if g.shape(e2) != g.shape(a2) {
        return Err(Error::shape("update_gate", "E2 and A2 shapes differ"));
    }
    let w = if model.config.pndb.force_closed {
        g.constant(Tensor::zeros(&[g.shape(e2).0, 1]))
    } else {
        gate(g, &model.store, &p.update, e2)?
    };
    let keep = g.one_minus(w);
    let a = g.mul_col(a2, w)?;
    let b = g.mul_col(e2, keep)?;
    g.add(a, b)
}

/// Read followed by the update gate.
pub fn read_and_update<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    e2: Var,
    answers: Var,
    sequences: usize,
    len: usize,
) -> Result<Var> {
    let a2 = pndb_read(g, model, e2, answers, sequences, len)?;
    update_gate(g, model, e2, a2)
}

/// Answer rows for each document vector: `dense([Q_i, g])`, concatenated
/// with token-level noise (`[m * q, D_token]`), then the dense stack.
pub fn generate_answer_matrix<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    documents: Var,
    noise: Var,
) -> Result<Var> {
    let p = params(model)?;
    let q = model.config.pndb.questions;
    let m = g.shape(documents).0;
    let qm = g.param(&model.store, p.questions);
    let qt = g.gather(qm, tile(q, m))?;
    let dr = g.gather(documents, (0..m * q).map(|i| i / q).collect())?;
    let x = g.concat_cols(&[qt, dr])?;
    let h = p.answer_in.forward(g, &model.store, x)?;
    let h = g.concat_cols(&[h, noise])?;
    p.answer_stack.forward(g, &model.store, h)
}
