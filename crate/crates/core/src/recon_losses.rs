//! Downward path: decompressor, teacher-forced decoder, reconstruction
//! losses and the auto-encoder regularizer.

use log::warn;

use crate::corpus::{LevelBatch, Slot};
use crate::error::{Error, Result};
use crate::hier_encoder::TableLayout;
use crate::model::Model;
use crate::numerics::layers::LstmInput;
use crate::numerics::{Graph, SeqLayout, Var};
use crate::scalar::Scalar;

/// Decompressor hidden states for `steps` slots, `[n * steps, D_{k+1}]`.
/// The initial state is a linear map of the parent vector, which is also
/// the input at every step.
pub fn decompress<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    k: usize,
    parents: Var,
    steps: usize,
) -> Result<Var> {
    if steps == 0 {
        return Err(Error::Empty("decompression to zero steps".into()));
    }
    let hop = &model.hops[k];
    let n = g.shape(parents).0;
    let h = hop.decompressor.hidden();
    let init = hop.decompress_init.forward(g, &model.store, parents)?;
    let parts = [0, 1, 2, 3].map(|i| g.slice_cols(init, i * h, h));
    let [a, b, c, d] = parts;
    let out = hop.decompressor.forward(
        g,
        &model.store,
        LstmInput::Repeated(parents),
        n,
        steps,
        &vec![steps; n],
        Some([a?, b?, c?, d?]),
        true,
    )?;
    Ok(out.states.expect("states requested"))
}

/// Teacher-forcing table indices: the start vector (level pad) followed by
/// the sequence shifted right by one slot, plus the key-valid flags.
pub fn shifted_inputs(
    level: &LevelBatch,
    index: &[usize],
    layout: &TableLayout,
) -> (Vec<usize>, Vec<bool>) {
    let s = level.cap;
    let mut idx = Vec::with_capacity(index.len());
    let mut valid = Vec::with_capacity(index.len());
    for (seq, &len) in level.lengths.iter().enumerate() {
        for t in 0..s {
            idx.push(if t == 0 {
                layout.pad
            } else {
                index[seq * s + t - 1]
            });
            valid.push(t < len);
        }
    }
    (idx, valid)
}

/// Causal decoder over `teacher` (`[n * S, D_k]`) cross-attending to the
/// decompressor states.
#[allow(clippy::too_many_arguments)]
pub fn decode_children<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    k: usize,
    memory: Var,
    teacher: Var,
    valid: Vec<bool>,
    sequences: usize,
    len: usize,
) -> Result<Var> {
    let hop = &model.hops[k];
    let pos = g.param(&model.store, hop.decoder_positions);
    let steps = g.shape(memory).0 / sequences.max(1);
    if len > model.cap(k) {
        return Err(Error::shape(
            "decode_children",
            format!("length {len} over cap {}", model.cap(k)),
        ));
    }
    let pos = g.gather(pos, (0..sequences * len).map(|i| i % len).collect())?;
    let x = g.add(teacher, pos)?;
    let layout = SeqLayout {
        sequences,
        len,
        valid,
    };
    hop.decoder
        .forward(g, &model.store, x, &layout, Some((memory, steps)), true)
}

/// `Y Eᵀ + b` against the tied token embedding.
pub fn token_logits<T: Scalar>(g: &mut Graph<T>, model: &Model<T>, y: Var) -> Result<Var> {
    let e = g.param(&model.store, model.tokens.embedding);
    let b = g.param(&model.store, model.tokens.out_bias);
    let l = g.matmul_bt(y, e)?;
    g.add_row(l, b)
}

fn mean_weights<T: Scalar>(pad_mask: &[bool], what: &str) -> Result<Vec<T>> {
    let n = pad_mask.iter().filter(|&&p| !p).count();
    if n == 0 {
        return Err(Error::Empty(format!("{what}: every slot is padding")));
    }
    let w = T::one() / T::from_usize(n).unwrap();
    Ok(pad_mask
        .iter()
        .map(|&p| if p { T::zero() } else { w })
        .collect())
}

/// Mean cross-entropy over non-pad slots.
pub fn token_reconstruction_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[usize],
    pad_mask: &[bool],
) -> Result<Var> {
    let w = mean_weights(pad_mask, "token reconstruction")?;
    g.cross_entropy(logits, targets.to_vec(), w)
}

/// Mean cross-entropy of `predicted · candidatesᵀ` (no bias) over non-pad
/// slots. Candidates are labels and receive no gradient.
pub fn level_reconstruction_loss<T: Scalar>(
    g: &mut Graph<T>,
    predicted: Var,
    targets: &[usize],
    pad_mask: &[bool],
    candidates: Var,
) -> Result<Var> {
    if g.shape(candidates).0 == 0 {
        return Err(Error::Empty(
            "level reconstruction without candidates".into(),
        ));
    }
    let w = mean_weights(pad_mask, "level reconstruction")?;
    let c = g.detach(candidates)?;
    let logits = g.matmul_bt(predicted, c)?;
    g.cross_entropy(logits, targets.to_vec(), w)
}

/// Candidate indices for a vector-level reconstruction whose candidate
/// matrix is the `items` level vectors followed by the EoS vector. Pad
/// slots get target 0 and zero weight.
pub fn level_targets(level: &LevelBatch, items: usize) -> Vec<usize> {
    level
        .slots
        .iter()
        .map(|s| match *s {
            Slot::Item(i) => i,
            Slot::Eos => items,
            Slot::Pad => 0,
        })
        .collect()
}

/// `ε · mean_B ‖C_B/‖C_B‖ − D_B/‖D_B‖‖` over row blocks `B`. Blocks with a
/// zero-norm side are skipped with a warning; returns the skipped blocks.
pub fn ae_regularizer<T: Scalar>(
    g: &mut Graph<T>,
    c_in: Var,
    d_out: Var,
    blocks: Vec<Vec<usize>>,
    eps: T,
) -> Result<(Var, Vec<usize>)> {
    let nb = blocks.len();
    let (d, skipped) = g.normalized_distance(c_in, d_out, blocks)?;
    if !skipped.is_empty() {
        warn!(
            "auto-encoder regularizer skipped {} zero-norm block(s)",
            skipped.len()
        );
    }
    let used = nb - skipped.len();
    let s = g.sum(d);
    let scale = if used == 0 {
        T::zero()
    } else {
        eps / T::from_usize(used).unwrap()
    };
    Ok((g.scale(s, scale), skipped))
}

/// Row blocks of the non-pad slots of every sequence.
pub fn sequence_blocks(level: &LevelBatch) -> Vec<Vec<usize>> {
    level
        .lengths
        .iter()
        .enumerate()
        .map(|(s, &len)| (s * level.cap..s * level.cap + len).collect())
        .collect()
}
