//! Generalized masked prediction within a level and the coherence task.

use rand::Rng;
use serde::Serialize;

use crate::corpus::{LevelBatch, Slot};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Graph, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MlmAction {
    Mask,
    Random,
    Keep,
}

/// Masked-prediction corruption of one level of a batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CorruptionPlan {
    /// Selected slot positions, ascending.
    pub positions: Vec<usize>,
    pub actions: Vec<MlmAction>,
    /// Uncorrupted table index at each selected slot.
    pub targets: Vec<usize>,
}

impl CorruptionPlan {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

fn draw<R: Rng>(pool: &[usize], rng: &mut R) -> Result<usize> {
    if pool.is_empty() {
        return Err(Error::Empty("random replacement from an empty pool".into()));
    }
    Ok(pool[rng.random_range(0..pool.len())])
}

/// Selects each real child slot with probability `rate`; a selected slot
/// becomes the mask row (80%), a uniform draw from `pool` (10%) or stays
/// (10%). Works on gather-table indices.
pub fn apply_mlm_corruption<R: Rng>(
    index: &[usize],
    level: &LevelBatch,
    rate: f64,
    mask_index: usize,
    pool: &[usize],
    rng: &mut R,
) -> Result<(Vec<usize>, CorruptionPlan)> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Config(format!("mlm rate {rate} not in (0, 1)")));
    }
    let mut out = index.to_vec();
    let mut plan = CorruptionPlan::default();
    for (i, slot) in level.slots.iter().enumerate() {
        if !matches!(slot, Slot::Item(_)) || rng.random::<f64>() >= rate {
            continue;
        }
        let u: f64 = rng.random();
        let action = if u < 0.8 {
            out[i] = mask_index;
            MlmAction::Mask
        } else if u < 0.9 {
            out[i] = draw(pool, rng)?;
            MlmAction::Random
        } else {
            MlmAction::Keep
        };
        plan.positions.push(i);
        plan.actions.push(action);
        plan.targets.push(index[i]);
    }
    Ok((out, plan))
}

/// Dense + GELU head, then dot products with `candidates` plus an optional
/// per-candidate bias.
pub fn mlm_logits<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    k: usize,
    contextual: Var,
    candidates: Var,
    bias: Option<Var>,
) -> Result<Var> {
    if g.shape(candidates).0 == 0 {
        return Err(Error::Empty("masked prediction without candidates".into()));
    }
    let h = model.hops[k]
        .mlm_head
        .forward(g, &model.store, contextual)?;
    let h = g.gelu(h);
    let l = g.matmul_bt(h, candidates)?;
    match bias {
        Some(b) => g.add_row(l, b),
        None => Ok(l),
    }
}

/// Mean cross-entropy over the selected slots. An empty selection yields a
/// constant 0 and `true`.
pub fn mlm_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Option<Var>,
    targets: &[usize],
) -> Result<(Var, bool)> {
    match logits {
        None => Ok((g.constant(Tensor::row(vec![T::zero()])), true)),
        Some(_) if targets.is_empty() => Ok((g.constant(Tensor::row(vec![T::zero()])), true)),
        Some(l) => {
            let w = T::one() / T::from_usize(targets.len()).unwrap();
            Ok((
                g.cross_entropy(l, targets.to_vec(), vec![w; targets.len()])?,
                false,
            ))
        }
    }
}

/// Coherence corruption of one level of a batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CoherencePlan {
    /// Drawn `P` per sequence.
    pub p: Vec<f64>,
    /// Per slot: 0 = segment A, 1 = segment B.
    pub segments: Vec<usize>,
    pub replaced: Vec<usize>,
    /// Replaced / real children per sequence.
    pub ratio: Vec<f64>,
}

/// Per sequence: `P` is 0 half of the time and `U(0,1)` otherwise (or
/// `force_p`); each real child joins segment B with probability `P`; each
/// B child is replaced by a uniform draw from `pool` with probability 0.5.
pub fn coherence_corrupt<R: Rng>(
    index: &[usize],
    level: &LevelBatch,
    pool: &[usize],
    force_p: Option<f64>,
    rng: &mut R,
) -> Result<(Vec<usize>, CoherencePlan)> {
    let mut out = index.to_vec();
    let mut plan = CoherencePlan {
        segments: vec![0; index.len()],
        ..CoherencePlan::default()
    };
    let s = level.cap;
    for seq in 0..level.sequences() {
        let p = match force_p {
            Some(p) => p,
            None if rng.random_bool(0.5) => 0.0,
            None => rng.random::<f64>(),
        };
        let mut real = 0usize;
        let mut replaced = 0usize;
        for i in seq * s..(seq + 1) * s {
            if !matches!(level.slots[i], Slot::Item(_)) {
                continue;
            }
            real += 1;
            if p > 0.0 && rng.random::<f64>() < p {
                plan.segments[i] = 1;
                if rng.random_bool(0.5) {
                    out[i] = draw(pool, rng)?;
                    plan.replaced.push(i);
                    replaced += 1;
                }
            }
        }
        if real == 0 {
            return Err(Error::Empty(format!("sequence {seq} has no real children")));
        }
        plan.p.push(p);
        plan.ratio.push(replaced as f64 / real as f64);
    }
    Ok((out, plan))
}

/// Pre-sigmoid checker output, `[n, 1]`.
pub fn checker_logit<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    k: usize,
    parents: Var,
) -> Result<Var> {
    let c = &model.hops[k].checker;
    let mut h = parents;
    for layer in &c.hidden {
        h = layer.forward(g, &model.store, h)?;
        h = g.tanh(h);
    }
    c.out.forward(g, &model.store, h)
}

/// Predicted replaced ratio for every parent vector, `[n, 1]` in (0, 1).
pub fn coherence_check<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    k: usize,
    parents: Var,
) -> Result<Var> {
    let o = checker_logit(g, model, k, parents)?;
    Ok(g.sigmoid(o))
}

/// Mean of `(predicted − true)²`.
pub fn coherence_loss<T: Scalar>(g: &mut Graph<T>, predicted: Var, ratio: &[f64]) -> Result<Var> {
    let n = ratio.len();
    let t = g.constant(Tensor::matrix(
        n,
        1,
        ratio.iter().map(|&r| T::lit(r)).collect(),
    )?);
    let d = g.sub(predicted, t)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}
