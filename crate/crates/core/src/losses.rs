//! Composition of all per-level training losses for one batch.

use rand::Rng;
use serde::Serialize;

use crate::config::{LevelWeights, PndbMode, RunConfig};
use crate::corpus::{Batch, Slot};
use crate::error::{Error, Result};
use crate::hier_encoder::{encode_batch, encode_children, encode_hop, Encoded};
use crate::inlevel_coherence::{
    apply_mlm_corruption, coherence_check, coherence_corrupt, coherence_loss, mlm_logits, mlm_loss,
};
use crate::model::Model;
use crate::numerics::{Graph, Var};
use crate::pndb::{pndb_write, read_and_update, PndbWrite};
use crate::recon_losses::{
    ae_regularizer, decode_children, decompress, level_reconstruction_loss, level_targets,
    sequence_blocks, shifted_inputs, token_logits, token_reconstruction_loss,
};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Reconstruction,
    Mlm,
    Coherence,
    AutoEncoder,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Reconstruction => "reconstruction",
            Task::Mlm => "mlm",
            Task::Coherence => "coherence",
            Task::AutoEncoder => "ae",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOptions {
    pub weights: Vec<LevelWeights>,
    pub ae_weight: f64,
    pub eps_auto: f64,
    pub mlm_rate: f64,
    /// Hops whose losses are computed.
    pub hops: Vec<bool>,
    /// Fixed coherence `P` (tests).
    pub force_p: Option<f64>,
}

impl LossOptions {
    pub fn from_run(cfg: &RunConfig, step: usize) -> Self {
        let depth = cfg.model.depth();
        let hops = (0..depth)
            .map(|k| !cfg.staged || step >= k * cfg.steps / depth)
            .collect();
        Self {
            weights: cfg.level_weights(),
            ae_weight: cfg.ae_weight,
            eps_auto: cfg.eps_auto_at(step),
            mlm_rate: cfg.mlm_rate,
            hops,
            force_p: None,
        }
    }

    /// Only `task` at hop `k` enabled (weight 1).
    pub fn single(depth: usize, k: usize, task: Task, eps_auto: f64, mlm_rate: f64) -> Self {
        let zero = LevelWeights {
            reconstruction: 0.0,
            mlm: 0.0,
            coherence: 0.0,
        };
        let mut weights = vec![zero; depth];
        match task {
            Task::Reconstruction => weights[k].reconstruction = 1.0,
            Task::Mlm => weights[k].mlm = 1.0,
            Task::Coherence => weights[k].coherence = 1.0,
            Task::AutoEncoder => {}
        }
        let hops = (0..depth).map(|i| i == k).collect();
        Self {
            weights,
            ae_weight: if task == Task::AutoEncoder { 1.0 } else { 0.0 },
            eps_auto,
            mlm_rate,
            hops,
            force_p: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Component {
    pub task: Task,
    pub level: String,
    pub value: f64,
    pub weight: f64,
    /// `weight · value` (the AE weight includes ε_auto).
    pub contribution: f64,
    /// A masked-prediction pass that selected no slot.
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub empty: bool,
}

impl Component {
    pub fn key(&self) -> String {
        format!("{}.{}", self.task.name(), self.level)
    }
}

pub struct LossOutput {
    pub loss: Var,
    pub total: f64,
    pub components: Vec<Component>,
    pub encoded: Encoded,
    pub pndb: Option<PndbWrite>,
}

/// Token-level decoder-side matrix after the optional memory read.
fn pndb_side<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    write: Option<&PndbWrite>,
    k: usize,
    x: Var,
    sequences: usize,
    len: usize,
) -> Result<Var> {
    match write {
        Some(w) if k == 0 => read_and_update(g, model, x, w.pooled, sequences, len),
        _ => Ok(x),
    }
}

/// Weighted sum of every enabled loss of one batch.
pub fn total_loss<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    model: &Model<T>,
    batch: &Batch,
    opts: &LossOptions,
    rng: &mut R,
) -> Result<LossOutput> {
    let depth = model.depth();
    if opts.weights.len() != depth || opts.hops.len() != depth {
        return Err(Error::Config(format!(
            "loss options for {} hops, model has {depth}",
            opts.weights.len()
        )));
    }
    let names = model.level_names();
    let enc = encode_batch(g, model, batch)?;
    let write = match model.config.pndb.mode {
        PndbMode::Off => None,
        mode => Some(pndb_write(
            g,
            model,
            enc.hops[0].contextual,
            &batch.levels[0],
            mode == PndbMode::LeaveOneOut,
        )?),
    };
    let mut terms: Vec<(Var, Component)> = Vec::new();
    let mut push = |g: &mut Graph<T>, v: Var, task: Task, k: usize, weight: f64, empty: bool| {
        let value = g.scalar(v).as_f64();
        terms.push((
            v,
            Component {
                task,
                level: names[k].clone(),
                value,
                weight,
                contribution: weight * value,
                empty,
            },
        ));
    };

    for k in (0..depth).filter(|&k| opts.hops[k]) {
        let level = &batch.levels[k];
        let h = &enc.hops[k];
        let w = opts.weights[k];
        let (n, s) = (level.sequences(), level.cap);
        let items = h.layout.items;
        let ae_eps = opts.ae_weight * opts.eps_auto;

        if w.reconstruction > 0.0 || ae_eps > 0.0 {
            let memory = decompress(g, model, k, h.parents, s)?;
            let (sidx, valid) = shifted_inputs(level, &h.index, &h.layout);
            let teacher = g.gather(h.table, sidx)?;
            let y = decode_children(g, model, k, memory, teacher, valid, n, s)?;
            if w.reconstruction > 0.0 {
                let y3 = pndb_side(g, model, write.as_ref(), k, y, n, s)?;
                let pad = level.pad_mask();
                let loss = if k == 0 {
                    let logits = token_logits(g, model, y3)?;
                    token_reconstruction_loss(g, logits, &level.token_ids(), &pad)?
                } else {
                    let eos = g.param(&model.store, model.hops[k].eos.expect("vector level"));
                    let cands = g.concat_rows(&[enc.vectors(k), eos])?;
                    level_reconstruction_loss(g, y3, &level_targets(level, items), &pad, cands)?
                };
                push(g, loss, Task::Reconstruction, k, w.reconstruction, false);
            }
            if ae_eps > 0.0 {
                let (d, _) = ae_regularizer(g, h.contextual, y, sequence_blocks(level), T::one())?;
                push(g, d, Task::AutoEncoder, k, ae_eps, false);
            }
        }

        if w.mlm > 0.0 {
            let pool: Vec<usize> = if k == 0 {
                (4..model.vocab_size).collect()
            } else {
                (0..items).collect()
            };
            let (cidx, plan) =
                apply_mlm_corruption(&h.index, level, opts.mlm_rate, h.layout.mask, &pool, rng)?;
            let (loss, empty) = if plan.is_empty() {
                mlm_loss(g, None, &[])?
            } else {
                let inputs = g.gather(h.table, cidx)?;
                let ctx = encode_children(g, model, k, inputs, &vec![0; n * s], level)?;
                let ctx = pndb_side(g, model, write.as_ref(), k, ctx, n, s)?;
                let rows = g.gather(ctx, plan.positions.clone())?;
                let logits = if k == 0 {
                    let e = g.param(&model.store, model.tokens.embedding);
                    let b = g.param(&model.store, model.tokens.mlm_bias);
                    mlm_logits(g, model, k, rows, e, Some(b))?
                } else {
                    let c = g.detach(enc.vectors(k))?;
                    mlm_logits(g, model, k, rows, c, None)?
                };
                mlm_loss(g, Some(logits), &plan.targets)?
            };
            push(g, loss, Task::Mlm, k, w.mlm, empty);
        }

        if w.coherence > 0.0 {
            let pool: Vec<usize> = if k == 0 {
                level
                    .slots
                    .iter()
                    .filter_map(|s| {
                        if let Slot::Item(id) = *s {
                            Some(id)
                        } else {
                            None
                        }
                    })
                    .collect()
            } else {
                (0..items).collect()
            };
            let (cidx, plan) = coherence_corrupt(&h.index, level, &pool, opts.force_p, rng)?;
            let (_, _, parents) = encode_hop(g, model, k, h.table, &cidx, &plan.segments, level)?;
            let pred = coherence_check(g, model, k, parents)?;
            let loss = coherence_loss(g, pred, &plan.ratio)?;
            push(g, loss, Task::Coherence, k, w.coherence, false);
        }
    }

    if terms.is_empty() {
        return Err(Error::Config("every loss component is disabled".into()));
    }
    let mut total: Option<Var> = None;
    for (v, c) in &terms {
        let scaled = g.scale(*v, T::lit(c.weight));
        total = Some(match total {
            None => scaled,
            Some(t) => g.add(t, scaled)?,
        });
    }
    let loss = total.expect("at least one term");
    g.check_finite()?;
    Ok(LossOutput {
        loss,
        total: g.scalar(loss).as_f64(),
        components: terms.into_iter().map(|(_, c)| c).collect(),
        encoded: enc,
        pndb: write,
    })
}
