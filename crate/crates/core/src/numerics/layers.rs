//! Parameterised layers built from [`Graph`] primitives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{AttentionSpec, Graph, Var};
use super::params::{Group, ParamId, ParameterStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Gelu,
    Sigmoid,
}

pub fn activation<T: Scalar>(g: &mut Graph<T>, x: Var, kind: Activation) -> Var {
    match kind {
        Activation::Tanh => g.tanh(x),
        Activation::Gelu => g.gelu(x),
        Activation::Sigmoid => g.sigmoid(x),
    }
}

/// `y = xW + b`.
pub fn dense<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Kernel-width-one convolution over the rows of `x`.
pub fn conv1d_unigram<T: Scalar>(g: &mut Graph<T>, x: Var, filters: Var) -> Result<Var> {
    g.matmul(x, filters)
}

#[derive(Clone, Debug)]
pub struct DenseParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl DenseParams {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        group: Group,
        din: usize,
        dout: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            w: store.insert_xavier(&format!("{name}.w"), group, din, dout, rng)?,
            b: store.insert_filled(&format!("{name}.b"), group, &[dout], 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        dense(g, x, w, b)
    }
}

/// `L` dense layers with `tanh` between them and nothing after the last.
#[derive(Clone, Debug)]
pub struct DenseStack {
    pub layers: Vec<DenseParams>,
}

impl DenseStack {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        group: Group,
        dims: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseParams::new(store, &format!("{name}.{i}"), group, w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: Var,
    ) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        group: Group,
        d: usize,
    ) -> Result<Self> {
        Ok(Self {
            gain: store.insert_filled(&format!("{name}.g"), group, &[d], 1.0)?,
            bias: store.insert_filled(&format!("{name}.b"), group, &[d], 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: Var,
    ) -> Result<Var> {
        let n = g.layer_norm(x, T::lit(LN_EPS));
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul_row(n, gain)?;
        g.add_row(y, bias)
    }
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub q: DenseParams,
    pub k: DenseParams,
    pub v: DenseParams,
    pub o: DenseParams,
    pub heads: usize,
}

impl AttentionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        group: Group,
        d: usize,
        d_mem: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            q: DenseParams::new(store, &format!("{name}.q"), group, d, d, rng)?,
            k: DenseParams::new(store, &format!("{name}.k"), group, d_mem, d, rng)?,
            v: DenseParams::new(store, &format!("{name}.v"), group, d_mem, d, rng)?,
            o: DenseParams::new(store, &format!("{name}.o"), group, d, d, rng)?,
            heads,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: Var,
        mem: Var,
        spec: AttentionSpec,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, mem)?;
        let v = self.v.forward(g, store, mem)?;
        let spec = AttentionSpec {
            heads: self.heads,
            ..spec
        };
        let a = g.attention(q, k, v, spec)?;
        self.o.forward(g, store, a)
    }
}

/// Pre-norm transformer block with optional cross-attention.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln_self: LayerNormParams,
    pub self_attn: AttentionParams,
    pub cross: Option<(LayerNormParams, AttentionParams)>,
    pub ln_ff: LayerNormParams,
    pub ff_in: DenseParams,
    pub ff_out: DenseParams,
}

/// Sequence cell family used by encoders and decoders.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    #[default]
    Transformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackConfig {
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    #[serde(default)]
    pub cell: CellKind,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            ff_mult: 4,
            cell: CellKind::Transformer,
        }
    }
}

/// Layout of a batch of equal-length sequences stacked row-wise.
#[derive(Clone, Debug)]
pub struct SeqLayout {
    pub sequences: usize,
    pub len: usize,
    /// `sequences * len` flags, `false` on pad slots.
    pub valid: Vec<bool>,
}

impl SeqLayout {
    pub fn dense(sequences: usize, len: usize) -> Self {
        Self {
            sequences,
            len,
            valid: vec![true; sequences * len],
        }
    }
}

/// Encoder (self-attention only) or decoder (causal + cross-attention)
/// stack followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct StackParams {
    pub kind: CellKind,
    pub blocks: Vec<BlockParams>,
    pub final_norm: LayerNormParams,
}

impl StackParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        group: Group,
        d: usize,
        d_mem: Option<usize>,
        cfg: &StackConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.heads == 0 || !d.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!(
                "{name}: width {d} not divisible by {} heads",
                cfg.heads
            )));
        }
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("{name}.{l}");
            let cross = match d_mem {
                Some(dm) => Some((
                    LayerNormParams::new(store, &format!("{p}.ln_cross"), group, d)?,
                    AttentionParams::new(
                        store,
                        &format!("{p}.cross"),
                        group,
                        d,
                        dm,
                        cfg.heads,
                        rng,
                    )?,
                )),
                None => None,
            };
            blocks.push(BlockParams {
                ln_self: LayerNormParams::new(store, &format!("{p}.ln_self"), group, d)?,
                self_attn: AttentionParams::new(
                    store,
                    &format!("{p}.self"),
                    group,
                    d,
                    d,
                    cfg.heads,
                    rng,
                )?,
                cross,
                ln_ff: LayerNormParams::new(store, &format!("{p}.ln_ff"), group, d)?,
                ff_in: DenseParams::new(
                    store,
                    &format!("{p}.ff_in"),
                    group,
                    d,
                    cfg.ff_mult * d,
                    rng,
                )?,
                ff_out: DenseParams::new(
                    store,
                    &format!("{p}.ff_out"),
                    group,
                    cfg.ff_mult * d,
                    d,
                    rng,
                )?,
            });
        }
        Ok(Self {
            kind: cfg.cell,
            blocks,
            final_norm: LayerNormParams::new(store, &format!("{name}.ln_out"), group, d)?,
        })
    }

    /// Runs the stack over `x` (`layout.sequences * layout.len` rows). A
    /// decoder passes `memory` as `(rows, rows per sequence)`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: Var,
        layout: &SeqLayout,
        memory: Option<(Var, usize)>,
        causal: bool,
    ) -> Result<Var> {
        match self.kind {
            CellKind::Transformer => self.transformer(g, store, x, layout, memory, causal),
        }
    }

    fn transformer<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: Var,
        layout: &SeqLayout,
        memory: Option<(Var, usize)>,
        causal: bool,
    ) -> Result<Var> {
        let self_spec = AttentionSpec {
            heads: 1,
            blocks: layout.sequences,
            q_len: layout.len,
            k_len: layout.len,
            key_valid: layout.valid.clone(),
            causal,
        };
        let mut h = x;
        for block in &self.blocks {
            let n = block.ln_self.forward(g, store, h)?;
            let a = block.self_attn.forward(g, store, n, n, self_spec.clone())?;
            h = g.add(h, a)?;
            if let Some((ln, cross)) = &block.cross {
                let (mem, mem_len) =
                    memory.ok_or_else(|| Error::shape("decoder", "missing memory"))?;
                let spec = AttentionSpec {
                    heads: 1,
                    blocks: layout.sequences,
                    q_len: layout.len,
                    k_len: mem_len,
                    key_valid: vec![true; layout.sequences * mem_len],
                    causal: false,
                };
                let n = ln.forward(g, store, h)?;
                let a = cross.forward(g, store, n, mem, spec)?;
                h = g.add(h, a)?;
            }
            let n = block.ln_ff.forward(g, store, h)?;
            let f = block.ff_in.forward(g, store, n)?;
            let f = g.gelu(f);
            let f = block.ff_out.forward(g, store, f)?;
            h = g.add(h, f)?;
        }
        self.final_norm.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        group: Group,
        din: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w_x = store.insert_xavier(&format!("{name}.wx"), group, din, 4 * hidden, rng)?;
        let w_h = store.insert_xavier(&format!("{name}.wh"), group, hidden, 4 * hidden, rng)?;
        // Gate order i, f, g, o; forget bias starts at 1.
        let mut bias = vec![T::zero(); 4 * hidden];
        bias[hidden..2 * hidden]
            .iter_mut()
            .for_each(|b| *b = T::one());
        let b = store.insert(
            &format!("{name}.b"),
            group,
            Tensor::row(bias).reshape(vec![4 * hidden])?,
        )?;
        Ok(Self {
            w_x,
            w_h,
            b,
            hidden,
        })
    }

    fn cell<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        xw: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let hd = self.hidden;
        let wh = g.param(store, self.w_h);
        let b = g.param(store, self.b);
        let hw = g.matmul(h, wh)?;
        let z = g.add(xw, hw)?;
        let z = g.add_row(z, b)?;
        let i = g.slice_cols(z, 0, hd)?;
        let f = g.slice_cols(z, hd, hd)?;
        let gg = g.slice_cols(z, 2 * hd, hd)?;
        let o = g.slice_cols(z, 3 * hd, hd)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let gg = g.tanh(gg);
        let o = g.sigmoid(o);
        let fc = g.mul(f, c)?;
        let ig = g.mul(i, gg)?;
        let c2 = g.add(fc, ig)?;
        let tc = g.tanh(c2);
        let h2 = g.mul(o, tc)?;
        Ok((h2, c2))
    }
}

/// Output of a bidirectional LSTM over a stack of sequences.
pub struct BiLstmOutput {
    /// `[sequences * len, 2h]`, row `s * len + t` = `[fwd_t, bwd_t]`.
    pub states: Option<Var>,
    /// `[sequences, 2h]` = `[fwd state after the last valid step, bwd state at step 0]`.
    pub last: Var,
}

#[derive(Clone, Debug)]
pub struct BiLstmParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

/// Precomputed input projection of a bi-LSTM run.
pub enum LstmInput {
    /// Per-row inputs, `[sequences * len, din]`.
    Rows(Var),
    /// The same `[sequences, din]` input at every step.
    Repeated(Var),
}

impl BiLstmParams {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        group: Group,
        din: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            fwd: LstmParams::new(store, &format!("{name}.fwd"), group, din, hidden, rng)?,
            bwd: LstmParams::new(store, &format!("{name}.bwd"), group, din, hidden, rng)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden
    }

    /// Runs both directions. `lengths[s]` valid steps per sequence; steps at
    /// or beyond the length leave the state unchanged. `init` optionally
    /// gives `[h_fwd, c_fwd, h_bwd, c_bwd]`, each `[sequences, h]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        input: LstmInput,
        sequences: usize,
        len: usize,
        lengths: &[usize],
        init: Option<[Var; 4]>,
        keep_states: bool,
    ) -> Result<BiLstmOutput> {
        if len == 0 || sequences == 0 {
            return Err(Error::Empty("bilstm over an empty sequence".into()));
        }
        if lengths.len() != sequences || lengths.iter().any(|&l| l == 0 || l > len) {
            return Err(Error::shape(
                "bilstm",
                format!("lengths {lengths:?} for len {len}"),
            ));
        }
        let hd = self.hidden();
        let zero = || Tensor::zeros(&[sequences, hd]);
        let [hf, cf, hb, cb] = match init {
            Some(v) => v,
            None => {
                let z = [zero(), zero(), zero(), zero()];
                z.map(|t| g.constant(t))
            }
        };
        let (f_states, f_last) = self.direction(
            g,
            store,
            &self.fwd,
            &input,
            sequences,
            len,
            lengths,
            hf,
            cf,
            false,
            keep_states,
        )?;
        let (b_states, b_last) = self.direction(
            g,
            store,
            &self.bwd,
            &input,
            sequences,
            len,
            lengths,
            hb,
            cb,
            true,
            keep_states,
        )?;
        let last = g.concat_cols(&[f_last, b_last])?;
        let states = match (f_states, b_states) {
            (Some(f), Some(b)) => Some(g.concat_cols(&[f, b])?),
            _ => None,
        };
        Ok(BiLstmOutput { states, last })
    }

    #[allow(clippy::too_many_arguments)]
    fn direction<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        p: &LstmParams,
        input: &LstmInput,
        sequences: usize,
        len: usize,
        lengths: &[usize],
        mut h: Var,
        mut c: Var,
        reverse: bool,
        keep_states: bool,
    ) -> Result<(Option<Var>, Var)> {
        let wx = g.param(store, p.w_x);
        let projected = match input {
            LstmInput::Rows(x) => g.matmul(*x, wx)?,
            LstmInput::Repeated(x) => g.matmul(*x, wx)?,
        };
        let max_len = *lengths.iter().max().unwrap();
        let steps: Vec<usize> = if reverse {
            (0..len).rev().collect()
        } else {
            (0..len).collect()
        };
        let mut per_step: Vec<Option<Var>> = vec![None; len];
        for t in steps {
            let active: Vec<bool> = lengths.iter().map(|&l| t < l).collect();
            let carry = t >= max_len;
            if !carry {
                let xw = match input {
                    LstmInput::Rows(_) => {
                        g.gather(projected, (0..sequences).map(|s| s * len + t).collect())?
                    }
                    LstmInput::Repeated(_) => projected,
                };
                let (h2, c2) = p.cell(g, store, xw, h, c)?;
                if active.iter().all(|&a| a) {
                    h = h2;
                    c = c2;
                } else {
                    let m = Tensor::matrix(
                        sequences,
                        1,
                        active
                            .iter()
                            .map(|&a| if a { T::one() } else { T::zero() })
                            .collect(),
                    )?;
                    let m = g.constant(m);
                    h = blend(g, h, h2, m)?;
                    c = blend(g, c, c2, m)?;
                }
            }
            per_step[t] = Some(h);
        }
        let states = if keep_states {
            let rows: Vec<Var> = per_step
                .into_iter()
                .map(|v| v.expect("every step visited"))
                .collect();
            let stacked = g.concat_rows(&rows)?;
            let idx = (0..sequences)
                .flat_map(|s| (0..len).map(move |t| t * sequences + s))
                .collect();
            Some(g.gather(stacked, idx)?)
        } else {
            None
        };
        Ok((states, h))
    }
}

/// `old + m ⊙ (new - old)` with a per-row 0/1 mask.
fn blend<T: Scalar>(g: &mut Graph<T>, old: Var, new: Var, mask: Var) -> Result<Var> {
    let d = g.sub(new, old)?;
    let d = g.mul_col(d, mask)?;
    g.add(old, d)
}

/// Row indices of all width-`w` windows of `blocks` sequences of `len` rows,
/// window-major within a sequence: returns, for each offset `j < w`, the
/// index list selecting row `t + j` of every window start `t`.
pub fn window_indices(blocks: usize, len: usize, w: usize) -> Vec<Vec<usize>> {
    let starts = len + 1 - w;
    (0..w)
        .map(|j| {
            (0..blocks)
                .flat_map(|b| (0..starts).map(move |t| b * len + t + j))
                .collect()
        })
        .collect()
}
