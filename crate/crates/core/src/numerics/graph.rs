//! Define-by-run reverse-mode differentiation over matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! through [`Graph::param`] and their gradients are accumulated into the
//! [`ParameterStore`] by [`Graph::backward`]. The graph is rebuilt for every
//! step so sampling may differ between steps.

use std::collections::HashMap;

use super::params::{ParamId, ParameterStore};
use super::tensor::{gemm_acc, gemm_at_acc, gemm_bt_acc, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Block-structured multi-head attention layout.
///
/// Queries are `blocks * q_len` rows, keys/values `blocks * k_len` rows;
/// block `b` of the queries attends only to block `b` of the keys.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub heads: usize,
    pub blocks: usize,
    pub q_len: usize,
    pub k_len: usize,
    /// `blocks * k_len` flags, `true` for keys that may be attended.
    pub key_valid: Vec<bool>,
    pub causal: bool,
}

impl AttentionSpec {
    pub fn single(q_len: usize, k_len: usize) -> Self {
        Self {
            heads: 1,
            blocks: 1,
            q_len,
            k_len,
            key_valid: vec![true; k_len],
            causal: false,
        }
    }
}

enum Op<T> {
    Input,
    Param,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    OneMinus(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softplus(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<T>,
    },
    PoolBlocks {
        x: Var,
        block: usize,
        groups: Vec<Vec<usize>>,
    },
    MaxPoolBlocks {
        x: Var,
        argmax: Vec<usize>,
    },
    NormDistance {
        a: Var,
        b: Var,
        blocks: Vec<Vec<usize>>,
        cache: Vec<NormCache<T>>,
    },
}

struct NormCache<T> {
    na: T,
    nb: T,
    dist: T,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    detached: Vec<Tensor<T>>,
    replay: Option<Vec<Tensor<T>>>,
    attention_ops: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            detached: Vec::new(),
            replay: None,
            attention_ops: 0,
        }
    }

    /// A graph whose `detach` calls return the given values in order instead
    /// of copying their input. Finite-difference checks use this to hold
    /// stop-gradient quantities fixed.
    pub fn with_replay(values: Vec<Tensor<T>>) -> Self {
        let mut g = Self::new();
        g.replay = Some(values);
        g
    }

    /// Values produced by `detach`, in call order.
    pub fn take_detached(&mut self) -> Vec<Tensor<T>> {
        std::mem::take(&mut self.detached)
    }

    /// Number of attention score evaluations recorded so far.
    pub fn attention_ops(&self) -> u64 {
        self.attention_ops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        dims(&self.nodes[v.0].value)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, store: &ParameterStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    /// Stop-gradient copy of `v`.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = match &mut self.replay {
            Some(list) => {
                let idx = self.detached.len();
                let t = list
                    .get(idx)
                    .cloned()
                    .ok_or_else(|| Error::shape("detach", "replay list exhausted"))?;
                if t.shape() != self.nodes[v.0].value.shape() {
                    return Err(Error::shape("detach", "replayed value shape differs"));
                }
                t
            }
            None => self.nodes[v.0].value.clone(),
        };
        self.detached.push(value.clone());
        Ok(self.push(value, Op::Input))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul_bt",
                format!("[{m},{k}] x [{n},{k2}]^T"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_bt_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulBT(a, b)))
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if dims(va) != dims(vb) {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::matrix(va.rows(), va.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds a `[1, c]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.value(row).len() != c {
            return Err(Error::shape(
                "add_row",
                format!("[{r},{c}] + {:?}", self.value(row).shape()),
            ));
        }
        let rv = self.value(row).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(&rv) {
                *o += b;
            }
        }
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::AddRow(a, row)))
    }

    /// Multiplies every row of `a` elementwise by a `[1, c]` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.value(row).len() != c {
            return Err(Error::shape(
                "mul_row",
                format!("[{r},{c}] * {:?}", self.value(row).shape()),
            ));
        }
        let rv = self.value(row).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(&rv) {
                *o *= b;
            }
        }
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::MulRow(a, row)))
    }

    /// Scales row `i` of `a` by `col[i]` where `col` is `[r, 1]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.value(col).len() != r {
            return Err(Error::shape(
                "mul_col",
                format!("[{r},{c}] * {:?}", self.value(col).shape()),
            ));
        }
        let cv = self.value(col).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for (chunk, &s) in out.chunks_mut(c).zip(&cv) {
            for o in chunk.iter_mut() {
                *o *= s;
            }
        }
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::MulCol(a, col)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(a);
        let (r, c) = dims(v);
        Tensor::matrix(r, c, v.data().iter().map(|&x| f(x)).collect()).expect("unary shape")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.unary(a, |x| x * s);
        self.push(t, Op::Scale(a, s))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| T::one() - x);
        self.push(t, Op::OneMinus(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x.tanh());
        self.push(t, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.unary(a, sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.unary(a, gelu);
        self.push(t, Op::Gelu(a))
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.unary(a, softplus);
        self.push(t, Op::Softplus(a))
    }

    /// `ln σ(x) = -softplus(-x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let n = self.scale(a, -T::one());
        let s = self.softplus(n);
        self.scale(s, -T::one())
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let c = self.shape(a).1;
        self.group_softmax(a, c).expect("full-row softmax")
    }

    /// Softmax over consecutive groups of `group` columns within each row.
    pub fn group_softmax(&mut self, a: Var, group: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if group == 0 || c % group != 0 {
            return Err(Error::shape(
                "group_softmax",
                format!("{c} columns, group {group}"),
            ));
        }
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(group) {
            softmax_in_place(chunk);
        }
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::Softmax(a, group)))
    }

    /// Per-row normalisation to zero mean, unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let (r, c) = self.shape(a);
        let x = self.value(a).data();
        let n = T::from_usize(c).unwrap();
        let mut xhat = vec![T::zero(); r * c];
        let mut inv_std = vec![T::zero(); r];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * is;
            }
        }
        let value = Tensor::matrix(r, c, xhat.clone()).expect("layer_norm shape");
        self.push(
            value,
            Op::LayerNorm {
                x: a,
                xhat,
                inv_std,
            },
        )
    }

    /// Selects rows of `a` by index; indices may repeat.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather", format!("row {bad} of {r}")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let n = idx.len();
        Ok(self.push(Tensor::matrix(n, c, out)?, Op::Gather(a, idx)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != r) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        Ok(self.push(
            Tensor::matrix(r, total, out)?,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.shape(parts[0]).1;
        if parts.iter().any(|&p| self.shape(p).1 != c) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let r = out.len() / c.max(1);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {c}")));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.value(a).row_slice(i)[start..start + len]);
        }
        Ok(self.push(Tensor::matrix(r, len, out)?, Op::SliceCols(a, start)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::row(vec![s]), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len().max(1)).unwrap();
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// `Σ_i weights[i] · (-ln softmax(logits_i)[targets[i]])`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
    ) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if targets.len() != r || weights.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                format!("{r} rows, {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape(
                "cross_entropy",
                format!("target {bad} of {c} classes"),
            ));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (i, chunk) in probs.chunks_mut(c).enumerate() {
            let lse = log_sum_exp(chunk);
            let lt = chunk[targets[i]];
            if weights[i] != T::zero() {
                loss += weights[i] * (lse - lt);
            }
            for v in chunk.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        Ok(self.push(
            Tensor::row(vec![loss]),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            },
        ))
    }

    /// Scaled dot-product attention per block and head with scale
    /// `1/sqrt(d_head)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qr, d) = self.shape(q);
        let (kr, dk) = self.shape(k);
        let (vr, dv) = self.shape(v);
        let AttentionSpec {
            heads,
            blocks,
            q_len,
            k_len,
            causal,
            ..
        } = spec;
        if d != dk
            || kr != vr
            || qr != blocks * q_len
            || kr != blocks * k_len
            || spec.key_valid.len() != kr
            || heads == 0
            || d % heads != 0
            || dv % heads != 0
            || (causal && q_len != k_len)
        {
            return Err(Error::shape(
                "attention",
                format!("q [{qr},{d}] k [{kr},{dk}] v [{vr},{dv}] blocks {blocks} heads {heads}"),
            ));
        }
        let dh = d / heads;
        let dvh = dv / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![T::zero(); blocks * heads * q_len * k_len];
        let mut out = vec![T::zero(); qr * dv];
        let mut row = vec![T::zero(); k_len];
        for b in 0..blocks {
            for h in 0..heads {
                for i in 0..q_len {
                    let qi = (b * q_len + i) * d + h * dh;
                    let mut any = false;
                    let mut max = T::neg_infinity();
                    for (j, slot) in row.iter_mut().enumerate() {
                        let kj = b * k_len + j;
                        if !spec.key_valid[kj] || (causal && j > i) {
                            *slot = T::neg_infinity();
                            continue;
                        }
                        any = true;
                        let mut s = T::zero();
                        for t in 0..dh {
                            s += qd[qi + t] * kd[kj * d + h * dh + t];
                        }
                        *slot = s * scale;
                        if *slot > max {
                            max = *slot;
                        }
                    }
                    if !any {
                        return Err(Error::shape(
                            "attention",
                            format!("query {i} of block {b} has no valid key"),
                        ));
                    }
                    let mut z = T::zero();
                    for slot in row.iter_mut() {
                        *slot = if slot.is_finite() {
                            (*slot - max).exp()
                        } else {
                            T::zero()
                        };
                        z += *slot;
                    }
                    let pbase = ((b * heads + h) * q_len + i) * k_len;
                    let obase = (b * q_len + i) * dv + h * dvh;
                    for j in 0..k_len {
                        let p = row[j] / z;
                        probs[pbase + j] = p;
                        if p == T::zero() {
                            continue;
                        }
                        let vj = (b * k_len + j) * dv + h * dvh;
                        for t in 0..dvh {
                            out[obase + t] += p * vd[vj + t];
                        }
                    }
                }
            }
        }
        self.attention_ops += (blocks * heads * q_len * k_len) as u64;
        Ok(self.push(
            Tensor::matrix(qr, dv, out)?,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
        ))
    }

    /// Output block `g` (of `block` rows) is the mean of input blocks `groups[g]`.
    pub fn pool_blocks(&mut self, x: Var, block: usize, groups: Vec<Vec<usize>>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if block == 0 || r % block != 0 {
            return Err(Error::shape(
                "pool_blocks",
                format!("{r} rows, block {block}"),
            ));
        }
        let nb = r / block;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); groups.len() * block * c];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() || members.iter().any(|&m| m >= nb) {
                return Err(Error::shape(
                    "pool_blocks",
                    format!("invalid group {members:?}"),
                ));
            }
            let inv = T::one() / T::from_usize(members.len()).unwrap();
            let dst = &mut out[g * block * c..(g + 1) * block * c];
            for &m in members {
                for (o, &s) in dst.iter_mut().zip(&src[m * block * c..(m + 1) * block * c]) {
                    *o += s;
                }
            }
            dst.iter_mut().for_each(|o| *o *= inv);
        }
        let n = groups.len() * block;
        Ok(self.push(
            Tensor::matrix(n, c, out)?,
            Op::PoolBlocks { x, block, groups },
        ))
    }

    /// Column-wise maximum over each block of `block` rows.
    pub fn max_pool_blocks(&mut self, x: Var, block: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if block == 0 || r % block != 0 {
            return Err(Error::shape(
                "max_pool_blocks",
                format!("{r} rows, block {block}"),
            ));
        }
        let nb = r / block;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); nb * c];
        let mut argmax = vec![0; nb * c];
        for b in 0..nb {
            for j in 0..c {
                let mut best = b * block;
                for i in b * block..(b + 1) * block {
                    if src[i * c + j] > src[best * c + j] {
                        best = i;
                    }
                }
                out[b * c + j] = src[best * c + j];
                argmax[b * c + j] = best;
            }
        }
        Ok(self.push(Tensor::matrix(nb, c, out)?, Op::MaxPoolBlocks { x, argmax }))
    }

    /// For every block of row indices, the distance
    /// `‖a_B/‖a_B‖ - b_B/‖b_B‖‖` over the flattened rows. Blocks where
    /// either side has zero norm yield 0 and are reported in the second
    /// return value.
    pub fn normalized_distance(
        &mut self,
        a: Var,
        b: Var,
        blocks: Vec<Vec<usize>>,
    ) -> Result<(Var, Vec<usize>)> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("normalized_distance", "operand shapes differ"));
        }
        let (r, c) = self.shape(a);
        if blocks.iter().flatten().any(|&i| i >= r) {
            return Err(Error::shape(
                "normalized_distance",
                "row index out of range",
            ));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(blocks.len());
        let mut cache = Vec::with_capacity(blocks.len());
        let mut skipped = Vec::new();
        for (bi, rows) in blocks.iter().enumerate() {
            let mut na = T::zero();
            let mut nb = T::zero();
            for &i in rows {
                for j in 0..c {
                    na += ad[i * c + j] * ad[i * c + j];
                    nb += bd[i * c + j] * bd[i * c + j];
                }
            }
            let (na, nb) = (na.sqrt(), nb.sqrt());
            if na == T::zero() || nb == T::zero() {
                skipped.push(bi);
                out.push(T::zero());
                cache.push(NormCache {
                    na,
                    nb,
                    dist: T::zero(),
                });
                continue;
            }
            let mut d2 = T::zero();
            for &i in rows {
                for j in 0..c {
                    let e = ad[i * c + j] / na - bd[i * c + j] / nb;
                    d2 += e * e;
                }
            }
            let dist = d2.sqrt();
            out.push(dist);
            cache.push(NormCache { na, nb, dist });
        }
        let n = out.len();
        let v = self.push(
            Tensor::matrix(n, 1, out)?,
            Op::NormDistance {
                a,
                b,
                blocks,
                cache,
            },
        );
        Ok((v, skipped))
    }

    /// Errors if any recorded value is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        for node in &self.nodes {
            if !node.value.is_finite() {
                return Err(Error::NonFinite(op_name(&node.op).to_string()));
            }
        }
        Ok(())
    }

    /// Reverse pass from a scalar `loss`; returns the gradient of every node
    /// (`None` where no gradient reached).
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Vec<T>>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss has shape {:?}", self.value(loss).shape()),
            ));
        }
        self.check_finite()?;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("backward".into()));
            }
        }
        Ok(grads)
    }

    /// Reverse pass accumulating parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (&id, &var) in &self.params {
            if let Some(g) = &grads[var.0] {
                for (dst, &src) in store.grad_mut(id).data_mut().iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let (r, c) = dims(&node.value);
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                let ga = acc(grads, *a, m * k);
                gemm_bt_acc(g, self.value(*b).data(), ga, m, n, k);
                let gb = acc(grads, *b, k * n);
                gemm_at_acc(self.value(*a).data(), g, gb, m, k, n);
            }
            Op::MatMulBT(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).0;
                let ga = acc(grads, *a, m * k);
                gemm_acc(g, self.value(*b).data(), ga, m, n, k);
                let gb = acc(grads, *b, n * k);
                gemm_at_acc(g, self.value(*a).data(), gb, m, n, k);
            }
            Op::Add(a, b) => {
                add_into(acc(grads, *a, g.len()), g);
                add_into(acc(grads, *b, g.len()), g);
            }
            Op::Sub(a, b) => {
                add_into(acc(grads, *a, g.len()), g);
                let gb = acc(grads, *b, g.len());
                for (d, &s) in gb.iter_mut().zip(g) {
                    *d -= s;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * vb[i];
                }
                let gb = acc(grads, *b, g.len());
                for i in 0..g.len() {
                    gb[i] += g[i] * va[i];
                }
            }
            Op::AddRow(a, row) => {
                add_into(acc(grads, *a, g.len()), g);
                let gr = acc(grads, *row, c);
                for chunk in g.chunks(c) {
                    add_into(gr, chunk);
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row).data();
                let av = self.value(*a).data();
                let ga = acc(grads, *a, g.len());
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[i * c + j] * rv[j];
                    }
                }
                let gr = acc(grads, *row, c);
                for i in 0..r {
                    for j in 0..c {
                        gr[j] += g[i * c + j] * av[i * c + j];
                    }
                }
            }
            Op::MulCol(a, col) => {
                let cv = self.value(*col).data();
                let av = self.value(*a).data();
                let ga = acc(grads, *a, g.len());
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[i * c + j] * cv[i];
                    }
                }
                let gc = acc(grads, *col, r);
                for i in 0..r {
                    let mut s = T::zero();
                    for j in 0..c {
                        s += g[i * c + j] * av[i * c + j];
                    }
                    gc[i] += s;
                }
            }
            Op::Scale(a, s) => {
                let ga = acc(grads, *a, g.len());
                for (d, &x) in ga.iter_mut().zip(g) {
                    *d += x * *s;
                }
            }
            Op::OneMinus(a) => {
                let ga = acc(grads, *a, g.len());
                for (d, &x) in ga.iter_mut().zip(g) {
                    *d -= x;
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * (T::one() - y[i] * y[i]);
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (T::one() - y[i]);
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * gelu_grad(x[i]);
                }
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * sigmoid(x[i]);
                }
            }
            Op::Softmax(a, group) => {
                let y = node.value.data();
                let ga = acc(grads, *a, g.len());
                for start in (0..g.len()).step_by(*group) {
                    let end = start + group;
                    let dot: T = (start..end).map(|i| g[i] * y[i]).sum();
                    for i in start..end {
                        ga[i] += y[i] * (g[i] - dot);
                    }
                }
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let n = T::from_usize(c).unwrap();
                let ga = acc(grads, *x, g.len());
                for i in 0..r {
                    let gr = &g[i * c..(i + 1) * c];
                    let xr = &xhat[i * c..(i + 1) * c];
                    let mg = gr.iter().copied().sum::<T>() / n;
                    let mgx = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for j in 0..c {
                        ga[i * c + j] += inv_std[i] * (gr[j] - mg - xr[j] * mgx);
                    }
                }
            }
            Op::Gather(a, idx) => {
                let ac = self.shape(*a);
                let ga = acc(grads, *a, ac.0 * ac.1);
                for (out_row, &src_row) in idx.iter().enumerate() {
                    let dst = &mut ga[src_row * c..(src_row + 1) * c];
                    add_into(dst, &g[out_row * c..(out_row + 1) * c]);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.shape(p);
                    let gp = acc(grads, p, pr * pc);
                    for i in 0..r {
                        add_into(
                            &mut gp[i * pc..(i + 1) * pc],
                            &g[i * c + offset..i * c + offset + pc],
                        );
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    add_into(acc(grads, p, n), &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::SliceCols(a, start) => {
                let (ar, ac) = self.shape(*a);
                let ga = acc(grads, *a, ar * ac);
                for i in 0..r {
                    add_into(
                        &mut ga[i * ac + start..i * ac + start + c],
                        &g[i * c..(i + 1) * c],
                    );
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                let ga = acc(grads, *a, n);
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let (lr, lc) = self.shape(*logits);
                let gl = acc(grads, *logits, lr * lc);
                for i in 0..lr {
                    let w = weights[i] * g[0];
                    if w == T::zero() {
                        continue;
                    }
                    for j in 0..lc {
                        let mut d = probs[i * lc + j];
                        if j == targets[i] {
                            d -= T::one();
                        }
                        gl[i * lc + j] += w * d;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => self.backprop_attention(*q, *k, *v, spec, probs, g, grads),
            Op::PoolBlocks { x, block, groups } => {
                let (xr, xc) = self.shape(*x);
                let gx = acc(grads, *x, xr * xc);
                let bl = block * xc;
                for (gi, members) in groups.iter().enumerate() {
                    let inv = T::one() / T::from_usize(members.len()).unwrap();
                    let src = &g[gi * bl..(gi + 1) * bl];
                    for &m in members {
                        for (d, &s) in gx[m * bl..(m + 1) * bl].iter_mut().zip(src) {
                            *d += s * inv;
                        }
                    }
                }
            }
            Op::MaxPoolBlocks { x, argmax, .. } => {
                let (xr, xc) = self.shape(*x);
                let gx = acc(grads, *x, xr * xc);
                for (o, &src) in argmax.iter().enumerate() {
                    let j = o % xc;
                    gx[src * xc + j] += g[o];
                }
            }
            Op::NormDistance {
                a,
                b,
                blocks,
                cache,
            } => {
                let (ar, ac) = self.shape(*a);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![T::zero(); ar * ac];
                let mut gb = vec![T::zero(); ar * ac];
                for (bi, rows) in blocks.iter().enumerate() {
                    let NormCache { na, nb, dist } = cache[bi];
                    if dist == T::zero() {
                        continue;
                    }
                    // d/du of ‖u/‖u‖ - w‖ is (I - ûûᵀ) e / (‖u‖ dist), e = û - ŵ.
                    let mut ea = T::zero();
                    let mut eb = T::zero();
                    for &i in rows {
                        for j in 0..ac {
                            let e = av[i * ac + j] / na - bv[i * ac + j] / nb;
                            ea += e * av[i * ac + j] / na;
                            eb += e * bv[i * ac + j] / nb;
                        }
                    }
                    let s = g[bi] / dist;
                    for &i in rows {
                        for j in 0..ac {
                            let p = i * ac + j;
                            let (ua, ub) = (av[p] / na, bv[p] / nb);
                            let e = ua - ub;
                            ga[p] += s * (e - ua * ea) / na;
                            gb[p] -= s * (e - ub * eb) / nb;
                        }
                    }
                }
                add_into(acc(grads, *a, ar * ac), &ga);
                add_into(acc(grads, *b, ar * ac), &gb);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (qr, d) = self.shape(q);
        let (kr, dv) = (self.shape(k).0, self.shape(v).1);
        let AttentionSpec {
            heads,
            blocks,
            q_len,
            k_len,
            ..
        } = *spec;
        let dh = d / heads;
        let dvh = dv / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut gq = vec![T::zero(); qr * d];
        let mut gk = vec![T::zero(); kr * d];
        let mut gv = vec![T::zero(); kr * dv];
        let mut dp = vec![T::zero(); k_len];
        for b in 0..blocks {
            for h in 0..heads {
                for i in 0..q_len {
                    let pbase = ((b * heads + h) * q_len + i) * k_len;
                    let obase = (b * q_len + i) * dv + h * dvh;
                    let mut dot = T::zero();
                    for j in 0..k_len {
                        let p = probs[pbase + j];
                        if p == T::zero() {
                            dp[j] = T::zero();
                            continue;
                        }
                        let vj = (b * k_len + j) * dv + h * dvh;
                        let mut s = T::zero();
                        for t in 0..dvh {
                            s += g[obase + t] * vd[vj + t];
                            gv[vj + t] += p * g[obase + t];
                        }
                        dp[j] = s;
                        dot += p * s;
                    }
                    let qi = (b * q_len + i) * d + h * dh;
                    for j in 0..k_len {
                        let p = probs[pbase + j];
                        if p == T::zero() {
                            continue;
                        }
                        let ds = p * (dp[j] - dot) * scale;
                        let kj = (b * k_len + j) * d + h * dh;
                        for t in 0..dh {
                            gq[qi + t] += ds * kd[kj + t];
                            gk[kj + t] += ds * qd[qi + t];
                        }
                    }
                }
            }
        }
        add_into(acc(grads, q, qr * d), &gq);
        add_into(acc(grads, k, kr * d), &gk);
        add_into(acc(grads, v, kr * dv), &gv);
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param => "param",
        Op::MatMul(..) | Op::MatMulBT(..) => "matmul",
        Op::Add(..) | Op::Sub(..) | Op::Mul(..) => "elementwise",
        Op::AddRow(..) | Op::MulRow(..) | Op::MulCol(..) => "broadcast",
        Op::Scale(..) | Op::OneMinus(_) => "scale",
        Op::Tanh(_) | Op::Sigmoid(_) | Op::Gelu(_) | Op::Softplus(_) => "activation",
        Op::Softmax(..) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gather(..) | Op::ConcatCols(_) | Op::ConcatRows(_) | Op::SliceCols(..) => "indexing",
        Op::Sum(_) => "sum",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Attention { .. } => "attention",
        Op::PoolBlocks { .. } | Op::MaxPoolBlocks { .. } => "pooling",
        Op::NormDistance { .. } => "normalized_distance",
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Exact GELU, `x · Φ(x)`.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    x * half * (T::one() + (x / T::lit(std::f64::consts::SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x / T::lit(std::f64::consts::SQRT_2)).erf());
    let pdf = (-half * x * x).exp() / T::lit((2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

pub(crate) fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    max + xs.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in xs.iter_mut() {
        *x /= z;
    }
}
