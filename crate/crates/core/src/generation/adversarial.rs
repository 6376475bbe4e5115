use rand::Rng;

use super::noise::NoiseStats;
use crate::error::{Error, Result};
use crate::inlevel_coherence::checker_logit;
use crate::model::Model;
use crate::numerics::layers::window_indices;
use crate::numerics::{Adam, Graph, Group, Tensor, Var};
use crate::pndb::generate_answer_matrix;
use crate::recon_losses::{decode_children, decompress, token_logits};
use crate::scalar::Scalar;

/// `L` dense layers on the noise, tanh between them.
pub fn generate_vector<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    level: usize,
    noise: Var,
) -> Result<Var> {
    model.hops[level - 1]
        .generator
        .forward(g, &model.store, noise)
}

/// Differentiable free-running decode of the children of every parent,
/// `[n * S_k, D_k]`. Each step feeds back the decoder output; the token
/// level feeds back the softmax-weighted embedding instead.
pub fn free_run<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    k: usize,
    parents: Var,
) -> Result<Var> {
    let s = model.cap(k);
    let n = g.shape(parents).0;
    let memory = decompress(g, model, k, parents, s)?;
    let pad = g.param(&model.store, model.hops[k].pad);
    let start = g.gather(pad, vec![0; n])?;
    let mut inputs = vec![start];
    let mut outs = Vec::with_capacity(s);
    for t in 0..s {
        let stacked = g.concat_rows(&inputs)?;
        let teacher = g.gather(
            stacked,
            (0..n)
                .flat_map(|q| (0..=t).map(move |j| j * n + q))
                .collect(),
        )?;
        let y = decode_children(
            g,
            model,
            k,
            memory,
            teacher,
            vec![true; n * (t + 1)],
            n,
            t + 1,
        )?;
        let yt = g.gather(y, (0..n).map(|q| q * (t + 1) + t).collect())?;
        let child = if k == 0 {
            let logits = token_logits(g, model, yt)?;
            let p = g.softmax(logits);
            let e = g.param(&model.store, model.tokens.embedding);
            g.matmul(p, e)?
        } else {
            yt
        };
        outs.push(child);
        inputs.push(child);
    }
    let stacked = g.concat_rows(&outs)?;
    g.gather(
        stacked,
        (0..n)
            .flat_map(|q| (0..s).map(move |t| t * n + q))
            .collect(),
    )
}

/// Discriminator logits for level-`level` vectors: decoded child matrix,
/// width-`w` convolutions with tanh and max-over-time pooling, and (at the
/// document level with the PNDB on) a pooled answer-matrix branch.
pub fn discriminator_logits<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    level: usize,
    vectors: Var,
    answers: Option<Var>,
) -> Result<Var> {
    let k = level - 1;
    let d = &model.hops[k].discriminator;
    let s = model.cap(k);
    let n = g.shape(vectors).0;
    let x = free_run(g, model, k, vectors)?;
    let mut feats = Vec::with_capacity(d.convs.len() + 1);
    for (w, dense) in &d.convs {
        let parts = window_indices(n, s, *w)
            .into_iter()
            .map(|idx| g.gather(x, idx))
            .collect::<Result<Vec<_>>>()?;
        let win = g.concat_cols(&parts)?;
        let h = dense.forward(g, &model.store, win)?;
        let h = g.tanh(h);
        feats.push(g.max_pool_blocks(h, s + 1 - w)?);
    }
    match (&d.answers, answers) {
        (Some(p), Some(a)) => {
            let h = p.forward(g, &model.store, a)?;
            let h = g.tanh(h);
            feats.push(g.max_pool_blocks(h, model.config.pndb.questions)?);
        }
        (Some(_), None) => {
            return Err(Error::shape(
                "discriminator",
                "answer matrix required at this level",
            ))
        }
        (None, Some(_)) => {
            return Err(Error::shape(
                "discriminator",
                "this level takes no answer matrix",
            ))
        }
        (None, None) => {}
    }
    let f = g.concat_cols(&feats)?;
    d.out.forward(g, &model.store, f)
}

/// Probability that each vector came from the data.
pub fn discriminate<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    level: usize,
    vectors: Var,
    answers: Option<Var>,
) -> Result<Var> {
    let l = discriminator_logits(g, model, level, vectors, answers)?;
    Ok(g.sigmoid(l))
}

/// Binary cross-entropy with real = 1 and fake = 0, averaged over all
/// `2n` samples.
pub fn discriminator_loss<T: Scalar>(
    g: &mut Graph<T>,
    real_logits: Var,
    fake_logits: Var,
) -> Result<Var> {
    let n = g.shape(real_logits).0 + g.shape(fake_logits).0;
    let neg = g.scale(real_logits, -T::one());
    let a = g.softplus(neg);
    let b = g.softplus(fake_logits);
    let sa = g.sum(a);
    let sb = g.sum(b);
    let s = g.add(sa, sb)?;
    Ok(g.scale(s, T::one() / T::from_usize(n).unwrap()))
}

/// Non-saturating generator loss `mean(−ln D(G(z)))`.
pub fn generator_loss<T: Scalar>(g: &mut Graph<T>, fake_logits: Var) -> Var {
    let l = g.log_sigmoid(fake_logits);
    let m = g.mean(l);
    g.scale(m, -T::one())
}

/// Whether level `level` discriminates answer matrices too.
pub fn uses_answers<T>(model: &Model<T>, level: usize) -> bool {
    model.hops[level - 1].discriminator.answers.is_some()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdversarialLosses {
    pub d_loss: f64,
    pub g_loss: f64,
}

/// One discriminator update followed by one generator update at `level`.
/// Only discriminator, generator (and at the document level the answer
/// generator) parameters change.
pub fn adversarial_step<T: Scalar, R: Rng>(
    model: &mut Model<T>,
    level: usize,
    real: &Tensor<T>,
    real_answers: Option<&Tensor<T>>,
    stats: &NoiseStats,
    adam: &Adam,
    rng: &mut R,
) -> Result<AdversarialLosses> {
    let n = real.rows();
    if n == 0 {
        return Err(Error::Empty("adversarial step without real vectors".into()));
    }
    let answers = uses_answers(model, level);
    let q = model.config.pndb.questions;
    let noise: Tensor<T> = stats.sample(level, n, rng)?;
    let token_noise: Option<Tensor<T>> = if answers {
        Some(stats.sample(0, n * q, rng)?)
    } else {
        None
    };
    if answers != real_answers.is_some() {
        return Err(Error::shape(
            "adversarial_step",
            "real answer matrices do not match the level",
        ));
    }

    let mut g = Graph::new();
    let z = g.constant(noise.clone());
    let fake = generate_vector(&mut g, model, level, z)?;
    let fake_answers = match &token_noise {
        Some(tn) => {
            let nz = g.constant(tn.clone());
            let a = generate_answer_matrix(&mut g, model, fake, nz)?;
            Some(g.detach(a)?)
        }
        None => None,
    };
    let fake = g.detach(fake)?;
    let real_v = g.constant(real.clone());
    let real_a = real_answers.map(|a| g.constant(a.clone()));
    let lr = discriminator_logits(&mut g, model, level, real_v, real_a)?;
    let lf = discriminator_logits(&mut g, model, level, fake, fake_answers)?;
    let d_loss = discriminator_loss(&mut g, lr, lf)?;
    let d_value = g.scalar(d_loss).as_f64();
    g.backward(d_loss, &mut model.store)?;
    let ids = model.discriminator_ids(level);
    adam.step(&mut model.store, &ids)?;

    let mut g = Graph::new();
    let z = g.constant(noise);
    let fake = generate_vector(&mut g, model, level, z)?;
    let fake_answers = match token_noise {
        Some(tn) => {
            let nz = g.constant(tn);
            Some(generate_answer_matrix(&mut g, model, fake, nz)?)
        }
        None => None,
    };
    let lf = discriminator_logits(&mut g, model, level, fake, fake_answers)?;
    let g_loss = generator_loss(&mut g, lf);
    let g_value = g.scalar(g_loss).as_f64();
    g.backward(g_loss, &mut model.store)?;
    let mut ids = model.generator_ids(level);
    if answers {
        ids.extend(model.store.ids_in(&[Group::PndbGenerator]));
    }
    adam.step(&mut model.store, &ids)?;
    Ok(AdversarialLosses {
        d_loss: d_value,
        g_loss: g_value,
    })
}

/// The level's coherence checker as a fixed scorer: `1 − CC(v)`.
pub fn cc_as_discriminator<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    level: usize,
    vectors: Var,
) -> Result<Var> {
    let z = checker_logit(g, model, level - 1, vectors)?;
    let neg = g.scale(z, -T::one());
    Ok(g.sigmoid(neg))
}

/// Generator update against the frozen checker, loss `mean(−ln(1 − CC))`.
pub fn generator_only_step<T: Scalar, R: Rng>(
    model: &mut Model<T>,
    level: usize,
    batch: usize,
    stats: &NoiseStats,
    adam: &Adam,
    rng: &mut R,
) -> Result<f64> {
    let noise: Tensor<T> = stats.sample(level, batch, rng)?;
    let mut g = Graph::new();
    let z = g.constant(noise);
    let fake = generate_vector(&mut g, model, level, z)?;
    let logit = checker_logit(&mut g, model, level - 1, fake)?;
    let l = g.softplus(logit);
    let loss = g.mean(l);
    let value = g.scalar(loss).as_f64();
    g.backward(loss, &mut model.store)?;
    let ids = model.generator_ids(level);
    adam.step(&mut model.store, &ids)?;
    Ok(value)
}

/// `‖μ_a − μ_b‖² + ‖Σ_a − Σ_b‖²_F` between the row distributions of two
/// matrices.
pub fn frechet_style_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    fn moments<T: Scalar>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
        let (n, d) = (x.rows(), x.cols());
        let mut mu = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mu.iter_mut().zip(x.row_slice(r)) {
                *m += v.as_f64() / n as f64;
            }
        }
        let mut cov = vec![0.0; d * d];
        for r in 0..n {
            let row = x.row_slice(r);
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] +=
                        (row[i].as_f64() - mu[i]) * (row[j].as_f64() - mu[j]) / n as f64;
                }
            }
        }
        (mu, cov)
    }
    let (ma, ca) = moments(a);
    let (mb, cb) = moments(b);
    let dm: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum();
    let dc: f64 = ca.iter().zip(&cb).map(|(x, y)| (x - y) * (x - y)).sum();
    dm + dc
}
