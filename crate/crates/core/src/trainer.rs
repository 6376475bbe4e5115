//! Training loop, metrics, gradient checks, evaluation, embedding and
//! generation entry points shared by the CLI and the tests.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{GanMode, PndbMode, RunConfig};
use crate::corpus::{
    encode_ids, make_batches, parse_nested, synthetic_corpus, Batch, DocumentTree, IdTree, Slot,
    SyntheticSpec, Vocabulary,
};
use crate::error::{Error, Result};
use crate::generation::{
    adversarial_step, copyedit_pass, discriminator_logits, discriminator_loss, emit_text,
    generate_vector, generator_loss, generator_only_step, hierarchical_decode, uses_answers,
    Decoder, EditRecord, GeneratedDvt,
};
use crate::hier_encoder::{build_dvt, encode_batch};
use crate::inlevel_coherence::checker_logit;
use crate::losses::{total_loss, LossOptions, Task};
use crate::model::Model;
use crate::numerics::gradcheck::{analytic_gradients, grad_check_against};
use crate::numerics::{grad_check, GradCheckOptions, Graph, Group, Tensor};
use crate::pndb::{generate_answer_matrix, pndb_write};
use crate::scalar::Scalar;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Stream offset separating adversarial-phase draws from main-phase draws.
const GAN_STREAM: u64 = 1 << 40;
const EVAL_STREAM: u64 = u64::MAX;

fn standard_normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..rows * cols)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data).expect("matching length")
}

fn step_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Documents from a `.jsonl` file, a single document file, or a directory
/// of `.json` files (sorted by name).
pub fn load_corpus(path: &Path) -> Result<Vec<DocumentTree>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.extension().is_some_and(|e| e == "json"));
        files.sort();
        return files
            .iter()
            .map(|f| parse_nested(&std::fs::read_to_string(f)?))
            .collect();
    }
    let text = std::fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e == "jsonl") {
        let mut out = Vec::new();
        for (i, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            out.push(parse_nested(line).map_err(|e| match e {
                Error::Parse {
                    column, message, ..
                } => Error::Parse {
                    line: i + 1,
                    column,
                    message,
                },
                e => e,
            })?);
        }
        Ok(out)
    } else {
        Ok(vec![parse_nested(&text)?])
    }
}

/// Fresh training state at step 0.
pub fn init_state<T: Scalar>(config: RunConfig, vocab: Vocabulary) -> Result<Checkpoint<T>> {
    config.validate()?;
    let model = Model::new(config.model.clone(), vocab.len(), config.seed()?)?;
    let noise = crate::generation::NoiseStats::new(&config.model.dims);
    Ok(Checkpoint {
        config,
        vocab,
        model,
        noise,
        step: 0,
        gan_step: 0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub phase: &'static str,
    pub components: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total: Option<f64>,
    pub grad_norm: f64,
    pub eps_auto: f64,
    /// Seconds since the run (or resume) started.
    pub wall_time: f64,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Checkpoint directory.
    pub out: Option<&'a Path>,
    pub metrics: Option<&'a mut dyn Write>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainSummary {
    /// Total loss of the first main step run in this call.
    pub first_total: Option<f64>,
    pub last_total: Option<f64>,
    pub steps: u64,
    pub gan_steps: u64,
}

fn save<T: Scalar>(state: &Checkpoint<T>, out: Option<&Path>) -> Result<()> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        state.save(&dir.join(CHECKPOINT_FILE))?;
    }
    Ok(())
}

fn emit(metrics: &mut Option<&mut dyn Write>, rec: &MetricsRecord) -> Result<()> {
    if let Some(w) = metrics {
        serde_json::to_writer(&mut **w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Token rows of a batch's level-0 inputs (noise statistics of level 0).
fn token_rows<T: Scalar>(
    g: &Graph<T>,
    input: crate::numerics::Var,
    batch: &Batch,
) -> Result<Tensor<T>> {
    let x = g.value(input);
    let rows: Vec<usize> = batch.levels[0].item_positions();
    let d = x.cols();
    Tensor::matrix(
        rows.len(),
        d,
        rows.iter()
            .flat_map(|&r| x.row_slice(r).iter().copied())
            .collect(),
    )
}

/// One optimizer step of the main network. The state is untouched when
/// the loss or the gradient is not finite.
pub fn main_step<T: Scalar>(
    state: &mut Checkpoint<T>,
    batch: &Batch,
) -> Result<(f64, BTreeMap<String, f64>, f64)> {
    let cfg = &state.config;
    let step = state.step;
    let opts = LossOptions::from_run(cfg, step as usize);
    let mut rng = step_rng(cfg.seed()?, step);
    let mut g = Graph::new();
    let out = total_loss(&mut g, &state.model, batch, &opts, &mut rng)?;
    g.backward(out.loss, &mut state.model.store)?;
    let ids = state.model.store.ids_in(&Group::MAIN);
    let norm = state.model.store.grad_norm(&ids).as_f64();
    if !norm.is_finite() {
        state.model.store.zero_grads();
        return Err(Error::NonFinite(format!("gradient at step {step}")));
    }
    for k in 1..=state.model.depth() {
        if opts.hops[k - 1] {
            state.noise.update(k, g.value(out.encoded.vectors(k)))?;
        }
    }
    state
        .noise
        .update(0, &token_rows(&g, out.encoded.hops[0].inputs, batch)?)?;
    let adam = state.config.optimizer;
    adam.step(&mut state.model.store, &ids)?;
    state.step += 1;
    let components = out.components.iter().map(|c| (c.key(), c.value)).collect();
    Ok((out.total, components, norm))
}

/// Real vectors of every level plus the document-level answer matrices.
fn real_vectors<T: Scalar>(
    model: &Model<T>,
    batch: &Batch,
) -> Result<(Vec<Tensor<T>>, Option<Tensor<T>>)> {
    let mut g = Graph::new();
    let enc = encode_batch(&mut g, model, batch)?;
    let vectors = (1..=model.depth())
        .map(|k| g.value(enc.vectors(k)).clone())
        .collect();
    let answers = if uses_answers(model, model.depth()) {
        let loo = model.config.pndb.mode == PndbMode::LeaveOneOut;
        let w = pndb_write(&mut g, model, enc.hops[0].contextual, &batch.levels[0], loo)?;
        Some(g.value(w.documents).clone())
    } else {
        None
    };
    Ok((vectors, answers))
}

/// One adversarial (or generator-only) step at every vector level.
pub fn gan_step<T: Scalar>(
    state: &mut Checkpoint<T>,
    batch: &Batch,
) -> Result<BTreeMap<String, f64>> {
    let (real, answers) = real_vectors(&state.model, batch)?;
    let mut rng = step_rng(state.config.seed()?, GAN_STREAM + state.gan_step);
    let adam = state.config.gan.optimizer;
    let names = state.model.level_names();
    let depth = state.model.depth();
    let mut out = BTreeMap::new();
    for level in 1..=depth {
        let r = &real[level - 1];
        match state.config.gan.mode {
            GanMode::Off => {}
            GanMode::PostTrain => {
                let a = if level == depth {
                    answers.as_ref()
                } else {
                    None
                };
                let l =
                    adversarial_step(&mut state.model, level, r, a, &state.noise, &adam, &mut rng)?;
                out.insert(format!("d_loss.{}", names[level]), l.d_loss);
                out.insert(format!("g_loss.{}", names[level]), l.g_loss);
            }
            GanMode::CcDiscriminator => {
                let l = generator_only_step(
                    &mut state.model,
                    level,
                    r.rows(),
                    &state.noise,
                    &adam,
                    &mut rng,
                )?;
                out.insert(format!("g_loss.{}", names[level]), l);
            }
        }
    }
    state.gan_step += 1;
    Ok(out)
}

/// Runs (or resumes) the main phase up to `config.steps`, then the
/// adversarial phase up to `config.gan.steps`. A non-finite step saves the
/// last good state and aborts.
pub fn train<T: Scalar>(
    state: &mut Checkpoint<T>,
    trees: &[IdTree],
    mut opts: TrainOptions,
) -> Result<TrainSummary> {
    if trees.is_empty() {
        return Err(Error::Empty("training corpus has no documents".into()));
    }
    let cfg = state.config.clone();
    let batches = make_batches(trees, &cfg.model.caps, cfg.batch_size)?;
    let start = Instant::now();
    let mut summary = TrainSummary::default();
    while (state.step as usize) < cfg.steps {
        let step = state.step;
        let batch = &batches[step as usize % batches.len()];
        let (total, components, grad_norm) = match main_step(state, batch) {
            Ok(r) => r,
            Err(e @ Error::NonFinite(_)) => {
                warn!("aborting at step {step}: {e}");
                save(state, opts.out)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        summary.first_total.get_or_insert(total);
        summary.last_total = Some(total);
        summary.steps += 1;
        emit(
            &mut opts.metrics,
            &MetricsRecord {
                step,
                phase: "main",
                components,
                total: Some(total),
                grad_norm,
                eps_auto: cfg.eps_auto_at(step as usize),
                wall_time: start.elapsed().as_secs_f64(),
            },
        )?;
        if step.is_multiple_of(100) {
            info!("step {step} loss {total:.5}");
        }
        if cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every as u64) {
            save(state, opts.out)?;
        }
    }
    if cfg.gan.mode != GanMode::Off {
        while (state.gan_step as usize) < cfg.gan.steps {
            let i = state.gan_step;
            let components = gan_step(state, &batches[i as usize % batches.len()])?;
            if components.values().any(|v| !v.is_finite()) {
                save(state, opts.out)?;
                return Err(Error::NonFinite(format!("adversarial loss at step {i}")));
            }
            summary.gan_steps += 1;
            emit(
                &mut opts.metrics,
                &MetricsRecord {
                    step: state.step + i,
                    phase: "gan",
                    components,
                    total: None,
                    grad_norm: 0.0,
                    eps_auto: 0.0,
                    wall_time: start.elapsed().as_secs_f64(),
                },
            )?;
            if cfg.checkpoint_every > 0 && state.gan_step.is_multiple_of(cfg.checkpoint_every as u64) {
                save(state, opts.out)?;
            }
        }
    }
    save(state, opts.out)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub coordinates: usize,
    pub passed: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub tolerance: f64,
    pub entries: Vec<GradEntry>,
    pub passed: bool,
}

/// Corpus used by gradient checks: two small synthetic documents.
pub fn grad_check_corpus(seed: u64) -> (Vec<IdTree>, Vocabulary) {
    let spec = SyntheticSpec {
        documents: 2,
        paragraphs: 2,
        sentences: 2,
        min_tokens: 2,
        max_tokens: 5,
        vocabulary: 6,
    };
    let docs = synthetic_corpus(&spec, seed);
    let vocab = crate::corpus::build_vocab(&docs, 1, 1000).expect("synthetic vocabulary");
    (docs.iter().map(|d| encode_ids(d, &vocab)).collect(), vocab)
}

fn entry(name: String, r: crate::numerics::GradCheckReport, tol: f64, t: Instant) -> GradEntry {
    GradEntry {
        name,
        passed: r.max_rel_error <= tol,
        max_rel_error: r.max_rel_error,
        worst_param: r.worst_param,
        coordinates: r.coordinates,
        seconds: t.elapsed().as_secs_f64(),
    }
}

fn with_store<T: Scalar>(model: &Model<T>, store: &crate::numerics::ParameterStore<T>) -> Model<T> {
    let mut m = model.clone();
    m.store = store.clone();
    m
}

/// Finite-difference check of every enabled loss component of `config`'s
/// model on a tiny synthetic batch, the PNDB variants of the token-level
/// terms, the adversarial losses, and a corrupted-gradient control that
/// must be caught.
pub fn check_grads(config: &RunConfig, tolerance: f64) -> Result<GradReport> {
    config.validate()?;
    let seed = config.seed()?;
    let (trees, vocab) = grad_check_corpus(seed);
    let opts = GradCheckOptions::default();
    let depth = config.model.depth();
    let names = config.model.level_names();
    let weights = config.level_weights();
    let mut entries = Vec::new();

    let modes: Vec<PndbMode> = match config.model.pndb.mode {
        PndbMode::Off => vec![PndbMode::Off, PndbMode::PoolAll, PndbMode::LeaveOneOut],
        m => vec![PndbMode::Off, m],
    };
    let mut negative: Option<(Model<f64>, Batch, LossOptions)> = None;
    for mode in modes {
        let mut mc = config.model.clone();
        mc.pndb.mode = mode;
        let mut model = Model::<f64>::new(mc, vocab.len(), seed)?;
        let batch = Batch::from_trees(&trees.iter().collect::<Vec<_>>(), &model.config.caps)?;
        let ids = model.store.ids_in(&Group::MAIN);
        for k in 0..depth {
            for task in [
                Task::Reconstruction,
                Task::Mlm,
                Task::Coherence,
                Task::AutoEncoder,
            ] {
                let enabled = match task {
                    Task::Reconstruction => weights[k].reconstruction > 0.0,
                    Task::Mlm => weights[k].mlm > 0.0,
                    Task::Coherence => weights[k].coherence > 0.0,
                    Task::AutoEncoder => config.ae_weight * config.eps_auto > 0.0,
                };
                let reads_memory = k == 0 && matches!(task, Task::Reconstruction | Task::Mlm);
                if !enabled || (mode != PndbMode::Off && !reads_memory) {
                    continue;
                }
                let lo = LossOptions::single(depth, k, task, config.eps_auto.max(0.1), 0.5);
                let t = Instant::now();
                let frozen = model.clone();
                let r = grad_check(
                    &mut model.store,
                    &ids,
                    |s, g| {
                        let m = with_store(&frozen, s);
                        Ok(total_loss(g, &m, &batch, &lo, &mut step_rng(seed, 0))?.loss)
                    },
                    opts,
                )?;
                let tag = match mode {
                    PndbMode::Off => String::new(),
                    PndbMode::PoolAll => "pndb-pool-all/".into(),
                    PndbMode::LeaveOneOut => "pndb-leave-one-out/".into(),
                };
                entries.push(entry(
                    format!("{tag}{}.{}", task.name(), names[k]),
                    r,
                    tolerance,
                    t,
                ));
                if negative.is_none() {
                    negative = Some((model.clone(), batch.clone(), lo));
                }
            }
        }
        if config.gan.mode != GanMode::Off {
            entries.extend(check_gan(
                &mut model,
                &batch,
                config.gan.mode,
                seed,
                tolerance,
                opts,
                &names,
            )?);
        }
    }

    if let Some((mut model, batch, lo)) = negative {
        let ids = model.store.ids_in(&Group::MAIN);
        let frozen = model.clone();
        let mut f = |s: &crate::numerics::ParameterStore<f64>, g: &mut Graph<f64>| {
            Ok(total_loss(
                g,
                &with_store(&frozen, s),
                &batch,
                &lo,
                &mut step_rng(seed, 0),
            )?
            .loss)
        };
        let t = Instant::now();
        let (_, analytic, detached) = analytic_gradients(&mut model.store, &ids, &mut f)?;
        let corrupted: Vec<Tensor<f64>> =
            analytic.iter().map(|a| a.map(|x| 1.5 * x + 0.01)).collect();
        let r = grad_check_against(&mut model.store, &ids, &corrupted, &detached, f, opts)?;
        let mut e = entry(
            "negative-control (corrupted gradient)".into(),
            r,
            tolerance,
            t,
        );
        e.passed = e.max_rel_error > tolerance;
        entries.push(e);
    }
    let passed = entries.iter().all(|e| e.passed);
    Ok(GradReport {
        tolerance,
        entries,
        passed,
    })
}

fn check_gan(
    model: &mut Model<f64>,
    batch: &Batch,
    mode: GanMode,
    seed: u64,
    tolerance: f64,
    opts: GradCheckOptions,
    names: &[String],
) -> Result<Vec<GradEntry>> {
    let mut rng = step_rng(seed, GAN_STREAM);
    let (real, answers) = real_vectors(model, batch)?;
    let q = model.config.pndb.questions;
    let depth = model.depth();
    let tag = if model.pndb.is_some() { "pndb/" } else { "" };
    let mut out = Vec::new();
    for level in 1..=depth {
        let n = real[level - 1].rows();
        let noise = standard_normal(n, model.dim(level), &mut rng);
        let with_answers = uses_answers(model, level);
        let token_noise = with_answers.then(|| standard_normal(n * q, model.dim(0), &mut rng));
        let real_v = real[level - 1].clone();
        let real_a = if with_answers { answers.clone() } else { None };
        let frozen = model.clone();
        let fake = |g: &mut Graph<f64>,
                    m: &Model<f64>|
         -> Result<(crate::numerics::Var, Option<crate::numerics::Var>)> {
            let z = g.constant(noise.clone());
            let v = generate_vector(g, m, level, z)?;
            let a = match &token_noise {
                Some(tn) => {
                    let nz = g.constant(tn.clone());
                    Some(generate_answer_matrix(g, m, v, nz)?)
                }
                None => None,
            };
            Ok((v, a))
        };
        match mode {
            GanMode::PostTrain => {
                let t = Instant::now();
                let ids = model.discriminator_ids(level);
                let r = grad_check(
                    &mut model.store,
                    &ids,
                    |s, g| {
                        let m = with_store(&frozen, s);
                        let (v, a) = fake(g, &m)?;
                        let v = g.detach(v)?;
                        let a = a.map(|a| g.detach(a)).transpose()?;
                        let rv = g.constant(real_v.clone());
                        let ra = real_a.clone().map(|a| g.constant(a));
                        let lr = discriminator_logits(g, &m, level, rv, ra)?;
                        let lf = discriminator_logits(g, &m, level, v, a)?;
                        discriminator_loss(g, lr, lf)
                    },
                    opts,
                )?;
                out.push(entry(
                    format!("{tag}gan.d_loss.{}", names[level]),
                    r,
                    tolerance,
                    t,
                ));
                let t = Instant::now();
                let mut ids = model.generator_ids(level);
                if with_answers {
                    ids.extend(model.store.ids_in(&[Group::PndbGenerator]));
                }
                let r = grad_check(
                    &mut model.store,
                    &ids,
                    |s, g| {
                        let m = with_store(&frozen, s);
                        let (v, a) = fake(g, &m)?;
                        let lf = discriminator_logits(g, &m, level, v, a)?;
                        Ok(generator_loss(g, lf))
                    },
                    opts,
                )?;
                out.push(entry(
                    format!("{tag}gan.g_loss.{}", names[level]),
                    r,
                    tolerance,
                    t,
                ));
            }
            GanMode::CcDiscriminator => {
                let t = Instant::now();
                let ids = model.generator_ids(level);
                let r = grad_check(
                    &mut model.store,
                    &ids,
                    |s, g| {
                        let m = with_store(&frozen, s);
                        let (v, _) = fake(g, &m)?;
                        let z = checker_logit(g, &m, level - 1, v)?;
                        let l = g.softplus(z);
                        Ok(g.mean(l))
                    },
                    opts,
                )?;
                out.push(entry(
                    format!("{tag}gan.cc_generator.{}", names[level]),
                    r,
                    tolerance,
                    t,
                ));
            }
            GanMode::Off => {}
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// Mean of every component over the corpus batches.
    pub components: BTreeMap<String, f64>,
    pub total: f64,
    /// Greedy free-running reconstruction of every sentence from its vector.
    pub token_accuracy: f64,
    pub tokens: usize,
}

/// Free-running greedy reconstruction of every training sentence from its
/// sentence vector: `(correct slots, target slots)`, EoS included.
pub fn reconstruction_accuracy<T: Scalar>(
    model: &Model<T>,
    batch: &Batch,
) -> Result<(usize, usize)> {
    let mut g = Graph::new();
    let enc = encode_batch(&mut g, model, batch)?;
    let answers = match model.config.pndb.mode {
        PndbMode::Off => None,
        mode => {
            let w = pndb_write(
                &mut g,
                model,
                enc.hops[0].contextual,
                &batch.levels[0],
                mode == PndbMode::LeaveOneOut,
            )?;
            Some(g.value(w.pooled).clone())
        }
    };
    let vectors = g.value(enc.vectors(1));
    let level = &batch.levels[0];
    let q = model.config.pndb.questions;
    let (mut correct, mut total) = (0, 0);
    for s in 0..level.sequences() {
        let a = answers.as_ref().map(|a| {
            let d = a.cols();
            Tensor::matrix(
                q,
                d,
                (s * q..(s + 1) * q)
                    .flat_map(|r| a.row_slice(r).iter().copied())
                    .collect(),
            )
        });
        let decoder = Decoder::new(model, None, a.transpose()?)?;
        let v: Vec<f64> = vectors.row_slice(s).iter().map(|x| x.as_f64()).collect();
        let (pred, _) = decoder.tokens(&v)?;
        let target: Vec<usize> = level.sequence(s)[..level.lengths[s]]
            .iter()
            .map(|slot| match *slot {
                Slot::Item(id) => id,
                _ => crate::corpus::EOS,
            })
            .collect();
        total += target.len();
        correct += target.iter().zip(&pred).filter(|(a, b)| a == b).count();
    }
    Ok((correct, total))
}

pub fn evaluate<T: Scalar>(state: &Checkpoint<T>, trees: &[IdTree]) -> Result<EvalReport> {
    let cfg = &state.config;
    let batches = make_batches(trees, &cfg.model.caps, cfg.batch_size)?;
    if batches.is_empty() {
        return Err(Error::Empty("evaluation corpus has no documents".into()));
    }
    // The loss weighting of the step the state has reached.
    let opts = LossOptions::from_run(cfg, state.step as usize);
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut total = 0.0;
    let (mut correct, mut tokens) = (0, 0);
    for (i, b) in batches.iter().enumerate() {
        let mut g = Graph::new();
        let out = total_loss(
            &mut g,
            &state.model,
            b,
            &opts,
            &mut step_rng(cfg.seed()?, EVAL_STREAM - i as u64),
        )?;
        total += out.total / batches.len() as f64;
        for c in &out.components {
            *sums.entry(c.key()).or_default() += c.value / batches.len() as f64;
        }
        let (c, t) = reconstruction_accuracy(&state.model, b)?;
        correct += c;
        tokens += t;
    }
    Ok(EvalReport {
        components: sums,
        total,
        token_accuracy: correct as f64 / tokens.max(1) as f64,
        tokens,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmbedRecord {
    pub level: String,
    pub path: Vec<usize>,
    pub vector: Vec<f64>,
}

/// Every DVT node of a document, root first.
pub fn embed<T: Scalar>(model: &Model<T>, tree: &IdTree) -> Result<Vec<EmbedRecord>> {
    let dvt = build_dvt(model, tree)?;
    let mut out = Vec::new();
    fn walk(n: &crate::hier_encoder::DvtNode, out: &mut Vec<EmbedRecord>) {
        out.push(EmbedRecord {
            level: n.level.clone(),
            path: n.path.clone(),
            vector: n.vector.clone(),
        });
        for c in &n.children {
            walk(c, out);
        }
    }
    walk(&dvt.root, &mut out);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Generation {
    pub dvt: GeneratedDvt,
    pub edits: Vec<EditRecord>,
    pub text: Option<String>,
    pub empty: Vec<(usize, Vec<usize>)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerateOptions {
    /// Level of the generated root (`depth` for whole documents).
    pub level: usize,
    pub seed: u64,
    pub edit_steps: usize,
    pub edit_eps: f64,
}

/// Samples a level vector, decodes it greedily, copyedits and emits text.
pub fn generate<T: Scalar>(state: &Checkpoint<T>, opts: GenerateOptions) -> Result<Generation> {
    let model = &state.model;
    let depth = model.depth();
    if opts.level == 0 || opts.level > depth {
        return Err(Error::Config(format!(
            "generation level {} outside 1..={depth}",
            opts.level
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut g = Graph::new();
    let z = g.constant(state.noise.sample::<T, _>(opts.level, 1, &mut rng)?);
    let v = generate_vector(&mut g, model, opts.level, z)?;
    let answers = if model.pndb.is_some() {
        let doc = if opts.level == depth {
            v
        } else {
            let zd = g.constant(state.noise.sample::<T, _>(depth, 1, &mut rng)?);
            generate_vector(&mut g, model, depth, zd)?
        };
        let nz = g.constant(state.noise.sample::<T, _>(
            0,
            model.config.pndb.questions,
            &mut rng,
        )?);
        let a = generate_answer_matrix(&mut g, model, doc, nz)?;
        Some(g.value(a).clone())
    } else {
        None
    };
    let vector: Vec<f64> = g.value(v).data().iter().map(|x| x.as_f64()).collect();
    let decoder = Decoder::new(model, Some(&state.noise), answers)?;
    let dvt = hierarchical_decode(&decoder, opts.level, &vector)?;
    let (dvt, edits) = copyedit_pass(&decoder, &dvt, opts.edit_eps, opts.edit_steps)?;
    let emitted = emit_text(&dvt, &state.vocab)?;
    Ok(Generation {
        dvt,
        edits,
        text: emitted.text,
        empty: emitted.empty,
    })
}
