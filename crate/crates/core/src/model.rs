//! Parameter layout of the full model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::layers::{BiLstmParams, DenseParams, DenseStack, StackParams};
use crate::numerics::{Group, ParamId, ParameterStore};
use crate::scalar::Scalar;

const SPECIAL_SCALE: f64 = 0.1;

/// Unigram convolution, grouped softmax and one logistic unit.
#[derive(Clone, Debug)]
pub struct GateParams {
    pub filters: ParamId,
    pub unit: DenseParams,
}

/// `L` tanh layers followed by one sigmoid unit.
#[derive(Clone, Debug)]
pub struct CheckerParams {
    pub hidden: Vec<DenseParams>,
    pub out: DenseParams,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorParams {
    /// `(width, projection of a flattened window to channels)`.
    pub convs: Vec<(usize, DenseParams)>,
    /// Answer-matrix branch (document level with the PNDB on).
    pub answers: Option<DenseParams>,
    pub out: DenseParams,
}

/// Everything that operates on level-`k` sequences: the encoder and
/// compressor producing level `k + 1`, the decompressor and decoder going
/// back down, the MLM head, and the level-`k + 1` checker, generator and
/// discriminator.
#[derive(Clone, Debug)]
pub struct HopParams {
    pub pad: ParamId,
    /// Trainable EoS and mask vectors; the token level uses embedding rows.
    pub eos: Option<ParamId>,
    pub mask: Option<ParamId>,
    /// `[2, D]`; row 0 is segment A, row 1 segment B.
    pub segments: ParamId,
    pub positions: ParamId,
    pub encoder: StackParams,
    pub compressor: BiLstmParams,
    pub decompress_init: DenseParams,
    pub decompressor: BiLstmParams,
    pub decoder_positions: ParamId,
    pub decoder: StackParams,
    pub mlm_head: DenseParams,
    pub checker: CheckerParams,
    pub generator: DenseStack,
    pub discriminator: DiscriminatorParams,
}

#[derive(Clone, Debug)]
pub struct TokenParams {
    pub embedding: ParamId,
    pub out_bias: ParamId,
    pub mlm_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct PndbParams {
    pub questions: ParamId,
    pub write_key: ParamId,
    pub read_key: ParamId,
    pub ignore: GateParams,
    pub update: GateParams,
    pub answer_in: DenseParams,
    pub answer_stack: DenseStack,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub store: ParameterStore<T>,
    pub tokens: TokenParams,
    pub hops: Vec<HopParams>,
    pub pndb: Option<PndbParams>,
}

fn gate<T: Scalar>(
    store: &mut ParameterStore<T>,
    name: &str,
    d: usize,
    filters: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GateParams> {
    Ok(GateParams {
        filters: store.insert_xavier(&format!("{name}.filters"), Group::Pndb, d, filters, rng)?,
        unit: DenseParams::new(store, &format!("{name}.unit"), Group::Pndb, filters, 1, rng)?,
    })
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocabulary of {vocab_size} lacks reserved tokens"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let dims = &config.dims;
        let names = config.level_names();
        let depth = config.depth();
        let l = config.dense_layers;

        let tokens = TokenParams {
            embedding: store.insert_xavier(
                "token.embedding",
                Group::Encoder,
                vocab_size,
                dims[0],
                &mut rng,
            )?,
            out_bias: store.insert_filled("token.out_bias", Group::Heads, &[vocab_size], 0.0)?,
            mlm_bias: store.insert_filled("token.mlm_bias", Group::Heads, &[vocab_size], 0.0)?,
        };

        let mut hops = Vec::with_capacity(depth);
        for k in 0..depth {
            let (d, up, cap) = (dims[k], dims[k + 1], config.caps[k]);
            let n = &names[k];
            let parent = &names[k + 1];
            let enc = Group::Encoder;
            let special = |store: &mut ParameterStore<T>, what: &str, rng: &mut ChaCha8Rng| {
                store.insert_uniform(&format!("{n}.{what}"), enc, &[d], SPECIAL_SCALE, rng)
            };
            let pad = special(&mut store, "pad", &mut rng)?;
            let (eos, mask) = if k == 0 {
                (None, None)
            } else {
                (
                    Some(special(&mut store, "eos", &mut rng)?),
                    Some(special(&mut store, "mask", &mut rng)?),
                )
            };
            let segments = store.insert_uniform(
                &format!("{n}.segments"),
                enc,
                &[2, d],
                SPECIAL_SCALE,
                &mut rng,
            )?;
            let positions = store.insert_uniform(
                &format!("{n}.positions"),
                enc,
                &[cap, d],
                SPECIAL_SCALE,
                &mut rng,
            )?;
            let encoder = StackParams::new(
                &mut store,
                &format!("{n}.encoder"),
                enc,
                d,
                None,
                &config.encoder,
                &mut rng,
            )?;
            let compressor = BiLstmParams::new(
                &mut store,
                &format!("{n}.compressor"),
                enc,
                d,
                up / 2,
                &mut rng,
            )?;

            let dec = Group::Decoder;
            let decompress_init = DenseParams::new(
                &mut store,
                &format!("{n}.decompress_init"),
                dec,
                up,
                2 * up,
                &mut rng,
            )?;
            let decompressor = BiLstmParams::new(
                &mut store,
                &format!("{n}.decompressor"),
                dec,
                up,
                up / 2,
                &mut rng,
            )?;
            let decoder_positions = store.insert_uniform(
                &format!("{n}.decoder_positions"),
                dec,
                &[cap, d],
                SPECIAL_SCALE,
                &mut rng,
            )?;
            let decoder = StackParams::new(
                &mut store,
                &format!("{n}.decoder"),
                dec,
                d,
                Some(up),
                &config.decoder,
                &mut rng,
            )?;

            let mlm_head = DenseParams::new(
                &mut store,
                &format!("{n}.mlm_head"),
                Group::Heads,
                d,
                d,
                &mut rng,
            )?;

            let checker = CheckerParams {
                hidden: (0..l)
                    .map(|i| {
                        DenseParams::new(
                            &mut store,
                            &format!("{parent}.checker.{i}"),
                            Group::Checker,
                            up,
                            up,
                            &mut rng,
                        )
                    })
                    .collect::<Result<_>>()?,
                out: DenseParams::new(
                    &mut store,
                    &format!("{parent}.checker.out"),
                    Group::Checker,
                    up,
                    1,
                    &mut rng,
                )?,
            };

            let generator = DenseStack::new(
                &mut store,
                &format!("{parent}.generator"),
                Group::Generator,
                &vec![up; l + 1],
                &mut rng,
            )?;

            let c = config.discriminator_channels;
            let dis = Group::Discriminator;
            let convs: Vec<(usize, DenseParams)> = config
                .discriminator_widths
                .iter()
                .filter(|&&w| w <= cap)
                .map(|&w| {
                    DenseParams::new(
                        &mut store,
                        &format!("{parent}.discriminator.conv{w}"),
                        dis,
                        w * d,
                        c,
                        &mut rng,
                    )
                    .map(|p| (w, p))
                })
                .collect::<Result<_>>()?;
            if convs.is_empty() {
                return Err(Error::Config(format!(
                    "no discriminator width fits the {n} cap {cap}"
                )));
            }
            let answers = if k + 1 == depth && config.pndb_enabled() {
                Some(DenseParams::new(
                    &mut store,
                    &format!("{parent}.discriminator.answers"),
                    dis,
                    dims[0],
                    c,
                    &mut rng,
                )?)
            } else {
                None
            };
            let features = c * (convs.len() + answers.is_some() as usize);
            let out = DenseParams::new(
                &mut store,
                &format!("{parent}.discriminator.out"),
                dis,
                features,
                1,
                &mut rng,
            )?;

            hops.push(HopParams {
                pad,
                eos,
                mask,
                segments,
                positions,
                encoder,
                compressor,
                decompress_init,
                decompressor,
                decoder_positions,
                decoder,
                mlm_head,
                checker,
                generator,
                discriminator: DiscriminatorParams {
                    convs,
                    answers,
                    out,
                },
            });
        }

        let pndb = if config.pndb_enabled() {
            let (d0, q, f) = (dims[0], config.pndb.questions, config.pndb.filters);
            let top = dims[depth];
            Some(PndbParams {
                questions: store.insert_xavier("pndb.questions", Group::Pndb, q, d0, &mut rng)?,
                write_key: store.insert_xavier("pndb.write_key", Group::Pndb, d0, d0, &mut rng)?,
                read_key: store.insert_xavier("pndb.read_key", Group::Pndb, d0, d0, &mut rng)?,
                ignore: gate(&mut store, "pndb.ignore_gate", d0, f, &mut rng)?,
                update: gate(&mut store, "pndb.update_gate", d0, f, &mut rng)?,
                answer_in: DenseParams::new(
                    &mut store,
                    "pndb.answer_in",
                    Group::PndbGenerator,
                    d0 + top,
                    d0,
                    &mut rng,
                )?,
                answer_stack: {
                    let mut dims = vec![d0; l + 1];
                    dims[0] = 2 * d0;
                    DenseStack::new(
                        &mut store,
                        "pndb.answer",
                        Group::PndbGenerator,
                        &dims,
                        &mut rng,
                    )?
                },
            })
        } else {
            None
        };

        Ok(Self {
            config,
            vocab_size,
            store,
            tokens,
            hops,
            pndb,
        })
    }

    pub fn depth(&self) -> usize {
        self.config.depth()
    }

    pub fn dim(&self, level: usize) -> usize {
        self.config.dims[level]
    }

    pub fn cap(&self, level: usize) -> usize {
        self.config.caps[level]
    }

    pub fn level_names(&self) -> Vec<String> {
        self.config.level_names()
    }

    /// Generator parameters of vector level `level` (1 ..= depth).
    pub fn generator_ids(&self, level: usize) -> Vec<ParamId> {
        dense_ids(&self.hops[level - 1].generator.layers)
    }

    pub fn discriminator_ids(&self, level: usize) -> Vec<ParamId> {
        let d = &self.hops[level - 1].discriminator;
        let mut layers: Vec<DenseParams> = d.convs.iter().map(|(_, p)| p.clone()).collect();
        layers.extend(d.answers.clone());
        layers.push(d.out.clone());
        dense_ids(&layers)
    }

    pub fn checker_ids(&self, level: usize) -> Vec<ParamId> {
        let c = &self.hops[level - 1].checker;
        let mut layers = c.hidden.clone();
        layers.push(c.out.clone());
        dense_ids(&layers)
    }
}

fn dense_ids(layers: &[DenseParams]) -> Vec<ParamId> {
    layers.iter().flat_map(|l| [l.w, l.b]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_reproducible() {
        let a = Model::<f64>::new(ModelConfig::default(), 20, 7).unwrap();
        let b = Model::<f64>::new(ModelConfig::default(), 20, 7).unwrap();
        assert_eq!(
            a.store.fingerprint(&Group::MAIN),
            b.store.fingerprint(&Group::MAIN)
        );
        let c = Model::<f64>::new(ModelConfig::default(), 20, 8).unwrap();
        assert_ne!(
            a.store.fingerprint(&Group::MAIN),
            c.store.fingerprint(&Group::MAIN)
        );
    }

    #[test]
    fn special_vectors_have_level_width() {
        let m = Model::<f64>::new(ModelConfig::default(), 20, 0).unwrap();
        for (k, hop) in m.hops.iter().enumerate() {
            assert_eq!(m.store.value(hop.pad).len(), m.dim(k));
            assert_eq!(m.store.value(hop.segments).shape(), &[2, m.dim(k)]);
        }
    }

    #[test]
    fn pndb_parameters_only_when_enabled() {
        let mut cfg = ModelConfig::default();
        cfg.pndb.mode = crate::config::PndbMode::Off;
        let m = Model::<f64>::new(cfg, 20, 0).unwrap();
        assert!(m.pndb.is_none());
        assert!(m.store.ids_in(&[Group::Pndb]).is_empty());
    }
}
