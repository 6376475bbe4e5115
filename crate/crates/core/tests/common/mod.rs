#![allow(dead_code)]

use agent_core::config::{ModelConfig, PndbConfig, PndbMode};
use agent_core::corpus::{
    build_vocab, encode_ids, synthetic_corpus, Batch, IdTree, SyntheticSpec, Vocabulary,
};
use agent_core::numerics::StackConfig;

pub fn tiny_config(pndb: PndbMode) -> ModelConfig {
    let stack = StackConfig {
        layers: 1,
        heads: 2,
        ff_mult: 2,
        ..StackConfig::default()
    };
    ModelConfig {
        dims: vec![8, 10, 12, 14],
        caps: vec![5, 4, 4],
        encoder: stack,
        decoder: stack,
        dense_layers: 1,
        discriminator_widths: vec![2, 3],
        discriminator_channels: 3,
        pndb: PndbConfig {
            mode: pndb,
            questions: 2,
            filters: 8,
            force_closed: false,
        },
    }
}

pub fn tiny_spec(documents: usize) -> SyntheticSpec {
    SyntheticSpec {
        documents,
        paragraphs: 2,
        sentences: 2,
        min_tokens: 2,
        max_tokens: 5,
        vocabulary: 6,
    }
}

pub fn corpus(spec: &SyntheticSpec, seed: u64) -> (Vec<IdTree>, Vocabulary) {
    let docs = synthetic_corpus(spec, seed);
    let vocab = build_vocab(&docs, 1, 1000).unwrap();
    (docs.iter().map(|d| encode_ids(d, &vocab)).collect(), vocab)
}

pub fn batch(ids: &[IdTree], caps: &[usize]) -> Batch {
    Batch::from_trees(&ids.iter().collect::<Vec<_>>(), caps).unwrap()
}

pub fn doc(json: &str) -> agent_core::corpus::DocumentTree {
    agent_core::corpus::parse_nested(json).unwrap()
}

/// Vocabulary over `docs` plus the id trees.
pub fn encode(docs: &[agent_core::corpus::DocumentTree]) -> (Vec<IdTree>, Vocabulary) {
    let vocab = build_vocab(docs, 1, 1000).unwrap();
    (docs.iter().map(|d| encode_ids(d, &vocab)).collect(), vocab)
}

/// Zeroes every parameter whose name starts with `prefix`.
pub fn zero_prefix<T: agent_core::Scalar>(
    store: &mut agent_core::numerics::ParameterStore<T>,
    prefix: &str,
) {
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| store.name(id).starts_with(prefix))
        .collect();
    assert!(!ids.is_empty(), "no parameter under {prefix}");
    for id in ids {
        store
            .value_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = T::zero());
    }
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}
