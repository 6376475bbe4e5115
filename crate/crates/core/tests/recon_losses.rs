mod common;

use agent_core::config::PndbMode;
use agent_core::model::Model;
use agent_core::numerics::{Graph, Tensor};
use agent_core::recon_losses::{
    ae_regularizer, decode_children, decompress, level_reconstruction_loss,
    token_reconstruction_loss,
};
use common::{bits, tiny_config, zero_prefix};
use proptest::prelude::*;

fn m(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
    Tensor::matrix(rows, cols, v.to_vec()).unwrap()
}

fn token_ce(logits: &Tensor<f64>, targets: &[usize], pad: &[bool]) -> f64 {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = token_reconstruction_loss(&mut g, l, targets, pad).unwrap();
    g.scalar(loss)
}

fn level_ce(pred: &Tensor<f64>, cands: &Tensor<f64>, targets: &[usize]) -> f64 {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let c = g.constant(cands.clone());
    let loss =
        level_reconstruction_loss(&mut g, p, targets, &vec![false; targets.len()], c).unwrap();
    g.scalar(loss)
}

fn ae(c: &Tensor<f64>, d: &Tensor<f64>, eps: f64) -> f64 {
    let mut g = Graph::new();
    let (a, b) = (g.constant(c.clone()), g.constant(d.clone()));
    let (v, _) = ae_regularizer(&mut g, a, b, vec![(0..c.rows()).collect()], eps).unwrap();
    g.scalar(v)
}

#[test]
fn uniform_token_logits_give_ln_v() {
    for v in [4usize, 7, 30] {
        let logits = Tensor::filled(&[3, v], 0.25);
        let loss = token_ce(&logits, &[1, 2, 0], &[false, false, true]);
        assert!((loss - (v as f64).ln()).abs() < 1e-12, "{v}: {loss}");
    }
}

#[test]
fn token_loss_with_known_margin() {
    let logits = m(1, 4, &[2.0, 0.0, 0.0, 0.0]);
    let expected = -(2f64.exp() / (2f64.exp() + 3.0)).ln();
    assert!((token_ce(&logits, &[0], &[false]) - expected).abs() < 1e-12);
    let sharp = m(1, 4, &[60.0, 0.0, 0.0, 0.0]);
    assert!(token_ce(&sharp, &[0], &[false]) < 1e-20);
}

#[test]
fn all_pad_token_loss_is_an_error() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::filled(&[2, 4], 0.0));
    assert!(token_reconstruction_loss(&mut g, l, &[0, 0], &[true, true]).is_err());
}

#[test]
fn single_candidate_level_loss_is_zero() {
    let loss = level_ce(
        &m(2, 3, &[0.3, -1.0, 2.0, 5.0, 0.0, 1.0]),
        &m(1, 3, &[1.0, 2.0, 3.0]),
        &[0, 0],
    );
    assert_eq!(loss, 0.0);
}

#[test]
fn duplicate_candidates_give_ln_b() {
    for b in [2usize, 3, 8] {
        let row = [0.4, -0.7, 1.1];
        let cands = m(b, 3, &row.repeat(b));
        let loss = level_ce(&m(1, 3, &[9.0, 1.0, -3.0]), &cands, &[b - 1]);
        assert!((loss - (b as f64).ln()).abs() < 1e-12, "{b}: {loss}");
    }
}

#[test]
fn orthogonal_candidates_match_margin_formula() {
    let r = 1.5;
    let cands = m(3, 3, &[r, 0.0, 0.0, 0.0, r, 0.0, 0.0, 0.0, r]);
    let loss = level_ce(&m(1, 3, &[0.0, r, 0.0]), &cands, &[1]);
    let z = (r * r).exp();
    assert!((loss - -(z / (z + 2.0)).ln()).abs() < 1e-12);
}

#[test]
fn ae_regularizer_closed_forms() {
    let c = m(2, 2, &[1.0, 2.0, -3.0, 0.5]);
    assert_eq!(ae(&c, &c, 0.1), 0.0);
    let twice = c.map(|x| 2.0 * x);
    assert!(ae(&c, &twice, 0.1).abs() < 1e-15);
    let v = ae(&m(1, 2, &[1.0, 0.0]), &m(1, 2, &[0.0, 1.0]), 0.1);
    assert!((v - 0.1 * 2f64.sqrt()).abs() < 1e-15, "{v}");
}

#[test]
fn ae_regularizer_skips_zero_blocks() {
    let mut g = Graph::new();
    let a = g.constant(m(2, 2, &[0.0, 0.0, 1.0, 0.0]));
    let b = g.constant(m(2, 2, &[0.0, 0.0, 0.0, 1.0]));
    let (v, skipped) = ae_regularizer(&mut g, a, b, vec![vec![0], vec![1]], 1.0).unwrap();
    assert_eq!(skipped, vec![0]);
    assert!((g.scalar(v) - 2f64.sqrt()).abs() < 1e-15);
}

proptest! {
    #[test]
    fn ae_regularizer_is_scale_invariant(
        v in prop::collection::vec(-3.0f64..3.0, 6),
        w in prop::collection::vec(-3.0f64..3.0, 6),
        s in 0.01f64..100.0,
        t in 0.01f64..100.0,
    ) {
        let (c, d) = (m(3, 2, &v), m(3, 2, &w));
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3) && w.iter().any(|x| x.abs() > 1e-3));
        let base = ae(&c, &d, 1.0);
        let scaled = ae(&c.map(|x| s * x), &d.map(|x| t * x), 1.0);
        prop_assert!((base - scaled).abs() < 1e-9);
    }

    #[test]
    fn level_loss_is_positive_with_distinct_candidates(
        p in prop::collection::vec(-2.0f64..2.0, 3),
        c in prop::collection::vec(-2.0f64..2.0, 9),
        target in 0usize..3,
    ) {
        let rows: Vec<&[f64]> = c.chunks(3).collect();
        prop_assume!(rows[0] != rows[1] && rows[1] != rows[2] && rows[0] != rows[2]);
        prop_assert!(level_ce(&m(1, 3, &p), &m(3, 3, &c), &[target]) > 0.0);
    }
}

fn tiny_model() -> Model<f64> {
    Model::new(tiny_config(PndbMode::Off), 12, 2).unwrap()
}

#[test]
fn decompressor_is_a_pure_function_of_the_vector() {
    let mut model = tiny_model();
    let mut g = Graph::new();
    let v = g.constant(m(
        2,
        10,
        &(0..20).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>(),
    ));
    let a = decompress(&mut g, &model, 0, v, 5).unwrap();
    let b = decompress(&mut g, &model, 0, v, 5).unwrap();
    assert_eq!(g.shape(a), (10, 10));
    assert_eq!(g.value(a).to_bits(), g.value(b).to_bits());
    zero_prefix(&mut model.store, "token.decompress");
    let mut g = Graph::new();
    let v = g.constant(m(1, 10, &[1.0; 10]));
    let z = decompress(&mut g, &model, 0, v, 5).unwrap();
    assert!(g.value(z).data().iter().all(|&x| x == 0.0));
}

#[test]
fn decoder_prediction_ignores_later_teacher_inputs() {
    let model = tiny_model();
    let s = 5;
    let run = |tail: f64| {
        let mut g = Graph::new();
        let v = g.constant(m(1, 10, &[0.5; 10]));
        let mem = decompress(&mut g, &model, 0, v, s).unwrap();
        let mut t: Vec<f64> = (0..s * 8).map(|i| (i as f64).cos()).collect();
        for x in &mut t[3 * 8..] {
            *x += tail;
        }
        let teacher = g.constant(m(s, 8, &t));
        let y = decode_children(&mut g, &model, 0, mem, teacher, vec![true; s], 1, s).unwrap();
        let y = g.value(y);
        (0..s).map(|r| bits(y.row_slice(r))).collect::<Vec<_>>()
    };
    let (a, b) = (run(0.0), run(3.0));
    assert_eq!(a[..3], b[..3]);
    assert_ne!(a[3], b[3]);
}
