mod common;

use agent_core::config::PndbMode;
use agent_core::corpus::{LevelBatch, Slot};
use agent_core::hier_encoder::{encode_batch, encode_hop};
use agent_core::inlevel_coherence::{
    apply_mlm_corruption, checker_logit, coherence_check, coherence_corrupt, coherence_loss,
    mlm_logits, mlm_loss, MlmAction,
};
use agent_core::model::Model;
use agent_core::numerics::{Graph, Tensor};
use common::{bits, tiny_config, tiny_spec, zero_prefix};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

const MASK: usize = 100;

/// Two sequences of 6 slots: 4 real children, EoS, pad; then 2 real, EoS, 3 pads.
fn level() -> LevelBatch {
    use Slot::*;
    LevelBatch {
        cap: 6,
        slots: vec![
            Item(0),
            Item(1),
            Item(2),
            Item(3),
            Eos,
            Pad,
            Item(4),
            Item(5),
            Eos,
            Pad,
            Pad,
            Pad,
        ],
        lengths: vec![5, 3],
        document: vec![0, 0],
    }
}

fn index() -> Vec<usize> {
    vec![0, 1, 2, 3, 7, 6, 4, 5, 7, 6, 6, 6]
}

#[test]
fn mlm_actions_follow_the_80_10_10_split() {
    let (level, idx) = (level(), index());
    let pool = [20, 21, 22];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut counts = [0usize; 3];
    let mut selected = 0usize;
    let mut trials = 0usize;
    while selected < 20_000 {
        let (out, plan) = apply_mlm_corruption(&idx, &level, 0.5, MASK, &pool, &mut rng).unwrap();
        trials += 1;
        for ((&p, &a), &t) in plan.positions.iter().zip(&plan.actions).zip(&plan.targets) {
            assert!(matches!(level.slots[p], Slot::Item(_)));
            assert_eq!(t, idx[p]);
            match a {
                MlmAction::Mask => assert_eq!(out[p], MASK),
                MlmAction::Random => assert!(pool.contains(&out[p])),
                MlmAction::Keep => assert_eq!(out[p], idx[p]),
            }
            counts[a as usize] += 1;
        }
        selected += plan.positions.len();
        for i in 0..idx.len() {
            if !plan.positions.contains(&i) {
                assert_eq!(out[i], idx[i]);
            }
        }
    }
    let f: Vec<f64> = counts.iter().map(|&c| c as f64 / selected as f64).collect();
    assert!((f[0] - 0.8).abs() < 0.02, "{f:?}");
    assert!((f[1] - 0.1).abs() < 0.02, "{f:?}");
    assert!((f[2] - 0.1).abs() < 0.02, "{f:?}");
    // Selection rate over the 6 real slots.
    let rate = selected as f64 / (trials * 6) as f64;
    assert!((rate - 0.5).abs() < 0.02, "{rate}");
}

#[test]
fn mlm_corruption_edge_cases() {
    let (level, idx) = (level(), index());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (out, plan) = apply_mlm_corruption(&idx, &level, 1e-12, MASK, &[20], &mut rng).unwrap();
    assert!(plan.is_empty());
    assert_eq!(out, idx);
    for rate in [0.0, 1.0, -0.5] {
        assert!(apply_mlm_corruption(&idx, &level, rate, MASK, &[20], &mut rng).is_err());
    }
    // An empty pool only fails once a random replacement is drawn.
    let mut failed = false;
    for _ in 0..200 {
        failed |= apply_mlm_corruption(&idx, &level, 0.9, MASK, &[], &mut rng).is_err();
    }
    assert!(failed);
}

#[test]
fn coherence_p_is_zero_half_the_time_and_uniform_otherwise() {
    let (level, idx) = (level(), index());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut nonzero = Vec::new();
    let mut zero = 0usize;
    let mut draws = 0usize;
    while draws < 20_000 {
        let (out, plan) = coherence_corrupt(&idx, &level, &[30, 31], None, &mut rng).unwrap();
        for (s, &p) in plan.p.iter().enumerate() {
            draws += 1;
            if p == 0.0 {
                zero += 1;
                let r = s * level.cap..(s + 1) * level.cap;
                assert!(plan.segments[r.clone()].iter().all(|&x| x == 0));
                assert_eq!(out[r.clone()], idx[r]);
                assert_eq!(plan.ratio[s], 0.0);
            } else {
                nonzero.push(p);
            }
        }
    }
    let f = zero as f64 / draws as f64;
    assert!((f - 0.5).abs() < 0.02, "{f}");

    // Kolmogorov–Smirnov against U(0,1); asymptotic critical value at α = 0.01.
    nonzero.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = nonzero.len() as f64;
    let d = nonzero
        .iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) as f64 / n - x).max(x - i as f64 / n))
        .fold(0.0, f64::max);
    assert!(d < 1.628 / n.sqrt(), "KS statistic {d} over {n} draws");
}

#[test]
fn forced_p_one_replaces_half_of_the_children() {
    let (level, idx) = (level(), index());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut replaced, mut real) = (0usize, 0usize);
    for _ in 0..2_000 {
        let (out, plan) = coherence_corrupt(&idx, &level, &[30, 31], Some(1.0), &mut rng).unwrap();
        for (i, slot) in level.slots.iter().enumerate() {
            if matches!(slot, Slot::Item(_)) {
                assert_eq!(plan.segments[i], 1);
            } else {
                assert_eq!(plan.segments[i], 0);
                assert_eq!(out[i], idx[i]);
            }
        }
        for &i in &plan.replaced {
            assert!([30, 31].contains(&out[i]));
        }
        let first = plan.replaced.iter().filter(|&&i| i < 6).count();
        assert_eq!(plan.ratio[0], first as f64 / 4.0);
        assert_eq!(plan.ratio[1], (plan.replaced.len() - first) as f64 / 2.0);
        replaced += plan.replaced.len();
        real += 6;
    }
    // Binomial(12000, 0.5): 4σ ≈ 0.018.
    let r = replaced as f64 / real as f64;
    assert!((r - 0.5).abs() < 4.0 * (0.25 / real as f64).sqrt(), "{r}");
}

#[test]
fn coherence_needs_a_real_child_and_a_pool() {
    use Slot::*;
    let empty = LevelBatch {
        cap: 3,
        slots: vec![Eos, Pad, Pad],
        lengths: vec![1],
        document: vec![0],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    assert!(coherence_corrupt(&[7, 6, 6], &empty, &[1], Some(0.5), &mut rng).is_err());
    assert!(coherence_corrupt(&index(), &level(), &[], Some(1.0), &mut rng).is_err());
}

#[test]
fn p_zero_parents_equal_the_clean_encoder_parents() {
    let (ids, vocab) = common::corpus(&tiny_spec(2), 3);
    let m = Model::<f64>::new(tiny_config(PndbMode::Off), vocab.len(), 4).unwrap();
    let batch = common::batch(&ids, &m.config.caps);
    let mut g = Graph::new();
    let enc = encode_batch(&mut g, &m, &batch).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (k, level) in batch.levels.iter().enumerate() {
        let h = &enc.hops[k];
        let (cidx, plan) = coherence_corrupt(&h.index, level, &[0], Some(0.0), &mut rng).unwrap();
        assert_eq!(cidx, h.index);
        let (_, _, parents) =
            encode_hop(&mut g, &m, k, h.table, &cidx, &plan.segments, level).unwrap();
        assert_eq!(
            bits(g.value(parents).data()),
            bits(g.value(h.parents).data()),
            "hop {k}"
        );
    }
}

#[test]
fn mlm_logits_match_hand_dot_products() {
    let (_, vocab) = common::corpus(&tiny_spec(1), 1);
    let mut m = Model::<f64>::new(tiny_config(PndbMode::Off), vocab.len(), 5).unwrap();
    let d = m.dim(1);
    let head = m.hops[1].mlm_head.clone();
    // W[i][j] = 0.1·(i − j), b[j] = 0.05·j.
    for (n, v) in m.store.value_mut(head.w).data_mut().iter_mut().enumerate() {
        *v = 0.1 * ((n / d) as f64 - (n % d) as f64);
    }
    for (j, v) in m.store.value_mut(head.b).data_mut().iter_mut().enumerate() {
        *v = 0.05 * j as f64;
    }
    let x: Vec<f64> = (0..d).map(|i| 0.3 - 0.07 * i as f64).collect();
    let cands: Vec<Vec<f64>> = (0..3)
        .map(|c| (0..d).map(|i| ((c * d + i) as f64 * 0.37).sin()).collect())
        .collect();

    let phi = Normal::new(0.0, 1.0).unwrap();
    let h: Vec<f64> = (0..d)
        .map(|j| {
            let z = (0..d)
                .map(|i| x[i] * 0.1 * (i as f64 - j as f64))
                .sum::<f64>()
                + 0.05 * j as f64;
            z * phi.cdf(z)
        })
        .collect();
    let expected: Vec<f64> = cands
        .iter()
        .map(|c| c.iter().zip(&h).map(|(a, b)| a * b).sum())
        .collect();

    let mut g = Graph::new();
    let xv = g.constant(Tensor::matrix(1, d, x).unwrap());
    let cv = g.constant(Tensor::matrix(3, d, cands.concat()).unwrap());
    let l = mlm_logits(&mut g, &m, 1, xv, cv, None).unwrap();
    for (a, e) in g.value(l).data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-9, "{a} vs {e}");
    }

    let bias = g.constant(Tensor::row(vec![1.0, -1.0, 0.5]));
    let lb = mlm_logits(&mut g, &m, 1, xv, cv, Some(bias)).unwrap();
    for ((a, e), b) in g
        .value(lb)
        .data()
        .iter()
        .zip(&expected)
        .zip([1.0, -1.0, 0.5])
    {
        assert!((a - e - b).abs() < 1e-9);
    }

    // Duplicated candidates score equally.
    let dup = g.gather(cv, vec![2, 2]).unwrap();
    let ld = mlm_logits(&mut g, &m, 1, xv, dup, None).unwrap();
    assert_eq!(g.value(ld).data()[0], g.value(ld).data()[1]);

    let none = g.constant(Tensor::zeros(&[0, d]));
    assert!(mlm_logits(&mut g, &m, 1, xv, none, None).is_err());
}

#[test]
fn mlm_loss_closed_forms() {
    let mut g = Graph::<f64>::new();
    let uniform = g.constant(Tensor::matrix(1, 5, vec![0.7; 5]).unwrap());
    let (l, empty) = mlm_loss(&mut g, Some(uniform), &[3]).unwrap();
    assert!(!empty);
    assert!((g.scalar(l) - 5f64.ln()).abs() < 1e-12);

    let single = g.constant(Tensor::matrix(2, 1, vec![4.0, -2.0]).unwrap());
    let (l, _) = mlm_loss(&mut g, Some(single), &[0, 0]).unwrap();
    assert!(g.scalar(l).abs() < 1e-12);

    // Two masked slots with hand-set logits.
    let two = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 0.0, 0.0, 2.0]).unwrap());
    let (l, _) = mlm_loss(&mut g, Some(two), &[2, 0]).unwrap();
    let ce = |row: [f64; 3], t: usize| row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[t];
    let expected = 0.5 * (ce([1.0, 2.0, 3.0], 2) + ce([0.0, 0.0, 2.0], 0));
    assert!((g.scalar(l) - expected).abs() < 1e-12);

    let (l, empty) = mlm_loss(&mut g, None, &[]).unwrap();
    assert!(empty);
    assert_eq!(g.scalar(l), 0.0);
}

#[test]
fn coherence_loss_closed_forms() {
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::matrix(1, 1, vec![0.5]).unwrap());
    let l = coherence_loss(&mut g, p, &[0.0]).unwrap();
    assert_eq!(g.scalar(l), 0.25);
    let l = coherence_loss(&mut g, p, &[0.5]).unwrap();
    assert_eq!(g.scalar(l), 0.0);
    let p = g.constant(Tensor::matrix(3, 1, vec![0.1, 0.9, 0.4]).unwrap());
    let l = coherence_loss(&mut g, p, &[0.0, 0.5, 1.0]).unwrap();
    let expected = (0.01 + 0.16 + 0.36) / 3.0;
    assert!((g.scalar(l) - expected).abs() < 1e-15);
}

#[test]
fn checker_with_zero_output_weights_returns_sigmoid_of_bias() {
    let (_, vocab) = common::corpus(&tiny_spec(1), 1);
    let mut m = Model::<f64>::new(tiny_config(PndbMode::Off), vocab.len(), 6).unwrap();
    let out = m.hops[0].checker.out.clone();
    m.store
        .value_mut(out.w)
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
    m.store.value_mut(out.b).data_mut()[0] = 0.3;
    let mut g = Graph::new();
    let x = g.constant(
        Tensor::matrix(2, m.dim(1), (0..2 * m.dim(1)).map(|i| i as f64).collect()).unwrap(),
    );
    let y = coherence_check(&mut g, &m, 0, x).unwrap();
    let s = 1.0 / (1.0 + (-0.3f64).exp());
    for v in g.value(y).data() {
        assert!((v - s).abs() < 1e-15);
    }
    zero_prefix(&mut m.store, "sentence.checker");
    let mut g = Graph::new();
    let x = g.constant(Tensor::filled(&[1, m.dim(1)], 5.0));
    let z = checker_logit(&mut g, &m, 0, x).unwrap();
    assert_eq!(g.scalar(z), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corruption_never_touches_pad_or_eos(seed in any::<u64>(), rate in 0.05f64..0.95, p in 0.0f64..1.0) {
        let (level, idx) = (level(), index());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, plan) = apply_mlm_corruption(&idx, &level, rate, MASK, &[20], &mut rng).unwrap();
        let (b, coh) = coherence_corrupt(&idx, &level, &[30], Some(p), &mut rng).unwrap();
        for (i, slot) in level.slots.iter().enumerate() {
            if !matches!(slot, Slot::Item(_)) {
                prop_assert_eq!(a[i], idx[i]);
                prop_assert_eq!(b[i], idx[i]);
                prop_assert_eq!(coh.segments[i], 0);
                prop_assert!(!plan.positions.contains(&i));
            }
        }
        for r in &coh.ratio {
            prop_assert!((0.0..=1.0).contains(r));
        }
    }

    #[test]
    fn checker_output_is_a_probability(v in proptest::collection::vec(-50.0f64..50.0, 10)) {
        let m = Model::<f64>::new(tiny_config(PndbMode::Off), 10, 7).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 10, v).unwrap());
        let y = coherence_check(&mut g, &m, 0, x).unwrap();
        let y = g.scalar(y);
        prop_assert!(y > 0.0 && y < 1.0);
    }
}
