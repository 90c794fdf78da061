use mcpt_core::encoder::{self, Policy};
use mcpt_core::imaging::{synth_pair_corpus, CorpusSpec};
use mcpt_core::objectives::{sym_loss_value, unsup_loss_value, ContrastiveBatch};
use mcpt_core::pipeline::{pair_curves, pretrain_loss, view_order};
use mcpt_core::{EncoderConfig, Image, RunConfig, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Rows = Vec<Vec<f64>>;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Rows {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = dot(&v, &v).sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn tensor(rows: &Rows) -> Tensor<f64> {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

/// One direction, written term by term: two halves over the same 2N-term denominator.
fn direction(anchor: &Rows, other: &Rows, other_aug: &Rows, tau: f64) -> f64 {
    let mut total = 0.0;
    for (i, a) in anchor.iter().enumerate() {
        let denom: f64 = other.iter().chain(other_aug).map(|o| (dot(a, o) / tau).exp()).sum();
        let p1 = (dot(a, &other[i]) / tau).exp() / denom;
        let p2 = (dot(a, &other_aug[i]) / tau).exp() / denom;
        total += -(0.5 * p1.ln() + 0.5 * p2.ln());
    }
    total
}

fn sym_oracle(sar: &Rows, eo: &Rows, sar_aug: &Rows, eo_aug: &Rows, tau: f64) -> f64 {
    let n = sar.len() as f64;
    (direction(sar, eo, eo_aug, tau) + direction(eo, sar, sar_aug, tau)) / (2.0 * n)
}

fn unsup_oracle(z: &Rows, z_aug: &Rows, tau: f64) -> f64 {
    let views: Vec<&Vec<f64>> = z.iter().chain(z_aug).collect();
    let mut total = 0.0;
    for (i, a) in z.iter().enumerate() {
        let denom: f64 = views.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| (dot(a, v) / tau).exp()).sum();
        total -= ((dot(a, &z_aug[i]) / tau).exp() / denom).ln();
    }
    total / z.len() as f64
}

#[test]
fn losses_match_term_by_term_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (n, tau) in [(1, 0.07), (3, 0.1), (6, 0.5), (4, 1.0)] {
        let blocks: Vec<Rows> = (0..4).map(|_| unit_rows(n, 5, &mut rng)).collect();
        let batch = ContrastiveBatch {
            z_sar: tensor(&blocks[0]),
            z_eo: tensor(&blocks[1]),
            z_sar_aug: tensor(&blocks[2]),
            z_eo_aug: tensor(&blocks[3]),
            tau,
        };
        let want = sym_oracle(&blocks[0], &blocks[1], &blocks[2], &blocks[3], tau);
        assert!((sym_loss_value(&batch).unwrap() - want).abs() < 1e-10 * want.abs().max(1.0));
        let want = unsup_oracle(&blocks[0], &blocks[2], tau);
        let got = unsup_loss_value(&tensor(&blocks[0]), &tensor(&blocks[2]), tau).unwrap();
        assert!((got - want).abs() < 1e-10 * want.abs().max(1.0));
    }
}

#[test]
fn unsup_with_two_orthogonal_negatives_by_hand() {
    // anchor matches its positive exactly; the other two views are orthogonal
    let e = |k: usize| -> Vec<f64> { (0..4).map(|i| f64::from(i == k)).collect() };
    let z = vec![e(0), e(1)];
    let z_aug = vec![e(0), e(2)];
    let got = unsup_loss_value(&tensor(&z), &tensor(&z_aug), 1.0).unwrap();
    let first = (1.0 + 2.0 / std::f64::consts::E).ln();
    assert!((first - 0.5514).abs() < 1e-4);
    // second anchor: positive e2 is orthogonal to e1, denominator e0, e0, e2
    let second = 3f64.ln();
    assert!((got - 0.5 * (first + second)).abs() < 1e-12);
}

#[test]
fn saturated_positives_approach_ln2() {
    // sar_i = (2e_i, 1), eo_i = (e_i, -1): positive similarity 1, every cross pair -1.
    // Both positives share one denominator, so each half is bounded by ln 2.
    let n = 8;
    let sar: Rows = (0..n).map(|i| (0..=n).map(|k| if k == n { 1.0 } else { 2.0 * f64::from(k == i) }).collect()).collect();
    let eo: Rows = (0..n).map(|i| (0..=n).map(|k| if k == n { -1.0 } else { f64::from(k == i) }).collect()).collect();
    let batch = ContrastiveBatch { z_sar: tensor(&sar), z_eo: tensor(&eo), z_sar_aug: tensor(&sar), z_eo_aug: tensor(&eo), tau: 0.07 };
    let got = sym_loss_value(&batch).unwrap();
    assert!((got - sym_oracle(&sar, &eo, &sar, &eo, 0.07)).abs() < 1e-12);
    assert!((got - std::f64::consts::LN_2).abs() < 1e-6);
}

#[test]
fn class_token_stays_out_of_frequency_ops() {
    let mut cfg = RunConfig::default();
    cfg.encoder = EncoderConfig { image_size: 16, patch_size: 4, dim: 8, heads: 2, blocks: 3, embed_dim: 6, ..EncoderConfig::default() };
    cfg.data.bands = 8;
    cfg.aft.bands = 2;
    cfg.aft.candidates = 3;
    let spec = CorpusSpec { classes: 2, pairs: 2, size: 16, ..CorpusSpec::default() };
    let pairs = synth_pair_corpus(&spec, 4).unwrap();
    let curves = pair_curves(&cfg, &pairs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let store = encoder::init_model::<f64>(&cfg.encoder, cfg.ablation.refinement(), &cfg.aft, &cfg.fer, &mut rng).unwrap();
    let trainable = encoder::set_trainable(&store, &cfg.encoder, Policy::Pretrain);
    let refs: Vec<_> = pairs.iter().collect();
    let views: Vec<&Image> = view_order(&refs, &pairs);
    let mut tape = Tape::new(&store, &trainable);
    let bc: Vec<_> = curves.iter().collect();
    pretrain_loss(&mut tape, &cfg, mcpt_core::encoder::Input::Images(&views), &bc, 1).unwrap();
    let grid = cfg.encoder.grid();
    let spectral: Vec<_> = tape.graph.records().into_iter().filter(|r| r.name == "dft2").collect();
    assert!(!spectral.is_empty());
    for r in spectral {
        // [B, C, g, g]: the patch grid alone, class token excluded
        assert_eq!(r.input_shapes[0][2..], [grid, grid]);
        assert_eq!(r.input_shapes[0][1], cfg.encoder.dim);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Raising both positives of every anchor can only lower the loss. A private
    /// coordinate per sample carries the boost: sar_i and sar_aug_i get t·e_i,
    /// eo_i and eo_aug_i get e_i, so every cross-pair similarity stays fixed.
    #[test]
    fn sym_loss_falls_as_positives_rise(seed in any::<u64>(), tau in 0.05f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3;
        let blocks: Vec<Rows> = (0..4).map(|_| unit_rows(n, 6, &mut rng)).collect();
        let extend = |rows: &Rows, w: f64| -> Rows {
            rows.iter().enumerate().map(|(i, r)| r.iter().copied().chain((0..n).map(|k| if k == i { w } else { 0.0 })).collect()).collect()
        };
        let loss = |t: f64| -> f64 {
            let batch = ContrastiveBatch {
                z_sar: tensor(&extend(&blocks[0], t)),
                z_eo: tensor(&extend(&blocks[1], 1.0)),
                z_sar_aug: tensor(&extend(&blocks[2], t)),
                z_eo_aug: tensor(&extend(&blocks[3], 1.0)),
                tau,
            };
            sym_loss_value(&batch).unwrap()
        };
        let mut prev = loss(0.0);
        for k in 1..=10 {
            let cur = loss(0.1 * k as f64);
            prop_assert!(cur <= prev + 1e-12);
            prev = cur;
        }
    }
}
