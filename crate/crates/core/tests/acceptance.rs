//! Acceptance harness: one PASS/FAIL line per criterion, non-zero exit on failure.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{LN_2, PI};
use std::time::{Duration, Instant};

use mcpt_core::aft;
use mcpt_core::container;
use mcpt_core::encoder::{self, EncoderConfig, Input, Policy, AFT_PREFIX, FER_PREFIX, PROTOTYPES};
use mcpt_core::eval::{hungarian_accuracy, Protocol};
use mcpt_core::fft::{dft2, idft2};
use mcpt_core::gradcheck::{GradCheck, LossAndGrads};
use mcpt_core::imaging::{
    make_splits, synth_class_corpus, synth_pair, synth_pair_corpus, to_grayscale, ClassRecord, CorpusSpec, NoiseSpec,
    SceneSpec,
};
use mcpt_core::objectives::{sym_loss_value, total_loss, unsup_loss_value, ContrastiveBatch};
use mcpt_core::pipeline::{self, finetune_batch_loss, pretrain_loss, view_order};
use mcpt_core::rng::trunc_normal;
use mcpt_core::spectral::{build_mdc_masks, compute_mdc};
use mcpt_core::{Ablation, GcdSplit, Image, ImagePair, ParamStore, RunConfig, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, budget_s: u64) -> bool {
    elapsed < Duration::from_secs(budget_s)
}

// ---------------------------------------------------------------------------
// 1. spectral

/// Direct double sum with an exact twiddle table.
fn naive_dft2(x: &[f64], n: usize) -> Vec<(f64, f64)> {
    let tw: Vec<(f64, f64)> = (0..n).map(|k| (2.0 * PI * k as f64 / n as f64).sin_cos()).map(|(s, c)| (c, -s)).collect();
    let mut out = vec![(0.0, 0.0); n * n];
    for k in 0..n {
        for l in 0..n {
            let (mut re, mut im) = (0.0, 0.0);
            for m in 0..n {
                let a = tw[(k * m) % n];
                for q in 0..n {
                    let b = tw[(l * q) % n];
                    let (wr, wi) = (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0);
                    let v = x[m * n + q];
                    re += v * wr;
                    im += v * wi;
                }
            }
            out[k * n + l] = (re, im);
        }
    }
    out
}

fn spectral() -> Outcome {
    let n = 64;
    let (mut round, mut parseval, mut oracle) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = Tensor::new(vec![n, n], x.clone()).map_err(|e| e.to_string())?;
        let z = dft2(&t).map_err(|e| e.to_string())?;
        let back = idft2(&z).map_err(|e| e.to_string())?;
        for (i, &v) in x.iter().enumerate() {
            round = round.max((back.data()[2 * i] - v).abs()).max(back.data()[2 * i + 1].abs());
        }
        let e_x: f64 = x.iter().map(|v| v * v).sum();
        let e_z: f64 = z.data().iter().map(|v| v * v).sum::<f64>() / (n * n) as f64;
        parseval = parseval.max((e_z - e_x).abs() / e_x);
        let reference = naive_dft2(&x, n);
        let scale = reference.iter().map(|(r, i)| r.hypot(*i)).fold(0.0, f64::max);
        for (i, (r, im)) in reference.iter().enumerate() {
            let err = (z.data()[2 * i] - r).hypot(z.data()[2 * i + 1] - im) / scale;
            oracle = oracle.max(err);
        }
    }
    check(
        round < 1e-10 && parseval < 1e-9 && oracle < 1e-9,
        format!("round-trip {round:.2e}, Parseval {parseval:.2e}, naive-DFT {oracle:.2e} (100 seeds, 64x64)"),
    )
}

// ---------------------------------------------------------------------------
// 2. MDC

fn offset_pair(eo: &Image, offset: f64) -> ImagePair {
    let gray = to_grayscale(eo).unwrap();
    let sar = Image::new(gray.height, gray.width, 1, gray.data.iter().map(|v| v + offset).collect()).unwrap();
    ImagePair::new("offset", eo.clone(), sar).unwrap()
}

fn mdc() -> Outcome {
    let size = 64;
    let masks = build_mdc_masks(25, size, size).map_err(|e| e.to_string())?;
    let scene = SceneSpec::for_class(1, 3, size);
    let eo = synth_pair(&scene, &NoiseSpec::noiseless(), 0).map_err(|e| e.to_string())?.eo;

    let same = compute_mdc(&offset_pair(&eo, 0.0), &masks).map_err(|e| e.to_string())?;
    let zero_max = same.ratios.iter().cloned().fold(0.0, f64::max);

    let shifted = compute_mdc(&offset_pair(&eo, 0.1), &masks).map_err(|e| e.to_string())?;
    let peak = shifted.ratios.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i + 1).unwrap_or(0);
    let high_max = shifted.centers.iter().zip(&shifted.ratios).filter(|(m, _)| **m >= 0.1).map(|(_, r)| *r).fold(0.0, f64::max);

    let mut wins = 0;
    let noise = NoiseSpec { speckle_strength: 0.3, ..NoiseSpec::default() };
    for seed in 0..100u64 {
        let scene = SceneSpec::for_class((seed % 5) as usize, seed, size);
        let pair = synth_pair(&scene, &noise, seed + 1000).map_err(|e| e.to_string())?;
        let r = compute_mdc(&pair, &masks).map_err(|e| e.to_string())?.ratios;
        let third = r.len() / 3;
        let low: f64 = r[..third].iter().sum::<f64>() / third as f64;
        let high: f64 = r[r.len() - third..].iter().sum::<f64>() / third as f64;
        wins += usize::from(high > low);
    }
    check(
        zero_max < 1e-12 && peak == 1 && high_max < 1e-6 && wins >= 95,
        format!("identical-pair max {zero_max:.1e}; offset pair peaks in band {peak}, max ratio for mu >= 0.1 {high_max:.1e}; speckle high>low in {wins}/100"),
    )
}

// ---------------------------------------------------------------------------
// 3. differentiability

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.encoder = EncoderConfig { image_size: 16, patch_size: 4, dim: 8, heads: 2, blocks: 3, embed_dim: 6, ..EncoderConfig::default() };
    c.data.bands = 8;
    c.aft.bands = 2;
    c.aft.candidates = 3;
    c.aft.phi_hidden = 4;
    c.fer.router_hidden = 4;
    c
}

fn tiny_pairs(n: usize, seed: u64) -> Vec<ImagePair> {
    let spec = CorpusSpec { classes: 3, pairs: n, size: 16, ..CorpusSpec::default() };
    synth_pair_corpus(&spec, seed).unwrap()
}

fn pretrain_grads(cfg: &RunConfig, store: &ParamStore<f64>, trainable: &BTreeSet<String>, pairs: &[ImagePair]) -> mcpt_core::Result<LossAndGrads> {
    let curves = pipeline::pair_curves(cfg, pairs)?;
    let refs: Vec<&ImagePair> = pairs.iter().collect();
    let aug: Vec<ImagePair> = pairs.iter().enumerate().map(|(i, p)| mcpt_core::imaging::augment_pair(p, &cfg.data.augment, 50 + i as u64)).collect();
    let views = view_order(&refs, &aug);
    let cr: Vec<_> = curves.iter().collect();
    let mut tape = Tape::new(store, trainable);
    let loss = pretrain_loss(&mut tape, cfg, Input::Images(&views), &cr, 17)?;
    let v = tape.graph.value(loss.total).item();
    Ok((v, tape.gradients(loss.total)?))
}

fn differentiability() -> Outcome {
    let t0 = Instant::now();
    let cfg = tiny_config();
    let pairs = tiny_pairs(2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let init: ParamStore<f64> =
        encoder::init_model(&cfg.encoder, cfg.ablation.refinement(), &cfg.aft, &cfg.fer, &mut rng).map_err(|e| e.to_string())?;
    // a generic point: at init the attention maps are nearly uniform and some
    // gradients sit below the finite-difference noise floor
    let mut store = ParamStore::new();
    for (n, t) in init.iter() {
        let noise = trunc_normal::<f64>(t.shape(), 0.3, &mut rng);
        let data: Vec<f64> = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
        store.insert(n.clone(), Tensor::new(t.shape().to_vec(), data).unwrap());
    }
    if !(cfg.aft.perturb_scale > 0.0) {
        return Err("perturbation disabled".into());
    }
    let trainable = encoder::set_trainable(&store, &cfg.encoder, Policy::Pretrain);
    let names: Vec<String> = trainable.iter().cloned().collect();
    let gc = GradCheck { step: 1e-5, max_coords: Some(8), seed: 1 };
    let r = gc
        .run(|s| pretrain_grads(&cfg, s, &trainable, &pairs), &store, &names)
        .map_err(|e| e.to_string())?;

    // prototypes enter through the fine-tuning objective
    let mut ft_store = encoder::strip_auxiliary(&store);
    ft_store.insert(PROTOTYPES, trunc_normal(&[3, cfg.encoder.embed_dim], 1.0, &mut rng));
    let ft_train = encoder::set_trainable(&ft_store, &cfg.encoder, Policy::Finetune);
    let images: Vec<Image> = pairs.iter().flat_map(|p| [p.sar.clone(), p.eo.clone()]).map(|i| to_grayscale(&i).unwrap_or(i)).collect();
    let aug: Vec<Image> = images.iter().enumerate().map(|(i, im)| mcpt_core::imaging::augment(im, &cfg.data.augment, i as u64)).collect();
    let rows: Vec<&Image> = images.iter().chain(&aug).collect();
    let labels = [Some(0), None, Some(1), None];
    let ft_loss = |s: &ParamStore<f64>| -> mcpt_core::Result<LossAndGrads> {
        let mut tape = Tape::new(s, &ft_train);
        let t = finetune_batch_loss(&mut tape, &cfg, Input::Images(&rows), &labels)?;
        Ok((tape.graph.value(t.total).item(), tape.gradients(t.total)?))
    };
    let rp = gc.run(ft_loss, &ft_store, &[PROTOTYPES.to_string()]).map_err(|e| e.to_string())?;

    let groups = [
        "aft.phi.", "aft.conv_s.", "aft.conv1.", "fer.expert", "fer.global.", "fer.router.", "blocks.2.", "blocks.3.", "head.",
    ];
    let missing: Vec<&str> = groups.iter().copied().filter(|g| !r.per_param.keys().any(|n| n.starts_with(g))).collect();
    let worst = r.max_rel_error.max(rp.max_rel_error);
    let elapsed = t0.elapsed();
    check(
        worst < 1e-4 && missing.is_empty() && within(elapsed, 180),
        format!(
            "max rel err {worst:.2e} over {} coords in {} tensors + prototypes {:.2e}; missing groups {missing:?}; {:.1}s",
            r.coords_checked,
            r.per_param.len(),
            rp.max_rel_error,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. closed forms

fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut v: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for row in v.chunks_mut(d) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    Tensor::new(vec![n, d], v).unwrap()
}

fn closed_forms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = unit_rows(1, 8, &mut rng);
    let single = ContrastiveBatch { z_sar: z.clone(), z_eo: z.clone(), z_sar_aug: z.clone(), z_eo_aug: z.clone(), tau: 0.07 };
    let sym1 = sym_loss_value(&single).map_err(|e| e.to_string())?;
    let a = unit_rows(1, 8, &mut rng);
    let b = unit_rows(1, 8, &mut rng);
    let uns1 = unsup_loss_value(&a, &b, 0.07).map_err(|e| e.to_string())?;

    let (s, u) = (1.7, 0.4);
    let mut affine = 0.0f64;
    for k in 0..=10 {
        let lam = k as f64 / 10.0;
        let v = total_loss(s, u, lam).map_err(|e| e.to_string())?;
        affine = affine.max((v - (s + lam * (u - s))).abs());
    }

    let batch = ContrastiveBatch {
        z_sar: unit_rows(5, 8, &mut rng),
        z_eo: unit_rows(5, 8, &mut rng),
        z_sar_aug: unit_rows(5, 8, &mut rng),
        z_eo_aug: unit_rows(5, 8, &mut rng),
        tau: 0.1,
    };
    let swapped = ContrastiveBatch {
        z_sar: batch.z_eo.clone(),
        z_eo: batch.z_sar.clone(),
        z_sar_aug: batch.z_eo_aug.clone(),
        z_eo_aug: batch.z_sar_aug.clone(),
        tau: 0.1,
    };
    let swap = (sym_loss_value(&batch).map_err(|e| e.to_string())? - sym_loss_value(&swapped).map_err(|e| e.to_string())?).abs();
    let ln2 = (sym1 - LN_2).abs();
    check(
        ln2 < 1e-9 && uns1 == 0.0 && affine < 1e-12 && swap < 1e-9,
        format!("|sym(N=1) - ln 2| {ln2:.1e}, unsup(N=1) {uns1}, affine {affine:.1e}, swap {swap:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// 5. end-to-end toy experiment

fn store_bytes(s: &ParamStore<f32>) -> Vec<u8> {
    container::encode(s).expect("encodable store")
}

struct ToyRun {
    first_last: (f64, f64),
    pretrain_bytes: Vec<u8>,
    finetune_bytes: Vec<u8>,
    reports: String,
    all: (f64, f64),
    pretrain_time: Duration,
    finetune_time: Duration,
}

fn toy_run(cfg: &RunConfig, pairs: &[ImagePair], records: &[ClassRecord], images: &[Image], split: &GcdSplit) -> mcpt_core::Result<ToyRun> {
    let t0 = Instant::now();
    let pre = pipeline::pretrain(cfg, pairs)?;
    let pretrain_time = t0.elapsed();
    let t1 = Instant::now();
    let ft = pipeline::finetune(cfg, &pre.stripped, images, split)?;
    let finetune_time = t1.elapsed();
    let tr = pipeline::evaluate(&ft.store, cfg, records, images, split, Protocol::Transductive)?.report;
    let ind = pipeline::evaluate(&ft.store, cfg, records, images, split, Protocol::Inductive)?.report;
    Ok(ToyRun {
        first_last: (pre.epoch_means[0], *pre.epoch_means.last().unwrap()),
        pretrain_bytes: store_bytes(&pre.full),
        finetune_bytes: store_bytes(&ft.store),
        reports: format!("{}\n{}", serde_json::to_string(&tr)?, serde_json::to_string(&ind)?),
        all: (tr.all, ind.all),
        pretrain_time,
        finetune_time,
    })
}

fn end_to_end() -> Outcome {
    let cfg = RunConfig::default();
    let pairs = synth_pair_corpus(&CorpusSpec::default(), 1).map_err(|e| e.to_string())?;
    let (records, images) = synth_class_corpus(&CorpusSpec::separable(), 11).map_err(|e| e.to_string())?;
    let old: BTreeSet<usize> = cfg.data.old_classes.iter().copied().collect();
    let split = make_splits(&records, &old, cfg.data.label_fraction, 5).map_err(|e| e.to_string())?;

    let a = toy_run(&cfg, &pairs, &records, &images, &split).map_err(|e| e.to_string())?;
    let b = toy_run(&cfg, &pairs, &records, &images, &split).map_err(|e| e.to_string())?;
    let identical = a.pretrain_bytes == b.pretrain_bytes && a.finetune_bytes == b.finetune_bytes && a.reports == b.reports;

    // rows (a) vs (f): the baseline fine-tunes a random backbone
    let mut base = cfg.clone();
    base.ablation = Ablation::row('a').map_err(|e| e.to_string())?;
    let ft = pipeline::finetune(&base, &pipeline::random_backbone(&base).map_err(|e| e.to_string())?, &images, &split)
        .map_err(|e| e.to_string())?;
    let tr = pipeline::evaluate(&ft.store, &base, &records, &images, &split, Protocol::Transductive).map_err(|e| e.to_string())?.report;
    let ind = pipeline::evaluate(&ft.store, &base, &records, &images, &split, Protocol::Inductive).map_err(|e| e.to_string())?.report;
    println!("      rows (a) vs (f), All transductive/inductive: (a) {:.2}/{:.2}  (f) {:.2}/{:.2}", tr.all, ind.all, a.all.0, a.all.1);

    let (first, last) = a.first_last;
    check(
        last < first
            && a.all.0 >= 90.0
            && a.all.1 >= 90.0
            && identical
            && within(a.pretrain_time, 900)
            && within(a.finetune_time, 600),
        format!(
            "pretrain loss {first:.3} -> {last:.3} in {:.0}s; fine-tune {:.0}s; All {:.2} (transductive) {:.2} (inductive); byte-identical rerun: {identical}",
            a.pretrain_time.as_secs_f64(),
            a.finetune_time.as_secs_f64(),
            a.all.0,
            a.all.1
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. ablation wiring

fn ablation_wiring() -> Outcome {
    let mut base = tiny_config();
    base.schedule.pretrain.epochs = 1;
    base.schedule.pretrain.batch_size = 4;
    base.schedule.finetune.epochs = 1;
    base.schedule.finetune.batch_size = 8;
    let spec = CorpusSpec { classes: 3, pairs: 8, train_per_class: 4, test_per_class: 2, size: 16, ..CorpusSpec::default() };
    let pairs = synth_pair_corpus(&spec, 1).map_err(|e| e.to_string())?;
    let (records, images) = synth_class_corpus(&spec, 2).map_err(|e| e.to_string())?;
    let split = make_splits(&records, &[0, 1].into_iter().collect(), 0.5, 3).map_err(|e| e.to_string())?;

    let mut ran = Vec::new();
    for row in ['a', 'b', 'c', 'd', 'e', 'f'] {
        let flags = serde_json::to_string(&Ablation::row(row).unwrap()).unwrap();
        let cfg = base.with_overrides(&[("ablation".into(), flags)]).map_err(|e| e.to_string())?;
        let out = pipeline::run_experiment(&cfg, &pairs, &records, &images, &split).map_err(|e| format!("row ({row}): {e}"))?;
        if out.pretrain.is_some() != (row != 'a') {
            return Err(format!("row ({row}) pretraining presence is wrong"));
        }
        ran.push(row);
    }

    // row (c): the expert branch never sees the loss
    let mut cfg_c = tiny_config();
    cfg_c.ablation = Ablation::row('c').unwrap();
    let store: ParamStore<f64> = encoder::init_model(
        &cfg_c.encoder,
        cfg_c.ablation.refinement(),
        &cfg_c.aft,
        &cfg_c.fer,
        &mut ChaCha8Rng::seed_from_u64(2),
    )
    .map_err(|e| e.to_string())?;
    let trainable = encoder::set_trainable(&store, &cfg_c.encoder, Policy::Pretrain);
    let (_, grads) = pretrain_grads(&cfg_c, &store, &trainable, &tiny_pairs(2, 6)).map_err(|e| e.to_string())?;
    let expert: Vec<&String> = grads.keys().filter(|n| n.starts_with("fer.expert") || n.starts_with("fer.router")).collect();
    let expert_zero = !expert.is_empty() && expert.iter().all(|n| grads[*n].data().iter().all(|&g| g == 0.0));
    let global_live = grads.iter().any(|(n, g)| n.starts_with("fer.global.sa") && g.data().iter().any(|&v| v != 0.0));

    // ape off: every candidate equals the partition estimate
    let cfg_e = Ablation::row('e').unwrap().effective_aft(&tiny_config().aft);
    let pair = &tiny_pairs(1, 7)[0];
    let curve = compute_mdc(pair, &build_mdc_masks(8, 16, 16).unwrap()).map_err(|e| e.to_string())?;
    let mut s = ParamStore::<f64>::new();
    aft::init_params(&mut s, AFT_PREFIX, 4, &cfg_e, &mut ChaCha8Rng::seed_from_u64(0));
    let none = BTreeSet::new();
    let mut tape = Tape::new(&s, &none);
    let x = tape.graph.constant(trunc_normal(&[1, 4, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
    let fwd = aft::forward(&mut tape, AFT_PREFIX, &cfg_e, x, &[&curve], 99).map_err(|e| e.to_string())?;
    let pinned = cfg_e.perturb_scale == 0.0
        && fwd.draws.iter().all(|d| d.candidates.iter().all(|c| *c == [d.init.mu_hat, d.init.sigma_hat]));

    check(
        ran.len() == 6 && expert_zero && global_live && pinned,
        format!(
            "rows {ran:?} ran end-to-end; row (c) {} expert/router tensors with zero gradient: {expert_zero}; ape off pins candidates: {pinned}",
            expert.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. evaluation oracle

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

fn evaluation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    let mut invariant = true;
    for _ in 0..200 {
        let k = rng.gen_range(1..=6);
        let n = rng.gen_range(1..=40);
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let old: BTreeSet<usize> = (0..k).filter(|_| rng.gen_bool(0.5)).collect();
        let got = hungarian_accuracy(&pred, &truth, &old).map_err(|e| e.to_string())?;
        let best = permutations(k)
            .iter()
            .map(|perm| pred.iter().zip(&truth).filter(|(p, t)| perm[**p] == **t).count())
            .max()
            .unwrap();
        worst = worst.max((got.all - 100.0 * best as f64 / n as f64).abs());

        let mut relabel: Vec<usize> = (0..k).collect();
        relabel.shuffle(&mut rng);
        let renamed: Vec<usize> = pred.iter().map(|&p| relabel[p]).collect();
        let again = hungarian_accuracy(&renamed, &truth, &old).map_err(|e| e.to_string())?;
        invariant &= again.all == got.all && again.old == got.old && again.new == got.new;
    }
    check(worst < 1e-9 && invariant, format!("200 instances, max |Hungarian - brute force| {worst:.1e}; relabel-invariant: {invariant}"))
}

// ---------------------------------------------------------------------------
// 8. auxiliary removal

fn auxiliary_removal() -> Outcome {
    let mut cfg = tiny_config();
    cfg.schedule.pretrain.epochs = 1;
    cfg.schedule.pretrain.batch_size = 4;
    let pairs = tiny_pairs(8, 3);
    let out = pipeline::pretrain(&cfg, &pairs).map_err(|e| e.to_string())?;
    let fewer = out.stripped.numel() < out.full.numel() && out.stripped.len() < out.full.len();
    let clean = !out.stripped.names().any(|n| n.starts_with(AFT_PREFIX) || n.starts_with(FER_PREFIX));

    let mut reinit = out.full.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let names: Vec<String> = reinit.names().filter(|n| n.starts_with(AFT_PREFIX) || n.starts_with(FER_PREFIX)).cloned().collect();
    for n in &names {
        let shape = reinit.get(n).unwrap().shape().to_vec();
        reinit.insert(n.clone(), trunc_normal(&shape, 1.0, &mut rng));
    }
    let imgs: Vec<&Image> = pairs.iter().map(|p| &p.sar).collect();
    let e_full = encoder::embed(&out.full, &cfg.encoder, &imgs, 4).map_err(|e| e.to_string())?;
    let e_reinit = encoder::embed(&reinit, &cfg.encoder, &imgs, 4).map_err(|e| e.to_string())?;
    let e_strip = encoder::embed(&out.stripped, &cfg.encoder, &imgs, 4).map_err(|e| e.to_string())?;
    let invariant = e_full.data() == e_reinit.data() && e_full.data() == e_strip.data();
    check(
        fewer && clean && invariant && !names.is_empty(),
        format!(
            "{} -> {} parameters ({} -> {} tensors); no AFT/FER left: {clean}; output invariant to {} reinitialized tensors: {invariant}",
            out.full.numel(),
            out.stripped.numel(),
            out.full.len(),
            out.stripped.len(),
            names.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("spectral suite", spectral),
        ("MDC suite", mdc),
        ("differentiability", differentiability),
        ("loss closed forms", closed_forms),
        ("end-to-end toy experiment", end_to_end),
        ("ablation wiring", ablation_wiring),
        ("evaluation oracle", evaluation_oracle),
        ("auxiliary removal", auxiliary_removal),
    ];
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = BTreeMap::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let res = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(d) => println!("PASS {id} {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                println!("FAIL {id} {name}: {d} [{secs:.1}s]");
                failed.insert(id, name);
            }
        }
    }
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
