//! Two-stage training: paired contrastive pretraining, then single-modality
//! fine-tuning with prototypes, plus evaluation and the ablation runner.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aft::AftForward;
use crate::config::{CurveSource, RunConfig};
use crate::encoder::{self, EncodeOut, Input, Policy, PretrainPath, Refinement, Sidecar, PROTOTYPES};
use crate::error::{invalid, shape, Error, Result};
use crate::eval::{self, EvalReport, Protocol};
use crate::imaging::{augment, augment_pair, ClassRecord, GcdSplit, Image, ImagePair, SplitEntry};
use crate::objectives::{self, FinetuneTerms};
use crate::optim::{cosine_lr, AdamW, Sgd};
use crate::params::{ParamStore, Tape};
use crate::rng::{stream_seed, RngStreams};
use crate::spectral::{build_mdc_masks, compute_mdc, DiscrepancyCurve};
use crate::tensor::{Scalar, Tensor};
use crate::autodiff::Var;

/// Chunk size for gradient-free forward passes.
const CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: u64,
    pub l_sym: f64,
    pub l_unsup: f64,
    pub l_total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub epoch: usize,
    pub step: u64,
    pub cls: f64,
    pub con: f64,
    pub reg: f64,
    pub total: f64,
    pub lr: f64,
}

/// One JSON object per line.
pub fn write_jsonl<W: Write, R: Serialize>(mut out: W, records: &[R]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Stack `[n_i, ...]` tensors along the leading axis.
pub fn stack_leading<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| invalid("nothing to stack"))?;
    let tail = &first.shape()[1..];
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        if &p.shape()[1..] != tail {
            return Err(shape(format!("cannot stack {:?} onto {:?}", p.shape(), first.shape())));
        }
        rows += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let mut dims = vec![rows];
    dims.extend_from_slice(tail);
    Tensor::new(dims, data)
}

fn hidden_chunked<T: Scalar>(store: &ParamStore<T>, cfg: &RunConfig, images: &[&Image], after: usize) -> Result<Tensor<T>> {
    let parts = images
        .chunks(CHUNK)
        .map(|c| encoder::hidden_states(store, &cfg.encoder, c, after))
        .collect::<Result<Vec<_>>>()?;
    stack_leading(&parts.iter().collect::<Vec<_>>())
}

fn row_block<T: Scalar>(t: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    let width: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
    }
    let mut dims = vec![rows.len()];
    dims.extend_from_slice(&t.shape()[1..]);
    Tensor::new(dims, data)
}

// ---------------------------------------------------------------------------
// pretraining

pub struct PretrainLoss {
    pub l_sym: Var,
    pub l_unsup: Var,
    pub total: Var,
    pub aft: Option<AftForward>,
    pub routing: Option<Var>,
}

/// Views ordered `[eo, eo_aug, sar, sar_aug]`, `B` each.
pub fn view_order<'a>(pairs: &[&'a ImagePair], augmented: &'a [ImagePair]) -> Vec<&'a Image> {
    let mut v: Vec<&Image> = pairs.iter().map(|p| &p.eo).collect();
    v.extend(augmented.iter().map(|p| &p.eo));
    v.extend(pairs.iter().map(|p| &p.sar));
    v.extend(augmented.iter().map(|p| &p.sar));
    v
}

/// Pretraining objective for `4B` views in [`view_order`]; `curves` has one
/// entry per pair and is shared by all four views of that pair.
pub fn pretrain_loss<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &RunConfig,
    views: Input<'_, T>,
    curves: &[&DiscrepancyCurve],
    seed: u64,
) -> Result<PretrainLoss> {
    let b = curves.len();
    if b == 0 {
        return Err(invalid("empty pretraining batch"));
    }
    let aft_cfg = cfg.ablation.effective_aft(&cfg.aft);
    let all_curves: Vec<&DiscrepancyCurve> = (0..4).flat_map(|_| curves.iter().copied()).collect();
    let path = PretrainPath { refinement: cfg.ablation.refinement(), aft: &aft_cfg, curves: &all_curves, seed };
    let EncodeOut { embedding: z, aft, routing, .. } = encoder::encode(tape, &cfg.encoder, views, Some(&path))?;
    let g = &mut tape.graph;
    if g.shape(z)[0] != 4 * b {
        return Err(shape(format!("{} views for {b} pairs", g.shape(z)[0])));
    }
    let eo = g.slice(z, 0, 0, b)?;
    let eo_aug = g.slice(z, 0, b, b)?;
    let sar = g.slice(z, 0, 2 * b, b)?;
    let sar_aug = g.slice(z, 0, 3 * b, b)?;
    let tau = cfg.loss.tau;
    let l_sym = objectives::sym_loss(g, sar, eo, sar_aug, eo_aug, tau)?;
    let u_eo = objectives::unsup_loss(g, eo, eo_aug, tau)?;
    let u_sar = objectives::unsup_loss(g, sar, sar_aug, tau)?;
    let u = g.add(u_eo, u_sar)?;
    let l_unsup = g.scale(u, T::c(0.5));
    let total = objectives::total_loss_graph(g, l_sym, l_unsup, cfg.loss.lambda)?;
    Ok(PretrainLoss { l_sym, l_unsup, total, aft, routing })
}

/// Discrepancy curve for every pair, or the dataset mean repeated.
pub fn pair_curves(cfg: &RunConfig, pairs: &[ImagePair]) -> Result<Vec<DiscrepancyCurve>> {
    let first = pairs.first().ok_or_else(|| invalid("empty paired corpus"))?;
    let masks = build_mdc_masks(cfg.data.bands, first.sar.height, first.sar.width)?;
    let curves = pairs.iter().map(|p| compute_mdc(p, &masks)).collect::<Result<Vec<_>>>()?;
    Ok(match cfg.data.curve_source {
        CurveSource::PerSample => curves,
        CurveSource::DatasetMean => vec![DiscrepancyCurve::mean(&curves)?; pairs.len()],
    })
}

pub struct PretrainOutput {
    /// Backbone plus AFT/FER.
    pub full: ParamStore<f32>,
    /// Inference-only parameters.
    pub stripped: ParamStore<f32>,
    pub log: Vec<LossRecord>,
    pub epoch_means: Vec<f64>,
    pub sidecar: Sidecar,
}

fn batches(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    // a trailing singleton carries no contrastive signal
    order.chunks(batch).filter(|c| c.len() >= 2 || n == 1).map(<[usize]>::to_vec).collect()
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    let full = n / batch;
    let rest = n % batch;
    full + usize::from(rest >= 2 || (n == 1 && rest == 1))
}

pub fn pretrain(cfg: &RunConfig, pairs: &[ImagePair]) -> Result<PretrainOutput> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(invalid("empty paired corpus"));
    }
    if !cfg.ablation.mcpt {
        return Err(invalid("pretraining requested with ablation.mcpt = false"));
    }
    let sched = &cfg.schedule.pretrain;
    let curves = pair_curves(cfg, pairs)?;
    let mut streams = RngStreams::new(cfg.seed);
    let refinement = cfg.ablation.refinement();
    let aft_cfg = cfg.ablation.effective_aft(&cfg.aft);
    let mut store: ParamStore<f32> =
        encoder::init_model(&cfg.encoder, refinement, &aft_cfg, &cfg.fer, streams.stream("init"))?;
    let trainable = encoder::set_trainable(&store, &cfg.encoder, Policy::Pretrain);

    // blocks before L−1 are frozen, so the clean views are encoded once
    let after = cfg.encoder.blocks - 2;
    let mut cached = None;
    if after > 0 {
        let eo: Vec<&Image> = pairs.iter().map(|p| &p.eo).collect();
        let sar: Vec<&Image> = pairs.iter().map(|p| &p.sar).collect();
        cached = Some((hidden_chunked(&store, cfg, &eo, after)?, hidden_chunked(&store, cfg, &sar, after)?));
    }

    let per_epoch = steps_per_epoch(pairs.len(), sched.batch_size);
    let total_steps = sched.epochs * per_epoch;
    let mut opt = AdamW::<f32>::new(sched.weight_decay);
    let mut log = Vec::with_capacity(total_steps);
    let mut epoch_means = Vec::with_capacity(sched.epochs);
    let mut step = 0usize;
    for epoch in 0..sched.epochs {
        let order = batches(pairs.len(), sched.batch_size, streams.stream("data"));
        let mut sum = 0.0;
        for idx in &order {
            let batch: Vec<&ImagePair> = idx.iter().map(|&i| &pairs[i]).collect();
            let aug: Vec<ImagePair> =
                batch.iter().map(|p| augment_pair(p, &cfg.data.augment, streams.next_seed("augment"))).collect();
            let bc: Vec<&DiscrepancyCurve> = idx.iter().map(|&i| &curves[i]).collect();
            let aft_seed = streams.next_seed("aft");
            let lr = cosine_lr(step, total_steps, sched.lr, sched.lr_min)?;
            let views = match &cached {
                Some((eo_h, sar_h)) => {
                    let aug_eo: Vec<&Image> = aug.iter().map(|p| &p.eo).collect();
                    let aug_sar: Vec<&Image> = aug.iter().map(|p| &p.sar).collect();
                    let parts = [
                        row_block(eo_h, idx)?,
                        encoder::hidden_states(&store, &cfg.encoder, &aug_eo, after)?,
                        row_block(sar_h, idx)?,
                        encoder::hidden_states(&store, &cfg.encoder, &aug_sar, after)?,
                    ];
                    Some(stack_leading(&parts.iter().collect::<Vec<_>>())?)
                }
                None => None,
            };
            let images = view_order(&batch, &aug);
            let (rec, grads) = {
                let mut tape = Tape::new(&store, &trainable);
                let input = match views {
                    Some(states) => Input::Hidden { states, after },
                    None => Input::Images(&images),
                };
                let loss = pretrain_loss(&mut tape, cfg, input, &bc, aft_seed)?;
                let g = &tape.graph;
                let rec = LossRecord {
                    epoch,
                    step: step as u64,
                    l_sym: g.value(loss.l_sym).item().f64(),
                    l_unsup: g.value(loss.l_unsup).item().f64(),
                    l_total: g.value(loss.total).item().f64(),
                    lr,
                };
                if !(rec.l_sym.is_finite() && rec.l_unsup.is_finite() && rec.l_total.is_finite()) {
                    let ids: Vec<&str> = batch.iter().map(|p| p.pair_id.as_str()).collect();
                    return Err(Error::NonFinite(format!(
                        "pretraining loss at epoch {epoch}, step {step} (l_sym {}, l_unsup {}, l_total {}); batch pairs: [{}]",
                        rec.l_sym,
                        rec.l_unsup,
                        rec.l_total,
                        ids.join(", ")
                    )));
                }
                (rec, tape.gradients(loss.total)?)
            };
            opt.step(&mut store, &grads, lr)?;
            sum += rec.l_total;
            log.push(rec);
            step += 1;
        }
        epoch_means.push(sum / order.len() as f64);
    }
    let sidecar = Sidecar { config: serde_json::to_value(cfg)?, step: step as u64, rng_streams: streams.state() };
    let stripped = encoder::strip_auxiliary(&store);
    Ok(PretrainOutput { full: store, stripped, log, epoch_means, sidecar })
}

// ---------------------------------------------------------------------------
// fine-tuning

/// Prototype count: the configured value or the split's class count.
pub fn class_count(cfg: &RunConfig, split: &GcdSplit) -> Result<usize> {
    let k = cfg.data.num_classes.unwrap_or_else(|| split.num_classes());
    let need = split.old_classes.len() + usize::from(!split.new_classes.is_empty());
    if k < need.max(1) {
        return Err(invalid(format!(
            "{k} classes cannot cover {} old classes plus new ones",
            split.old_classes.len()
        )));
    }
    Ok(k)
}

/// Old classes map to prototypes `0..|old|` in ascending id order.
pub fn prototype_labels(split: &GcdSplit, entries: &[(SplitEntry, bool)]) -> Vec<Option<usize>> {
    let old: Vec<usize> = split.old_classes.iter().copied().collect();
    entries
        .iter()
        .map(|(e, labeled)| if *labeled { old.binary_search(&e.class_id).ok() } else { None })
        .collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (y - x)).sum::<f64>().abs()
}

/// Semi-supervised k-means: labeled rows are pinned to their prototype,
/// missing centers are seeded k-means++ style from unlabeled rows.
pub fn init_prototypes(rows: &[Vec<f64>], labels: &[Option<usize>], k: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    let d = rows.first().map(Vec::len).ok_or_else(|| invalid("no embeddings for prototype init"))?;
    if labels.len() != rows.len() {
        return Err(shape("labels and embeddings disagree in length"));
    }
    let mean_of = |members: &[usize]| -> Vec<f64> {
        let mut c = vec![0.0; d];
        for &i in members {
            for (a, v) in c.iter_mut().zip(&rows[i]) {
                *a += v;
            }
        }
        c.iter_mut().for_each(|a| *a /= members.len() as f64);
        c
    };
    let mut centers: Vec<Option<Vec<f64>>> = (0..k)
        .map(|j| {
            let members: Vec<usize> = (0..rows.len()).filter(|&i| labels[i] == Some(j)).collect();
            (!members.is_empty()).then(|| mean_of(&members))
        })
        .collect();
    let unlabeled: Vec<usize> = (0..rows.len()).filter(|&i| labels[i].is_none()).collect();
    for j in 0..k {
        if centers[j].is_some() {
            continue;
        }
        let placed: Vec<&Vec<f64>> = centers.iter().flatten().collect();
        let weights: Vec<f64> = unlabeled
            .iter()
            .map(|&i| placed.iter().map(|c| dist2(&rows[i], c)).fold(f64::INFINITY, f64::min))
            .map(|w| if w.is_finite() { w } else { 1.0 })
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if unlabeled.is_empty() {
            None
        } else if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = unlabeled[unlabeled.len() - 1];
            for (&i, &w) in unlabeled.iter().zip(&weights) {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            Some(chosen)
        } else {
            Some(unlabeled[rng.gen_range(0..unlabeled.len())])
        };
        centers[j] = Some(match pick {
            Some(i) => rows[i].clone(),
            None => (0..d).map(|_| rng.gen::<f64>() - 0.5).collect(),
        });
    }
    let mut centers: Vec<Vec<f64>> = centers.into_iter().flatten().collect();
    let mut assign: Vec<usize> = labels.iter().map(|y| y.unwrap_or(0)).collect();
    for _ in 0..50 {
        let mut changed = false;
        for &i in &unlabeled {
            let best = (0..k)
                .min_by(|&a, &b| dist2(&rows[i], &centers[a]).total_cmp(&dist2(&rows[i], &centers[b])))
                .unwrap_or(0);
            changed |= assign[i] != best;
            assign[i] = best;
        }
        for (j, c) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..rows.len()).filter(|&i| assign[i] == j).collect();
            if !members.is_empty() {
                *c = mean_of(&members);
            }
        }
        if !changed {
            break;
        }
    }
    for c in &mut centers {
        let n = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        c.iter_mut().for_each(|v| *v /= n);
    }
    Ok(centers)
}

/// Fine-tuning objective for `2M` rows: `M` originals then their augmented views.
pub fn finetune_batch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &RunConfig,
    views: Input<'_, T>,
    labels: &[Option<usize>],
) -> Result<FinetuneTerms> {
    let m = labels.len();
    let out = encoder::encode(tape, &cfg.encoder, views, None)?;
    let protos = tape.p(PROTOTYPES)?;
    let g = &mut tape.graph;
    if g.shape(out.embedding)[0] != 2 * m {
        return Err(shape(format!("{} rows for {m} labels", g.shape(out.embedding)[0])));
    }
    let z = g.slice(out.embedding, 0, 0, m)?;
    let z_aug = g.slice(out.embedding, 0, m, m)?;
    objectives::finetune_loss(g, z, z_aug, protos, labels, &cfg.loss)
}

pub struct FinetuneOutput {
    /// Model parameters plus `prototypes` `[K, E]`.
    pub store: ParamStore<f32>,
    pub log: Vec<FinetuneRecord>,
    pub sidecar: Sidecar,
}

/// Train the finetune-policy set and the prototypes on `D_l ∪ D_u`.
pub fn finetune(cfg: &RunConfig, init: &ParamStore<f32>, images: &[Image], split: &GcdSplit) -> Result<FinetuneOutput> {
    cfg.validate()?;
    if encoder::has_auxiliary(init) {
        return Err(invalid("fine-tuning needs a stripped checkpoint; AFT/FER tensors are present"));
    }
    let k = class_count(cfg, split)?;
    let entries: Vec<(SplitEntry, bool)> =
        split.labeled.iter().map(|e| (*e, true)).chain(split.unlabeled.iter().map(|e| (*e, false))).collect();
    if entries.is_empty() {
        return Err(invalid("fine-tuning split has no training samples"));
    }
    if let Some((e, _)) = entries.iter().find(|(e, _)| e.index >= images.len()) {
        return Err(invalid(format!("split index {} outside a corpus of {}", e.index, images.len())));
    }
    let labels = prototype_labels(split, &entries);
    let mut streams = RngStreams::new(stream_seed(cfg.seed, "finetune"));
    let mut store = init.clone();
    let pool: Vec<&Image> = entries.iter().map(|(e, _)| &images[e.index]).collect();

    let after = cfg.encoder.blocks - 1;
    let cached = hidden_chunked(&store, cfg, &pool, after)?;
    let emb = embed_hidden(&store, cfg, &cached, after)?;
    let rows: Vec<Vec<f64>> = emb.data().chunks(cfg.encoder.embed_dim).map(<[f64]>::to_vec).collect();
    let centers = init_prototypes(&rows, &labels, k, streams.stream("init"))?;
    let flat: Vec<f64> = centers.into_iter().flatten().collect();
    store.insert(PROTOTYPES, Tensor::from_f64(&[k, cfg.encoder.embed_dim], &flat)?);
    let trainable = encoder::set_trainable(&store, &cfg.encoder, Policy::Finetune);

    let sched = &cfg.schedule.finetune;
    let per_epoch = steps_per_epoch(entries.len(), sched.batch_size);
    let total_steps = (sched.epochs * per_epoch).max(1);
    let mut opt = Sgd::<f32>::new(sched.momentum, sched.weight_decay);
    let mut log = Vec::new();
    let mut step = 0usize;
    for epoch in 0..sched.epochs {
        for idx in batches(entries.len(), sched.batch_size, streams.stream("data")) {
            let aug: Vec<Image> =
                idx.iter().map(|&i| augment(pool[i], &cfg.data.augment, streams.next_seed("augment"))).collect();
            let aug_refs: Vec<&Image> = aug.iter().collect();
            let states = stack_leading(&[&row_block(&cached, &idx)?, &hidden_chunked(&store, cfg, &aug_refs, after)?])?;
            let batch_labels: Vec<Option<usize>> = idx.iter().map(|&i| labels[i]).collect();
            let lr = cosine_lr(step, total_steps, sched.lr, sched.lr_min)?;
            let (rec, grads) = {
                let mut tape = Tape::new(&store, &trainable);
                let t = finetune_batch_loss(&mut tape, cfg, Input::Hidden { states, after }, &batch_labels)?;
                let g = &tape.graph;
                let v = |x: Var| g.value(x).item().f64();
                let rec = FinetuneRecord { epoch, step: step as u64, cls: v(t.cls), con: v(t.con), reg: v(t.reg), total: v(t.total), lr };
                if !rec.total.is_finite() {
                    return Err(Error::NonFinite(format!("fine-tuning loss at epoch {epoch}, step {step}")));
                }
                (rec, tape.gradients(t.total)?)
            };
            opt.step(&mut store, &grads, lr)?;
            log.push(rec);
            step += 1;
        }
    }
    let sidecar = Sidecar { config: serde_json::to_value(cfg)?, step: step as u64, rng_streams: streams.state() };
    Ok(FinetuneOutput { store, log, sidecar })
}

fn embed_hidden<T: Scalar>(store: &ParamStore<T>, cfg: &RunConfig, states: &Tensor<T>, after: usize) -> Result<Tensor<f64>> {
    let n = states.shape()[0];
    let frozen = BTreeSet::new();
    let mut data = Vec::with_capacity(n * cfg.encoder.embed_dim);
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let mut tape = Tape::new(store, &frozen);
        let out = encoder::encode(&mut tape, &cfg.encoder, Input::Hidden { states: row_block(states, &idx)?, after }, None)?;
        data.extend(tape.graph.value(out.embedding).to_f64_vec());
    }
    Tensor::new(vec![n, cfg.encoder.embed_dim], data)
}

// ---------------------------------------------------------------------------
// evaluation

pub struct EvalOutput {
    pub report: EvalReport,
    pub embeddings: Tensor<f64>,
    pub ids: Vec<String>,
    pub truth: Vec<usize>,
    pub pred: Vec<usize>,
}

/// Predict by nearest prototype on `D_u` (transductive) or `D_test` (inductive).
pub fn evaluate<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &RunConfig,
    records: &[ClassRecord],
    images: &[Image],
    split: &GcdSplit,
    protocol: Protocol,
) -> Result<EvalOutput> {
    let entries = match protocol {
        Protocol::Transductive => &split.unlabeled,
        Protocol::Inductive => &split.test,
    };
    if entries.is_empty() {
        return Err(invalid(format!("{protocol:?} evaluation needs a non-empty {} set", match protocol {
            Protocol::Transductive => "unlabeled",
            Protocol::Inductive => "test",
        })));
    }
    if records.len() != images.len() || entries.iter().any(|e| e.index >= images.len()) {
        return Err(invalid("split does not index into the given corpus"));
    }
    let protos = store.require(PROTOTYPES)?.cast::<f64>();
    let batch: Vec<&Image> = entries.iter().map(|e| &images[e.index]).collect();
    let embeddings = encoder::embed(store, &cfg.encoder, &batch, CHUNK)?.cast::<f64>();
    let pred = eval::assign_to_prototypes(&embeddings, &protos)?;
    let truth: Vec<usize> = entries.iter().map(|e| e.class_id).collect();
    let ids: Vec<String> = entries.iter().map(|e| records[e.index].image_path.clone()).collect();
    let classes = split.old_classes.iter().chain(&split.new_classes).max().map_or(0, |m| m + 1);
    let names = (0..classes.max(protos.shape()[0])).map(|c| format!("class_{c}")).collect();
    let report = eval::build_report(protocol, &pred, &truth, &split.old_classes, &embeddings, names)?;
    Ok(EvalOutput { report, embeddings, ids, truth, pred })
}

/// Per-band token energy maps for the SAR view of each pair, using a full
/// (unstripped) pretraining checkpoint with candidate perturbation off.
pub fn token_maps(cfg: &RunConfig, full: &ParamStore<f32>, pairs: &[ImagePair], curves: &[DiscrepancyCurve], seed: u64) -> Result<Vec<(String, Vec<Tensor<f64>>)>> {
    if cfg.ablation.refinement() != Refinement::Experts || !full.has_prefix(encoder::AFT_PREFIX) {
        return Err(invalid("token maps need a full checkpoint trained with frequency tokens"));
    }
    if pairs.len() != curves.len() {
        return Err(invalid(format!("{} pairs with {} curves", pairs.len(), curves.len())));
    }
    let store = full.cast::<f64>();
    let mut aft_cfg = cfg.ablation.effective_aft(&cfg.aft);
    aft_cfg.perturb_scale = 0.0;
    let (p, c, grid) = (cfg.encoder.patches(), cfg.encoder.dim, cfg.encoder.grid());
    let after = cfg.encoder.blocks - 1;
    let mut out = Vec::with_capacity(pairs.len());
    for (pair, curve) in pairs.iter().zip(curves) {
        let h = encoder::hidden_states(&store, &cfg.encoder, &[&pair.sar], after)?;
        // drop the class token and lay patch rows out as a [1, C, g, g] grid
        let rows = &h.data()[c..(p + 1) * c];
        let mut planar = vec![0.0; p * c];
        for (i, row) in rows.chunks(c).enumerate() {
            for (ch, v) in row.iter().enumerate() {
                planar[ch * p + i] = *v;
            }
        }
        let x = Tensor::new(vec![1, c, grid, grid], planar)?;
        let (tokens, _) = crate::aft::forward_values(&store, encoder::AFT_PREFIX, &aft_cfg, &x, &[curve], seed)?;
        let maps = tokens
            .iter()
            .map(|t| crate::aft::token_energy(&t.clone().reshape(&[c, grid, grid])?))
            .collect::<Result<Vec<_>>>()?;
        out.push((pair.pair_id.clone(), maps));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// end to end

pub struct ExperimentOutput {
    /// `None` when `ablation.mcpt` is off.
    pub pretrain: Option<PretrainOutput>,
    pub finetune: FinetuneOutput,
    pub transductive: EvalReport,
    pub inductive: Option<EvalReport>,
}

/// Random backbone without AFT/FER, drawn from the run's init stream.
pub fn random_backbone(cfg: &RunConfig) -> Result<ParamStore<f32>> {
    let mut streams = RngStreams::new(cfg.seed);
    encoder::init_model(&cfg.encoder, Refinement::None, &cfg.aft, &cfg.fer, streams.stream("init"))
}

/// Pretrain (unless `mcpt` is off), fine-tune, then score both protocols.
pub fn run_experiment(
    cfg: &RunConfig,
    pairs: &[ImagePair],
    records: &[ClassRecord],
    images: &[Image],
    split: &GcdSplit,
) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let (pretrained, init) = if cfg.ablation.mcpt {
        let p = pretrain(cfg, pairs)?;
        let s = p.stripped.clone();
        (Some(p), s)
    } else {
        (None, random_backbone(cfg)?)
    };
    let ft = finetune(cfg, &init, images, split)?;
    let transductive = evaluate(&ft.store, cfg, records, images, split, Protocol::Transductive)?.report;
    let inductive = if split.test.is_empty() {
        None
    } else {
        Some(evaluate(&ft.store, cfg, records, images, split, Protocol::Inductive)?.report)
    };
    Ok(ExperimentOutput { pretrain: pretrained, finetune: ft, transductive, inductive })
}
