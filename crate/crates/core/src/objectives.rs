//! Contrastive pretraining losses and the prototype fine-tuning objective.
//!
//! Every loss is built on a [`Graph`] so the same code serves training and
//! gradient checks. The `*_value` helpers evaluate on plain tensors.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, shape, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    pub tau_proto: f64,
    pub confidence: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { tau: 0.07, lambda: 0.5, tau_proto: 0.1, confidence: 0.7 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        check_tau(self.tau_proto)?;
        check_lambda(self.lambda)?;
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(invalid("confidence threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

fn rows(g: &Graph<impl Scalar>, v: Var) -> Result<(usize, usize)> {
    match g.shape(v) {
        [n, d] => Ok((*n, *d)),
        s => Err(shape(format!("expected a [N, D] embedding block, got {s:?}"))),
    }
}

/// `a[N,D] · b[M,D]ᵀ -> [N,M]`.
pub fn similarity<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let (n, d) = rows(g, a)?;
    let (m, d2) = rows(g, b)?;
    if d != d2 {
        return Err(shape(format!("similarity of width {d} and {d2}")));
    }
    let a3 = g.reshape(a, &[1, n, d])?;
    let b3 = g.reshape(b, &[1, m, d])?;
    let s = g.bmm(a3, b3, true)?;
    g.reshape(s, &[n, m])
}

/// One direction: anchors `a`, candidates `b ∪ b_aug`, both positives of
/// anchor `i` at columns `i` and `N+i`. Returns the per-anchor sum.
fn direction<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, b_aug: Var, tau: f64) -> Result<Var> {
    let (n, _) = rows(g, a)?;
    let cand = g.concat(&[b, b_aug], 0)?;
    let s = similarity(g, a, cand)?;
    let s = g.scale(s, T::c(1.0 / tau));
    let lse = g.logsumexp(s, None)?;
    let idx: Vec<usize> = (0..n).flat_map(|i| [i * 2 * n + i, i * 2 * n + n + i]).collect();
    let pos = g.gather(s, idx, &[n, 2])?;
    let pos = g.sum_last(pos)?;
    let pos = g.scale(pos, T::c(0.5));
    let l = g.sub(lse, pos)?;
    Ok(g.sum_all(l))
}

/// Symmetric cross-modal loss over both directions.
pub fn sym_loss<T: Scalar>(g: &mut Graph<T>, z_sar: Var, z_eo: Var, z_sar_aug: Var, z_eo_aug: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let (n, d) = rows(g, z_sar)?;
    for v in [z_eo, z_sar_aug, z_eo_aug] {
        if rows(g, v)? != (n, d) {
            return Err(shape("all four embedding blocks must share [N, D]"));
        }
    }
    if n == 0 {
        return Err(invalid("empty batch"));
    }
    let fwd = direction(g, z_sar, z_eo, z_eo_aug, tau)?;
    let bwd = direction(g, z_eo, z_sar, z_sar_aug, tau)?;
    let s = g.add(fwd, bwd)?;
    Ok(g.scale(s, T::c(1.0 / (2.0 * n as f64))))
}

/// InfoNCE over one stream: anchors `z`, positives `z_aug`, denominator over
/// all `2N` views except the anchor itself.
pub fn unsup_loss<T: Scalar>(g: &mut Graph<T>, z: Var, z_aug: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let (n, d) = rows(g, z)?;
    if rows(g, z_aug)? != (n, d) {
        return Err(shape("views must share [N, D]"));
    }
    if n == 0 {
        return Err(invalid("empty batch"));
    }
    let all = g.concat(&[z, z_aug], 0)?;
    let s = similarity(g, z, all)?;
    let s = g.scale(s, T::c(1.0 / tau));
    let mask: Vec<bool> = (0..n).flat_map(|i| (0..2 * n).map(move |j| j != i)).collect();
    let lse = g.logsumexp(s, Some(mask))?;
    let pos = g.gather(s, (0..n).map(|i| i * 2 * n + n + i).collect(), &[n])?;
    let l = g.sub(lse, pos)?;
    Ok(g.mean_all(l))
}

/// `(1−λ)·l_sym + λ·l_unsup`.
pub fn total_loss_graph<T: Scalar>(g: &mut Graph<T>, l_sym: Var, l_unsup: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let a = g.scale(l_sym, T::c(1.0 - lambda));
    let b = g.scale(l_unsup, T::c(lambda));
    g.add(a, b)
}

pub fn total_loss(l_sym: f64, l_unsup: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok((1.0 - lambda) * l_sym + lambda * l_unsup)
}

/// Embedding blocks for the symmetric loss, as plain tensors `[N, D]`.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub z_sar: Tensor<f64>,
    pub z_eo: Tensor<f64>,
    pub z_sar_aug: Tensor<f64>,
    pub z_eo_aug: Tensor<f64>,
    pub tau: f64,
}

pub fn sym_loss_value(b: &ContrastiveBatch) -> Result<f64> {
    let mut g = Graph::new();
    let v = [&b.z_sar, &b.z_eo, &b.z_sar_aug, &b.z_eo_aug].map(|t| g.constant(t.clone()));
    let l = sym_loss(&mut g, v[0], v[1], v[2], v[3], b.tau)?;
    Ok(g.value(l).item())
}

pub fn unsup_loss_value(z: &Tensor<f64>, z_aug: &Tensor<f64>, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(z.clone());
    let b = g.constant(z_aug.clone());
    let l = unsup_loss(&mut g, a, b, tau)?;
    Ok(g.value(l).item())
}

/// Labels for one fine-tuning batch; `None` marks an unlabeled sample.
pub type PartialLabels = [Option<usize>];

pub struct FinetuneTerms {
    pub cls: Var,
    pub con: Var,
    pub reg: Var,
    pub total: Var,
    /// Class probabilities `[M, K]`.
    pub probs: Var,
}

/// `L_cls + L_con + L_reg` for embeddings `z`, augmented views `z_aug`
/// (both `[M, D]`) and raw prototypes `[K, D]`, which are unit-normalized
/// inside the graph.
pub fn finetune_loss<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    z_aug: Var,
    prototypes: Var,
    labels: &PartialLabels,
    cfg: &LossConfig,
) -> Result<FinetuneTerms> {
    cfg.validate()?;
    let (m, d) = rows(g, z)?;
    let (k, dp) = rows(g, prototypes)?;
    if k == 0 {
        return Err(invalid("fine-tuning needs at least one prototype"));
    }
    if dp != d || labels.len() != m {
        return Err(shape(format!("{m} embeddings of width {d}, {k} prototypes of width {dp}, {} labels", labels.len())));
    }
    if labels.iter().flatten().any(|&y| y >= k) {
        return Err(invalid("label outside the prototype range"));
    }
    let p = g.l2_normalize(prototypes)?;
    let logits = similarity(g, z, p)?;
    let logits = g.scale(logits, T::c(1.0 / cfg.tau_proto));
    let probs = g.softmax(logits)?;
    let lse = g.logsumexp(logits, None)?;

    // cross-entropy on labels and confident pseudo-labels
    let pv = g.value(probs).to_f64_vec();
    let n_lab = labels.iter().filter(|y| y.is_some()).count();
    let n_unl = m - n_lab;
    let mut idx = Vec::new();
    let mut coef = Vec::new();
    for (i, y) in labels.iter().enumerate() {
        let row = &pv[i * k..(i + 1) * k];
        match y {
            Some(y) => {
                idx.push(i * k + y);
                coef.push(1.0 / n_lab as f64);
            }
            None => {
                let (best, conf) = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |a, (j, &v)| if v > a.1 { (j, v) } else { a });
                if conf >= cfg.confidence {
                    idx.push(i * k + best);
                    coef.push(1.0 / n_unl as f64);
                }
            }
        }
    }
    let cls = if idx.is_empty() {
        g.constant(Tensor::scalar(T::zero()))
    } else {
        let rows_of: Vec<usize> = idx.iter().map(|f| f / k).collect();
        let n = idx.len();
        let picked = g.gather(logits, idx, &[n])?;
        let norm = g.gather(lse, rows_of, &[n])?;
        let nll = g.sub(norm, picked)?;
        let nll = g.mul_const(nll, &Tensor::from_f64(&[n], &coef)?)?;
        g.sum_all(nll)
    };

    let con = unsup_loss(g, z, z_aug, cfg.tau)?;

    // negative marginal entropy plus mean pairwise prototype cosine
    let marginal = g.mean_axis(probs, 0)?;
    let logm = g.log(marginal);
    let plogp = g.mul(marginal, logm)?;
    let neg_entropy = g.sum_all(plogp);
    let reg = if k > 1 {
        let cos = similarity(g, p, p)?;
        let upper: Vec<usize> = (0..k).flat_map(|a| (a + 1..k).map(move |b| a * k + b)).collect();
        let len = upper.len();
        let pairs = g.gather(cos, upper, &[len])?;
        let sep = g.mean_all(pairs);
        g.add(neg_entropy, sep)?
    } else {
        neg_entropy
    };

    let total = g.add(cls, con)?;
    let total = g.add(total, reg)?;
    Ok(FinetuneTerms { cls, con, reg, total, probs })
}
