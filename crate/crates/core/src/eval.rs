//! Clustering accuracy under an optimal cluster-to-class matching, feature
//! statistics and report/embedding writers.

use std::collections::BTreeSet;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::tensor::Tensor;

/// Minimum-cost perfect assignment on a square matrix (Kuhn–Munkres with
/// potentials, O(n³)). Returns `col[row]`.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(shape("assignment needs a square cost matrix"));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(invalid("assignment costs must be finite"));
    }
    // 1-based arrays; index 0 is the virtual column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    Ok(assign)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub all: f64,
    pub old: f64,
    pub new: f64,
    /// `mapping[cluster] = class`.
    pub mapping: Vec<usize>,
}

/// All/Old/New accuracy (percent) after one global optimal matching of
/// predicted clusters to classes. A group with no samples scores 0.
pub fn hungarian_accuracy(pred: &[usize], truth: &[usize], old: &BTreeSet<usize>) -> Result<Accuracy> {
    if pred.is_empty() {
        return Err(invalid("accuracy of an empty prediction set"));
    }
    if pred.len() != truth.len() {
        return Err(shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    let k = pred.iter().chain(truth).max().unwrap() + 1;
    let mut counts = vec![vec![0.0f64; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[p][t] += 1.0;
    }
    let max = counts.iter().flatten().cloned().fold(0.0, f64::max);
    // visit clusters in an order fixed by their count rows, so ties between
    // optimal matchings resolve the same way under any renaming of cluster ids
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| counts[b].iter().zip(&counts[a]).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    let cost: Vec<Vec<f64>> = order.iter().map(|&r| counts[r].iter().map(|c| max - c).collect()).collect();
    let mut mapping = vec![0; k];
    for (pos, col) in hungarian(&cost)?.into_iter().enumerate() {
        mapping[order[pos]] = col;
    }
    let (mut hit, mut hit_old, mut n_old, mut hit_new, mut n_new) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        let ok = mapping[p] == t;
        hit += ok as usize;
        if old.contains(&t) {
            n_old += 1;
            hit_old += ok as usize;
        } else {
            n_new += 1;
            hit_new += ok as usize;
        }
    }
    let pct = |h: usize, n: usize| if n == 0 { 0.0 } else { 100.0 * h as f64 / n as f64 };
    Ok(Accuracy { all: pct(hit, pred.len()), old: pct(hit_old, n_old), new: pct(hit_new, n_new), mapping })
}

/// Counts `[class][mapped prediction]` over `k` classes.
pub fn confusion(truth: &[usize], mapped: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    let mut m = vec![vec![0; k]; k];
    for (&t, &p) in truth.iter().zip(mapped) {
        if t >= k || p >= k {
            return Err(invalid(format!("class index outside 0..{k}")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub intra: f64,
    pub inter: f64,
    pub ratio: f64,
}

/// Mean within-class squared spread, mean squared distance between class
/// centroids, and their ratio.
pub fn feature_stats(embeddings: &Tensor<f64>, labels: &[usize]) -> Result<FeatureStats> {
    let [m, d] = embeddings.shape() else {
        return Err(shape(format!("expected [M, D] embeddings, got {:?}", embeddings.shape())));
    };
    let (m, d) = (*m, *d);
    if labels.len() != m {
        return Err(shape(format!("{m} embeddings for {} labels", labels.len())));
    }
    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(invalid("feature statistics need at least two classes"));
    }
    let x = embeddings.data();
    let mut centroids = Vec::with_capacity(classes.len());
    let mut intra = 0.0;
    for &c in &classes {
        let members: Vec<usize> = (0..m).filter(|&i| labels[i] == c).collect();
        let mut mu = vec![0.0; d];
        for &i in &members {
            for (a, b) in mu.iter_mut().zip(&x[i * d..(i + 1) * d]) {
                *a += b;
            }
        }
        mu.iter_mut().for_each(|v| *v /= members.len() as f64);
        let spread: f64 = members
            .iter()
            .map(|&i| x[i * d..(i + 1) * d].iter().zip(&mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum();
        intra += spread / members.len() as f64;
        centroids.push(mu);
    }
    intra /= classes.len() as f64;
    let mut inter = 0.0;
    let mut pairs = 0usize;
    for a in 0..centroids.len() {
        for b in a + 1..centroids.len() {
            inter += centroids[a].iter().zip(&centroids[b]).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
            pairs += 1;
        }
    }
    inter /= pairs as f64;
    Ok(FeatureStats { intra, inter, ratio: inter / (intra + 1e-12) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Transductive,
    Inductive,
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transductive" => Ok(Protocol::Transductive),
            "inductive" => Ok(Protocol::Inductive),
            other => Err(invalid(format!("unknown protocol `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub all: f64,
    pub old: f64,
    pub new: f64,
    pub intra: f64,
    pub inter: f64,
    pub ratio: f64,
    pub confusion: Vec<Vec<usize>>,
    pub class_names: Vec<String>,
}

/// Score predicted clusters against truth and summarize the embeddings.
pub fn build_report(
    protocol: Protocol,
    pred: &[usize],
    truth: &[usize],
    old: &BTreeSet<usize>,
    embeddings: &Tensor<f64>,
    class_names: Vec<String>,
) -> Result<EvalReport> {
    let acc = hungarian_accuracy(pred, truth, old)?;
    let k = acc.mapping.len().max(class_names.len());
    let mapped: Vec<usize> = pred.iter().map(|&p| acc.mapping[p]).collect();
    let stats = feature_stats(embeddings, truth)?;
    Ok(EvalReport {
        protocol,
        all: acc.all,
        old: acc.old,
        new: acc.new,
        intra: stats.intra,
        inter: stats.inter,
        ratio: stats.ratio,
        confusion: confusion(truth, &mapped, k)?,
        class_names,
    })
}

/// Index of the most similar prototype for every row of `z`.
pub fn assign_to_prototypes(z: &Tensor<f64>, prototypes: &Tensor<f64>) -> Result<Vec<usize>> {
    let ([m, d], [k, dp]) = (z.shape(), prototypes.shape()) else {
        return Err(shape("prototype assignment expects [M, D] and [K, D]"));
    };
    if d != dp || *k == 0 {
        return Err(shape(format!("embeddings of width {d} against {k} prototypes of width {dp}")));
    }
    let p = prototypes.data();
    let norms: Vec<f64> = p.chunks(*d).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12)).collect();
    Ok((0..*m)
        .map(|i| {
            let zi = &z.data()[i * d..(i + 1) * d];
            let mut best = (0, f64::NEG_INFINITY);
            for (j, row) in p.chunks(*d).enumerate() {
                let s = zi.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() / norms[j];
                if s > best.1 {
                    best = (j, s);
                }
            }
            best.0
        })
        .collect())
}

/// CSV `sample_id,label,is_old,dim0..dimD`.
pub fn write_embeddings_csv<W: Write>(
    mut out: W,
    ids: &[String],
    labels: &[usize],
    old: &BTreeSet<usize>,
    embeddings: &Tensor<f64>,
) -> Result<()> {
    let [m, d] = embeddings.shape() else {
        return Err(shape("embedding dump expects [M, D]"));
    };
    if ids.len() != *m || labels.len() != *m {
        return Err(shape("ids, labels and embeddings disagree in length"));
    }
    let dims: Vec<String> = (0..*d).map(|i| format!("dim{i}")).collect();
    writeln!(out, "sample_id,label,is_old,{}", dims.join(","))?;
    for (i, row) in embeddings.data().chunks(*d).enumerate() {
        let vals: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{},{},{},{}", ids[i], labels[i], old.contains(&labels[i]) as u8, vals.join(","))?;
    }
    Ok(())
}
