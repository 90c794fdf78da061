//! Adaptive frequency tokenization.
//!
//! A discrepancy curve is cut into `N` contiguous regions, each region gives
//! a nominal Gaussian band `(μ̂, σ̂)`, `K` perturbed candidates around it are
//! scored by a small perceptron `phi`, and the score-weighted mean becomes the
//! band actually used to filter the feature map in the frequency domain.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, shape, Result};
use crate::params::{ParamStore, Tape};
use crate::rng::trunc_normal;
use crate::spectral::{radial_grid, ring_weights, DiscrepancyCurve};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    EqualEnergy,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AftConfig {
    pub bands: usize,
    pub candidates: usize,
    pub perturb_scale: f64,
    pub sigma_floor: f64,
    pub phi_hidden: usize,
    pub partition: Partition,
}

impl Default for AftConfig {
    fn default() -> Self {
        AftConfig {
            bands: 4,
            candidates: 8,
            perturb_scale: 0.5,
            sigma_floor: 1e-4,
            phi_hidden: 16,
            partition: Partition::EqualEnergy,
        }
    }
}

impl AftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 || self.candidates == 0 || self.phi_hidden == 0 {
            return Err(invalid("aft: bands, candidates and phi_hidden must be positive"));
        }
        if !(self.perturb_scale >= 0.0) || !self.perturb_scale.is_finite() {
            return Err(invalid("aft: perturb_scale must be finite and >= 0"));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(invalid("aft: sigma_floor must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandInit {
    pub mu_hat: f64,
    pub sigma_hat: f64,
    /// 1-based inclusive curve sample range.
    pub region: (usize, usize),
}

/// Region end indices `b_1..b_N` (1-based, `b_N = B`). Each boundary is the
/// first sample whose cumulative mass reaches `k/N` of the total, then pushed
/// right so every region keeps at least one sample.
pub fn partition_boundaries(masses: &[f64], n: usize) -> Result<Vec<usize>> {
    let b = masses.len();
    if n == 0 {
        return Err(invalid("partition needs N >= 1"));
    }
    if n > b {
        return Err(invalid(format!("cannot cut {b} curve samples into {n} regions")));
    }
    if masses.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
        return Err(invalid("curve masses must be finite and nonnegative"));
    }
    let total: f64 = masses.iter().sum();
    let mut bounds = Vec::with_capacity(n);
    if total > 0.0 {
        let mut cum = Vec::with_capacity(b);
        let mut s = 0.0;
        for &m in masses {
            s += m;
            cum.push(s);
        }
        let tol = 1e-12 * total;
        for k in 1..n {
            let target = k as f64 * total / n as f64;
            let j = cum.iter().position(|&c| c >= target - tol).unwrap_or(b - 1) + 1;
            bounds.push(j);
        }
    } else {
        bounds.extend((1..n).map(|k| k * b / n));
    }
    let mut prev = 0;
    for (k, bk) in bounds.iter_mut().enumerate() {
        *bk = (*bk).max(prev + 1).min(b - (n - 1 - k));
        prev = *bk;
    }
    bounds.push(b);
    Ok(bounds)
}

fn inits_from_bounds(centers: &[f64], bounds: &[usize]) -> Vec<BandInit> {
    let mut lo = 1;
    bounds
        .iter()
        .map(|&hi| {
            let left = if lo == 1 { 0.0 } else { centers[lo - 2] };
            let right = centers[hi - 1];
            let init = BandInit {
                mu_hat: 0.5 * (left + right),
                sigma_hat: (right - left) / 4.0,
                region: (lo, hi),
            };
            lo = hi + 1;
            init
        })
        .collect()
}

pub fn equal_energy_partition(curve: &DiscrepancyCurve, n: usize) -> Result<Vec<BandInit>> {
    let bounds = partition_boundaries(&curve.ratios, n)?;
    Ok(inits_from_bounds(&curve.centers, &bounds))
}

/// Partition by frequency width alone, ignoring the curve values.
pub fn uniform_partition(curve: &DiscrepancyCurve, n: usize) -> Result<Vec<BandInit>> {
    let mut prev = 0.0;
    let widths: Vec<f64> = curve
        .centers
        .iter()
        .map(|&m| {
            let w = (m - prev).max(0.0);
            prev = m;
            w
        })
        .collect();
    let bounds = partition_boundaries(&widths, n)?;
    Ok(inits_from_bounds(&curve.centers, &bounds))
}

pub fn partition(curve: &DiscrepancyCurve, n: usize, kind: Partition) -> Result<Vec<BandInit>> {
    match kind {
        Partition::EqualEnergy => equal_energy_partition(curve, n),
        Partition::Uniform => uniform_partition(curve, n),
    }
}

/// `K` candidates `(μ̂ + η_μ, max(σ̂ + η_σ, floor))`, `η ~ N(0, (scale·σ̂)²)`.
pub fn sample_candidates(init: &BandInit, k: usize, perturb_scale: f64, sigma_floor: f64, rng: &mut impl Rng) -> Vec<[f64; 2]> {
    let std = perturb_scale * init.sigma_hat;
    let noise = (std > 0.0).then(|| Normal::new(0.0, std).expect("finite std"));
    (0..k)
        .map(|_| {
            let (em, es) = match &noise {
                Some(d) => (d.sample(rng), d.sample(rng)),
                None => (0.0, 0.0),
            };
            [init.mu_hat + em, (init.sigma_hat + es).max(sigma_floor)]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandParams {
    pub mu_star: f64,
    pub sigma_star: f64,
    pub candidates: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

impl BandParams {
    /// Softmax the logits and take the weighted mean of the candidates.
    pub fn from_logits(candidates: Vec<[f64; 2]>, logits: &[f64]) -> Result<Self> {
        if candidates.is_empty() || candidates.len() != logits.len() {
            return Err(shape(format!("{} candidates vs {} logits", candidates.len(), logits.len())));
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let weights: Vec<f64> = e.iter().map(|v| v / z).collect();
        let mu_star = weights.iter().zip(&candidates).map(|(w, c)| w * c[0]).sum();
        let sigma_star = weights.iter().zip(&candidates).map(|(w, c)| w * c[1]).sum();
        Ok(BandParams { mu_star, sigma_star, candidates, weights })
    }
}

/// Candidates are fed to `phi` scaled so Nyquist maps to 1.
const PHI_INPUT_SCALE: f64 = 2.0;

/// `phi` logits for candidates `[M, K, 2]`, returned as `[M, K]`.
fn phi_logits<T: Scalar>(tape: &mut Tape<T>, prefix: &str, cand: &[Vec<[f64; 2]>]) -> Result<Var> {
    let m = cand.len();
    let k = cand[0].len();
    let flat: Vec<f64> = cand.iter().flatten().flat_map(|c| [c[0] * PHI_INPUT_SCALE, c[1] * PHI_INPUT_SCALE]).collect();
    let x = tape.graph.constant(Tensor::from_f64(&[m, k, 2], &flat)?);
    let w1 = tape.p(&format!("{prefix}phi.w1"))?;
    let b1 = tape.p(&format!("{prefix}phi.b1"))?;
    let w2 = tape.p(&format!("{prefix}phi.w2"))?;
    let g = &mut tape.graph;
    let h = g.linear(x, w1, b1)?;
    let h = g.tanh(h);
    let l = g.matmul(h, w2)?;
    g.reshape(l, &[m, k])
}

/// Refined bands in graph form.
pub struct Refined {
    /// `[M]`
    pub mu: Var,
    /// `[M]`
    pub sigma: Var,
    /// `[M, K]`
    pub weights: Var,
}

/// Weighted candidate means for `M` bands, each with `K` candidates.
pub fn refine_graph<T: Scalar>(tape: &mut Tape<T>, prefix: &str, cand: &[Vec<[f64; 2]>]) -> Result<Refined> {
    let k = cand.first().map(Vec::len).unwrap_or(0);
    if k == 0 || cand.iter().any(|c| c.len() != k) {
        return Err(shape("refine: every band needs the same nonzero candidate count"));
    }
    let m = cand.len();
    let logits = phi_logits(tape, prefix, cand)?;
    let raw: Vec<f64> = cand.iter().flatten().flat_map(|c| [c[0], c[1]]).collect();
    let g = &mut tape.graph;
    let c = g.constant(Tensor::from_f64(&[m, k, 2], &raw)?);
    let w = g.softmax(logits)?;
    let w3 = g.reshape(w, &[m, 1, k])?;
    let theta = g.bmm(w3, c, false)?;
    let theta = g.reshape(theta, &[m, 2])?;
    let mu = g.select_last(theta, 0)?;
    let sigma = g.select_last(theta, 1)?;
    Ok(Refined { mu, sigma, weights: w })
}

pub fn init_params<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize, cfg: &AftConfig, rng: &mut impl Rng) {
    let h = cfg.phi_hidden;
    let c = channels;
    store.insert(format!("{prefix}phi.w1"), trunc_normal(&[2, h], 1.0 / 2f64.sqrt(), rng));
    store.insert(format!("{prefix}phi.b1"), Tensor::zeros(&[h]));
    store.insert(format!("{prefix}phi.w2"), trunc_normal(&[h, 1], 1.0 / (h as f64).sqrt(), rng));
    store.insert(format!("{prefix}conv_s.w"), trunc_normal(&[c, c, 1, 1], 1.0 / (c as f64).sqrt(), rng));
    store.insert(format!("{prefix}conv_s.b"), Tensor::zeros(&[c]));
    for i in 1..=cfg.bands {
        store.insert(format!("{prefix}conv{i}.w"), trunc_normal(&[c, c, 3, 3], 1.0 / ((9 * c) as f64).sqrt(), rng));
        store.insert(format!("{prefix}conv{i}.b"), Tensor::zeros(&[c]));
    }
}

/// Plain-value refinement of a single band with candidates drawn from `seed`.
pub fn refine_band_params(
    init: &BandInit,
    cfg: &AftConfig,
    store: &ParamStore<f64>,
    prefix: &str,
    seed: u64,
) -> Result<BandParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cand = sample_candidates(init, cfg.candidates, cfg.perturb_scale, cfg.sigma_floor, &mut rng);
    let frozen = Default::default();
    let mut tape = Tape::new(store, &frozen);
    let cand = vec![cand];
    let logits = phi_logits(&mut tape, prefix, &cand)?;
    let logits = tape.graph.value(logits).to_f64_vec();
    BandParams::from_logits(cand.into_iter().next().unwrap(), &logits)
}

/// Ring mask for refined band parameters, in fftshift layout.
pub fn adaptive_mask(params: &BandParams, h: usize, w: usize) -> Result<Tensor<f64>> {
    if !(params.sigma_star > 0.0) {
        return Err(invalid("adaptive mask needs sigma* > 0"));
    }
    Ok(ring_weights(&radial_grid(h, w, true), params.mu_star, params.sigma_star))
}

/// Tokens `conv_i(Re(idft2(dft2(conv_s(x)) ⊙ M_i)))` for features `x[B,C,H,W]`
/// and masks `[N,B,H,W]` in unshifted layout. Returns `N` tensors `[B,C,H,W]`.
pub fn tokenize_graph<T: Scalar>(tape: &mut Tape<T>, prefix: &str, x: Var, masks: Var) -> Result<Vec<Var>> {
    let xs = tape.graph.shape(x).to_vec();
    let ms = tape.graph.shape(masks).to_vec();
    if xs.len() != 4 || ms.len() != 4 || ms[1] != xs[0] || ms[2..] != xs[2..] {
        return Err(shape(format!("tokenize: features {xs:?}, masks {ms:?}")));
    }
    let (b, h, w) = (xs[0], xs[2], xs[3]);
    let ws = tape.p(&format!("{prefix}conv_s.w"))?;
    let bs = tape.p(&format!("{prefix}conv_s.b"))?;
    let y = tape.graph.conv2d(x, ws, bs)?;
    let z = tape.graph.dft2(y)?;
    let mut tokens = Vec::with_capacity(ms[0]);
    for i in 0..ms[0] {
        let wi = tape.p(&format!("{prefix}conv{}.w", i + 1))?;
        let bi = tape.p(&format!("{prefix}conv{}.b", i + 1))?;
        let g = &mut tape.graph;
        let m = g.slice(masks, 0, i, 1)?;
        let m = g.reshape(m, &[b, h, w])?;
        let f = g.mask_spectrum(z, m)?;
        let f = g.idft2(f)?;
        let f = g.real_part(f)?;
        tokens.push(g.conv2d(f, wi, bi)?);
    }
    Ok(tokens)
}

/// Plain-value tokenization of one `[C,H,W]` feature map with centered masks.
pub fn tokenize(features: &Tensor<f64>, masks: &[Tensor<f64>], store: &ParamStore<f64>, prefix: &str) -> Result<Vec<Tensor<f64>>> {
    let fs = features.shape();
    if fs.len() != 3 {
        return Err(shape(format!("tokenize expects [C,H,W], got {fs:?}")));
    }
    let (h, w) = (fs[1], fs[2]);
    let mut flat = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.shape() != [h, w] {
            return Err(shape(format!("mask {:?} does not match feature grid {h}x{w}", m.shape())));
        }
        flat.extend_from_slice(crate::fft::ifftshift(m)?.data());
    }
    let frozen = Default::default();
    let mut tape = Tape::new(store, &frozen);
    let x = tape.graph.constant(features.clone().reshape(&[1, fs[0], h, w])?);
    let mv = tape.graph.constant(Tensor::new(vec![masks.len(), 1, h, w], flat)?);
    let toks = tokenize_graph(&mut tape, prefix, x, mv)?;
    toks.into_iter()
        .map(|t| tape.graph.value(t).clone().reshape(&[fs[0], h, w]))
        .collect()
}

/// Sampled band for one (sample, band) slot.
#[derive(Debug, Clone, PartialEq)]
pub struct BandDraw {
    pub sample: usize,
    pub band: usize,
    pub init: BandInit,
    pub candidates: Vec<[f64; 2]>,
}

pub struct AftForward {
    /// `N` tokens, each `[B,C,H,W]`.
    pub tokens: Vec<Var>,
    /// Ordered band-major: entry `i·B + b`.
    pub draws: Vec<BandDraw>,
    pub refined: Refined,
}

/// Full tokenization of a feature batch `x[B,C,H,W]`, one curve per sample.
/// All candidate noise comes from a generator seeded with `seed`.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    prefix: &str,
    cfg: &AftConfig,
    x: Var,
    curves: &[&DiscrepancyCurve],
    seed: u64,
) -> Result<AftForward> {
    let xs = tape.graph.shape(x).to_vec();
    if xs.len() != 4 || xs[0] != curves.len() {
        return Err(shape(format!("aft: features {xs:?} with {} curves", curves.len())));
    }
    let (b, h, w) = (xs[0], xs[2], xs[3]);
    let n = cfg.bands;
    let inits: Vec<Vec<BandInit>> = curves.iter().map(|c| partition(c, n, cfg.partition)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(n * b);
    for i in 0..n {
        for (s, bands) in inits.iter().enumerate() {
            let init = bands[i];
            let candidates = sample_candidates(&init, cfg.candidates, cfg.perturb_scale, cfg.sigma_floor, &mut rng);
            draws.push(BandDraw { sample: s, band: i + 1, init, candidates });
        }
    }
    let cand: Vec<Vec<[f64; 2]>> = draws.iter().map(|d| d.candidates.clone()).collect();
    let refined = refine_graph(tape, prefix, &cand)?;
    let radius: Tensor<T> = radial_grid(h, w, false).cast();
    let rings = tape.graph.gaussian_ring(refined.mu, refined.sigma, &radius)?;
    let masks = tape.graph.reshape(rings, &[n, b, h, w])?;
    let tokens = tokenize_graph(tape, prefix, x, masks)?;
    Ok(AftForward { tokens, draws, refined })
}

/// Per-position squared norm `Σ_c t[c,r,col]²` of a `[C,H,W]` token.
pub fn token_energy(token: &Tensor<f64>) -> Result<Tensor<f64>> {
    let s = token.shape();
    if s.len() != 3 {
        return Err(shape(format!("token energy expects [C,H,W], got {s:?}")));
    }
    let plane = s[1] * s[2];
    let mut out = vec![0.0; plane];
    for ch in token.data().chunks(plane) {
        for (o, v) in out.iter_mut().zip(ch) {
            *o += v * v;
        }
    }
    Tensor::new(vec![s[1], s[2]], out)
}

/// CSV `pair_id,band_index,row,col,energy` from per-band energy maps.
pub fn write_token_energy_csv<W: Write>(mut out: W, rows: &[(String, Vec<Tensor<f64>>)]) -> Result<()> {
    writeln!(out, "pair_id,band_index,row,col,energy")?;
    for (id, maps) in rows {
        for (i, m) in maps.iter().enumerate() {
            let w = m.shape()[1];
            for (p, e) in m.data().iter().enumerate() {
                writeln!(out, "{id},{},{},{},{e:e}", i + 1, p / w, p % w)?;
            }
        }
    }
    Ok(())
}

/// Evaluate `forward` outside training: returns the tokens as values.
pub fn forward_values(
    store: &ParamStore<f64>,
    prefix: &str,
    cfg: &AftConfig,
    features: &Tensor<f64>,
    curves: &[&DiscrepancyCurve],
    seed: u64,
) -> Result<(Vec<Tensor<f64>>, Vec<BandDraw>)> {
    let frozen = Default::default();
    let mut tape = Tape::new(store, &frozen);
    let x = tape.graph.constant(features.clone());
    let fwd = forward(&mut tape, prefix, cfg, x, curves, seed)?;
    let g: &Graph<f64> = &tape.graph;
    Ok((fwd.tokens.iter().map(|&t| g.value(t).clone()).collect(), fwd.draws))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::BandSchedule;

    fn curve(masses: &[f64]) -> DiscrepancyCurve {
        let centers = BandSchedule::default().centers(masses.len());
        DiscrepancyCurve::new(centers, masses.to_vec()).unwrap()
    }

    fn regions(inits: &[BandInit]) -> Vec<(usize, usize)> {
        inits.iter().map(|i| i.region).collect()
    }

    #[test]
    fn constant_curve_even_regions() {
        let c = curve(&[1.0; 8]);
        let inits = equal_energy_partition(&c, 4).unwrap();
        assert_eq!(regions(&inits), vec![(1, 2), (3, 4), (5, 6), (7, 8)]);
        let mu = &c.centers;
        assert!((inits[0].mu_hat - mu[1] / 2.0).abs() < 1e-15);
        assert!((inits[2].mu_hat - (mu[3] + mu[5]) / 2.0).abs() < 1e-15);
        assert!((inits[2].sigma_hat - (mu[5] - mu[3]) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn spike_then_repair() {
        let inits = equal_energy_partition(&curve(&[4.0, 0.0, 0.0, 0.0]), 2).unwrap();
        assert_eq!(regions(&inits), vec![(1, 1), (2, 4)]);
        let inits = equal_energy_partition(&curve(&[0.0, 0.0, 0.0, 4.0]), 3).unwrap();
        assert_eq!(regions(&inits), vec![(1, 2), (3, 3), (4, 4)]);
    }

    #[test]
    fn zero_mass_falls_back_to_counts() {
        let inits = equal_energy_partition(&curve(&[0.0; 7]), 3).unwrap();
        assert_eq!(regions(&inits), vec![(1, 2), (3, 4), (5, 7)]);
        assert!(equal_energy_partition(&curve(&[1.0; 3]), 4).is_err());
    }

    #[test]
    fn uniform_partition_splits_width() {
        // with μ_i = 0.5 (i/B)², widths grow linearly so regions shrink
        let inits = uniform_partition(&curve(&[1.0; 16]), 2).unwrap();
        let (lo, hi) = inits[0].region;
        assert_eq!(lo, 1);
        assert!(hi > 8);
    }

    #[test]
    fn zero_perturbation_returns_nominal() {
        let init = BandInit { mu_hat: 0.2, sigma_hat: 0.05, region: (1, 3) };
        let cfg = AftConfig { perturb_scale: 0.0, ..Default::default() };
        let mut store = ParamStore::new();
        init_params(&mut store, "aft.", 4, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let p = refine_band_params(&init, &cfg, &store, "aft.", 9).unwrap();
        assert!(p.candidates.iter().all(|c| *c == [0.2, 0.05]));
        assert!((p.mu_star - 0.2).abs() < 1e-15 && (p.sigma_star - 0.05).abs() < 1e-15);
    }

    #[test]
    fn softmax_weighting_by_hand() {
        let p = BandParams::from_logits(vec![[0.2, 0.1], [0.4, 0.1]], &[3f64.ln(), 0.0]).unwrap();
        assert!((p.weights[0] - 0.75).abs() < 1e-15);
        assert!((p.mu_star - 0.25).abs() < 1e-15);
    }

    #[test]
    fn equal_logits_give_mean() {
        let init = BandInit { mu_hat: 0.2, sigma_hat: 0.05, region: (1, 3) };
        let cfg = AftConfig { candidates: 4, ..Default::default() };
        let mut store = ParamStore::new();
        init_params(&mut store, "aft.", 4, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        store.insert("aft.phi.w2", Tensor::zeros(&[16, 1]));
        let p = refine_band_params(&init, &cfg, &store, "aft.", 3).unwrap();
        let mean = p.candidates.iter().map(|c| c[0]).sum::<f64>() / 4.0;
        assert!((p.mu_star - mean).abs() < 1e-15);
    }

    #[test]
    fn graph_refinement_matches_plain_softmax() {
        let cfg = AftConfig::default();
        let mut store = ParamStore::new();
        init_params(&mut store, "aft.", 4, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let init = BandInit { mu_hat: 0.3, sigma_hat: 0.04, region: (2, 5) };
        let p = refine_band_params(&init, &cfg, &store, "aft.", 11).unwrap();
        let frozen = Default::default();
        let mut tape = Tape::new(&store, &frozen);
        let r = refine_graph(&mut tape, "aft.", &[p.candidates.clone()]).unwrap();
        assert!((tape.graph.value(r.mu).item() - p.mu_star).abs() < 1e-14);
        assert!((tape.graph.value(r.sigma).item() - p.sigma_star).abs() < 1e-14);
    }

    #[test]
    fn mask_peak_and_one_sigma() {
        let p = BandParams { mu_star: 0.25, sigma_star: 0.125, candidates: vec![], weights: vec![] };
        let m = adaptive_mask(&p, 8, 8).unwrap();
        // centered layout: column offset k has d = k/8
        assert_eq!(m.data()[4 * 8 + 4 + 2], 1.0);
        assert!((m.data()[4 * 8 + 4 + 3] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((m.data()[4 * 8 + 4 + 1] - (-0.5f64).exp()).abs() < 1e-15);
    }

    fn identity_store(c: usize, bands: usize) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut ws = Tensor::zeros(&[c, c, 1, 1]);
        let mut wi = Tensor::zeros(&[c, c, 3, 3]);
        for k in 0..c {
            ws.data_mut()[k * c + k] = 1.0;
            wi.data_mut()[(k * c + k) * 9 + 4] = 1.0;
        }
        s.insert("aft.conv_s.w", ws);
        s.insert("aft.conv_s.b", Tensor::zeros(&[c]));
        for i in 1..=bands {
            s.insert(format!("aft.conv{i}.w"), wi.clone());
            s.insert(format!("aft.conv{i}.b"), Tensor::zeros(&[c]));
        }
        s
    }

    #[test]
    fn transparent_and_annihilating_bands() {
        let data: Vec<f64> = (0..2 * 8 * 8).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1).collect();
        let x = Tensor::new(vec![2, 8, 8], data).unwrap();
        let store = identity_store(2, 2);
        let masks = vec![Tensor::full(&[8, 8], 1.0), Tensor::zeros(&[8, 8])];
        let t = tokenize(&x, &masks, &store, "aft.").unwrap();
        assert!(t[0].max_abs_diff(&x) < 1e-12);
        assert!(t[1].data().iter().all(|v| *v == 0.0));
        assert!(tokenize(&x, &[Tensor::full(&[4, 8], 1.0)], &store, "aft.").is_err());
    }

    #[test]
    fn energy_csv_layout() {
        let t = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 0.0]).unwrap();
        let e = token_energy(&t).unwrap();
        assert_eq!(e.data(), &[10.0, 4.0]);
        let mut buf = Vec::new();
        write_token_energy_csv(&mut buf, &[("p".into(), vec![e])]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().nth(2).unwrap(), "p,1,0,1,4e0");
    }
}
