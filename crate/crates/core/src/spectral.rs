//! Gaussian ring masks, power spectra and the modal discrepancy curve.
//!
//! Radial frequency is normalized so the Nyquist frequency along either
//! axis is 0.5; ring parameters therefore transfer between image and
//! feature grids of different sizes.

use std::io::Write;

use crate::error::{invalid, shape, Error, Result};
use crate::fft;
use crate::imaging::{to_grayscale, ImagePair};
use crate::tensor::{Scalar, Tensor};

/// Guard added to every reference band energy.
pub const REFERENCE_EPS: f64 = 1e-12;

/// Signed normalized frequency of bin `k` out of `n` in unshifted layout.
fn signed_freq(k: usize, n: usize) -> f64 {
    let k = k as isize;
    let n_i = n as isize;
    let s = if k <= (n_i - 1) / 2 { k } else { k - n_i };
    s as f64 / n as f64
}

/// Normalized radial frequency of every bin of an `h×w` spectrum.
/// `centered` selects the fftshift layout (DC at `(h/2, w/2)`).
pub fn radial_grid(h: usize, w: usize, centered: bool) -> Tensor<f64> {
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        let fy = if centered { (r as f64 - (h / 2) as f64) / h as f64 } else { signed_freq(r, h) };
        for c in 0..w {
            let fx = if centered { (c as f64 - (w / 2) as f64) / w as f64 } else { signed_freq(c, w) };
            data.push((fx * fx + fy * fy).sqrt());
        }
    }
    Tensor::new(vec![h, w], data).expect("grid size")
}

/// `exp(-(d-μ)²/(2σ²))` over a radius grid.
pub fn ring_weights(radius: &Tensor<f64>, mu: f64, sigma: f64) -> Tensor<f64> {
    radius.map(|d| (-(d - mu) * (d - mu) / (2.0 * sigma * sigma)).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RingMask {
    pub mu: f64,
    pub sigma: f64,
    /// Weights in fftshift layout.
    pub grid: Tensor<f64>,
}

impl RingMask {
    pub fn new(mu: f64, sigma: f64, h: usize, w: usize) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(invalid("ring sigma must be positive"));
        }
        Ok(RingMask { mu, sigma, grid: ring_weights(&radial_grid(h, w, true), mu, sigma) })
    }

    /// A mask of ones, which turns a band energy into the total energy.
    pub fn all_pass(h: usize, w: usize) -> Self {
        RingMask { mu: 0.0, sigma: f64::INFINITY, grid: Tensor::full(&[h, w], 1.0) }
    }
}

/// Center schedule `μ_i = 0.5·(i/B)^γ`, dense at low frequency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandSchedule {
    pub gamma: f64,
}

impl Default for BandSchedule {
    fn default() -> Self {
        BandSchedule { gamma: 2.0 }
    }
}

impl BandSchedule {
    pub fn centers(&self, bands: usize) -> Vec<f64> {
        (1..=bands).map(|i| 0.5 * (i as f64 / bands as f64).powf(self.gamma)).collect()
    }

    /// `σ_i = max(μ_i − μ_{i−1}, 0.5/(4B))` with `μ_0 = 0`.
    pub fn widths(&self, bands: usize) -> Vec<f64> {
        let centers = self.centers(bands);
        let floor = 0.5 / (4.0 * bands as f64);
        let mut prev = 0.0;
        centers
            .iter()
            .map(|&m| {
                let s = (m - prev).max(floor);
                prev = m;
                s
            })
            .collect()
    }

    pub fn masks(&self, bands: usize, h: usize, w: usize) -> Result<Vec<RingMask>> {
        if bands < 2 {
            return Err(invalid(format!("need at least 2 bands, got {bands}")));
        }
        if h < 4 || w < 4 {
            return Err(invalid(format!("masks need a grid of at least 4x4, got {h}x{w}")));
        }
        let radius = radial_grid(h, w, true);
        Ok(self
            .centers(bands)
            .into_iter()
            .zip(self.widths(bands))
            .map(|(mu, sigma)| RingMask { mu, sigma, grid: ring_weights(&radius, mu, sigma) })
            .collect())
    }
}

/// `B` fixed masks with the default (γ = 2) schedule.
pub fn build_mdc_masks(bands: usize, h: usize, w: usize) -> Result<Vec<RingMask>> {
    BandSchedule::default().masks(bands, h, w)
}

/// `|F(x)|²` in fftshift layout for a single `H×W` grid.
pub fn power_spectrum<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(shape(format!("power spectrum needs a 2-D grid, got {:?}", x.shape())));
    }
    let z = fft::dft2(x)?;
    let p: Vec<T> = z.data().chunks_exact(2).map(|c| c[0] * c[0] + c[1] * c[1]).collect();
    fft::fftshift(&Tensor::new(x.shape().to_vec(), p)?)
}

/// `Σ_p mask[p]·spectrum[p]`.
pub fn band_energy(spectrum: &Tensor<f64>, mask: &RingMask) -> Result<f64> {
    if spectrum.shape() != mask.grid.shape() {
        return Err(shape(format!("mask {:?} vs spectrum {:?}", mask.grid.shape(), spectrum.shape())));
    }
    Ok(spectrum.data().iter().zip(mask.grid.data()).map(|(a, b)| a * b).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscrepancyCurve {
    pub centers: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl DiscrepancyCurve {
    pub fn new(centers: Vec<f64>, ratios: Vec<f64>) -> Result<Self> {
        if centers.len() != ratios.len() || centers.is_empty() {
            return Err(shape(format!("curve with {} centers and {} ratios", centers.len(), ratios.len())));
        }
        if ratios.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(invalid("curve ratios must be finite and nonnegative"));
        }
        Ok(DiscrepancyCurve { centers, ratios })
    }

    pub fn len(&self) -> usize {
        self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratios.is_empty()
    }

    pub fn centers_increasing(&self) -> bool {
        self.centers.windows(2).all(|w| w[1] > w[0])
    }

    /// Pointwise mean of several curves sharing one band layout.
    pub fn mean(curves: &[DiscrepancyCurve]) -> Result<DiscrepancyCurve> {
        let first = curves.first().ok_or_else(|| invalid("mean of zero curves"))?;
        let mut ratios = vec![0.0; first.len()];
        for c in curves {
            if c.centers != first.centers {
                return Err(shape("curves use different band layouts"));
            }
            for (a, b) in ratios.iter_mut().zip(&c.ratios) {
                *a += b;
            }
        }
        let n = curves.len() as f64;
        ratios.iter_mut().for_each(|r| *r /= n);
        DiscrepancyCurve::new(first.centers.clone(), ratios)
    }
}

fn plane_tensor(data: &[f64], h: usize, w: usize) -> Tensor<f64> {
    Tensor::new(vec![h, w], data.to_vec()).expect("plane size")
}

/// Residual-to-reference spectral energy ratio per band, with the residual
/// `sar − gray(eo)`. Fails when the optical reference carries no energy.
pub fn compute_mdc(pair: &ImagePair, masks: &[RingMask]) -> Result<DiscrepancyCurve> {
    let (h, w) = (pair.eo.height, pair.eo.width);
    if pair.sar.height != h || pair.sar.width != w {
        return Err(shape("pair is not registered"));
    }
    let gray = to_grayscale(&pair.eo)?;
    let residual: Vec<f64> = pair.sar.data.iter().zip(&gray.data).map(|(s, g)| s - g).collect();
    let e_res = power_spectrum(&plane_tensor(&residual, h, w))?;
    let e_ref = power_spectrum(&plane_tensor(&gray.data, h, w))?;
    curve_from_spectra(&e_res, &e_ref, masks)
}

/// Band ratios from precomputed residual / reference power spectra.
pub fn curve_from_spectra(e_res: &Tensor<f64>, e_ref: &Tensor<f64>, masks: &[RingMask]) -> Result<DiscrepancyCurve> {
    let mut ratios = Vec::with_capacity(masks.len());
    let mut degenerate = true;
    for m in masks {
        let num = band_energy(e_res, m)?;
        let den = band_energy(e_ref, m)?;
        if den > REFERENCE_EPS {
            degenerate = false;
        }
        ratios.push(num / (den + REFERENCE_EPS));
    }
    if degenerate {
        return Err(Error::DegenerateReference(
            "optical reference has no spectral energy in any band".into(),
        ));
    }
    DiscrepancyCurve::new(masks.iter().map(|m| m.mu).collect(), ratios)
}

/// CSV `pair_id,band_index,mu,ratio`; band indices are 1-based.
pub fn write_curves_csv<W: Write>(mut out: W, curves: &[(String, DiscrepancyCurve)]) -> Result<()> {
    writeln!(out, "pair_id,band_index,mu,ratio")?;
    for (id, c) in curves {
        for (i, (mu, r)) in c.centers.iter().zip(&c.ratios).enumerate() {
            writeln!(out, "{id},{},{mu:e},{r:e}", i + 1)?;
        }
    }
    Ok(())
}

/// Parse the CSV written by [`write_curves_csv`].
pub fn read_curves_csv(text: &str) -> Result<Vec<(String, DiscrepancyCurve)>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("pair_id,band_index,mu,ratio") {
        return Err(Error::Format("missing curve CSV header".into()));
    }
    let mut out: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::Format(format!("curve CSV line {}: expected 4 fields", n + 2)));
        }
        let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number `{s}`")));
        let (mu, ratio) = (parse(f[2])?, parse(f[3])?);
        match out.last_mut() {
            Some((id, c, r)) if id == f[0] => {
                c.push(mu);
                r.push(ratio);
            }
            _ => out.push((f[0].to_string(), vec![mu], vec![ratio])),
        }
    }
    out.into_iter()
        .map(|(id, c, r)| Ok((id, DiscrepancyCurve::new(c, r)?)))
        .collect()
}
