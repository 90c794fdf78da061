//! Images, synthetic optical/SAR pairs, augmentation and GCD splits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};

/// Row-major `H×W×C` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Image { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: f64) -> Self {
        Image { height, width, channels, data: vec![v; height * width * channels] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Channel-planar copy (`C×H×W`), the layout the encoder consumes.
    pub fn to_planar(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            for p in 0..self.height * self.width {
                out.push(self.data[p * self.channels + c]);
            }
        }
        out
    }

    /// Replicate a single channel `n` times.
    pub fn replicate(&self, n: usize) -> Result<Image> {
        if self.channels != 1 {
            return Err(invalid("replicate needs a single-channel image"));
        }
        let data = self.data.iter().flat_map(|&v| std::iter::repeat(v).take(n)).collect();
        Image::new(self.height, self.width, n, data)
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Registered optical (3-channel) and SAR (1-channel) images.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub pair_id: String,
    pub eo: Image,
    pub sar: Image,
}

impl ImagePair {
    pub fn new(pair_id: impl Into<String>, eo: Image, sar: Image) -> Result<Self> {
        if eo.channels != 3 || sar.channels != 1 {
            return Err(shape(format!("pair needs 3-channel optical and 1-channel SAR, got {} and {}", eo.channels, sar.channels)));
        }
        if eo.height != sar.height || eo.width != sar.width {
            return Err(shape("optical and SAR images are not registered (size differs)"));
        }
        Ok(ImagePair { pair_id: pair_id.into(), eo, sar })
    }
}

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub fn to_grayscale(eo: &Image) -> Result<Image> {
    if eo.channels != 3 {
        return Err(shape(format!("grayscale conversion needs 3 channels, got {}", eo.channels)));
    }
    let data = eo
        .data
        .chunks_exact(3)
        .map(|p| (LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]).clamp(0.0, 1.0))
        .collect();
    Image::new(eo.height, eo.width, 1, data)
}

// ---------------------------------------------------------------------------
// synthetic scenes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Blob,
    Stripe,
    Grid,
    Ring,
    Wedge,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 5] =
        [ShapeFamily::Blob, ShapeFamily::Stripe, ShapeFamily::Grid, ShapeFamily::Ring, ShapeFamily::Wedge];

    pub fn for_class(class_id: usize) -> ShapeFamily {
        Self::ALL[class_id % Self::ALL.len()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub class_id: usize,
    pub family: ShapeFamily,
    /// Multiplies the characteristic period of the pattern.
    pub texture_scale: f64,
    pub seed: u64,
    pub size: usize,
    /// Scales the random pose/shape spread about its midpoint; 0 gives one
    /// canonical pose per class.
    #[serde(default = "unit")]
    pub jitter: f64,
    /// Class-specific hue as a fraction of the colour wheel; `None` draws free colours.
    #[serde(default)]
    pub tone: Option<f64>,
}

fn unit() -> f64 {
    1.0
}

impl SceneSpec {
    pub fn for_class(class_id: usize, seed: u64, size: usize) -> Self {
        SceneSpec { class_id, family: ShapeFamily::for_class(class_id), texture_scale: 1.0, seed, size, jitter: 1.0, tone: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub speckle_strength: f64,
    pub blur_radius: f64,
    pub gamma: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { speckle_strength: 0.3, blur_radius: 0.7, gamma: 1.2 }
    }
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        NoiseSpec { speckle_strength: 0.0, blur_radius: 0.0, gamma: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.speckle_strength >= 0.0) || !self.speckle_strength.is_finite() {
            return Err(invalid("speckle_strength must be a finite value >= 0"));
        }
        if !(self.blur_radius >= 0.0) || !self.blur_radius.is_finite() {
            return Err(invalid("blur_radius must be a finite value >= 0"));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(invalid("gamma must be a finite value > 0"));
        }
        Ok(())
    }
}

fn smoothstep(edge: f64, softness: f64, v: f64) -> f64 {
    1.0 / (1.0 + (-(v - edge) / softness).exp())
}

/// Foreground coverage in `[0, 1]` at normalized coordinates `(u, v) ∈ [-1, 1]²`.
struct Pattern {
    family: ShapeFamily,
    cx: f64,
    cy: f64,
    angle: f64,
    radius: f64,
    period: f64,
    aspect: f64,
    span: f64,
}

impl Pattern {
    fn draw(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Pattern {
        let scale = spec.texture_scale.max(0.1);
        let j = spec.jitter.clamp(0.0, 1.0);
        let mut draw = |lo: f64, hi: f64| {
            let mid = 0.5 * (lo + hi);
            mid + j * (rng.gen_range(lo..hi) - mid)
        };
        // canonical orientation differs per class so templates stay distinct
        let base_angle = spec.class_id as f64 * 0.7;
        Pattern {
            family: spec.family,
            cx: draw(-0.25, 0.25),
            cy: draw(-0.25, 0.25),
            angle: base_angle + draw(0.0, std::f64::consts::PI),
            radius: draw(0.35, 0.55),
            period: scale * draw(0.45, 0.6),
            aspect: draw(0.6, 1.0),
            span: draw(0.5, 0.9),
        }
    }

    fn coverage(&self, u: f64, v: f64) -> f64 {
        let (du, dv) = (u - self.cx, v - self.cy);
        let (s, c) = self.angle.sin_cos();
        let ru = c * du + s * dv;
        let rv = -s * du + c * dv;
        let soft = 0.04;
        let tau = std::f64::consts::TAU;
        match self.family {
            ShapeFamily::Blob => {
                let r = ((ru / self.radius).powi(2) + (rv / (self.radius * self.aspect)).powi(2)).sqrt();
                smoothstep(1.0, soft * 2.0, 2.0 - r)
            }
            ShapeFamily::Stripe => {
                let w = (tau * ru / self.period).sin();
                smoothstep(0.0, 0.25, w)
            }
            ShapeFamily::Grid => {
                let a = (tau * ru / self.period).sin();
                let b = (tau * rv / self.period).sin();
                smoothstep(0.0, 0.25, a * b)
            }
            ShapeFamily::Ring => {
                let r = (du * du + dv * dv).sqrt();
                let band = 0.5 * self.radius * 0.45;
                smoothstep(0.0, soft, band - (r - self.radius).abs())
            }
            ShapeFamily::Wedge => {
                let ang = rv.atan2(ru).abs();
                let r = (du * du + dv * dv).sqrt();
                smoothstep(0.0, 0.08, self.span - ang) * smoothstep(0.0, soft, 0.9 - r)
            }
        }
    }
}

/// Render the structural optical scene for `spec`.
pub fn render_scene(spec: &SceneSpec) -> Result<Image> {
    if spec.size < 4 {
        return Err(invalid("scene size must be at least 4"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5CE1_E5EE_D000_0000);
    let pattern = Pattern::draw(spec, &mut rng);
    let (bg, fg): ([f64; 3], [f64; 3]) = match spec.tone {
        Some(t) => {
            let mut near = |c: f64| c + rng.gen_range(-0.02..0.02);
            let wheel = |h: f64, ch: usize| (std::f64::consts::TAU * (h - ch as f64 / 3.0)).cos();
            let bg = [0, 1, 2].map(|ch| near(0.5 + 0.3 * wheel(t + 0.5, ch)));
            let fg = [0, 1, 2].map(|ch| near(0.5 + 0.45 * wheel(t, ch)));
            (bg, fg)
        }
        None => (
            [rng.gen_range(0.15..0.35), rng.gen_range(0.2..0.4), rng.gen_range(0.15..0.35)],
            [rng.gen_range(0.65..0.9), rng.gen_range(0.6..0.85), rng.gen_range(0.55..0.8)],
        ),
    };
    let shade_amp = 0.08 * spec.jitter.clamp(0.0, 1.0);
    let (gx, gy) = (shade_amp * rng.gen_range(-1.0..1.0), shade_amp * rng.gen_range(-1.0..1.0));
    let n = spec.size;
    let mut data = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        let v = 2.0 * (y as f64 + 0.5) / n as f64 - 1.0;
        for x in 0..n {
            let u = 2.0 * (x as f64 + 0.5) / n as f64 - 1.0;
            let cov = pattern.coverage(u, v);
            let shade = gx * u + gy * v;
            for c in 0..3 {
                data.push((bg[c] * (1.0 - cov) + fg[c] * cov + shade).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(n, n, 3, data)
}

/// Separable Gaussian blur with standard deviation `sigma` pixels, clamped borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let half = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-half..=half).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (h, w, ch) = (img.height as isize, img.width as isize, img.channels);
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let off = k as isize - half;
                        let (sy, sx) = if horizontal {
                            (y, (x + off).clamp(0, w - 1))
                        } else {
                            ((y + off).clamp(0, h - 1), x)
                        };
                        acc += kv * src[((sy * w + sx) as usize) * ch + c];
                    }
                    out[((y * w + x) as usize) * ch + c] = acc;
                }
            }
        }
        out
    };
    let tmp = pass(&img.data, true);
    let data = pass(&tmp, false);
    Image { data, ..img.clone() }
}

/// Render a registered optical/SAR pair. The SAR surrogate is
/// `clip(blur(gray(eo))^gamma · speckle)` with unit-mean gamma-distributed
/// speckle of variance `speckle_strength²`.
pub fn synth_pair(spec: &SceneSpec, noise: &NoiseSpec, seed: u64) -> Result<ImagePair> {
    noise.validate()?;
    let eo = render_scene(spec)?;
    let gray = to_grayscale(&eo)?;
    let blurred = gaussian_blur(&gray, noise.blur_radius);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s2 = noise.speckle_strength * noise.speckle_strength;
    let speckle = if s2 > 0.0 {
        Some(Gamma::new(1.0 / s2, s2).map_err(|e| invalid(format!("speckle distribution: {e}")))?)
    } else {
        None
    };
    let data = blurred
        .data
        .iter()
        .map(|&v| {
            let base = if noise.gamma == 1.0 { v } else { v.max(0.0).powf(noise.gamma) };
            let k = speckle.as_ref().map_or(1.0, |g| g.sample(&mut rng));
            (base * k).clamp(0.0, 1.0)
        })
        .collect();
    let sar = Image::new(eo.height, eo.width, 1, data)?;
    ImagePair::new(format!("c{}_s{}", spec.class_id, spec.seed), eo, sar)
}

// ---------------------------------------------------------------------------
// augmentation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub crop_min: f64,
    pub crop_max: f64,
    pub flip_p: f64,
    pub jitter_sigma: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec { crop_min: 0.8, crop_max: 1.0, flip_p: 0.5, jitter_sigma: 0.02 }
    }
}

impl AugmentSpec {
    pub fn disabled() -> Self {
        AugmentSpec { crop_min: 1.0, crop_max: 1.0, flip_p: 0.0, jitter_sigma: 0.0 }
    }
}

/// The geometric part of one augmentation draw, shared across a registered pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub scale: f64,
    pub x0: f64,
    pub y0: f64,
    pub flip: bool,
}

impl Geometry {
    pub fn draw(spec: &AugmentSpec, rng: &mut impl Rng) -> Geometry {
        let scale = if spec.crop_max > spec.crop_min {
            rng.gen_range(spec.crop_min..=spec.crop_max)
        } else {
            spec.crop_max
        };
        let slack = 1.0 - scale;
        let x0 = if slack > 0.0 { rng.gen_range(0.0..=slack) } else { 0.0 };
        let y0 = if slack > 0.0 { rng.gen_range(0.0..=slack) } else { 0.0 };
        let flip = spec.flip_p > 0.0 && rng.gen_bool(spec.flip_p.min(1.0));
        Geometry { scale, x0, y0, flip }
    }

    /// Crop-resize (bilinear) and optional horizontal flip.
    pub fn apply(&self, img: &Image) -> Image {
        let (h, w, ch) = (img.height, img.width, img.channels);
        let mut data = vec![0.0; img.data.len()];
        let (fy, fx) = (h as f64, w as f64);
        for y in 0..h {
            let sy = self.y0 * fy + (y as f64 + 0.5) * self.scale - 0.5;
            let sy = sy.clamp(0.0, fy - 1.0);
            let y_lo = sy.floor() as usize;
            let y_hi = (y_lo + 1).min(h - 1);
            let ty = sy - y_lo as f64;
            for x in 0..w {
                let xo = if self.flip { w - 1 - x } else { x };
                let sx = self.x0 * fx + (xo as f64 + 0.5) * self.scale - 0.5;
                let sx = sx.clamp(0.0, fx - 1.0);
                let x_lo = sx.floor() as usize;
                let x_hi = (x_lo + 1).min(w - 1);
                let tx = sx - x_lo as f64;
                for c in 0..ch {
                    let v00 = img.at(y_lo, x_lo, c);
                    let v01 = img.at(y_lo, x_hi, c);
                    let v10 = img.at(y_hi, x_lo, c);
                    let v11 = img.at(y_hi, x_hi, c);
                    let top = if tx == 0.0 { v00 } else { v00 * (1.0 - tx) + v01 * tx };
                    let bot = if tx == 0.0 { v10 } else { v10 * (1.0 - tx) + v11 * tx };
                    data[(y * w + x) * ch + c] = if ty == 0.0 { top } else { top * (1.0 - ty) + bot * ty };
                }
            }
        }
        Image { data, ..img.clone() }
    }
}

fn jitter(img: &mut Image, sigma: f64, rng: &mut impl Rng) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    for v in img.data.iter_mut() {
        *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
    }
}

/// Seeded crop-resize, horizontal flip and clipped Gaussian jitter.
pub fn augment(img: &Image, spec: &AugmentSpec, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geo = Geometry::draw(spec, &mut rng);
    let mut out = geo.apply(img);
    jitter(&mut out, spec.jitter_sigma, &mut rng);
    out
}

/// Augment both images of a pair with one shared geometry (keeps them registered).
pub fn augment_pair(pair: &ImagePair, spec: &AugmentSpec, seed: u64) -> ImagePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geo = Geometry::draw(spec, &mut rng);
    let mut eo = geo.apply(&pair.eo);
    let mut sar = geo.apply(&pair.sar);
    jitter(&mut eo, spec.jitter_sigma, &mut rng);
    jitter(&mut sar, spec.jitter_sigma, &mut rng);
    ImagePair { pair_id: pair.pair_id.clone(), eo, sar }
}

// ---------------------------------------------------------------------------
// GCD splits

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One entry of a classification corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRecord {
    pub image_path: String,
    pub class_id: usize,
    pub split: Split,
}

/// Index into the corpus plus its (possibly hidden) class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitEntry {
    pub index: usize,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcdSplit {
    pub labeled: Vec<SplitEntry>,
    /// Class ids are kept for scoring only; training never reads them.
    pub unlabeled: Vec<SplitEntry>,
    pub test: Vec<SplitEntry>,
    pub old_classes: BTreeSet<usize>,
    pub new_classes: BTreeSet<usize>,
}

impl GcdSplit {
    pub fn num_classes(&self) -> usize {
        self.old_classes.len() + self.new_classes.len()
    }
}

/// Per old class, `⌊label_fraction·n⌋` training instances (seeded choice)
/// become labeled; every other training instance is unlabeled; test
/// instances pass through.
pub fn make_splits(
    corpus: &[ClassRecord],
    old_classes: &BTreeSet<usize>,
    label_fraction: f64,
    seed: u64,
) -> Result<GcdSplit> {
    if !(label_fraction > 0.0 && label_fraction <= 1.0) {
        return Err(invalid(format!("label_fraction must lie in (0, 1], got {label_fraction}")));
    }
    let mut train_by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut all_classes = BTreeSet::new();
    for (i, r) in corpus.iter().enumerate() {
        all_classes.insert(r.class_id);
        if r.split == Split::Train {
            train_by_class.entry(r.class_id).or_default().push(i);
        }
    }
    for c in old_classes {
        if !all_classes.contains(c) {
            return Err(invalid(format!("old class {c} does not occur in the corpus")));
        }
        let n = train_by_class.get(c).map_or(0, Vec::len);
        if n < 2 {
            return Err(invalid(format!("old class {c} has {n} training instances, need at least 2")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labeled_idx = BTreeSet::new();
    for c in old_classes {
        let mut members = train_by_class[c].clone();
        members.shuffle(&mut rng);
        let k = (label_fraction * members.len() as f64).floor() as usize;
        labeled_idx.extend(members.into_iter().take(k));
    }
    let entry = |i: usize| SplitEntry { index: i, class_id: corpus[i].class_id };
    let mut split = GcdSplit {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        test: Vec::new(),
        old_classes: old_classes.clone(),
        new_classes: all_classes.difference(old_classes).copied().collect(),
    };
    for (i, r) in corpus.iter().enumerate() {
        match r.split {
            Split::Test => split.test.push(entry(i)),
            Split::Train if labeled_idx.contains(&i) => split.labeled.push(entry(i)),
            Split::Train => split.unlabeled.push(entry(i)),
        }
    }
    Ok(split)
}

// ---------------------------------------------------------------------------
// file IO

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub eo_path: String,
    pub sar_path: String,
}

/// Load an 8-bit grayscale or RGB PNG scaled to `[0, 1]`.
pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let img = image::open(path.as_ref())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img.color().channel_count() {
        1 | 2 => {
            let g = img.to_luma8();
            Image::new(h, w, 1, g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect())
        }
        _ => {
            let rgb = img.to_rgb8();
            Image::new(h, w, 3, rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect())
        }
    }
}

pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    match img.channels {
        1 => image::GrayImage::from_raw(w, h, bytes)
            .ok_or_else(|| invalid("buffer size"))?
            .save(path.as_ref())?,
        3 => image::RgbImage::from_raw(w, h, bytes)
            .ok_or_else(|| invalid("buffer size"))?
            .save(path.as_ref())?,
        c => return Err(invalid(format!("cannot write a {c}-channel PNG"))),
    }
    Ok(())
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn read_pair_manifest(path: impl AsRef<Path>) -> Result<Vec<PairRecord>> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

pub fn read_class_manifest(path: impl AsRef<Path>) -> Result<Vec<ClassRecord>> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// Load every pair listed in a manifest; relative paths resolve against the manifest's directory.
pub fn load_pairs(manifest: impl AsRef<Path>) -> Result<Vec<ImagePair>> {
    let manifest = manifest.as_ref();
    let base = manifest_dir(manifest);
    read_pair_manifest(manifest)?
        .into_iter()
        .map(|r| {
            let eo = load_png(resolve(&base, &r.eo_path))?;
            let eo = if eo.channels == 1 { eo.replicate(3)? } else { eo };
            let sar = load_png(resolve(&base, &r.sar_path))?;
            let sar = if sar.channels == 3 { to_grayscale(&sar)? } else { sar };
            ImagePair::new(r.pair_id, eo, sar)
        })
        .collect()
}

/// Load a classification manifest and its single-channel images.
pub fn load_class_corpus(manifest: impl AsRef<Path>) -> Result<(Vec<ClassRecord>, Vec<Image>)> {
    let manifest = manifest.as_ref();
    let base = manifest_dir(manifest);
    let records = read_class_manifest(manifest)?;
    let images = records
        .iter()
        .map(|r| {
            let img = load_png(resolve(&base, &r.image_path))?;
            if img.channels == 3 {
                to_grayscale(&img)
            } else {
                Ok(img)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((records, images))
}

// ---------------------------------------------------------------------------
// in-memory corpora

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub classes: usize,
    pub pairs: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    pub noise: NoiseSpec,
    /// Pose spread of the class scenes, see [`SceneSpec::jitter`].
    #[serde(default = "unit")]
    pub jitter: f64,
    /// Give every class its own hue.
    #[serde(default)]
    pub class_tones: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            classes: 5,
            pairs: 200,
            train_per_class: 40,
            test_per_class: 20,
            size: 64,
            noise: NoiseSpec::default(),
            jitter: 1.0,
            class_tones: false,
        }
    }
}

impl CorpusSpec {
    /// Near-canonical poses, per-class hues and no SAR degradation: classes
    /// occupy disjoint colour regions, so they are linearly separable in pixel
    /// space.
    pub fn separable() -> Self {
        CorpusSpec { noise: NoiseSpec::noiseless(), jitter: 0.0, class_tones: true, ..Self::default() }
    }

    fn scene(&self, class: usize, seed: u64) -> SceneSpec {
        let tone = self.class_tones.then(|| class as f64 / self.classes.max(1) as f64);
        SceneSpec { jitter: self.jitter, tone, ..SceneSpec::for_class(class, seed, self.size) }
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Paired corpus cycling through the scene classes.
pub fn synth_pair_corpus(spec: &CorpusSpec, seed: u64) -> Result<Vec<ImagePair>> {
    if spec.classes == 0 {
        return Err(invalid("corpus needs at least one class"));
    }
    (0..spec.pairs)
        .map(|i| {
            let class = i % spec.classes;
            let scene = spec.scene(class, mix(seed, 1, i as u64));
            let mut pair = synth_pair(&scene, &spec.noise, mix(seed, 2, i as u64))?;
            pair.pair_id = format!("pair{i:04}");
            Ok(pair)
        })
        .collect()
}

/// Single-modality (SAR) classification corpus: train instances first, then test.
pub fn synth_class_corpus(spec: &CorpusSpec, seed: u64) -> Result<(Vec<ClassRecord>, Vec<Image>)> {
    let mut records = Vec::new();
    let mut images = Vec::new();
    for (split, per_class, tag) in [(Split::Train, spec.train_per_class, 3u64), (Split::Test, spec.test_per_class, 4u64)] {
        for k in 0..per_class {
            for class in 0..spec.classes {
                let i = (k * spec.classes + class) as u64;
                let scene = spec.scene(class, mix(seed, tag, i));
                let pair = synth_pair(&scene, &spec.noise, mix(seed, tag + 10, i))?;
                let name = match split {
                    Split::Train => format!("train/c{class}_{k:04}.png"),
                    Split::Test => format!("test/c{class}_{k:04}.png"),
                };
                records.push(ClassRecord { image_path: name, class_id: class, split });
                images.push(pair.sar);
            }
        }
    }
    Ok((records, images))
}

/// Write a synthetic paired corpus and classification corpus as PNGs plus
/// the two JSON manifests. Returns `(pairs.json, classes.json)`.
pub fn write_synthetic_corpus(dir: impl AsRef<Path>, spec: &CorpusSpec, seed: u64) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("pairs"))?;
    std::fs::create_dir_all(dir.join("train"))?;
    std::fs::create_dir_all(dir.join("test"))?;
    let pairs = synth_pair_corpus(spec, seed)?;
    let mut pair_records = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let eo_path = format!("pairs/{}_eo.png", p.pair_id);
        let sar_path = format!("pairs/{}_sar.png", p.pair_id);
        save_png(&p.eo, dir.join(&eo_path))?;
        save_png(&p.sar, dir.join(&sar_path))?;
        pair_records.push(PairRecord { pair_id: p.pair_id.clone(), eo_path, sar_path });
    }
    let (records, images) = synth_class_corpus(spec, seed)?;
    for (r, img) in records.iter().zip(&images) {
        save_png(img, dir.join(&r.image_path))?;
    }
    let pairs_path = dir.join("pairs.json");
    let classes_path = dir.join("classes.json");
    std::fs::write(&pairs_path, serde_json::to_vec_pretty(&pair_records)?)?;
    std::fs::write(&classes_path, serde_json::to_vec_pretty(&records)?)?;
    Ok((pairs_path, classes_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn px(r: f64, g: f64, b: f64) -> Image {
        Image::new(1, 1, 3, vec![r, g, b]).unwrap()
    }

    #[test]
    fn grayscale_examples() {
        assert!((to_grayscale(&px(1.0, 1.0, 1.0)).unwrap().data[0] - 1.0).abs() < 1e-15);
        assert!((to_grayscale(&px(1.0, 0.0, 0.0)).unwrap().data[0] - 0.299).abs() < 1e-15);
        for g in [0.0, 0.25, 0.6, 1.0] {
            assert!((to_grayscale(&px(g, g, g)).unwrap().data[0] - g).abs() < 1e-15);
        }
        assert!(to_grayscale(&Image::filled(2, 2, 1, 0.5)).is_err());
    }

    #[test]
    fn noiseless_sar_is_gray_optical() {
        let spec = SceneSpec::for_class(2, 11, 32);
        let p = synth_pair(&spec, &NoiseSpec::noiseless(), 5).unwrap();
        assert_eq!(p.sar, to_grayscale(&p.eo).unwrap());
    }

    #[test]
    fn synth_is_deterministic_and_bounded() {
        for family in ShapeFamily::ALL {
            let spec = SceneSpec { class_id: 0, family, texture_scale: 1.0, seed: 3, size: 32, jitter: 1.0, tone: None };
            let a = synth_pair(&spec, &NoiseSpec::default(), 9).unwrap();
            let b = synth_pair(&spec, &NoiseSpec::default(), 9).unwrap();
            assert_eq!(a, b);
            assert!(a.eo.in_unit_range() && a.sar.in_unit_range());
        }
    }

    #[test]
    fn bad_noise_rejected() {
        let spec = SceneSpec::for_class(0, 1, 16);
        let noise = NoiseSpec { speckle_strength: -0.1, ..NoiseSpec::default() };
        assert!(synth_pair(&spec, &noise, 0).is_err());
    }

    #[test]
    fn augmentation_contracts() {
        let spec = SceneSpec::for_class(1, 4, 32);
        let img = synth_pair(&spec, &NoiseSpec::default(), 1).unwrap().eo;
        let a = augment(&img, &AugmentSpec::default(), 17);
        assert_eq!(a, augment(&img, &AugmentSpec::default(), 17));
        assert!(a.in_unit_range());
        assert_eq!((a.height, a.width, a.channels), (32, 32, 3));
        assert_eq!(augment(&img, &AugmentSpec::disabled(), 17), img);
    }

    #[test]
    fn flip_only_mirrors() {
        let img = Image::new(1, 3, 1, vec![0.1, 0.2, 0.3]).unwrap();
        let spec = AugmentSpec { flip_p: 1.0, ..AugmentSpec::disabled() };
        assert_eq!(augment(&img, &spec, 0).data, vec![0.3, 0.2, 0.1]);
    }

    fn corpus(counts: &[(usize, usize)]) -> Vec<ClassRecord> {
        let mut out = Vec::new();
        for &(class, n) in counts {
            for k in 0..n {
                out.push(ClassRecord { image_path: format!("{class}_{k}"), class_id: class, split: Split::Train });
            }
        }
        out
    }

    #[test]
    fn split_two_classes() {
        let c = corpus(&[(0, 4), (1, 4)]);
        let s = make_splits(&c, &[0].into(), 0.5, 1).unwrap();
        assert_eq!(s.labeled.len(), 2);
        assert_eq!(s.unlabeled.len(), 6);
        assert!(s.labeled.iter().all(|e| e.class_id == 0));
        assert_eq!(s.new_classes, [1].into());
    }

    #[test]
    fn split_full_fraction_without_new_classes() {
        let c = corpus(&[(0, 3), (1, 5)]);
        let s = make_splits(&c, &[0, 1].into(), 1.0, 1).unwrap();
        assert!(s.unlabeled.is_empty());
        assert_eq!(s.labeled.len(), 8);
    }

    #[test]
    fn split_errors() {
        let c = corpus(&[(0, 1), (1, 4)]);
        assert!(make_splits(&c, &[0].into(), 0.5, 1).is_err());
        assert!(make_splits(&c, &[7].into(), 0.5, 1).is_err());
        assert!(make_splits(&c, &[1].into(), 0.0, 1).is_err());
        assert!(make_splits(&c, &[1].into(), 1.5, 1).is_err());
    }
}
