//! Patch-transformer backbone with the optional refinement stage between the
//! last two blocks, an embedding head, freeze policies and checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aft::{self, AftConfig, AftForward};
use crate::autodiff::Var;
use crate::container;
use crate::error::{invalid, shape, Error, Result};
use crate::fer::{self, FerConfig};
use crate::imaging::Image;
use crate::params::{ParamStore, Tape};
use crate::rng::{trunc_normal, StreamState};
use crate::spectral::DiscrepancyCurve;
use crate::tensor::{Scalar, Tensor};

pub const AFT_PREFIX: &str = "aft.";
pub const FER_PREFIX: &str = "fer.";
pub const PROTOTYPES: &str = "prototypes";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub embed_dim: usize,
    pub mlp_ratio: usize,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 64,
            patch_size: 8,
            in_channels: 3,
            dim: 64,
            heads: 4,
            blocks: 6,
            embed_dim: 32,
            mlp_ratio: 4,
            init_std: 0.02,
        }
    }
}

const LN_EPS: f64 = 1e-6;

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(invalid(format!("image size {} is not divisible by patch size {}", self.image_size, self.patch_size)));
        }
        if self.blocks < 2 {
            return Err(invalid("encoder needs at least 2 blocks"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(invalid(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if self.dim == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 || self.in_channels == 0 {
            return Err(invalid("encoder dimensions must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }
}

/// What sits between blocks `L−1` and `L` during pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Refinement {
    /// Nothing: the backbone runs straight through.
    None,
    /// Only the self-attention branch of the refinement module.
    SelfAttention,
    /// Tokenization plus routed experts and global modulation.
    Experts,
}

/// Build a fresh parameter set. AFT/FER tensors are created whenever the
/// refinement is not `None`, even if a variant leaves some of them unused.
pub fn init_model<T: Scalar>(
    cfg: &EncoderConfig,
    refinement: Refinement,
    aft_cfg: &AftConfig,
    fer_cfg: &FerConfig,
    rng: &mut impl Rng,
) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let (c, std) = (cfg.dim, cfg.init_std);
    let mut s = ParamStore::new();
    s.insert("patch_embed.w", trunc_normal(&[cfg.patch_len(), c], std, rng));
    s.insert("patch_embed.b", Tensor::zeros(&[c]));
    s.insert("cls", trunc_normal(&[c], std, rng));
    s.insert("pos", trunc_normal(&[cfg.patches() + 1, c], std, rng));
    let hidden = cfg.mlp_ratio * c;
    for l in 1..=cfg.blocks {
        let b = format!("blocks.{l}");
        for ln in ["ln1", "ln2"] {
            s.insert(format!("{b}.{ln}.g"), Tensor::full(&[c], T::one()));
            s.insert(format!("{b}.{ln}.b"), Tensor::zeros(&[c]));
        }
        for p in ["q", "k", "v", "o"] {
            s.insert(format!("{b}.attn.{p}.w"), trunc_normal(&[c, c], std, rng));
            if p != "k" {
                s.insert(format!("{b}.attn.{p}.b"), Tensor::zeros(&[c]));
            }
        }
        s.insert(format!("{b}.mlp.fc1.w"), trunc_normal(&[c, hidden], std, rng));
        s.insert(format!("{b}.mlp.fc1.b"), Tensor::zeros(&[hidden]));
        s.insert(format!("{b}.mlp.fc2.w"), trunc_normal(&[hidden, c], std, rng));
        s.insert(format!("{b}.mlp.fc2.b"), Tensor::zeros(&[c]));
    }
    s.insert("norm.g", Tensor::full(&[c], T::one()));
    s.insert("norm.b", Tensor::zeros(&[c]));
    s.insert("head.w", trunc_normal(&[c, cfg.embed_dim], std, rng));
    s.insert("head.b", Tensor::zeros(&[cfg.embed_dim]));
    if refinement != Refinement::None {
        aft_cfg.validate()?;
        aft::init_params(&mut s, AFT_PREFIX, c, aft_cfg, rng);
        fer::init_params(&mut s, FER_PREFIX, c, aft_cfg.bands, fer_cfg, rng);
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Pretrain,
    Finetune,
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Policy::Pretrain),
            "finetune" => Ok(Policy::Finetune),
            other => Err(invalid(format!("unknown freeze policy `{other}`"))),
        }
    }
}

/// Names updated under `policy`; everything else stays frozen.
pub fn set_trainable<T: Scalar>(store: &ParamStore<T>, cfg: &EncoderConfig, policy: Policy) -> BTreeSet<String> {
    let last = format!("blocks.{}.", cfg.blocks);
    let penult = format!("blocks.{}.", cfg.blocks - 1);
    store
        .names()
        .filter(|n| {
            let shared = n.starts_with(&last) || n.starts_with("head.") || n.starts_with("norm.");
            match policy {
                Policy::Pretrain => {
                    shared || n.starts_with(&penult) || n.starts_with(AFT_PREFIX) || n.starts_with(FER_PREFIX)
                }
                Policy::Finetune => shared || n.as_str() == PROTOTYPES,
            }
        })
        .cloned()
        .collect()
}

/// Drop every AFT/FER tensor.
pub fn strip_auxiliary<T: Scalar>(store: &ParamStore<T>) -> ParamStore<T> {
    let mut s = store.clone();
    s.strip_prefixes(&[AFT_PREFIX, FER_PREFIX]);
    s
}

pub fn has_auxiliary<T: Scalar>(store: &ParamStore<T>) -> bool {
    store.has_prefix(AFT_PREFIX) || store.has_prefix(FER_PREFIX)
}

/// Flattened non-overlapping patches `[P, C·p·p]`; single-channel images are
/// replicated to the configured channel count.
pub fn patchify(img: &Image, cfg: &EncoderConfig) -> Result<Vec<f64>> {
    if img.height != cfg.image_size || img.width != cfg.image_size {
        return Err(shape(format!(
            "encoder expects {0}x{0} images, got {1}x{2}",
            cfg.image_size, img.height, img.width
        )));
    }
    let owned;
    let img = if img.channels == cfg.in_channels {
        img
    } else if img.channels == 1 {
        owned = img.replicate(cfg.in_channels)?;
        &owned
    } else {
        return Err(shape(format!("{} input channels for a {}-channel encoder", img.channels, cfg.in_channels)));
    };
    let (p, g) = (cfg.patch_size, cfg.grid());
    let mut out = Vec::with_capacity(cfg.patches() * cfg.patch_len());
    for pr in 0..g {
        for pc in 0..g {
            for c in 0..cfg.in_channels {
                for dy in 0..p {
                    for dx in 0..p {
                        out.push(img.at(pr * p + dy, pc * p + dx, c));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Fixed pixel normalization applied before the patch projection.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// Normalized patches `[B, P, C·p·p]`.
pub fn patch_batch<T: Scalar>(images: &[&Image], cfg: &EncoderConfig) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Err(invalid("empty image batch"));
    }
    let mut data = Vec::with_capacity(images.len() * cfg.patches() * cfg.patch_len());
    for img in images {
        data.extend(patchify(img, cfg)?.into_iter().map(|v| (v - PIXEL_MEAN) / PIXEL_STD));
    }
    Tensor::from_f64(&[images.len(), cfg.patches(), cfg.patch_len()], &data)
}

fn attention_block<T: Scalar>(tape: &mut Tape<T>, cfg: &EncoderConfig, b: &str, h: Var) -> Result<Var> {
    let s = tape.graph.shape(h).to_vec();
    let (bs, n, c) = (s[0], s[1], s[2]);
    let (nh, dh) = (cfg.heads, cfg.dim / cfg.heads);
    let heads = |tape: &mut Tape<T>, name: &str, bias: bool| -> Result<Var> {
        let w = tape.p(&format!("{b}.attn.{name}.w"))?;
        let y = if bias {
            let bb = tape.p(&format!("{b}.attn.{name}.b"))?;
            tape.graph.linear(h, w, bb)?
        } else {
            tape.graph.matmul(h, w)?
        };
        let y = tape.graph.reshape(y, &[bs, n, nh, dh])?;
        let y = tape.graph.permute(y, &[0, 2, 1, 3])?;
        tape.graph.reshape(y, &[bs * nh, n, dh])
    };
    let q = heads(tape, "q", true)?;
    let k = heads(tape, "k", false)?;
    let v = heads(tape, "v", true)?;
    let g = &mut tape.graph;
    let o = fer::attend(g, q, k, v)?;
    let o = g.reshape(o, &[bs, nh, n, dh])?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[bs, n, c])?;
    let w = tape.p(&format!("{b}.attn.o.w"))?;
    let bb = tape.p(&format!("{b}.attn.o.b"))?;
    tape.graph.linear(o, w, bb)
}

fn layer_norm<T: Scalar>(tape: &mut Tape<T>, name: &str, x: Var) -> Result<Var> {
    let g = tape.p(&format!("{name}.g"))?;
    let b = tape.p(&format!("{name}.b"))?;
    tape.graph.layer_norm(x, g, b, LN_EPS)
}

/// Pre-norm transformer block `l` (1-based).
pub fn block<T: Scalar>(tape: &mut Tape<T>, cfg: &EncoderConfig, l: usize, x: Var) -> Result<Var> {
    let b = format!("blocks.{l}");
    let h = layer_norm(tape, &format!("{b}.ln1"), x)?;
    let a = attention_block(tape, cfg, &b, h)?;
    let x = tape.graph.add(x, a)?;
    let h = layer_norm(tape, &format!("{b}.ln2"), x)?;
    let w1 = tape.p(&format!("{b}.mlp.fc1.w"))?;
    let b1 = tape.p(&format!("{b}.mlp.fc1.b"))?;
    let w2 = tape.p(&format!("{b}.mlp.fc2.w"))?;
    let b2 = tape.p(&format!("{b}.mlp.fc2.b"))?;
    let g = &mut tape.graph;
    let m = g.linear(h, w1, b1)?;
    let m = g.gelu(m);
    let m = g.linear(m, w2, b2)?;
    g.add(x, m)
}

/// Encoder input: raw images, or hidden states `[B, P+1, C]` already
/// produced by blocks `1..=after`.
pub enum Input<'a, T> {
    Images(&'a [&'a Image]),
    Hidden { states: Tensor<T>, after: usize },
}

/// Extra state needed on the pretraining path.
pub struct PretrainPath<'a> {
    pub refinement: Refinement,
    pub aft: &'a AftConfig,
    pub curves: &'a [&'a DiscrepancyCurve],
    /// Seed for this pass's candidate sampling.
    pub seed: u64,
}

pub struct EncodeOut {
    /// Unit-norm embeddings `[B, E]`.
    pub embedding: Var,
    /// Final normalized patch tokens `[B, P, C]`.
    pub features: Var,
    pub aft: Option<AftForward>,
    /// Routing weights `[B, N]` when experts ran.
    pub routing: Option<Var>,
}

fn embed_patches<T: Scalar>(tape: &mut Tape<T>, cfg: &EncoderConfig, images: &[&Image]) -> Result<Var> {
    let patches = patch_batch::<T>(images, cfg)?;
    let bs = images.len();
    let x = tape.graph.constant(patches);
    let w = tape.p("patch_embed.w")?;
    let b = tape.p("patch_embed.b")?;
    let x = tape.graph.linear(x, w, b)?;
    let cls = tape.p("cls")?;
    let pos = tape.p("pos")?;
    let g = &mut tape.graph;
    let cls = g.reshape(cls, &[1, cfg.dim])?;
    let cls = g.repeat_leading(cls, bs);
    let x = g.concat(&[cls, x], 1)?;
    g.add_trailing(x, pos)
}

/// Run the encoder. `path = None` is the inference path: backbone and head
/// only, never touching AFT/FER parameters.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &EncoderConfig,
    input: Input<'_, T>,
    path: Option<&PretrainPath<'_>>,
) -> Result<EncodeOut> {
    cfg.validate()?;
    let (mut x, start) = match input {
        Input::Images(images) => (embed_patches(tape, cfg, images)?, 1),
        Input::Hidden { states, after } => {
            if states.rank() != 3 || states.shape()[1] != cfg.patches() + 1 || states.shape()[2] != cfg.dim {
                return Err(shape(format!("hidden states {:?} do not fit the encoder", states.shape())));
            }
            let refines = path.is_some_and(|pp| pp.refinement != Refinement::None);
            if after >= cfg.blocks || (refines && after >= cfg.blocks - 1) {
                return Err(invalid("hidden states must precede the refinement stage"));
            }
            (tape.graph.constant(states), after + 1)
        }
    };
    let bs = tape.graph.shape(x)[0];
    let (p, c, grid) = (cfg.patches(), cfg.dim, cfg.grid());
    for l in start..cfg.blocks {
        x = block(tape, cfg, l, x)?;
    }
    let mut aft_out = None;
    let mut routing = None;
    if let Some(pp) = path {
        if pp.curves.len() != bs {
            return Err(invalid(format!("pretrain path needs one curve per sample: {} curves for {bs} samples", pp.curves.len())));
        }
        if pp.refinement != Refinement::None {
            let cls = tape.graph.slice(x, 1, 0, 1)?;
            let r = tape.graph.slice(x, 1, 1, p)?;
            let refined = match pp.refinement {
                Refinement::SelfAttention => fer::global_branch(tape, FER_PREFIX, r)?,
                _ => {
                    let g = &mut tape.graph;
                    let grid_x = g.reshape(r, &[bs, grid, grid, c])?;
                    let grid_x = g.permute(grid_x, &[0, 3, 1, 2])?;
                    let a = aft::forward(tape, AFT_PREFIX, pp.aft, grid_x, pp.curves, pp.seed)?;
                    let f = fer::forward(tape, FER_PREFIX, r, &a.tokens)?;
                    aft_out = Some(a);
                    routing = Some(f.weights);
                    f.output
                }
            };
            x = tape.graph.concat(&[cls, refined], 1)?;
        }
    }
    x = block(tape, cfg, cfg.blocks, x)?;
    let x = layer_norm(tape, "norm", x)?;
    let features = tape.graph.slice(x, 1, 1, p)?;
    let pooled = tape.graph.mean_axis(features, 1)?;
    let w = tape.p("head.w")?;
    let b = tape.p("head.b")?;
    let z = tape.graph.linear(pooled, w, b)?;
    let embedding = tape.graph.l2_normalize(z)?;
    Ok(EncodeOut { embedding, features, aft: aft_out, routing })
}

/// Hidden states after blocks `1..=after`, computed without gradients.
pub fn hidden_states<T: Scalar>(store: &ParamStore<T>, cfg: &EncoderConfig, images: &[&Image], after: usize) -> Result<Tensor<T>> {
    if after >= cfg.blocks {
        return Err(invalid("hidden_states: block index out of range"));
    }
    let frozen = BTreeSet::new();
    let mut tape = Tape::new(store, &frozen);
    let mut x = embed_patches(&mut tape, cfg, images)?;
    for l in 1..=after {
        x = block(&mut tape, cfg, l, x)?;
    }
    Ok(tape.graph.value(x).clone())
}

/// Inference-path embeddings `[B, E]` as plain values, in chunks of `chunk`.
pub fn embed<T: Scalar>(store: &ParamStore<T>, cfg: &EncoderConfig, images: &[&Image], chunk: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * cfg.embed_dim);
    let frozen = BTreeSet::new();
    for part in images.chunks(chunk.max(1)) {
        let mut tape = Tape::new(store, &frozen);
        let out = encode(&mut tape, cfg, Input::Images(part), None)?;
        data.extend_from_slice(tape.graph.value(out.embedding).data());
    }
    Tensor::new(vec![images.len(), cfg.embed_dim], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: serde_json::Value,
    pub step: u64,
    pub rng_streams: BTreeMap<String, StreamState>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Write the tensor container at `path` and its sidecar at `path.json`.
pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, store: &ParamStore<T>, sidecar: &Sidecar) -> Result<()> {
    let path = path.as_ref();
    container::save(path, store)?;
    let mut text = serde_json::to_string_pretty(sidecar)?;
    text.push('\n');
    std::fs::write(sidecar_path(path), text)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(ParamStore<T>, Sidecar)> {
    let path = path.as_ref();
    let store = container::load(path)?;
    let sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    Ok((store, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig { image_size: 8, patch_size: 2, dim: 8, heads: 2, blocks: 3, embed_dim: 4, ..Default::default() }
    }

    fn image(seed: u64, channels: usize) -> Image {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Image::new(8, 8, channels, (0..64 * channels).map(|_| r.gen()).collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig { patch_size: 7, ..Default::default() }.validate().is_err());
        assert!(EncoderConfig { blocks: 1, ..Default::default() }.validate().is_err());
        assert!(EncoderConfig::default().validate().is_ok());
        assert_eq!(EncoderConfig::default().patches(), 64);
    }

    #[test]
    fn policies() {
        let cfg = EncoderConfig::default();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let s: ParamStore<f32> =
            init_model(&cfg, Refinement::Experts, &AftConfig::default(), &FerConfig::default(), &mut r).unwrap();
        let pre = set_trainable(&s, &cfg, Policy::Pretrain);
        assert!(pre.contains("blocks.5.attn.q.w") && pre.contains("aft.phi.w1") && pre.contains("fer.router.fc1.w"));
        for frozen in ["patch_embed.w", "blocks.1.mlp.fc1.w", "blocks.4.ln1.g", "pos", "cls"] {
            assert!(!pre.contains(frozen), "{frozen}");
        }
        let stripped = strip_auxiliary(&s);
        assert!(!has_auxiliary(&stripped) && stripped.numel() < s.numel());
        let fine = set_trainable(&stripped, &cfg, Policy::Finetune);
        assert!(fine.iter().all(|n| n.starts_with("blocks.6.") || n.starts_with("head.") || n.starts_with("norm.")));
        assert!("warmup".parse::<Policy>().is_err());
    }

    #[test]
    fn sar_is_replicated() {
        let cfg = tiny();
        let sar = image(1, 1);
        let rep = sar.replicate(3).unwrap();
        assert_eq!(patchify(&sar, &cfg).unwrap(), patchify(&rep, &cfg).unwrap());
        assert!(patchify(&image(2, 2), &cfg).is_err());
    }

    #[test]
    fn unit_norm_embeddings_and_shapes() {
        let cfg = tiny();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let s: ParamStore<f64> = init_model(&cfg, Refinement::None, &AftConfig::default(), &FerConfig::default(), &mut r).unwrap();
        let imgs = [image(4, 3), image(5, 1)];
        let refs: Vec<&Image> = imgs.iter().collect();
        let frozen = BTreeSet::new();
        let mut tape = Tape::new(&s, &frozen);
        let out = encode(&mut tape, &cfg, Input::Images(&refs), None).unwrap();
        assert_eq!(tape.graph.shape(out.features), &[2, 16, 8]);
        for row in tape.graph.value(out.embedding).data().chunks(4) {
            let n: f64 = row.iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hidden_input_matches_images() {
        let cfg = tiny();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let s: ParamStore<f64> = init_model(&cfg, Refinement::None, &AftConfig::default(), &FerConfig::default(), &mut r).unwrap();
        let imgs = [image(7, 3)];
        let refs: Vec<&Image> = imgs.iter().collect();
        let direct = embed(&s, &cfg, &refs, 4).unwrap();
        let h = hidden_states(&s, &cfg, &refs, 1).unwrap();
        let frozen = BTreeSet::new();
        let mut tape = Tape::new(&s, &frozen);
        let out = encode(&mut tape, &cfg, Input::Hidden { states: h, after: 1 }, None).unwrap();
        assert_eq!(tape.graph.value(out.embedding), &direct);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::<f32>::new();
        s.insert("head.w", Tensor::full(&[2, 2], 0.5));
        let side = Sidecar { config: serde_json::json!({"seed": 1}), step: 3, rng_streams: BTreeMap::new() };
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &s, &side).unwrap();
        assert!(dir.path().join("m.ckpt.json").exists());
        let (s2, side2) = load_checkpoint::<f32>(&p).unwrap();
        assert_eq!(s2, s);
        assert_eq!(side2, side);
    }
}
