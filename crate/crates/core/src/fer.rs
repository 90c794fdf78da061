//! Frequency-aware expert refinement.
//!
//! Expert `i` cross-attends from the patch features to spectral token `i`.
//! A router scores the whole token set, the expert outputs are mixed by the
//! router weights, and a final attention takes queries/keys from a
//! self-attended copy of the features and values from the mixture.
//!
//! Key projections carry no bias: a bias on keys shifts every logit in a
//! softmax row by the same amount and never changes the output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, shape, Result};
use crate::params::{ParamStore, Tape};
use crate::rng::trunc_normal;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FerConfig {
    pub router_hidden: usize,
}

impl Default for FerConfig {
    fn default() -> Self {
        FerConfig { router_hidden: 64 }
    }
}

fn project<T: Scalar>(tape: &mut Tape<T>, x: Var, name: &str, bias: bool) -> Result<Var> {
    let w = tape.p(&format!("{name}.w"))?;
    if bias {
        let b = tape.p(&format!("{name}.b"))?;
        tape.graph.linear(x, w, b)
    } else {
        tape.graph.matmul(x, w)
    }
}

/// `softmax(q·kᵀ/√d)·v` for `q[B,P,d]`, `k[B,P',d]`, `v[B,P',C]`.
pub fn attend<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = *g.shape(q).last().ok_or_else(|| shape("attention on a scalar"))?;
    let s = g.bmm(q, k, true)?;
    let s = g.scale(s, T::c(1.0 / (d as f64).sqrt()));
    let a = g.softmax(s)?;
    g.bmm(a, v, false)
}

/// `[B,C,H,W]` grid to `[B,H·W,C]` rows.
pub fn grid_to_rows<T: Scalar>(g: &mut Graph<T>, t: Var) -> Result<Var> {
    let s = g.shape(t).to_vec();
    if s.len() != 4 {
        return Err(shape(format!("expected [B,C,H,W], got {s:?}")));
    }
    let p = g.permute(t, &[0, 2, 3, 1])?;
    g.reshape(p, &[s[0], s[2] * s[3], s[1]])
}

/// Cross-attention of features `r[B,P,C]` onto token rows `t[B,P',C]`.
pub fn expert_refine<T: Scalar>(tape: &mut Tape<T>, prefix: &str, i: usize, r: Var, t: Var) -> Result<Var> {
    let base = format!("{prefix}expert{i}");
    let q = project(tape, r, &format!("{base}.q"), true)?;
    let k = project(tape, t, &format!("{base}.k"), false)?;
    let v = project(tape, t, &format!("{base}.v"), true)?;
    attend(&mut tape.graph, q, k, v)
}

/// Routing weights `[B,N]` from spatially mean-pooled token rows `[B,P',C]`.
pub fn route<T: Scalar>(tape: &mut Tape<T>, prefix: &str, token_rows: &[Var]) -> Result<Var> {
    if token_rows.is_empty() {
        return Err(invalid("routing over zero tokens"));
    }
    let pooled: Vec<Var> = token_rows
        .iter()
        .map(|&t| tape.graph.mean_axis(t, 1))
        .collect::<Result<_>>()?;
    let x = tape.graph.concat(&pooled, 1)?;
    let h = project(tape, x, &format!("{prefix}router.fc1"), true)?;
    let h = tape.graph.gelu(h);
    let logits = project(tape, h, &format!("{prefix}router.fc2"), true)?;
    tape.graph.softmax(logits)
}

/// `Σ_i w[:, i]·refined_i`.
pub fn aggregate<T: Scalar>(g: &mut Graph<T>, refined: &[Var], weights: Var) -> Result<Var> {
    if refined.is_empty() {
        return Err(invalid("aggregating zero expert outputs"));
    }
    let ws = g.shape(weights).to_vec();
    if ws.len() != 2 || ws[1] != refined.len() {
        return Err(shape(format!("weights {ws:?} for {} experts", refined.len())));
    }
    let mut acc: Option<Var> = None;
    for (i, &r) in refined.iter().enumerate() {
        let wi = g.select_last(weights, i)?;
        let term = g.scale_leading(r, wi)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.unwrap())
}

/// Single-head self-attention over `r[B,P,C]`.
pub fn global_branch<T: Scalar>(tape: &mut Tape<T>, prefix: &str, r: Var) -> Result<Var> {
    let q = project(tape, r, &format!("{prefix}global.sa.q"), true)?;
    let k = project(tape, r, &format!("{prefix}global.sa.k"), false)?;
    let v = project(tape, r, &format!("{prefix}global.sa.v"), true)?;
    attend(&mut tape.graph, q, k, v)
}

/// Queries/keys from the global branch output, values from the mixture.
pub fn global_modulate<T: Scalar>(tape: &mut Tape<T>, prefix: &str, r_g: Var, r_a: Var) -> Result<Var> {
    if tape.graph.shape(r_g) != tape.graph.shape(r_a) {
        return Err(shape("global modulation needs matching shapes"));
    }
    let q = project(tape, r_g, &format!("{prefix}global.out.q"), true)?;
    let k = project(tape, r_g, &format!("{prefix}global.out.k"), false)?;
    let v = project(tape, r_a, &format!("{prefix}global.out.v"), true)?;
    attend(&mut tape.graph, q, k, v)
}

pub struct FerForward {
    /// `[B,P,C]`
    pub output: Var,
    /// `[B,N]`
    pub weights: Var,
}

/// Full refinement of patch features `r[B,P,C]` with tokens `[B,C,H,W]`.
pub fn forward<T: Scalar>(tape: &mut Tape<T>, prefix: &str, r: Var, tokens: &[Var]) -> Result<FerForward> {
    let rows: Vec<Var> = tokens
        .iter()
        .map(|&t| grid_to_rows(&mut tape.graph, t))
        .collect::<Result<_>>()?;
    let mut refined = Vec::with_capacity(rows.len());
    for (i, &t) in rows.iter().enumerate() {
        refined.push(expert_refine(tape, prefix, i + 1, r, t)?);
    }
    let weights = route(tape, prefix, &rows)?;
    let r_a = aggregate(&mut tape.graph, &refined, weights)?;
    let r_g = global_branch(tape, prefix, r)?;
    let output = global_modulate(tape, prefix, r_g, r_a)?;
    Ok(FerForward { output, weights })
}

fn insert_proj<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) {
    store.insert(format!("{name}.w"), trunc_normal(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng));
    if bias {
        store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }
}

pub fn init_params<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize, experts: usize, cfg: &FerConfig, rng: &mut impl Rng) {
    let c = channels;
    for i in 1..=experts {
        for (p, bias) in [("q", true), ("k", false), ("v", true)] {
            insert_proj(store, &format!("{prefix}expert{i}.{p}"), c, c, bias, rng);
        }
    }
    insert_proj(store, &format!("{prefix}router.fc1"), experts * c, cfg.router_hidden, true, rng);
    insert_proj(store, &format!("{prefix}router.fc2"), cfg.router_hidden, experts, true, rng);
    for branch in ["sa", "out"] {
        for (p, bias) in [("q", true), ("k", false), ("v", true)] {
            insert_proj(store, &format!("{prefix}global.{branch}.{p}"), c, c, bias, rng);
        }
    }
}
