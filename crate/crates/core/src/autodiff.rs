//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as an append-only node list. Because a
//! node can only reference earlier nodes, walking the list backwards is a
//! reverse topological order and each node is visited exactly once. Nodes
//! whose inputs never require a gradient are marked inert, so frozen
//! parameters (and everything computed only from them) never get a gradient
//! buffer.

use std::any::TypeId;
use std::sync::Arc;

use crate::error::{invalid, shape, Error, Result};
use crate::fft;
use crate::tensor::{numel, strides, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTrailing(Var, Var),
    MulTrailing(Var, Var),
    Scale(Var, T),
    MulConst(Var, Arc<Vec<T>>),
    Linear(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    LogSumExp { a: Var, mask: Option<Arc<Vec<bool>>> },
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gather { a: Var, idx: Arc<Vec<usize>> },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    RepeatLeading(Var, usize),
    MeanAxis { a: Var, axis: usize },
    SumAll(Var),
    SumLast(Var),
    ScaleLeading(Var, Var),
    L2Normalize(Var),
    Conv2d { x: Var, w: Var, b: Var, k: usize },
    Dft2(Var),
    Idft2(Var),
    RealPart(Var),
    MaskSpectrum(Var, Var),
    GaussianRing { mu: Var, sigma: Var, radius: Arc<Vec<T>> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddTrailing(..) => "add_trailing",
            Op::MulTrailing(..) => "mul_trailing",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::Linear(..) => "linear",
            Op::Bmm { .. } => "bmm",
            Op::Softmax(..) => "softmax",
            Op::LogSumExp { .. } => "logsumexp",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::Reshape(..) => "reshape",
            Op::RepeatLeading(..) => "repeat_leading",
            Op::MeanAxis { .. } => "mean_axis",
            Op::SumAll(..) => "sum_all",
            Op::SumLast(..) => "sum_last",
            Op::ScaleLeading(..) => "scale_leading",
            Op::L2Normalize(..) => "l2_normalize",
            Op::Conv2d { .. } => "conv2d",
            Op::Dft2(..) => "dft2",
            Op::Idft2(..) => "idft2",
            Op::RealPart(..) => "real_part",
            Op::MaskSpectrum(..) => "mask_spectrum",
            Op::GaussianRing { .. } => "gaussian_ring",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddTrailing(a, b)
            | Op::MulTrailing(a, b)
            | Op::Linear(a, b)
            | Op::ScaleLeading(a, b)
            | Op::MaskSpectrum(a, b)
            | Op::Bmm { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::MulConst(a, _)
            | Op::Softmax(a)
            | Op::LogSumExp { a, .. }
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::Gather { a, .. }
            | Op::Reshape(a)
            | Op::RepeatLeading(a, _)
            | Op::MeanAxis { a, .. }
            | Op::SumAll(a)
            | Op::SumLast(a)
            | Op::L2Normalize(a)
            | Op::Dft2(a)
            | Op::Idft2(a)
            | Op::RealPart(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::GaussianRing { mu, sigma, .. } => vec![*mu, *sigma],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// One recorded operation, for instrumentation.
#[derive(Debug, Clone)]
pub struct OpRecord {
    pub name: &'static str,
    pub input_shapes: Vec<Vec<usize>>,
    pub output_shape: Vec<usize>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`]; `None` for inert nodes.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

// ---------------------------------------------------------------------------
// dense kernels

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    gemm_strided(a, (k, 1), b, (n, 1), c, m, k, n);
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    gemm_strided(a, (1, m), b, (n, 1), c, m, k, n);
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    gemm_strided(a, (k, 1), b, (1, k), c, m, k, n);
}

/// `c += A·B` with `(row, col)` strides for `A` and `B`; `c` is dense row-major.
fn gemm_strided<T: Scalar>(a: &[T], sa: (usize, usize), b: &[T], sb: (usize, usize), c: &mut [T], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too short");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = (sa.0 as isize, sa.1 as isize);
    let (rsb, csb) = (sb.0 as isize, sb.1 as isize);
    let is = |id: TypeId| TypeId::of::<T>() == id;
    // SAFETY: bounds asserted above; each branch runs only when T is that exact type.
    unsafe {
        if is(TypeId::of::<f32>()) {
            matrixmultiply::sgemm(
                m, k, n, 1.0,
                a.as_ptr().cast(), rsa, csa,
                b.as_ptr().cast(), rsb, csb,
                1.0, c.as_mut_ptr().cast(), n as isize, 1,
            )
        } else if is(TypeId::of::<f64>()) {
            matrixmultiply::dgemm(
                m, k, n, 1.0,
                a.as_ptr().cast(), rsa, csa,
                b.as_ptr().cast(), rsb, csb,
                1.0, c.as_mut_ptr().cast(), n as isize, 1,
            )
        } else {
            unreachable!("Scalar is implemented for f32 and f64 only")
        }
    }
}

#[cfg(test)]
fn transpose2<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Column layout `[ci·k·k, h·w]` for a same-padded stride-1 convolution.
fn im2col<T: Scalar>(x: &[T], ci: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![T::zero(); ci * k * k * hw];
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[y * w + xx] = x[c * hw + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], dx: &mut [T], ci: usize, h: usize, w: usize, k: usize) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dx[c * hw + sy as usize * w + sx as usize] += src[y * w + xx];
                    }
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn trailing_match(a: &[usize], b: &[usize], what: &str) -> Result<usize> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(shape(format!("{what}: {b:?} is not a suffix of {a:?}")));
    }
    Ok(numel(b))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Every recorded operation in execution order.
    pub fn records(&self) -> Vec<OpRecord> {
        self.nodes
            .iter()
            .map(|n| OpRecord {
                name: n.op.name(),
                input_shapes: n.op.inputs().iter().map(|v| self.shape(*v).to_vec()).collect(),
                output_shape: n.value.shape().to_vec(),
            })
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn zip_with(&self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta.shape(), tb.shape(), what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s.
    pub fn add_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = trailing_match(self.shape(a), self.shape(b), "add_trailing")?;
        let tb = self.value(b).data().to_vec();
        let ta = self.value(a);
        let mut out = ta.data().to_vec();
        for chunk in out.chunks_mut(n.max(1)) {
            for (o, &y) in chunk.iter_mut().zip(&tb) {
                *o += y;
            }
        }
        let v = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(v, Op::AddTrailing(a, b)))
    }

    /// `a ⊙ b` where `b`'s shape is a suffix of `a`'s.
    pub fn mul_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = trailing_match(self.shape(a), self.shape(b), "mul_trailing")?;
        let tb = self.value(b).data().to_vec();
        let ta = self.value(a);
        let mut out = ta.data().to_vec();
        for chunk in out.chunks_mut(n.max(1)) {
            for (o, &y) in chunk.iter_mut().zip(&tb) {
                *o *= y;
            }
        }
        let v = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(v, Op::MulTrailing(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    /// Elementwise product with a constant of identical shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        let ta = self.value(a);
        same_shape(ta.shape(), c.shape(), "mul_const")?;
        let data = ta.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(v, Op::MulConst(a, Arc::new(c.data().to_vec()))))
    }

    /// `x[..., K] · w[K, N] -> [..., N]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || sx.is_empty() || *sx.last().unwrap() != sw[0] {
            return Err(shape(format!("matmul: {sx:?} x {sw:?}")));
        }
        let (k, n) = (sw[0], sw[1]);
        let m = numel(&sx) / k.max(1);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(x).data(), self.value(w).data(), &mut out, m, k, n);
        let mut so = sx.clone();
        *so.last_mut().unwrap() = n;
        let v = Tensor::new(so, out)?;
        Ok(self.push(v, Op::Linear(x, w)))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_trailing(y, b)
    }

    /// Batched product `[B,M,K]·[B,K,N]`, or `[B,M,K]·[B,N,K]ᵀ` with `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape(format!("bmm: {sa:?} x {sb:?}")));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(shape(format!("bmm inner dims: {sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let mut out = vec![T::zero(); bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            let ai = &da[i * m * k..(i + 1) * m * k];
            let bi = &db[i * k * n..(i + 1) * k * n];
            let oi = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(ai, bi, oi, m, k, n);
            } else {
                gemm_nn(ai, bi, oi, m, k, n);
            }
        }
        let v = Tensor::new(vec![bs, m, n], out)?;
        Ok(self.push(v, Op::Bmm { a, b, trans_b }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = *ta.shape().last().ok_or_else(|| shape("softmax of a scalar"))?;
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let v = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(v, Op::Softmax(a)))
    }

    /// `log Σ exp` over the last axis, optionally restricted to entries where
    /// `mask` is true. Every row must keep at least one entry.
    pub fn logsumexp(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let ta = self.value(a);
        let shp = ta.shape().to_vec();
        let n = *shp.last().ok_or_else(|| shape("logsumexp of a scalar"))?;
        if let Some(m) = &mask {
            same_shape(&[m.len()], &[ta.len()], "logsumexp mask")?;
        }
        let rows = ta.len() / n.max(1);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &ta.data()[r * n..(r + 1) * n];
            let keep = |j: usize| mask.as_ref().map_or(true, |m| m[r * n + j]);
            let mx = (0..n).filter(|&j| keep(j)).map(|j| row[j]).fold(T::neg_infinity(), T::max);
            if mx == T::neg_infinity() {
                return Err(invalid("logsumexp row with no admissible entries"));
            }
            let s: T = (0..n).filter(|&j| keep(j)).map(|j| (row[j] - mx).exp()).sum();
            out.push(mx + s.ln());
        }
        let v = Tensor::new(shp[..shp.len() - 1].to_vec(), out)?;
        Ok(self.push(v, Op::LogSumExp { a, mask: mask.map(Arc::new) }))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        self.push(v, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (T::c(GELU_C), T::c(GELU_A));
        let half = T::c(0.5);
        let v = self.value(a).map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let c = *tx.shape().last().ok_or_else(|| shape("layer_norm of a scalar"))?;
        same_shape(self.shape(gamma), &[c], "layer_norm gamma")?;
        same_shape(self.shape(beta), &[c], "layer_norm beta")?;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = tx.len() / c;
        let inv_c = T::one() / T::c(c as f64);
        let mut xhat = vec![T::zero(); tx.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * c..(r + 1) * c];
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) * inv_c;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) * inv_c;
            let rs = T::one() / (var + T::c(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + b[j];
            }
        }
        let v = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Flat gather: `out[i] = a[idx[i]]`, reshaped to `out_shape`.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>, out_shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if numel(out_shape) != idx.len() {
            return Err(shape(format!("gather: {} indices for shape {out_shape:?}", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= ta.len()) {
            return Err(shape(format!("gather index {bad} out of range {}", ta.len())));
        }
        let data = idx.iter().map(|&i| ta.data()[i]).collect();
        let v = Tensor::new(out_shape.to_vec(), data)?;
        Ok(self.push(v, Op::Gather { a, idx: Arc::new(idx) }))
    }

    /// General axis permutation.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shp = self.shape(a).to_vec();
        if axes.len() != shp.len() {
            return Err(shape(format!("permute {axes:?} on rank {}", shp.len())));
        }
        let mut seen = vec![false; axes.len()];
        for &ax in axes {
            if ax >= axes.len() || seen[ax] {
                return Err(invalid(format!("bad permutation {axes:?}")));
            }
            seen[ax] = true;
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shp[ax]).collect();
        let in_strides = strides(&shp);
        let mapped: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
        let total = numel(&out_shape);
        let mut idx = Vec::with_capacity(total);
        let mut counter = vec![0usize; out_shape.len()];
        for _ in 0..total {
            idx.push(counter.iter().zip(&mapped).map(|(c, s)| c * s).sum());
            for d in (0..counter.len()).rev() {
                counter[d] += 1;
                if counter[d] < out_shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        self.gather(a, idx, &out_shape)
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shp = self.shape(a).to_vec();
        if axis >= shp.len() || start + len > shp[axis] {
            return Err(shape(format!("slice axis {axis} [{start}, +{len}) of {shp:?}")));
        }
        let outer: usize = shp[..axis].iter().product();
        let inner: usize = shp[axis + 1..].iter().product();
        let mut idx = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for j in start..start + len {
                let base = (o * shp[axis] + j) * inner;
                idx.extend(base..base + inner);
            }
        }
        let mut out_shape = shp;
        out_shape[axis] = len;
        self.gather(a, idx, &out_shape)
    }

    /// Select index `i` of the last axis, dropping it.
    pub fn select_last(&mut self, a: Var, i: usize) -> Result<Var> {
        let shp = self.shape(a).to_vec();
        let n = *shp.last().ok_or_else(|| shape("select_last of a scalar"))?;
        if i >= n {
            return Err(shape(format!("select_last index {i} >= {n}")));
        }
        let rows = numel(&shp) / n;
        let idx = (0..rows).map(|r| r * n + i).collect();
        self.gather(a, idx, &shp[..shp.len() - 1])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| invalid("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(shape(format!("concat axis {axis} on {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(shape(format!("concat: {s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let v = Tensor::new(out_shape, out)?;
        Ok(self.push(v, Op::Concat { parts: parts.to_vec(), axis }))
    }

    pub fn reshape(&mut self, a: Var, new_shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(new_shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Stack `n` copies of `a` along a new leading axis.
    pub fn repeat_leading(&mut self, a: Var, n: usize) -> Var {
        let ta = self.value(a);
        let mut shp = vec![n];
        shp.extend_from_slice(ta.shape());
        let mut data = Vec::with_capacity(n * ta.len());
        for _ in 0..n {
            data.extend_from_slice(ta.data());
        }
        let v = Tensor::new(shp, data).expect("repeat keeps element count");
        self.push(v, Op::RepeatLeading(a, n))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shp = self.shape(a).to_vec();
        if axis >= shp.len() || shp[axis] == 0 {
            return Err(shape(format!("mean over axis {axis} of {shp:?}")));
        }
        let outer: usize = shp[..axis].iter().product();
        let inner: usize = shp[axis + 1..].iter().product();
        let len = shp[axis];
        let inv = T::one() / T::c(len as f64);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        for v in out.iter_mut() {
            *v *= inv;
        }
        let mut out_shape = shp;
        out_shape.remove(axis);
        let v = Tensor::new(out_shape, out)?;
        Ok(self.push(v, Op::MeanAxis { a, axis }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let shp = self.shape(a).to_vec();
        let n = *shp.last().ok_or_else(|| shape("sum_last of a scalar"))?;
        let out = self
            .value(a)
            .data()
            .chunks(n.max(1))
            .map(|row| row.iter().fold(T::zero(), |s, &v| s + v))
            .collect();
        let v = Tensor::new(shp[..shp.len() - 1].to_vec(), out)?;
        Ok(self.push(v, Op::SumLast(a)))
    }

    /// Scale each leading-axis block `a[b, ...]` by `s[b]`.
    pub fn scale_leading(&mut self, a: Var, s: Var) -> Result<Var> {
        let shp = self.shape(a).to_vec();
        if shp.is_empty() || self.shape(s) != [shp[0]] {
            return Err(shape(format!("scale_leading: {shp:?} by {:?}", self.shape(s))));
        }
        let block = numel(&shp[1..]);
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for (chunk, &k) in out.chunks_mut(block.max(1)).zip(&sv) {
            for v in chunk.iter_mut() {
                *v *= k;
            }
        }
        let v = Tensor::new(shp, out)?;
        Ok(self.push(v, Op::ScaleLeading(a, s)))
    }

    /// Unit L2 norm along the last axis.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = *ta.shape().last().ok_or_else(|| shape("l2_normalize of a scalar"))?;
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let norm = row.iter().fold(T::zero(), |s, &v| s + v * v).sqrt().max(T::c(1e-12));
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let v = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(v, Op::L2Normalize(a)))
    }

    /// Same-padded stride-1 convolution: `x[B,Ci,H,W]`, `w[Co,Ci,k,k]`, `b[Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(shape(format!("conv2d: input {sx:?}, kernel {sw:?}")));
        }
        same_shape(self.shape(b), &[sw[0]], "conv2d bias")?;
        let (bs, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, k) = (sw[0], sw[2]);
        let hw = h * wd;
        let ck = ci * k * k;
        let mut out = vec![T::zero(); bs * co * hw];
        let (xd, wdta, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        for n in 0..bs {
            let cols = im2col(&xd[n * ci * hw..(n + 1) * ci * hw], ci, h, wd, k);
            let o = &mut out[n * co * hw..(n + 1) * co * hw];
            for c in 0..co {
                o[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v = bd[c]);
            }
            gemm_nn(wdta, &cols, o, co, ck, hw);
        }
        let v = Tensor::new(vec![bs, co, h, wd], out)?;
        Ok(self.push(v, Op::Conv2d { x, w, b, k }))
    }

    /// Forward DFT of real grids `[..., H, W] -> [..., H, W, 2]`.
    pub fn dft2(&mut self, a: Var) -> Result<Var> {
        let v = fft::dft2(self.value(a))?;
        Ok(self.push(v, Op::Dft2(a)))
    }

    /// Inverse DFT of complex grids `[..., H, W, 2]`.
    pub fn idft2(&mut self, a: Var) -> Result<Var> {
        let v = fft::idft2(self.value(a))?;
        Ok(self.push(v, Op::Idft2(a)))
    }

    pub fn real_part(&mut self, a: Var) -> Result<Var> {
        let v = fft::real_part(self.value(a))?;
        Ok(self.push(v, Op::RealPart(a)))
    }

    /// Multiply complex grids `z[B, ..., H, W, 2]` by real per-sample masks `m[B, H, W]`.
    pub fn mask_spectrum(&mut self, z: Var, m: Var) -> Result<Var> {
        let (sz, sm) = (self.shape(z).to_vec(), self.shape(m).to_vec());
        if sz.len() < 4 || sm.len() != 3 || sz[0] != sm[0] || sz[sz.len() - 3..] != [sm[1], sm[2], 2] {
            return Err(shape(format!("mask_spectrum: spectrum {sz:?}, mask {sm:?}")));
        }
        let plane = sm[1] * sm[2];
        let per_sample = numel(&sz) / sz[0];
        let mut out = self.value(z).data().to_vec();
        let md = self.value(m).data();
        for (n, sample) in out.chunks_mut(per_sample).enumerate() {
            let mask = &md[n * plane..(n + 1) * plane];
            for grid in sample.chunks_mut(plane * 2) {
                for (p, &mv) in mask.iter().enumerate() {
                    grid[2 * p] *= mv;
                    grid[2 * p + 1] *= mv;
                }
            }
        }
        let v = Tensor::new(sz, out)?;
        Ok(self.push(v, Op::MaskSpectrum(z, m)))
    }

    /// Gaussian rings `exp(-(d-μ)²/(2σ²))` over a fixed radius grid `d[H, W]`,
    /// one per entry of `mu`/`sigma` (both `[M]`); output `[M, H, W]`.
    pub fn gaussian_ring(&mut self, mu: Var, sigma: Var, radius: &Tensor<T>) -> Result<Var> {
        let (sm, ss) = (self.shape(mu).to_vec(), self.shape(sigma).to_vec());
        if sm.len() != 1 || sm != ss || radius.rank() != 2 {
            return Err(shape(format!("gaussian_ring: mu {sm:?}, sigma {ss:?}, radius {:?}", radius.shape())));
        }
        let (mv, sv) = (self.value(mu).data(), self.value(sigma).data());
        if sv.iter().any(|&s| s <= T::zero()) {
            return Err(invalid("gaussian_ring requires sigma > 0"));
        }
        let d = radius.data();
        let mut out = Vec::with_capacity(sm[0] * d.len());
        let two = T::c(2.0);
        for (&m, &s) in mv.iter().zip(sv) {
            out.extend(d.iter().map(|&r| (-(r - m) * (r - m) / (two * s * s)).exp()));
        }
        let mut shp = vec![sm[0]];
        shp.extend_from_slice(radius.shape());
        let v = Tensor::new(shp, out)?;
        Ok(self.push(v, Op::GaussianRing { mu, sigma, radius: Arc::new(d.to_vec()) }))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape(format!("backward needs a scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        let mut acc = |v: Var, delta: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let like = |v: Var, data: Vec<T>| Tensor::new(self.shape(v).to_vec(), data).expect("grad shape");
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs_grad(*a) {
                    acc(*a, like(*a, gd.iter().zip(tb).map(|(&x, &y)| x * y).collect()));
                }
                if self.needs_grad(*b) {
                    acc(*b, like(*b, gd.iter().zip(ta).map(|(&x, &y)| x * y).collect()));
                }
            }
            Op::AddTrailing(a, b) => {
                acc(*a, g.clone());
                if self.needs_grad(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![T::zero(); n];
                    for chunk in gd.chunks(n.max(1)) {
                        for (d, &v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    acc(*b, like(*b, db));
                }
            }
            Op::MulTrailing(a, b) => {
                let tb = self.value(*b).data();
                let n = tb.len();
                if self.needs_grad(*a) {
                    let mut da = gd.to_vec();
                    for chunk in da.chunks_mut(n.max(1)) {
                        for (d, &y) in chunk.iter_mut().zip(tb) {
                            *d *= y;
                        }
                    }
                    acc(*a, like(*a, da));
                }
                if self.needs_grad(*b) {
                    let ta = self.value(*a).data();
                    let mut db = vec![T::zero(); n];
                    for (gc, ac) in gd.chunks(n.max(1)).zip(ta.chunks(n.max(1))) {
                        for ((d, &gv), &av) in db.iter_mut().zip(gc).zip(ac) {
                            *d += gv * av;
                        }
                    }
                    acc(*b, like(*b, db));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| v * *s)),
            Op::MulConst(a, c) => acc(*a, like(*a, gd.iter().zip(c.iter()).map(|(&x, &y)| x * y).collect())),
            Op::Linear(x, w) => {
                let sw = self.shape(*w);
                let (k, n) = (sw[0], sw[1]);
                let m = gd.len() / n.max(1);
                if self.needs_grad(*x) {
                    let mut dx = vec![T::zero(); m * k];
                    gemm_nt(gd, self.value(*w).data(), &mut dx, m, n, k);
                    acc(*x, like(*x, dx));
                }
                if self.needs_grad(*w) {
                    let mut dw = vec![T::zero(); k * n];
                    gemm_tn(self.value(*x).data(), gd, &mut dw, k, m, n);
                    acc(*w, like(*w, dw));
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs_grad(*a) {
                    let mut da = vec![T::zero(); bs * m * k];
                    for i in 0..bs {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let bi = &tb[i * k * n..(i + 1) * k * n];
                        let di = &mut da[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            gemm_nn(gi, bi, di, m, n, k);
                        } else {
                            gemm_nt(gi, bi, di, m, n, k);
                        }
                    }
                    acc(*a, like(*a, da));
                }
                if self.needs_grad(*b) {
                    let mut db = vec![T::zero(); bs * k * n];
                    for i in 0..bs {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &ta[i * m * k..(i + 1) * m * k];
                        let di = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm_tn(gi, ai, di, n, m, k);
                        } else {
                            gemm_tn(ai, gi, di, k, m, n);
                        }
                    }
                    acc(*b, like(*b, db));
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut da = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(gd.chunks(n)).zip(da.chunks_mut(n)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&p, &q)| s + p * q);
                    for ((d, &p), &q) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = p * (q - dot);
                    }
                }
                acc(*a, like(*a, da));
            }
            Op::LogSumExp { a, mask } => {
                let ta = self.value(*a).data();
                let n = *self.shape(*a).last().unwrap();
                let lse = node.value.data();
                let mut da = vec![T::zero(); ta.len()];
                for r in 0..lse.len() {
                    for j in 0..n {
                        let i = r * n + j;
                        if mask.as_ref().map_or(true, |m| m[i]) {
                            da[i] = gd[r] * (ta[i] - lse[r]).exp();
                        }
                    }
                }
                acc(*a, like(*a, da));
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, like(*a, gd.iter().zip(y).map(|(&q, &p)| q * p).collect()));
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                acc(*a, like(*a, gd.iter().zip(x).map(|(&q, &p)| q / p).collect()));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, like(*a, gd.iter().zip(y).map(|(&q, &p)| q * (T::one() - p * p)).collect()));
            }
            Op::Gelu(a) => {
                let (c, k) = (T::c(GELU_C), T::c(GELU_A));
                let (half, three) = (T::c(0.5), T::c(3.0));
                let x = self.value(*a).data();
                let da = gd
                    .iter()
                    .zip(x)
                    .map(|(&q, &v)| {
                        let t = (c * (v + k * v * v * v)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * v * v);
                        q * (half * (T::one() + t) + half * v * dt)
                    })
                    .collect();
                acc(*a, like(*a, da));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = self.shape(*gamma)[0];
                let gam = self.value(*gamma).data();
                if self.needs_grad(*gamma) || self.needs_grad(*beta) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for (gr, xr) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * xr[j];
                            db[j] += gr[j];
                        }
                    }
                    acc(*gamma, like(*gamma, dg));
                    acc(*beta, like(*beta, db));
                }
                if self.needs_grad(*x) {
                    let inv_c = T::one() / T::c(c as f64);
                    let mut dx = vec![T::zero(); gd.len()];
                    for r in 0..rstd.len() {
                        let gr = &gd[r * c..(r + 1) * c];
                        let xr = &xhat[r * c..(r + 1) * c];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let dxh = gr[j] * gam[j];
                            m1 += dxh;
                            m2 += dxh * xr[j];
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for j in 0..c {
                            dx[r * c + j] = rstd[r] * (gr[j] * gam[j] - m1 - xr[j] * m2);
                        }
                    }
                    acc(*x, like(*x, dx));
                }
            }
            Op::Gather { a, idx } => {
                let mut da = vec![T::zero(); self.value(*a).len()];
                for (&i, &v) in idx.iter().zip(gd) {
                    da[i] += v;
                }
                acc(*a, like(*a, da));
            }
            Op::Concat { parts, axis } => {
                let shp = node.value.shape();
                let outer: usize = shp[..*axis].iter().product();
                let inner: usize = shp[axis + 1..].iter().product();
                let total = shp[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if self.needs_grad(p) {
                        let mut dp = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            dp.extend_from_slice(&gd[o * total + offset..o * total + offset + len]);
                        }
                        acc(p, like(p, dp));
                    }
                    offset += len;
                }
            }
            Op::Reshape(a) => acc(*a, like(*a, gd.to_vec())),
            Op::RepeatLeading(a, n) => {
                let len = self.value(*a).len();
                let mut da = vec![T::zero(); len];
                for chunk in gd.chunks(len.max(1)).take(*n) {
                    for (d, &v) in da.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                acc(*a, like(*a, da));
            }
            Op::MeanAxis { a, axis } => {
                let shp = self.shape(*a);
                let outer: usize = shp[..*axis].iter().product();
                let inner: usize = shp[axis + 1..].iter().product();
                let len = shp[*axis];
                let inv = T::one() / T::c(len as f64);
                let mut da = vec![T::zero(); numel(shp)];
                for o in 0..outer {
                    for j in 0..len {
                        let dst = &mut da[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for (d, &v) in dst.iter_mut().zip(&gd[o * inner..(o + 1) * inner]) {
                            *d = v * inv;
                        }
                    }
                }
                acc(*a, like(*a, da));
            }
            Op::SumAll(a) => acc(*a, Tensor::full(self.shape(*a), gd[0])),
            Op::SumLast(a) => {
                let n = *self.shape(*a).last().unwrap();
                let da = gd.iter().flat_map(|&v| std::iter::repeat(v).take(n)).collect();
                acc(*a, like(*a, da));
            }
            Op::ScaleLeading(a, s) => {
                let sv = self.value(*s).data();
                let ta = self.value(*a).data();
                let block = ta.len() / sv.len().max(1);
                if self.needs_grad(*a) {
                    let mut da = gd.to_vec();
                    for (chunk, &k) in da.chunks_mut(block.max(1)).zip(sv) {
                        chunk.iter_mut().for_each(|v| *v *= k);
                    }
                    acc(*a, like(*a, da));
                }
                if self.needs_grad(*s) {
                    let ds = gd
                        .chunks(block.max(1))
                        .zip(ta.chunks(block.max(1)))
                        .map(|(gc, ac)| gc.iter().zip(ac).fold(T::zero(), |acc, (&p, &q)| acc + p * q))
                        .collect();
                    acc(*s, like(*s, ds));
                }
            }
            Op::L2Normalize(a) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut da = vec![T::zero(); x.len()];
                for r in 0..x.len() / n {
                    let xr = &x[r * n..(r + 1) * n];
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &gd[r * n..(r + 1) * n];
                    let norm = xr.iter().fold(T::zero(), |s, &v| s + v * v).sqrt().max(T::c(1e-12));
                    let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&p, &q)| s + p * q);
                    for j in 0..n {
                        da[r * n + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                acc(*a, like(*a, da));
            }
            Op::Conv2d { x, w, b, k } => {
                let sx = self.shape(*x);
                let (bs, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let co = self.shape(*w)[0];
                let hw = h * wd;
                let ck = ci * k * k;
                let xd = self.value(*x).data();
                let wdta = self.value(*w).data();
                if self.needs_grad(*b) {
                    let mut db = vec![T::zero(); co];
                    for n in 0..bs {
                        for c in 0..co {
                            let off = (n * co + c) * hw;
                            db[c] += gd[off..off + hw].iter().fold(T::zero(), |s, &v| s + v);
                        }
                    }
                    acc(*b, like(*b, db));
                }
                let need_w = self.needs_grad(*w);
                let need_x = self.needs_grad(*x);
                let mut dw = vec![T::zero(); if need_w { co * ck } else { 0 }];
                let mut dx = vec![T::zero(); if need_x { xd.len() } else { 0 }];
                for n in 0..bs {
                    let go = &gd[n * co * hw..(n + 1) * co * hw];
                    if need_w {
                        let cols = im2col(&xd[n * ci * hw..(n + 1) * ci * hw], ci, h, wd, *k);
                        gemm_nt(go, &cols, &mut dw, co, hw, ck);
                    }
                    if need_x {
                        let mut dcols = vec![T::zero(); ck * hw];
                        gemm_tn(wdta, go, &mut dcols, ck, co, hw);
                        col2im(&dcols, &mut dx[n * ci * hw..(n + 1) * ci * hw], ci, h, wd, *k);
                    }
                }
                if need_w {
                    acc(*w, like(*w, dw));
                }
                if need_x {
                    acc(*x, like(*x, dx));
                }
            }
            Op::Dft2(a) => {
                // adjoint of the unnormalized transform: Re(conj(F)·g) = H·W·Re(F⁻¹ g)
                let shp = self.shape(*a);
                let plane = shp[shp.len() - 2] * shp[shp.len() - 1];
                let back = fft::idft2(g)?;
                let scale = T::c(plane as f64);
                let da = back.data().iter().step_by(2).map(|&v| v * scale).collect();
                acc(*a, like(*a, da));
            }
            Op::Idft2(a) => {
                let shp = self.shape(*a);
                let plane = shp[shp.len() - 3] * shp[shp.len() - 2];
                let fwd = fft::dft2_complex(g)?;
                let scale = T::one() / T::c(plane as f64);
                acc(*a, fwd.map(|v| v * scale));
            }
            Op::RealPart(a) => {
                let da = gd.iter().flat_map(|&v| [v, T::zero()]).collect();
                acc(*a, like(*a, da));
            }
            Op::MaskSpectrum(z, m) => {
                let sm = self.shape(*m);
                let plane = sm[1] * sm[2];
                let zd = self.value(*z).data();
                let md = self.value(*m).data();
                let per_sample = zd.len() / sm[0];
                if self.needs_grad(*z) {
                    let mut dz = gd.to_vec();
                    for (n, sample) in dz.chunks_mut(per_sample).enumerate() {
                        let mask = &md[n * plane..(n + 1) * plane];
                        for grid in sample.chunks_mut(plane * 2) {
                            for (p, &mv) in mask.iter().enumerate() {
                                grid[2 * p] *= mv;
                                grid[2 * p + 1] *= mv;
                            }
                        }
                    }
                    acc(*z, like(*z, dz));
                }
                if self.needs_grad(*m) {
                    let mut dm = vec![T::zero(); md.len()];
                    for n in 0..sm[0] {
                        let gs = &gd[n * per_sample..(n + 1) * per_sample];
                        let zs = &zd[n * per_sample..(n + 1) * per_sample];
                        for (gg, zg) in gs.chunks(plane * 2).zip(zs.chunks(plane * 2)) {
                            for p in 0..plane {
                                dm[n * plane + p] += gg[2 * p] * zg[2 * p] + gg[2 * p + 1] * zg[2 * p + 1];
                            }
                        }
                    }
                    acc(*m, like(*m, dm));
                }
            }
            Op::GaussianRing { mu, sigma, radius } => {
                let (mv, sv) = (self.value(*mu).data(), self.value(*sigma).data());
                let y = node.value.data();
                let plane = radius.len();
                let mut dmu = vec![T::zero(); mv.len()];
                let mut dsig = vec![T::zero(); sv.len()];
                for i in 0..mv.len() {
                    let (m, s) = (mv[i], sv[i]);
                    let s2 = s * s;
                    for (p, &r) in radius.iter().enumerate() {
                        let gy = gd[i * plane + p] * y[i * plane + p];
                        let dlt = r - m;
                        dmu[i] += gy * dlt / s2;
                        dsig[i] += gy * dlt * dlt / (s2 * s);
                    }
                }
                acc(*mu, like(*mu, dmu));
                acc(*sigma, like(*sigma, dsig));
            }
        }
        Ok(())
    }
}

/// Values of a scalar loss must be finite before differentiating.
pub fn ensure_finite_scalar<T: Scalar>(g: &Graph<T>, v: Var, what: &str) -> Result<T> {
    let x = g.value(v).item();
    if !x.is_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm_nn(&a, &b, &mut c, 2, 3, 4);
        let at = transpose2(&a, 2, 3);
        let mut c2 = vec![0.0; 8];
        gemm_tn(&at, &b, &mut c2, 2, 3, 4);
        let bt = transpose2(&b, 3, 4);
        let mut c3 = vec![0.0; 8];
        gemm_nt(&a, &bt, &mut c3, 2, 3, 4);
        assert_eq!(c, c2);
        assert_eq!(c, c3);
        assert_eq!(c[0], 0.0 * 0.0 + 1.0 * 2.0 + 2.0 * 4.0);
    }

    #[test]
    fn gemm_matches_triple_loop() {
        let (m, k, n) = (7, 13, 5);
        let a: Vec<f64> = (0..m * k).map(|v| ((v * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let b: Vec<f64> = (0..k * n).map(|v| ((v * 17 % 7) as f64 - 3.0) / 2.0).collect();
        let mut c = vec![1.0; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut want = 1.0;
                for p in 0..k {
                    want += a[i * k + p] * b[p * n + j];
                }
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        let af: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        let bf: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        let mut cf = vec![1.0f32; m * n];
        gemm_nn(&af, &bf, &mut cf, m, k, n);
        for (x, y) in cf.iter().zip(&c) {
            assert!((f64::from(*x) - y).abs() < 1e-4);
        }
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let p = g.mul(w, c).unwrap();
        let s = g.sum_all(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1], &[3.0]));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let s = g.sum_all(z);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn permute_transposes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.permute(x, &[1, 0]).unwrap();
        assert_eq!(g.shape(y), &[3, 2]);
        assert_eq!(g.value(y).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(t(&[1, 1, 3, 3], &k));
        let b = g.constant(t(&[1], &[0.5]));
        let y = g.conv2d(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, 2.5, 3.5, 4.5]);
    }

    #[test]
    fn shape_errors_surface() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, b).is_err());
        let s = g.sum_all(a);
        let v = g.add(a, a).unwrap();
        assert!(g.backward(v).is_err());
        assert!(g.backward(s).is_ok());
    }

    #[test]
    fn masked_logsumexp_excludes_entries() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[1, 3], &[0.0, 100.0, 0.0]));
        let l = g.logsumexp(a, Some(vec![true, false, true])).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);
        assert!(g.logsumexp(a, Some(vec![false; 3])).is_err());
    }
}
