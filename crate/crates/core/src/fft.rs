//! 2-D discrete Fourier transform.
//!
//! Forward transforms are unnormalized; the inverse carries the `1/(H·W)`
//! factor. Complex grids are stored interleaved with a trailing axis of
//! length 2 (`[..., H, W, 2]`). Power-of-two lengths use an iterative
//! radix-2 kernel; any other length falls back to a direct O(n²) sum.

use crate::error::{invalid, shape, Error, Result};
use crate::tensor::{Scalar, Tensor};

struct Plan<T> {
    n: usize,
    cos: Vec<T>,
    sin: Vec<T>,
    rev: Vec<usize>,
}

impl<T: Scalar> Plan<T> {
    fn new(n: usize) -> Self {
        let tau = 2.0 * std::f64::consts::PI / n as f64;
        let cos = (0..n).map(|k| T::c((tau * k as f64).cos())).collect();
        let sin = (0..n).map(|k| T::c((tau * k as f64).sin())).collect();
        let rev = if n.is_power_of_two() {
            let bits = n.trailing_zeros();
            (0..n)
                .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
                .collect()
        } else {
            Vec::new()
        };
        Plan { n, cos, sin, rev }
    }

    /// In-place transform of one line. `sign = -1` forward, `+1` inverse (unscaled).
    fn run(&self, re: &mut [T], im: &mut [T], inverse: bool, scratch: &mut Vec<T>) {
        let n = self.n;
        if n == 1 {
            return;
        }
        let s = if inverse { T::one() } else { -T::one() };
        if self.rev.is_empty() {
            scratch.clear();
            scratch.resize(2 * n, T::zero());
            for k in 0..n {
                let mut acc_re = T::zero();
                let mut acc_im = T::zero();
                for j in 0..n {
                    let idx = (j * k) % n;
                    let c = self.cos[idx];
                    let si = s * self.sin[idx];
                    acc_re += re[j] * c - im[j] * si;
                    acc_im += re[j] * si + im[j] * c;
                }
                scratch[k] = acc_re;
                scratch[n + k] = acc_im;
            }
            re.copy_from_slice(&scratch[..n]);
            im.copy_from_slice(&scratch[n..]);
            return;
        }
        for i in 0..n {
            let j = self.rev[i];
            if i < j {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let c = self.cos[k * step];
                    let si = s * self.sin[k * step];
                    let a = start + k;
                    let b = a + half;
                    let tr = re[b] * c - im[b] * si;
                    let ti = re[b] * si + im[b] * c;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len <<= 1;
        }
    }
}

/// Transform `count` planar `h×w` grids in place.
fn transform_planes<T: Scalar>(re: &mut [T], im: &mut [T], h: usize, w: usize, inverse: bool) {
    let row_plan = Plan::<T>::new(w);
    let col_plan = Plan::<T>::new(h);
    let mut scratch = Vec::new();
    let mut col_re = vec![T::zero(); h];
    let mut col_im = vec![T::zero(); h];
    let plane = h * w;
    for (pre, pim) in re.chunks_mut(plane).zip(im.chunks_mut(plane)) {
        for (rr, ri) in pre.chunks_mut(w).zip(pim.chunks_mut(w)) {
            row_plan.run(rr, ri, inverse, &mut scratch);
        }
        for c in 0..w {
            for r in 0..h {
                col_re[r] = pre[r * w + c];
                col_im[r] = pim[r * w + c];
            }
            col_plan.run(&mut col_re, &mut col_im, inverse, &mut scratch);
            for r in 0..h {
                pre[r * w + c] = col_re[r];
                pim[r * w + c] = col_im[r];
            }
        }
        if inverse {
            let scale = T::one() / T::c(plane as f64);
            for v in pre.iter_mut().chain(pim.iter_mut()) {
                *v *= scale;
            }
        }
    }
}

fn grid_dims(dims: &[usize], complex: bool) -> Result<(usize, usize, usize)> {
    let off = if complex { 3 } else { 2 };
    if dims.len() < off {
        return Err(shape(format!("expected a grid, got shape {dims:?}")));
    }
    if complex && dims[dims.len() - 1] != 2 {
        return Err(shape(format!("complex grid needs trailing axis 2, got {dims:?}")));
    }
    let h = dims[dims.len() - off];
    let w = dims[dims.len() - off + 1];
    if h == 0 || w == 0 {
        return Err(invalid("zero extent in 2-D transform"));
    }
    let count: usize = dims[..dims.len() - off].iter().product();
    Ok((count, h, w))
}

fn interleave<T: Scalar>(re: &[T], im: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(re.len() * 2);
    for (&a, &b) in re.iter().zip(im) {
        out.push(a);
        out.push(b);
    }
    out
}

fn deinterleave<T: Scalar>(z: &[T]) -> (Vec<T>, Vec<T>) {
    let re = z.iter().step_by(2).copied().collect();
    let im = z.iter().skip(1).step_by(2).copied().collect();
    (re, im)
}

/// Forward transform of real grids `[..., H, W]` into complex `[..., H, W, 2]`.
pub fn dft2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w) = grid_dims(x.shape(), false)?;
    if !x.all_finite() {
        return Err(Error::NonFinite("dft2 input".into()));
    }
    let mut re = x.data().to_vec();
    let mut im = vec![T::zero(); re.len()];
    transform_planes(&mut re, &mut im, h, w, false);
    let mut shp = x.shape().to_vec();
    shp.push(2);
    Tensor::new(shp, interleave(&re, &im))
}

fn complex_transform<T: Scalar>(z: &Tensor<T>, inverse: bool) -> Result<Tensor<T>> {
    let (_, h, w) = grid_dims(z.shape(), true)?;
    if !z.all_finite() {
        return Err(Error::NonFinite("dft2 input".into()));
    }
    let (mut re, mut im) = deinterleave(z.data());
    transform_planes(&mut re, &mut im, h, w, inverse);
    Tensor::new(z.shape().to_vec(), interleave(&re, &im))
}

/// Forward transform of complex grids `[..., H, W, 2]`.
pub fn dft2_complex<T: Scalar>(z: &Tensor<T>) -> Result<Tensor<T>> {
    complex_transform(z, false)
}

/// Inverse transform of complex grids `[..., H, W, 2]`, scaled by `1/(H·W)`.
pub fn idft2<T: Scalar>(z: &Tensor<T>) -> Result<Tensor<T>> {
    complex_transform(z, true)
}

/// Real part of an interleaved complex tensor.
pub fn real_part<T: Scalar>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let shp = z.shape();
    if shp.last() != Some(&2) {
        return Err(shape(format!("not a complex tensor: {shp:?}")));
    }
    let re = z.data().iter().step_by(2).copied().collect();
    Tensor::new(shp[..shp.len() - 1].to_vec(), re)
}

/// Lift a real tensor to complex with zero imaginary part.
pub fn to_complex<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut shp = x.shape().to_vec();
    shp.push(2);
    let data = x.data().iter().flat_map(|&v| [v, T::zero()]).collect();
    Tensor::new(shp, data).expect("complex lift keeps element count")
}

/// Move the zero-frequency bin of each trailing `H×W` grid to `(H/2, W/2)`.
pub fn fftshift<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    shift(x, false)
}

/// Inverse of [`fftshift`].
pub fn ifftshift<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    shift(x, true)
}

fn shift<T: Scalar>(x: &Tensor<T>, inverse: bool) -> Result<Tensor<T>> {
    let (count, h, w) = grid_dims(x.shape(), false)?;
    let (sh, sw) = if inverse { (h - h / 2, w - w / 2) } else { (h / 2, w / 2) };
    let mut out = vec![T::zero(); x.len()];
    let src = x.data();
    for p in 0..count {
        let base = p * h * w;
        for r in 0..h {
            let nr = (r + sh) % h;
            for c in 0..w {
                let nc = (c + sw) % w;
                out[base + nr * w + nc] = src[base + r * w + c];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
