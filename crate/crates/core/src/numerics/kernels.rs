//! Raw loops behind the differentiable ops. Everything here works on flat
//! row-major slices with explicit extents; the tape owns shapes.

use serde::{Deserialize, Serialize};

use super::tensor::{strides_of, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output extent `ceil(n / stride)`, zero padding split with the
    /// smaller half before.
    Same,
    /// No padding; output extent `floor((n - k) / stride) + 1`.
    Valid,
}

/// Output extent and leading pad for one spatial axis.
pub fn conv_extent(n: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::shape("stride must be at least 1"));
    }
    if k == 0 || n == 0 {
        return Err(Error::shape(format!("zero-sized extent (input {n}, kernel {k})")));
    }
    match padding {
        Padding::Same => {
            let out = n.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(n);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if k > n {
                return Err(Error::shape(format!(
                    "kernel {k} exceeds input extent {n} under valid padding; output would be empty"
                )));
            }
            Ok(((n - k) / stride + 1, 0))
        }
    }
}

/// Spatial geometry shared by forward and transposed convolutions. For a
/// transposed convolution `in_*` is the small side and `out_*` the large.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn conv(
        x_shape: &[usize],
        k_shape: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (batch, in_h, in_w, cin, kh, kw, cout) = unpack(x_shape, k_shape)?;
        let (out_h, pad_top) = conv_extent(in_h, kh, stride, padding)?;
        let (out_w, pad_left) = conv_extent(in_w, kw, stride, padding)?;
        Ok(ConvGeom {
            batch,
            in_h,
            in_w,
            cin,
            out_h,
            out_w,
            cout,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
        })
    }

    /// Transposed convolution: output extent `(n - 1) * stride + min(k,
    /// stride)`, i.e. `n * stride` whenever the kernel covers the stride.
    /// A same-padded conv with the same stride maps the shape back.
    pub fn transposed(x_shape: &[usize], k_shape: &[usize], stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::shape("stride must be at least 1"));
        }
        let (batch, in_h, in_w, cin, kh, kw, cout) = unpack(x_shape, k_shape)?;
        if in_h == 0 || in_w == 0 || kh == 0 || kw == 0 {
            return Err(Error::shape("zero-sized transposed convolution"));
        }
        Ok(ConvGeom {
            batch,
            in_h,
            in_w,
            cin,
            out_h: (in_h - 1) * stride + kh.min(stride),
            out_w: (in_w - 1) * stride + kw.min(stride),
            cout,
            kh,
            kw,
            stride,
            pad_top: kh.saturating_sub(stride) / 2,
            pad_left: kw.saturating_sub(stride) / 2,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_h, self.out_w, self.cout]
    }

    /// Row/col on the large grid touched by small-grid `(y, x)` and kernel
    /// tap `(ky, kx)`.
    #[inline]
    fn tap(&self, y: usize, ky: usize, big: usize, pad: usize) -> Option<usize> {
        let pos = (y * self.stride + ky).checked_sub(pad)?;
        (pos < big).then_some(pos)
    }
}

fn unpack(
    x_shape: &[usize],
    k_shape: &[usize],
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let [b, h, w, c] = x_shape else {
        return Err(Error::shape(format!("expected BHWC input, got {x_shape:?}")));
    };
    let [kh, kw, kc, cout] = k_shape else {
        return Err(Error::shape(format!(
            "expected Kh x Kw x Cin x Cout kernel, got {k_shape:?}"
        )));
    };
    if c != kc {
        return Err(Error::shape(format!(
            "input has {c} channels but kernel expects {kc}"
        )));
    }
    Ok((*b, *h, *w, *c, *kh, *kw, *cout))
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // independent lanes so the loop vectorises
    const LANES: usize = 8;
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

pub fn conv2d_forward<T: Real>(x: &[T], k: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_h * g.out_w * g.cout];
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o = ((b * g.out_h + oy) * g.out_w + ox) * g.cout;
                let dst = &mut out[o..o + g.cout];
                if let Some(bias) = bias {
                    dst.copy_from_slice(bias);
                }
                for ky in 0..g.kh {
                    let Some(iy) = g.tap(oy, ky, g.in_h, g.pad_top) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.tap(ox, kx, g.in_w, g.pad_left) else { continue };
                        let xi = ((b * g.in_h + iy) * g.in_w + ix) * g.cin;
                        for ci in 0..g.cin {
                            let ki = ((ky * g.kw + kx) * g.cin + ci) * g.cout;
                            axpy(x[xi + ci], &k[ki..ki + g.cout], dst);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d input, d kernel, d bias)`.
/// Gradients for input, kernel and bias. The input gradient is left empty
/// when `input_grad` is false.
pub fn conv2d_backward<T: Real>(
    x: &[T],
    k: &[T],
    grad: &[T],
    g: &ConvGeom,
    input_grad: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); if input_grad { x.len() } else { 0 }];
    let mut gk = vec![T::zero(); k.len()];
    let mut gb = vec![T::zero(); g.cout];
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o = ((b * g.out_h + oy) * g.out_w + ox) * g.cout;
                let go = &grad[o..o + g.cout];
                axpy(T::one(), go, &mut gb);
                for ky in 0..g.kh {
                    let Some(iy) = g.tap(oy, ky, g.in_h, g.pad_top) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.tap(ox, kx, g.in_w, g.pad_left) else { continue };
                        let xi = ((b * g.in_h + iy) * g.in_w + ix) * g.cin;
                        for ci in 0..g.cin {
                            let ki = ((ky * g.kw + kx) * g.cin + ci) * g.cout;
                            if input_grad {
                                gx[xi + ci] = gx[xi + ci] + dot(go, &k[ki..ki + g.cout]);
                            }
                            axpy(x[xi + ci], go, &mut gk[ki..ki + g.cout]);
                        }
                    }
                }
            }
        }
    }
    (gx, gk, gb)
}

pub fn conv_transpose2d_forward<T: Real>(
    x: &[T],
    k: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_h * g.out_w * g.cout];
    if let Some(bias) = bias {
        for px in out.chunks_exact_mut(g.cout) {
            px.copy_from_slice(bias);
        }
    }
    for b in 0..g.batch {
        for iy in 0..g.in_h {
            for ix in 0..g.in_w {
                let xi = ((b * g.in_h + iy) * g.in_w + ix) * g.cin;
                for ky in 0..g.kh {
                    let Some(oy) = g.tap(iy, ky, g.out_h, g.pad_top) else { continue };
                    for kx in 0..g.kw {
                        let Some(ox) = g.tap(ix, kx, g.out_w, g.pad_left) else { continue };
                        let o = ((b * g.out_h + oy) * g.out_w + ox) * g.cout;
                        for ci in 0..g.cin {
                            let ki = ((ky * g.kw + kx) * g.cin + ci) * g.cout;
                            axpy(x[xi + ci], &k[ki..ki + g.cout], &mut out[o..o + g.cout]);
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_transpose2d_backward<T: Real>(
    x: &[T],
    k: &[T],
    grad: &[T],
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gb = vec![T::zero(); g.cout];
    for go in grad.chunks_exact(g.cout) {
        axpy(T::one(), go, &mut gb);
    }
    for b in 0..g.batch {
        for iy in 0..g.in_h {
            for ix in 0..g.in_w {
                let xi = ((b * g.in_h + iy) * g.in_w + ix) * g.cin;
                for ky in 0..g.kh {
                    let Some(oy) = g.tap(iy, ky, g.out_h, g.pad_top) else { continue };
                    for kx in 0..g.kw {
                        let Some(ox) = g.tap(ix, kx, g.out_w, g.pad_left) else { continue };
                        let o = ((b * g.out_h + oy) * g.out_w + ox) * g.cout;
                        let go = &grad[o..o + g.cout];
                        for ci in 0..g.cin {
                            let ki = ((ky * g.kw + kx) * g.cin + ci) * g.cout;
                            gx[xi + ci] = gx[xi + ci] + dot(go, &k[ki..ki + g.cout]);
                            axpy(x[xi + ci], go, &mut gk[ki..ki + g.cout]);
                        }
                    }
                }
            }
        }
    }
    (gx, gk, gb)
}

/// `[m, k] x [k, n]`.
pub fn matmul_forward<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], row);
        }
    }
    out
}

pub fn matmul_backward<T: Real>(
    a: &[T],
    b: &[T],
    grad: &[T],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<T>, Vec<T>) {
    let mut ga = vec![T::zero(); a.len()];
    let mut gb = vec![T::zero(); b.len()];
    for i in 0..m {
        let go = &grad[i * n..(i + 1) * n];
        for p in 0..k {
            ga[i * k + p] = dot(go, &b[p * n..(p + 1) * n]);
            axpy(a[i * k + p], go, &mut gb[p * n..(p + 1) * n]);
        }
    }
    (ga, gb)
}

/// Per-slot matrix product: `x [n, s, a]` with `w [s, a, m]` gives
/// `[n, s, m]`, where slot `s` uses its own matrix `w[s]`.
pub fn slot_matmul_forward<T: Real>(
    x: &[T],
    w: &[T],
    n: usize,
    s: usize,
    a: usize,
    m: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * s * m];
    for ni in 0..n {
        for si in 0..s {
            let xo = (ni * s + si) * a;
            let oo = (ni * s + si) * m;
            let dst = &mut out[oo..oo + m];
            for ai in 0..a {
                let wo = (si * a + ai) * m;
                axpy(x[xo + ai], &w[wo..wo + m], dst);
            }
        }
    }
    out
}

pub fn slot_matmul_backward<T: Real>(
    x: &[T],
    w: &[T],
    grad: &[T],
    n: usize,
    s: usize,
    a: usize,
    m: usize,
) -> (Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    for ni in 0..n {
        for si in 0..s {
            let xo = (ni * s + si) * a;
            let go = &grad[(ni * s + si) * m..(ni * s + si + 1) * m];
            for ai in 0..a {
                let wo = (si * a + ai) * m;
                gx[xo + ai] = dot(go, &w[wo..wo + m]);
                axpy(x[xo + ai], go, &mut gw[wo..wo + m]);
            }
        }
    }
    (gx, gw)
}

/// Window geometry for gathering capsule children: input `[b, h, w, t, a]`,
/// output `[b, oh, ow, t * k * k, a]` with child index `(ti * k + ky) * k + kx`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnfoldGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub types: usize,
    pub atoms: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl UnfoldGeom {
    pub fn same(shape: &[usize], kernel: usize, stride: usize) -> Result<Self> {
        let [batch, in_h, in_w, types, atoms] = shape else {
            return Err(Error::shape(format!(
                "expected a [batch, h, w, types, atoms] capsule tensor, got {shape:?}"
            )));
        };
        let (out_h, pad_top) = conv_extent(*in_h, kernel, stride, Padding::Same)?;
        let (out_w, pad_left) = conv_extent(*in_w, kernel, stride, Padding::Same)?;
        Ok(UnfoldGeom {
            batch: *batch,
            in_h: *in_h,
            in_w: *in_w,
            types: *types,
            atoms: *atoms,
            kernel,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    pub fn children(&self) -> usize {
        self.types * self.kernel * self.kernel
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_h, self.out_w, self.children(), self.atoms]
    }

    /// Calls `f(out_offset, in_offset)` for every non-padded child vector.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (k, a, t) = (self.kernel, self.atoms, self.types);
        let children = self.children();
        for b in 0..self.batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let base = ((b * self.out_h + oy) * self.out_w + ox) * children;
                    for ky in 0..k {
                        let Some(iy) = (oy * self.stride + ky)
                            .checked_sub(self.pad_top)
                            .filter(|&v| v < self.in_h)
                        else {
                            continue;
                        };
                        for kx in 0..k {
                            let Some(ix) = (ox * self.stride + kx)
                                .checked_sub(self.pad_left)
                                .filter(|&v| v < self.in_w)
                            else {
                                continue;
                            };
                            for ti in 0..t {
                                let child = base + (ti * k + ky) * k + kx;
                                let src = ((b * self.in_h + iy) * self.in_w + ix) * t + ti;
                                f(child * a, src * a);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn unfold_forward<T: Real>(x: &[T], g: &UnfoldGeom) -> Vec<T> {
    let a = g.atoms;
    let mut out = vec![T::zero(); g.out_shape().iter().product()];
    g.for_each(|o, i| out[o..o + a].copy_from_slice(&x[i..i + a]));
    out
}

pub fn unfold_backward<T: Real>(grad: &[T], in_len: usize, g: &UnfoldGeom) -> Vec<T> {
    let a = g.atoms;
    let mut gx = vec![T::zero(); in_len];
    g.for_each(|o, i| axpy(T::one(), &grad[o..o + a], &mut gx[i..i + a]));
    gx
}

/// Numpy-style broadcast of two shapes (right-aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!(
                    "shapes {a:?} and {b:?} do not broadcast"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast `out` shape: zero along
/// broadcast axes.
pub fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Visit every output element of a broadcast binary op as
/// `sum_s c[n, s, o] * u[n, s, o, :]`, giving `[n, o, a]`.
pub fn weighted_votes_forward<T: Real>(c: &[T], u: &[T], n: usize, s: usize, o: usize, a: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * o * a];
    for ni in 0..n {
        let dst = &mut out[ni * o * a..(ni + 1) * o * a];
        for si in 0..s {
            for oi in 0..o {
                let row = (ni * s + si) * o + oi;
                axpy(c[row], &u[row * a..(row + 1) * a], &mut dst[oi * a..(oi + 1) * a]);
            }
        }
    }
    out
}

pub fn weighted_votes_backward<T: Real>(
    c: &[T],
    u: &[T],
    grad: &[T],
    n: usize,
    s: usize,
    o: usize,
    a: usize,
) -> (Vec<T>, Vec<T>) {
    let mut gc = vec![T::zero(); c.len()];
    let mut gu = vec![T::zero(); u.len()];
    for ni in 0..n {
        for si in 0..s {
            for oi in 0..o {
                let row = (ni * s + si) * o + oi;
                let g = &grad[(ni * o + oi) * a..(ni * o + oi + 1) * a];
                gc[row] = dot(g, &u[row * a..(row + 1) * a]);
                axpy(c[row], g, &mut gu[row * a..(row + 1) * a]);
            }
        }
    }
    (gc, gu)
}

/// `u[n, s, o, :] . v[n, o, :]`, giving `[n, s, o]`.
pub fn agreement_forward<T: Real>(u: &[T], v: &[T], n: usize, s: usize, o: usize, a: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * s * o];
    for ni in 0..n {
        for si in 0..s {
            for oi in 0..o {
                let row = (ni * s + si) * o + oi;
                out[row] = dot(&u[row * a..(row + 1) * a], &v[(ni * o + oi) * a..(ni * o + oi + 1) * a]);
            }
        }
    }
    out
}

pub fn agreement_backward<T: Real>(
    u: &[T],
    v: &[T],
    grad: &[T],
    n: usize,
    s: usize,
    o: usize,
    a: usize,
) -> (Vec<T>, Vec<T>) {
    let mut gu = vec![T::zero(); u.len()];
    let mut gv = vec![T::zero(); v.len()];
    for ni in 0..n {
        for si in 0..s {
            for oi in 0..o {
                let row = (ni * s + si) * o + oi;
                let vo = (ni * o + oi) * a;
                axpy(grad[row], &v[vo..vo + a], &mut gu[row * a..(row + 1) * a]);
                axpy(grad[row], &u[row * a..(row + 1) * a], &mut gv[vo..vo + a]);
            }
        }
    }
    (gu, gv)
}

/// `f(out_index, a_index, b_index)`. The innermost axis runs as a flat loop.
#[inline]
pub fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out.iter().product();
    if numel == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let nd = out.len();
    let inner = out[nd - 1];
    let (ia_step, ib_step) = (sa[nd - 1], sb[nd - 1]);
    let mut idx = vec![0usize; nd - 1];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    loop {
        let (mut ja, mut jb) = (ia, ib);
        for _ in 0..inner {
            f(o, ja, jb);
            o += 1;
            ja += ia_step;
            jb += ib_step;
        }
        // odometer over the outer axes
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}
