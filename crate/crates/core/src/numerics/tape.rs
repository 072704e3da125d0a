//! Wengert tape: every op records its inputs and output value; `backward`
//! walks the list in reverse accumulating vector-Jacobian products.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, ConvGeom, Padding, UnfoldGeom};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar,
    Relu,
    Sigmoid,
    Exp,
    Ln,
    Square,
    Clamp(f64, f64),
    Sum,
    Mean,
    SumAxis(usize),
    L2NormLast,
    Softmax(usize),
    Reshape,
    Conv2d(ConvGeom),
    ConvTranspose2d(ConvGeom),
    MatMul(usize, usize, usize),
    SlotMatmul(usize, usize, usize, usize),
    Unfold(UnfoldGeom),
    Crop([usize; 4], [usize; 4]),
    WeightedVotes([usize; 4]),
    Agreement([usize; 4]),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op,
    parents: Vec<usize>,
    tracked: bool,
}

/// Recording context for one forward/backward pass. Not shared across
/// threads; each worker builds its own.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf whose gradient is not needed.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, Vec::new(), false)
    }

    /// A leaf whose gradient `backward` will report.
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, Vec::new(), true)
    }

    fn push(&self, value: Tensor<T>, op: Op, parents: Vec<usize>, tracked: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            parents,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, value: Tensor<T>, op: Op, parents: &[Var<'_, T>]) -> Var<'_, T> {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let tracked = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].tracked)
        };
        self.push(value, op, ids, tracked)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse pass from a scalar loss. Returns gradients for every tracked
    /// leaf reachable from `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFinite(format!("loss is {}", lv.item())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(lv.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Reshape = node.op {
                let p = node.parents[0];
                if nodes[p].tracked {
                    let pg = g.reshape(nodes[p].value.shape())?;
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg)?,
                        slot @ None => *slot = Some(pg),
                    }
                }
                continue;
            }
            let parent_vals: Vec<&Tensor<T>> =
                node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].tracked).collect();
            let pgrads = vjp(&node.op, &parent_vals, &needs, &node.value, &g)?;
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                if !nodes[p].tracked {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        // Interior gradients were consumed above; only leaves remain.
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` if `v` is untracked or does not influence the loss.
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape if the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape().as_slice()))
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn binary(self, other: Var<'t, T>, op: Op, f: impl Fn(T, T) -> T) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out_shape = kernels::broadcast_shape(a.shape(), b.shape())?;
        let sa = kernels::broadcast_strides(a.shape(), &out_shape);
        let sb = kernels::broadcast_strides(b.shape(), &out_shape);
        let (ad, bd) = (a.data(), b.data());
        let mut out = Vec::with_capacity(out_shape.iter().product());
        kernels::for_each_broadcast(&out_shape, &sa, &sb, |_, ia, ib| out.push(f(ad[ia], bd[ib])));
        Ok(self.tape.record(Tensor::new(out_shape, out)?, op, &[self, other]))
    }

    fn unary(self, op: Op, f: impl Fn(T) -> T) -> Var<'t, T> {
        let out = self.value().map(f);
        self.tape.record(out, op, &[self])
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Div, |a, b| a / b)
    }

    pub fn scale(self, c: f64) -> Var<'t, T> {
        let k = T::lit(c);
        self.unary(Op::Scale(c), |x| x * k)
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, T> {
        let k = T::lit(c);
        self.unary(Op::AddScalar, |x| x + k)
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(Op::Relu, |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(Op::Sigmoid, sigmoid)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(Op::Exp, |x| x.exp())
    }

    pub fn ln(self) -> Var<'t, T> {
        self.unary(Op::Ln, |x| x.ln())
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(Op::Square, |x| x * x)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t, T> {
        let (l, h) = (T::lit(lo), T::lit(hi));
        self.unary(Op::Clamp(lo, hi), |x| x.max(l).min(h))
    }

    pub fn sum(self) -> Var<'t, T> {
        let s = self.value().data().iter().copied().sum();
        self.tape.record(Tensor::scalar(s), Op::Sum, &[self])
    }

    pub fn mean(self) -> Var<'t, T> {
        let v = self.value();
        let s: T = v.data().iter().copied().sum();
        let n = T::lit(v.numel() as f64);
        self.tape.record(Tensor::scalar(s / n), Op::Mean, &[self])
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        let (outer, mid, inner) = split_axis(v.shape(), axis)?;
        let x = v.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for m in 0..mid {
                let src = &x[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        Ok(self
            .tape
            .record(Tensor::new(shape, out)?, Op::SumAxis(axis), &[self]))
    }

    /// Euclidean norm over the last axis, which is kept with extent 1. The
    /// gradient at the zero vector is defined as zero.
    pub fn l2norm_last(self) -> Result<Var<'t, T>> {
        let v = self.value();
        let last = *v
            .shape()
            .last()
            .ok_or_else(|| Error::shape("l2norm needs at least one axis"))?;
        let out: Vec<T> = v
            .data()
            .chunks_exact(last)
            .map(|c| c.iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect();
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        Ok(self
            .tape
            .record(Tensor::new(shape, out)?, Op::L2NormLast, &[self]))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        let (outer, mid, inner) = split_axis(v.shape(), axis)?;
        let x = v.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |m: usize| (o * mid + m) * inner + i;
                let mx = (0..mid).map(|m| x[at(m)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for m in 0..mid {
                    let e = (x[at(m)] - mx).exp();
                    out[at(m)] = e;
                    total = total + e;
                }
                for m in 0..mid {
                    out[at(m)] = out[at(m)] / total;
                }
            }
        }
        Ok(self.tape.record(
            Tensor::new(v.shape().to_vec(), out)?,
            Op::Softmax(axis),
            &[self],
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.record(out, Op::Reshape, &[self]))
    }

    /// 2-D convolution, BHWC input and `[kh, kw, cin, cout]` kernel.
    pub fn conv2d(
        self,
        kernel: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var<'t, T>> {
        let (x, k) = (self.value(), kernel.value());
        let g = ConvGeom::conv(x.shape(), k.shape(), stride, padding)?;
        let b = bias.map(|b| b.value());
        check_bias(b.as_deref(), g.cout)?;
        let out = kernels::conv2d_forward(x.data(), k.data(), b.as_ref().map(|b| b.data()), &g);
        let mut parents = vec![self, kernel];
        parents.extend(bias);
        Ok(self
            .tape
            .record(Tensor::new(g.out_shape(), out)?, Op::Conv2d(g), &parents))
    }

    /// Transposed convolution; output extents are `stride` times the input
    /// when the kernel is at least as large as the stride.
    pub fn conv_transpose2d(
        self,
        kernel: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
    ) -> Result<Var<'t, T>> {
        let (x, k) = (self.value(), kernel.value());
        let g = ConvGeom::transposed(x.shape(), k.shape(), stride)?;
        let b = bias.map(|b| b.value());
        check_bias(b.as_deref(), g.cout)?;
        let out =
            kernels::conv_transpose2d_forward(x.data(), k.data(), b.as_ref().map(|b| b.data()), &g);
        let mut parents = vec![self, kernel];
        parents.extend(bias);
        Ok(self.tape.record(
            Tensor::new(g.out_shape(), out)?,
            Op::ConvTranspose2d(g),
            &parents,
        ))
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return Err(Error::shape(format!(
                "matmul needs 2-D operands, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner extents differ: {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let out = kernels::matmul_forward(a.data(), b.data(), m, k, n);
        Ok(self
            .tape
            .record(Tensor::new(vec![m, n], out)?, Op::MatMul(m, k, n), &[self, other]))
    }

    /// `self [n, s, a]` times per-slot matrices `w [s, a, m]` gives `[n, s, m]`.
    pub fn slot_matmul(self, w: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, wv) = (self.value(), w.value());
        let (&[n, s, a], &[s2, a2, m]) = (x.shape(), wv.shape()) else {
            return Err(Error::shape(format!(
                "slot matmul needs [n, s, a] and [s, a, m], got {:?} and {:?}",
                x.shape(),
                wv.shape()
            )));
        };
        if s != s2 || a != a2 {
            return Err(Error::shape(format!(
                "slot matmul extents disagree: {:?} vs {:?}",
                x.shape(),
                wv.shape()
            )));
        }
        let out = kernels::slot_matmul_forward(x.data(), wv.data(), n, s, a, m);
        Ok(self.tape.record(
            Tensor::new(vec![n, s, m], out)?,
            Op::SlotMatmul(n, s, a, m),
            &[self, w],
        ))
    }

    /// Gather `kernel x kernel` child windows (same padding, zeros outside)
    /// from a `[b, h, w, types, atoms]` capsule tensor.
    pub fn unfold_capsules(self, kernel: usize, stride: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let g = UnfoldGeom::same(x.shape(), kernel, stride)?;
        let out = kernels::unfold_forward(x.data(), &g);
        Ok(self
            .tape
            .record(Tensor::new(g.out_shape(), out)?, Op::Unfold(g), &[self]))
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// Coupling-weighted sum of votes: `self` holds couplings `[n, s, o]`,
    /// `votes` is `[n, s, o, a]`; the result is `[n, o, a]`.
    pub fn weighted_votes(self, votes: Var<'t, T>) -> Result<Var<'t, T>> {
        let (c, u) = (self.value(), votes.value());
        let (&[n, s, o], &[n2, s2, o2, a]) = (c.shape(), u.shape()) else {
            return Err(Error::shape(format!(
                "weighted votes need [n, s, o] and [n, s, o, a], got {:?} and {:?}",
                c.shape(),
                u.shape()
            )));
        };
        if (n, s, o) != (n2, s2, o2) {
            return Err(Error::shape(format!(
                "couplings {:?} do not match votes {:?}",
                c.shape(),
                u.shape()
            )));
        }
        let out = kernels::weighted_votes_forward(c.data(), u.data(), n, s, o, a);
        Ok(self.tape.record(
            Tensor::new(vec![n, o, a], out)?,
            Op::WeightedVotes([n, s, o, a]),
            &[self, votes],
        ))
    }

    /// Dot product of every vote `self [n, s, o, a]` with its parent
    /// `parents [n, o, a]`, giving `[n, s, o]`.
    pub fn agreement(self, parents: Var<'t, T>) -> Result<Var<'t, T>> {
        let (u, v) = (self.value(), parents.value());
        let (&[n, s, o, a], &[n2, o2, a2]) = (u.shape(), v.shape()) else {
            return Err(Error::shape(format!(
                "agreement needs [n, s, o, a] and [n, o, a], got {:?} and {:?}",
                u.shape(),
                v.shape()
            )));
        };
        if (n, o, a) != (n2, o2, a2) {
            return Err(Error::shape(format!(
                "votes {:?} do not match parents {:?}",
                u.shape(),
                v.shape()
            )));
        }
        let out = kernels::agreement_forward(u.data(), v.data(), n, s, o, a);
        Ok(self.tape.record(
            Tensor::new(vec![n, s, o], out)?,
            Op::Agreement([n, s, o, a]),
            &[self, parents],
        ))
    }

    /// Spatial window `[top, top + h) x [left, left + w)` of a BHWC tensor.
    pub fn crop(self, top: usize, left: usize, h: usize, w: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let &[b, ih, iw, c] = x.shape() else {
            return Err(Error::shape(format!("crop needs BHWC, got {:?}", x.shape())));
        };
        if h == 0 || w == 0 || top + h > ih || left + w > iw {
            return Err(Error::shape(format!(
                "crop {h}x{w} at ({top}, {left}) outside {ih}x{iw}"
            )));
        }
        let mut out = Vec::with_capacity(b * h * w * c);
        for bi in 0..b {
            for y in top..top + h {
                let row = ((bi * ih + y) * iw + left) * c;
                out.extend_from_slice(&x.data()[row..row + w * c]);
            }
        }
        Ok(self.tape.record(
            Tensor::new(vec![b, h, w, c], out)?,
            Op::Crop([b, ih, iw, c], [top, left, h, w]),
            &[self],
        ))
    }
}

fn check_bias<T: Real>(bias: Option<&Tensor<T>>, cout: usize) -> Result<()> {
    match bias {
        Some(b) if b.numel() != cout => Err(Error::shape(format!(
            "bias has {} entries for {} output channels",
            b.numel(),
            cout
        ))),
        _ => Ok(()),
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `(outer, mid, inner)` extents around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

fn zip_map<T: Real>(like: &Tensor<T>, a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(like.shape().to_vec(), data).expect("same shape")
}

/// Vector-Jacobian product of one recorded op: parent gradients given the
/// output gradient `g`.
/// Vector-Jacobian products for every parent of one node. `needs[i]` is
/// false for untracked parents, whose slots may be left empty.
fn vjp<T: Real>(
    op: &Op,
    p: &[&Tensor<T>],
    needs: &[bool],
    out: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let gd = g.data();
    Ok(match op {
        Op::Leaf => Vec::new(),
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let (a, b) = (p[0], p[1]);
            let sa = kernels::broadcast_strides(a.shape(), out.shape());
            let sb = kernels::broadcast_strides(b.shape(), out.shape());
            let mut ga = vec![T::zero(); a.numel()];
            let mut gb = vec![T::zero(); b.numel()];
            let (ad, bd) = (a.data(), b.data());
            match op {
                Op::Add => kernels::for_each_broadcast(out.shape(), &sa, &sb, |o, ia, ib| {
                    ga[ia] = ga[ia] + gd[o];
                    gb[ib] = gb[ib] + gd[o];
                }),
                Op::Sub => kernels::for_each_broadcast(out.shape(), &sa, &sb, |o, ia, ib| {
                    ga[ia] = ga[ia] + gd[o];
                    gb[ib] = gb[ib] - gd[o];
                }),
                Op::Mul => kernels::for_each_broadcast(out.shape(), &sa, &sb, |o, ia, ib| {
                    ga[ia] = ga[ia] + gd[o] * bd[ib];
                    gb[ib] = gb[ib] + gd[o] * ad[ia];
                }),
                _ => kernels::for_each_broadcast(out.shape(), &sa, &sb, |o, ia, ib| {
                    let inv = T::one() / bd[ib];
                    ga[ia] = ga[ia] + gd[o] * inv;
                    gb[ib] = gb[ib] - gd[o] * ad[ia] * inv * inv;
                }),
            }
            vec![
                Tensor::new(a.shape().to_vec(), ga)?,
                Tensor::new(b.shape().to_vec(), gb)?,
            ]
        }
        Op::Scale(c) => {
            let k = T::lit(*c);
            vec![g.map(|x| x * k)]
        }
        Op::AddScalar | Op::Reshape => {
            vec![Tensor::new(p[0].shape().to_vec(), gd.to_vec())?]
        }
        Op::Relu => vec![zip_map(p[0], p[0].data(), gd, |x, g| {
            if x > T::zero() {
                g
            } else {
                T::zero()
            }
        })],
        Op::Sigmoid => vec![zip_map(p[0], out.data(), gd, |y, g| g * y * (T::one() - y))],
        Op::Exp => vec![zip_map(p[0], out.data(), gd, |y, g| g * y)],
        Op::Ln => vec![zip_map(p[0], p[0].data(), gd, |x, g| g / x)],
        Op::Square => vec![zip_map(p[0], p[0].data(), gd, |x, g| T::lit(2.0) * x * g)],
        Op::Clamp(lo, hi) => {
            let (l, h) = (T::lit(*lo), T::lit(*hi));
            vec![zip_map(p[0], p[0].data(), gd, |x, g| {
                if x >= l && x <= h {
                    g
                } else {
                    T::zero()
                }
            })]
        }
        Op::Sum => vec![Tensor::full(p[0].shape(), g.item())],
        Op::Mean => {
            let n = T::lit(p[0].numel() as f64);
            vec![Tensor::full(p[0].shape(), g.item() / n)]
        }
        Op::SumAxis(axis) => {
            let (outer, mid, inner) = split_axis(p[0].shape(), *axis)?;
            let mut gx = vec![T::zero(); p[0].numel()];
            for o in 0..outer {
                let src = &gd[o * inner..(o + 1) * inner];
                for m in 0..mid {
                    gx[(o * mid + m) * inner..(o * mid + m + 1) * inner].copy_from_slice(src);
                }
            }
            vec![Tensor::new(p[0].shape().to_vec(), gx)?]
        }
        Op::L2NormLast => {
            let x = p[0];
            let last = *x.shape().last().unwrap();
            let mut gx = vec![T::zero(); x.numel()];
            for (i, (chunk, dst)) in x
                .data()
                .chunks_exact(last)
                .zip(gx.chunks_exact_mut(last))
                .enumerate()
            {
                let n = out.data()[i];
                if n > T::zero() {
                    let s = gd[i] / n;
                    for (d, &v) in dst.iter_mut().zip(chunk) {
                        *d = s * v;
                    }
                }
            }
            vec![Tensor::new(x.shape().to_vec(), gx)?]
        }
        Op::Softmax(axis) => {
            let (outer, mid, inner) = split_axis(p[0].shape(), *axis)?;
            let y = out.data();
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |m: usize| (o * mid + m) * inner + i;
                    let dotp: T = (0..mid).map(|m| gd[at(m)] * y[at(m)]).sum();
                    for m in 0..mid {
                        gx[at(m)] = y[at(m)] * (gd[at(m)] - dotp);
                    }
                }
            }
            vec![Tensor::new(p[0].shape().to_vec(), gx)?]
        }
        Op::Conv2d(geom) | Op::ConvTranspose2d(geom) => {
            let (x, k) = (p[0], p[1]);
            let (gx, gk, gb) = if matches!(op, Op::Conv2d(_)) {
                kernels::conv2d_backward(x.data(), k.data(), gd, geom, needs[0])
            } else {
                kernels::conv_transpose2d_backward(x.data(), k.data(), gd, geom)
            };
            let gx = if needs[0] {
                Tensor::new(x.shape().to_vec(), gx)?
            } else {
                Tensor::zeros(&[0])
            };
            let mut grads = vec![
                gx,
                Tensor::new(k.shape().to_vec(), gk)?,
            ];
            if let Some(b) = p.get(2) {
                grads.push(Tensor::new(b.shape().to_vec(), gb)?);
            }
            grads
        }
        Op::MatMul(m, k, n) => {
            let (ga, gb) = kernels::matmul_backward(p[0].data(), p[1].data(), gd, *m, *k, *n);
            vec![
                Tensor::new(p[0].shape().to_vec(), ga)?,
                Tensor::new(p[1].shape().to_vec(), gb)?,
            ]
        }
        Op::SlotMatmul(n, s, a, m) => {
            let (gx, gw) =
                kernels::slot_matmul_backward(p[0].data(), p[1].data(), gd, *n, *s, *a, *m);
            vec![
                Tensor::new(p[0].shape().to_vec(), gx)?,
                Tensor::new(p[1].shape().to_vec(), gw)?,
            ]
        }
        Op::WeightedVotes([n, s, o, a]) => {
            let (gc, gu) =
                kernels::weighted_votes_backward(p[0].data(), p[1].data(), gd, *n, *s, *o, *a);
            vec![
                Tensor::new(p[0].shape().to_vec(), gc)?,
                Tensor::new(p[1].shape().to_vec(), gu)?,
            ]
        }
        Op::Agreement([n, s, o, a]) => {
            let (gu, gv) =
                kernels::agreement_backward(p[0].data(), p[1].data(), gd, *n, *s, *o, *a);
            vec![
                Tensor::new(p[0].shape().to_vec(), gu)?,
                Tensor::new(p[1].shape().to_vec(), gv)?,
            ]
        }
        Op::Crop([b, ih, iw, c], [top, left, h, w]) => {
            let mut gx = vec![T::zero(); p[0].numel()];
            let mut src = 0;
            for bi in 0..*b {
                for y in *top..top + h {
                    let row = ((bi * ih + y) * iw + left) * c;
                    gx[row..row + w * c].copy_from_slice(&gd[src..src + w * c]);
                    src += w * c;
                }
            }
            vec![Tensor::new(p[0].shape().to_vec(), gx)?]
        }
        Op::Unfold(geom) => {
            let gx = kernels::unfold_backward(gd, p[0].numel(), geom);
            vec![Tensor::new(p[0].shape().to_vec(), gx)?]
        }
    })
}
