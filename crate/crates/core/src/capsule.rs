//! Convolutional capsule layers with locally-constrained dynamic routing,
//! and capsule-average pooling.
//!
//! A batch of capsule grids lives on the tape as a `[batch, h, w, types,
//! atoms]` tensor. Each parent location sees the `kernel x kernel` window of
//! children around it (same padding), forms one prediction per child and
//! parent type through a transform that depends on the child's type and
//! window offset but not on the location, and routes only among those
//! children.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

/// One image's capsules: `h x w` grid, `n` types, `a`-dimensional vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsuleGrid<T> {
    activations: Tensor<T>,
}

impl<T: Real> CapsuleGrid<T> {
    /// Wrap an `[h, w, n, a]` tensor.
    pub fn new(activations: Tensor<T>) -> Result<Self> {
        match activations.shape() {
            [h, w, n, a] if *h >= 1 && *w >= 1 && *n >= 1 && *a >= 1 => {
                Ok(CapsuleGrid { activations })
            }
            s => Err(Error::shape(format!(
                "capsule grid needs [h, w, types, atoms] with all extents >= 1, got {s:?}"
            ))),
        }
    }

    pub fn height(&self) -> usize {
        self.activations.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.activations.shape()[1]
    }

    pub fn num_types(&self) -> usize {
        self.activations.shape()[2]
    }

    pub fn atom_dim(&self) -> usize {
        self.activations.shape()[3]
    }

    pub fn activations(&self) -> &Tensor<T> {
        &self.activations
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.activations
    }

    /// Activation vector of type `i` at `(y, x)`.
    pub fn vector(&self, y: usize, x: usize, i: usize) -> &[T] {
        let a = self.atom_dim();
        let o = ((y * self.width() + x) * self.num_types() + i) * a;
        &self.activations.data()[o..o + a]
    }

    /// Largest capsule length anywhere in the grid.
    pub fn max_norm(&self) -> T {
        self.activations
            .data()
            .chunks_exact(self.atom_dim())
            .map(norm)
            .fold(T::zero(), T::max)
    }
}

/// Geometry and routing depth of one convolutional capsule layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvCapsuleSpec {
    pub kernel: usize,
    pub stride: usize,
    pub in_types: usize,
    pub out_types: usize,
    pub in_atoms: usize,
    pub out_atoms: usize,
    pub routing_iterations: usize,
}

impl ConvCapsuleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "capsule kernel must be odd and >= 1, got {}",
                self.kernel
            )));
        }
        if self.stride == 0 {
            return Err(Error::config("capsule stride must be >= 1"));
        }
        if self.in_types == 0 || self.out_types == 0 || self.in_atoms == 0 || self.out_atoms == 0
        {
            return Err(Error::config(format!("capsule extents must be >= 1: {self:?}")));
        }
        if self.routing_iterations == 0 {
            return Err(Error::config("routing iterations must be >= 1"));
        }
        Ok(())
    }

    /// Children routed to each parent location.
    pub fn children(&self) -> usize {
        self.in_types * self.kernel * self.kernel
    }

    /// `[in_types, kernel, kernel, in_atoms, out_types * out_atoms]`.
    pub fn transform_shape(&self) -> [usize; 5] {
        [
            self.in_types,
            self.kernel,
            self.kernel,
            self.in_atoms,
            self.out_types * self.out_atoms,
        ]
    }

    pub fn bias_shape(&self) -> [usize; 2] {
        [self.out_types, self.out_atoms]
    }

    pub fn num_parameters(&self) -> usize {
        self.transform_shape().iter().product::<usize>() + self.out_types * self.out_atoms
    }

    /// Parent grid extents for a `h x w` child grid.
    pub fn output_extent(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }
}

/// Logits and couplings of one routing iteration, `[locations, children,
/// parent_types]`.
#[derive(Clone, Debug)]
pub struct RoutingState<T> {
    pub logits: Tensor<T>,
    pub couplings: Tensor<T>,
}

fn norm<T: Real>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// `squash(s) = |s|^2 / (1 + |s|^2) * s / |s|`, with `squash(0) = 0`.
pub fn squash<T: Real>(s: &[T]) -> Vec<T> {
    let n = norm(s);
    let scale = n / (T::one() + n * n);
    s.iter().map(|&x| x * scale).collect()
}

/// Squash along the last axis, written as `s * |s| / (1 + |s|^2)` so the
/// zero vector needs no special case.
pub fn squash_var<'t, T: Real>(s: Var<'t, T>) -> Result<Var<'t, T>> {
    let n = s.l2norm_last()?;
    let scale = n.div(n.square().add_scalar(1.0))?;
    s.mul(scale)
}

fn check_children<T: Real>(children: &Var<'_, T>, spec: &ConvCapsuleSpec) -> Result<[usize; 5]> {
    spec.validate()?;
    let shape = children.shape();
    let [b, h, w, t, a] = shape[..] else {
        return Err(Error::shape(format!(
            "expected [batch, h, w, types, atoms] children, got {shape:?}"
        )));
    };
    if t != spec.in_types || a != spec.in_atoms {
        return Err(Error::shape(format!(
            "children carry {t} types x {a} atoms, layer expects {} x {}",
            spec.in_types, spec.in_atoms
        )));
    }
    Ok([b, h, w, t, a])
}

/// Prediction vectors for every parent location: `[batch, h', w', children,
/// out_types, out_atoms]`, child index `(type * k + ky) * k + kx`. Children
/// outside the grid are zero vectors and so predict zero.
pub fn form_predictions<'t, T: Real>(
    children: Var<'t, T>,
    spec: &ConvCapsuleSpec,
    transforms: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let [_, _, _, _, a] = check_children(&children, spec)?;
    if transforms.shape() != spec.transform_shape() {
        return Err(Error::shape(format!(
            "transform has shape {:?}, layer expects {:?}",
            transforms.shape(),
            spec.transform_shape()
        )));
    }
    let windows = children.unfold_capsules(spec.kernel, spec.stride)?;
    let ws = windows.shape();
    let (b, oh, ow, s) = (ws[0], ws[1], ws[2], ws[3]);
    let m = spec.out_types * spec.out_atoms;
    let w = transforms.reshape(&[s, a, m])?;
    windows
        .reshape(&[b * oh * ow, s, a])?
        .slot_matmul(w)?
        .reshape(&[b, oh, ow, s, spec.out_types, spec.out_atoms])
}

/// Routing-by-agreement among the children of each parent location.
///
/// `predictions` is `[..., children, parent_types, atoms]`; the result is
/// `[..., parent_types, atoms]`. `bias`, when given (`[parent_types,
/// atoms]`), is added to every weighted sum before the squash. Each
/// iteration's logits and couplings are appended to `trace` if supplied.
pub fn dynamic_route<'t, T: Real>(
    predictions: Var<'t, T>,
    iterations: usize,
    bias: Option<Var<'t, T>>,
    mut trace: Option<&mut Vec<RoutingState<T>>>,
) -> Result<Var<'t, T>> {
    if iterations == 0 {
        return Err(Error::config("routing iterations must be >= 1"));
    }
    let shape = predictions.shape();
    if shape.len() < 3 {
        return Err(Error::shape(format!(
            "predictions need [..., children, types, atoms], got {shape:?}"
        )));
    }
    let nd = shape.len();
    let (s, o, a) = (shape[nd - 3], shape[nd - 2], shape[nd - 1]);
    let n: usize = shape[..nd - 3].iter().product();
    let tape: &'t Tape<T> = predictions.tape();

    let u = predictions.reshape(&[n, s, o, a])?;
    let bias = match bias {
        Some(b) => {
            if b.shape().iter().product::<usize>() != o * a {
                return Err(Error::shape(format!(
                    "routing bias {:?} does not match {o} types x {a} atoms",
                    b.shape()
                )));
            }
            Some(b.reshape(&[1, o, a])?)
        }
        None => None,
    };
    let mut logits = tape.constant(Tensor::zeros(&[n, s, o]));
    let mut v = None;
    for it in 0..iterations {
        let c = logits.softmax(2)?;
        if let Some(trace) = trace.as_deref_mut() {
            trace.push(RoutingState {
                logits: (*logits.value()).clone(),
                couplings: (*c.value()).clone(),
            });
        }
        let mut weighted = c.weighted_votes(u)?;
        if let Some(b) = bias {
            weighted = weighted.add(b)?;
        }
        let out = squash_var(weighted)?;
        if it + 1 < iterations {
            logits = logits.add(u.agreement(out)?)?;
        }
        v = Some(out);
    }
    let mut out_shape = shape[..nd - 3].to_vec();
    out_shape.extend([o, a]);
    v.expect("at least one iteration").reshape(&out_shape)
}

/// Full layer: predictions, per-type bias, routing. Returns the parent
/// capsules `[batch, h', w', out_types, out_atoms]`.
pub fn conv_capsule_forward<'t, T: Real>(
    children: Var<'t, T>,
    spec: &ConvCapsuleSpec,
    transforms: Var<'t, T>,
    bias: Var<'t, T>,
) -> Result<Var<'t, T>> {
    if bias.shape() != spec.bias_shape() {
        return Err(Error::shape(format!(
            "bias has shape {:?}, layer expects {:?}",
            bias.shape(),
            spec.bias_shape()
        )));
    }
    let predictions = form_predictions(children, spec, transforms)?;
    dynamic_route(predictions, spec.routing_iterations, Some(bias), None)
}

/// Evaluate one layer on a single grid outside any training tape.
pub fn conv_capsule_grid<T: Real>(
    children: &CapsuleGrid<T>,
    spec: &ConvCapsuleSpec,
    transforms: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<CapsuleGrid<T>> {
    let tape = Tape::new();
    let mut shape = vec![1];
    shape.extend_from_slice(children.activations().shape());
    let x = tape.constant(children.activations().clone().reshape(&shape)?);
    let out = conv_capsule_forward(
        x,
        spec,
        tape.constant(transforms.clone()),
        tape.constant(bias.clone()),
    )?;
    let v = (*out.value()).clone();
    let s = v.shape()[1..].to_vec();
    CapsuleGrid::new(v.reshape(&s)?)
}

/// Capsule-average pooling on the tape: `[batch, h, w, types, atoms]` to
/// `[batch, types, atoms]`, the per-type spatial mean of capsule vectors.
pub fn capsule_average_pool_var<'t, T: Real>(grid: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = grid.shape();
    let [b, h, w, n, a] = shape[..] else {
        return Err(Error::shape(format!(
            "expected [batch, h, w, types, atoms], got {shape:?}"
        )));
    };
    grid.reshape(&[b, h * w, n, a])?
        .sum_axis(1)?
        .scale(1.0 / (h * w) as f64)
        .reshape(&[b, n, a])
}

/// Per-type spatial mean `p_i = 1/(h w) sum_{y,x} c_{y,x,i}`. Each
/// component is summed in sorted order, so the result does not depend on
/// where the capsules sit in the grid.
pub fn capsule_average_pool<T: Real>(grid: &CapsuleGrid<T>) -> Vec<Vec<T>> {
    let (h, w, n, a) = (grid.height(), grid.width(), grid.num_types(), grid.atom_dim());
    let cells = T::lit((h * w) as f64);
    let mut column = Vec::with_capacity(h * w);
    (0..n)
        .map(|i| {
            (0..a)
                .map(|k| {
                    column.clear();
                    for y in 0..h {
                        for x in 0..w {
                            column.push(grid.vector(y, x, i)[k]);
                        }
                    }
                    column.sort_by(|p, q| p.as_f64().total_cmp(&q.as_f64()));
                    column.iter().copied().sum::<T>() / cells
                })
                .collect()
        })
        .collect()
}

/// Euclidean length of each vector.
pub fn magnitudes<T: Real>(vectors: &[Vec<T>]) -> Vec<T> {
    vectors.iter().map(|v| norm(v)).collect()
}
