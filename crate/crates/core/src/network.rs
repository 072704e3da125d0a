//! The D-Caps architecture: initial convolution, capsule stack, capsule
//! average pooling, class scores, and the reconstruction decoder.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capsule::{capsule_average_pool_var, conv_capsule_forward, ConvCapsuleSpec};
use crate::error::{Error, Result};
use crate::numerics::{count_parameters, ParamStore, Padding, Real, Tape, Tensor, Var};

/// Clamp applied to class scores before the cross-entropy logarithms.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

/// Decoder shape: a dense layer onto a `ceil(H/4) x ceil(W/4) x
/// grid_channels` grid, two stride-2 transposed convolutions with
/// `hidden_channels` outputs, then a 1x1 convolution to RGB.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconSpec {
    pub grid_channels: usize,
    pub hidden_channels: usize,
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DCapsConfig {
    /// `[height, width, channels]`; channels must be 3.
    pub input_shape: [usize; 3],
    pub initial_conv: ConvSpec,
    pub layer_specs: Vec<ConvCapsuleSpec>,
    pub output_atoms: usize,
    /// 1 selects the binary single-capsule head.
    pub num_classes: usize,
    pub recon_weight: f64,
    pub recon_enabled: bool,
    pub recon: ReconSpec,
}

impl Default for DCapsConfig {
    fn default() -> Self {
        DCapsConfig::desk()
    }
}

impl DCapsConfig {
    /// The 512x640 architecture.
    pub fn full_size() -> Self {
        DCapsConfig::with_input(512, 640)
    }

    /// Same stack at 64x80.
    pub fn desk() -> Self {
        DCapsConfig::with_input(64, 80)
    }

    /// Default stack: 5x5/2 conv with 16 channels, primary capsules with 2
    /// types, then capsule layers of 4, 4, 8, 8, 1 types, all 16 atoms.
    pub fn with_input(height: usize, width: usize) -> Self {
        let atoms = 16;
        let mut layer_specs = Vec::new();
        let mut in_types = 1;
        for (i, out_types) in [2, 4, 4, 8, 8, 1].into_iter().enumerate() {
            layer_specs.push(ConvCapsuleSpec {
                kernel: 5,
                stride: 2,
                in_types,
                out_types,
                in_atoms: atoms,
                out_atoms: atoms,
                routing_iterations: if i == 0 { 1 } else { 3 },
            });
            in_types = out_types;
        }
        DCapsConfig {
            input_shape: [height, width, 3],
            initial_conv: ConvSpec {
                kernel: 5,
                stride: 2,
                channels: atoms,
            },
            layer_specs,
            output_atoms: atoms,
            num_classes: 1,
            recon_weight: 0.1,
            recon_enabled: true,
            recon: ReconSpec {
                grid_channels: 1,
                hidden_channels: 16,
                kernel: 4,
            },
        }
    }

    /// An 8x10 network with two small capsule layers, for checks that
    /// need exhaustive parameter sweeps.
    pub fn tiny() -> DCapsConfig {
        let mut c = DCapsConfig::with_input(8, 10);
        c.initial_conv.channels = 4;
        c.layer_specs = vec![
            ConvCapsuleSpec {
                kernel: 3,
                stride: 2,
                in_types: 1,
                out_types: 2,
                in_atoms: 4,
                out_atoms: 4,
                routing_iterations: 1,
            },
            ConvCapsuleSpec {
                kernel: 3,
                stride: 2,
                in_types: 2,
                out_types: 1,
                in_atoms: 4,
                out_atoms: 4,
                routing_iterations: 3,
            },
        ];
        c.output_atoms = 4;
        c.recon.hidden_channels = 2;
        c
    }

    /// Output capsule types: `max(num_classes, 1)`.
    pub fn heads(&self) -> usize {
        self.num_classes.max(1)
    }

    /// Set the routing depth of every layer that routes among several
    /// child types; single-type layers keep one iteration.
    pub fn set_routing(&mut self, iterations: usize) {
        for spec in &mut self.layer_specs {
            if spec.in_types > 1 {
                spec.routing_iterations = iterations;
            }
        }
    }

    /// Low-resolution decoder grid extents.
    pub fn recon_grid(&self) -> (usize, usize) {
        (self.input_shape[0].div_ceil(4), self.input_shape[1].div_ceil(4))
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w, c] = self.input_shape;
        if h == 0 || w == 0 || c != 3 {
            return Err(Error::config(format!(
                "input shape must be HxWx3 with H, W >= 1, got {:?}",
                self.input_shape
            )));
        }
        let ic = self.initial_conv;
        if ic.kernel == 0 || ic.stride == 0 || ic.channels == 0 {
            return Err(Error::config(format!("initial conv extents must be >= 1: {ic:?}")));
        }
        if self.layer_specs.is_empty() {
            return Err(Error::config("at least one capsule layer is required"));
        }
        let (mut types, mut atoms) = (1, ic.channels);
        for (i, spec) in self.layer_specs.iter().enumerate() {
            spec.validate()
                .map_err(|e| Error::config(format!("layer {i}: {e}")))?;
            if spec.in_types != types || spec.in_atoms != atoms {
                return Err(Error::config(format!(
                    "layer {i} expects {} types x {} atoms but receives {types} x {atoms}",
                    spec.in_types, spec.in_atoms
                )));
            }
            types = spec.out_types;
            atoms = spec.out_atoms;
        }
        if types != self.heads() || atoms != self.output_atoms {
            return Err(Error::config(format!(
                "layer {} outputs {types} types x {atoms} atoms, head needs {} x {}",
                self.layer_specs.len() - 1,
                self.heads(),
                self.output_atoms
            )));
        }
        let r = self.recon;
        if r.grid_channels == 0 || r.hidden_channels == 0 || r.kernel < 2 {
            return Err(Error::config(format!(
                "decoder needs channels >= 1 and kernel >= 2: {r:?}"
            )));
        }
        if !self.recon_weight.is_finite() || self.recon_weight < 0.0 {
            return Err(Error::config(format!(
                "recon weight must be finite and >= 0, got {}",
                self.recon_weight
            )));
        }
        Ok(())
    }
}

/// Scores and optional reconstruction for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassOutput<T> {
    pub class_vectors: Vec<Vec<T>>,
    pub class_scores: Vec<T>,
    pub reconstruction: Option<Tensor<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub confidence: f64,
}

/// Binary: class 1 iff score >= 0.5, confidence `2 |s - 0.5|`.
/// Multi-class: argmax, confidence `(max - second) / max`.
pub fn predict_scores(scores: &[f64]) -> Prediction {
    if scores.len() == 1 {
        let s = scores[0];
        return Prediction {
            class: usize::from(s >= 0.5),
            confidence: (2.0 * (s - 0.5).abs()).min(1.0),
        };
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    let max = scores[best];
    let second = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    Prediction {
        class: best,
        confidence: ((max - second) / max.max(BCE_EPS)).clamp(0.0, 1.0),
    }
}

pub fn predict<T: Real>(out: &ClassOutput<T>) -> Prediction {
    let scores: Vec<f64> = out.class_scores.iter().map(|s| s.as_f64()).collect();
    predict_scores(&scores)
}

/// Tape handles produced by one forward pass over a batch.
pub struct Outputs<'t, T: Real> {
    /// `[batch, heads, atoms]`
    pub class_vectors: Var<'t, T>,
    /// `[batch, heads]`
    pub scores: Var<'t, T>,
    /// `[batch, H, W, 3]`
    pub reconstruction: Option<Var<'t, T>>,
}

pub struct LossTerms<'t, T: Real> {
    pub total: Var<'t, T>,
    pub bce: Var<'t, T>,
    pub recon: Option<Var<'t, T>>,
}

#[derive(Clone, Debug)]
struct Layout {
    conv: (usize, usize),
    caps: Vec<(usize, usize)>,
    dense: (usize, usize),
    deconv1: (usize, usize),
    deconv2: (usize, usize),
    out: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct DCaps<T> {
    config: DCapsConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Real> DCaps<T> {
    /// Build with seeded initialisation. Convolution and dense weights are
    /// Glorot-uniform; capsule transforms are scaled so the first routing
    /// pass produces parent vectors of roughly unit length. Biases are zero.
    pub fn build(config: DCapsConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut uniform = |shape: &[usize], bound: f64| -> Tensor<T> {
            let dist = Uniform::new_inclusive(-bound, bound);
            Tensor::from_fn(shape, |_| T::lit(dist.sample(&mut rng)))
        };
        let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();

        let ic = config.initial_conv;
        let kshape = [ic.kernel, ic.kernel, 3, ic.channels];
        let kk = ic.kernel * ic.kernel;
        let conv = (
            params.add("conv1.kernel", uniform(&kshape, glorot(kk * 3, kk * ic.channels)))?,
            params.add("conv1.bias", Tensor::zeros(&[ic.channels]))?,
        );

        let mut caps = Vec::new();
        let (mut gh, mut gw) = (
            config.input_shape[0].div_ceil(ic.stride),
            config.input_shape[1].div_ceil(ic.stride),
        );
        for (i, spec) in config.layer_specs.iter().enumerate() {
            // Squash maps small lengths to roughly their square, so the
            // transforms must amplify: with uniform couplings the parent
            // length is about TRANSFORM_GAIN times the child length.
            let live = mean_taps(gh, spec.kernel, spec.stride) * mean_taps(gw, spec.kernel, spec.stride);
            let std = TRANSFORM_GAIN * spec.out_types as f64
                / (spec.in_types as f64 * live * spec.out_atoms as f64).sqrt();
            (gh, gw) = spec.output_extent(gh, gw);
            let t = uniform(&spec.transform_shape(), std * 3f64.sqrt());
            let bias = Tensor::zeros(&spec.bias_shape());
            caps.push((
                params.add(format!("caps{}.transform", i + 1), t)?,
                params.add(format!("caps{}.bias", i + 1), bias)?,
            ));
        }

        let (gh, gw) = config.recon_grid();
        let r = config.recon;
        let code = config.heads() * config.output_atoms;
        let grid = gh * gw * r.grid_channels;
        let kk = r.kernel * r.kernel;
        let dense = (
            params.add("recon.dense.weight", uniform(&[code, grid], glorot(code, grid)))?,
            params.add("recon.dense.bias", Tensor::zeros(&[grid]))?,
        );
        let d1 = [r.kernel, r.kernel, r.grid_channels, r.hidden_channels];
        let deconv1 = (
            params.add(
                "recon.deconv1.kernel",
                uniform(&d1, glorot(kk * r.grid_channels, kk * r.hidden_channels)),
            )?,
            params.add("recon.deconv1.bias", Tensor::zeros(&[r.hidden_channels]))?,
        );
        let d2 = [r.kernel, r.kernel, r.hidden_channels, r.hidden_channels];
        let deconv2 = (
            params.add(
                "recon.deconv2.kernel",
                uniform(&d2, glorot(kk * r.hidden_channels, kk * r.hidden_channels)),
            )?,
            params.add("recon.deconv2.bias", Tensor::zeros(&[r.hidden_channels]))?,
        );
        let out = (
            params.add(
                "recon.out.kernel",
                uniform(&[1, 1, r.hidden_channels, 3], glorot(r.hidden_channels, 3)),
            )?,
            params.add("recon.out.bias", Tensor::zeros(&[3]))?,
        );

        Ok(DCaps {
            config,
            params,
            layout: Layout {
                conv,
                caps,
                dense,
                deconv1,
                deconv2,
                out,
            },
        })
    }

    pub fn config(&self) -> &DCapsConfig {
        &self.config
    }

    /// The loss weight is the one config entry that does not shape the
    /// parameters.
    pub fn set_recon_weight(&mut self, weight: f64) {
        self.config.recon_weight = weight;
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        count_parameters(self.params.as_slice())
    }

    /// Same architecture with parameters cast to another precision.
    pub fn cast<U: Real>(&self) -> DCaps<U> {
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            params
                .add(p.name.clone(), p.value.cast())
                .expect("names are already unique");
        }
        DCaps {
            config: self.config.clone(),
            params,
            layout: self.layout.clone(),
        }
    }

    /// Forward pass over `[batch, H, W, 3]` images with parameters bound
    /// to `p` (from [`ParamStore::bind`] or constants).
    pub fn forward_vars<'t>(
        &self,
        p: &[Var<'t, T>],
        images: Var<'t, T>,
        with_recon: bool,
    ) -> Result<Outputs<'t, T>> {
        let shape = images.shape();
        let [h, w, c] = self.config.input_shape;
        if shape.len() != 4 || shape[1..] != [h, w, c] {
            return Err(Error::shape(format!(
                "batch has shape {shape:?}, network expects [batch, {h}, {w}, {c}]"
            )));
        }
        let b = shape[0];
        let ic = self.config.initial_conv;
        let l = &self.layout;
        let features = images
            .conv2d(p[l.conv.0], Some(p[l.conv.1]), ic.stride, Padding::Same)?
            .relu();
        let fs = features.shape();
        let mut grid = features.reshape(&[b, fs[1], fs[2], 1, ic.channels])?;
        for (spec, &(t, bias)) in self.config.layer_specs.iter().zip(&l.caps) {
            grid = conv_capsule_forward(grid, spec, p[t], p[bias])?;
        }
        let class_vectors = capsule_average_pool_var(grid)?;
        let heads = self.config.heads();
        let scores = class_vectors.l2norm_last()?.reshape(&[b, heads])?;
        let reconstruction = if with_recon {
            Some(self.reconstruct_vars(p, class_vectors)?)
        } else {
            None
        };
        Ok(Outputs {
            class_vectors,
            scores,
            reconstruction,
        })
    }

    /// Decoder: `[batch, heads, atoms]` (or flattened) to `[batch, H, W, 3]`.
    pub fn reconstruct_vars<'t>(&self, p: &[Var<'t, T>], vectors: Var<'t, T>) -> Result<Var<'t, T>> {
        let code = self.config.heads() * self.config.output_atoms;
        let shape = vectors.shape();
        let b = shape.first().copied().unwrap_or(0);
        if b == 0 || shape.iter().product::<usize>() != b * code {
            return Err(Error::shape(format!(
                "decoder expects [batch, {code}] class vectors, got {shape:?}"
            )));
        }
        let l = &self.layout;
        let r = self.config.recon;
        let (gh, gw) = self.config.recon_grid();
        let [h, w, _] = self.config.input_shape;
        let x = vectors
            .reshape(&[b, code])?
            .matmul(p[l.dense.0])?
            .add(p[l.dense.1])?
            .relu()
            .reshape(&[b, gh, gw, r.grid_channels])?
            .conv_transpose2d(p[l.deconv1.0], Some(p[l.deconv1.1]), 2)?
            .relu()
            .conv_transpose2d(p[l.deconv2.0], Some(p[l.deconv2.1]), 2)?
            .relu();
        let (top, left) = ((4 * gh - h) / 2, (4 * gw - w) / 2);
        Ok(x.crop(top, left, h, w)?
            .conv2d(p[l.out.0], Some(p[l.out.1]), 1, Padding::Same)?
            .sigmoid())
    }

    /// Cross-entropy on clamped scores plus `recon_weight` times the
    /// per-pixel reconstruction MSE. Labels are class indices; in binary
    /// mode 1 is the positive class.
    pub fn loss_vars<'t>(
        &self,
        out: &Outputs<'t, T>,
        labels: &[usize],
        images: Var<'t, T>,
    ) -> Result<LossTerms<'t, T>> {
        let heads = self.config.heads();
        let shape = out.scores.shape();
        if shape != [labels.len(), heads] {
            return Err(Error::shape(format!(
                "{} labels for scores of shape {shape:?}",
                labels.len()
            )));
        }
        let mut target = Vec::with_capacity(labels.len() * heads);
        for &y in labels {
            let valid = if heads == 1 { y <= 1 } else { y < heads };
            if !valid {
                return Err(Error::shape(format!("label {y} out of range for {heads} heads")));
            }
            if heads == 1 {
                target.push(y as f64);
            } else {
                target.extend((0..heads).map(|c| if c == y { 1.0 } else { 0.0 }));
            }
        }
        let tape = out.scores.tape();
        let y = tape.constant(Tensor::from_f64(vec![labels.len(), heads], &target)?);
        let not_y = tape.constant(Tensor::from_f64(
            vec![labels.len(), heads],
            &target.iter().map(|t| 1.0 - t).collect::<Vec<_>>(),
        )?);
        let p = out.scores.clamp(BCE_EPS, 1.0 - BCE_EPS);
        let pos = y.mul(p.ln())?;
        let neg = not_y.mul(p.neg().add_scalar(1.0).ln())?;
        let bce = pos.add(neg)?.mean().neg();
        check_finite(bce, "binary cross-entropy")?;

        let recon = match (self.config.recon_enabled, out.reconstruction) {
            (true, Some(r)) => {
                let mse = r.sub(images)?.square().mean();
                check_finite(mse, "reconstruction MSE")?;
                Some(mse)
            }
            (true, None) => {
                return Err(Error::config("reconstruction enabled but forward ran without it"))
            }
            (false, _) => None,
        };
        let total = match recon {
            Some(mse) if self.config.recon_weight > 0.0 => {
                bce.add(mse.scale(self.config.recon_weight))?
            }
            _ => bce,
        };
        check_finite(total, "total loss")?;
        Ok(LossTerms { total, bce, recon })
    }

    /// Inference on a `[batch, H, W, 3]` tensor; reconstructions are
    /// included when the decoder is enabled.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Vec<ClassOutput<T>>> {
        let tape = Tape::new();
        let p = self.constants(&tape);
        let out = self.forward_vars(&p, tape.constant(batch.clone()), self.config.recon_enabled)?;
        let vectors = out.class_vectors.value();
        let scores = out.scores.value();
        let recon = out.reconstruction.map(|r| r.value());
        let (heads, atoms) = (self.config.heads(), self.config.output_atoms);
        (0..batch.shape()[0])
            .map(|i| {
                let v = &vectors.data()[i * heads * atoms..(i + 1) * heads * atoms];
                Ok(ClassOutput {
                    class_vectors: v.chunks(atoms).map(<[T]>::to_vec).collect(),
                    class_scores: scores.data()[i * heads..(i + 1) * heads].to_vec(),
                    reconstruction: match &recon {
                        Some(r) => Some(r.index_first(i)?),
                        None => None,
                    },
                })
            })
            .collect()
    }

    /// Class scores of `[H, W, 3]` images, `batch` at a time.
    pub fn scores(&self, images: &[&Tensor<T>], batch: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch.max(1)) {
            let tape = Tape::new();
            let p = self.constants(&tape);
            let x = tape.constant(stack_refs(chunk)?);
            let s = self.forward_vars(&p, x, false)?.scores.value();
            out.extend(s.data().chunks(self.config.heads()).map(|c| c.iter().map(|v| v.as_f64()).collect()));
        }
        Ok(out)
    }

    /// Mean per-pixel squared reconstruction error over `images`.
    pub fn recon_mse(&self, images: &[&Tensor<T>], batch: usize) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in images.chunks(batch.max(1)) {
            let tape = Tape::new();
            let p = self.constants(&tape);
            let x = tape.constant(stack_refs(chunk)?);
            let r = self.forward_vars(&p, x, true)?.reconstruction.expect("requested");
            let err = r.sub(x)?.square().sum().value().item().as_f64();
            total += err;
            count += r.value().numel();
        }
        if count == 0 {
            return Err(Error::shape("no images to reconstruct"));
        }
        Ok(total / count as f64)
    }

    /// Decode `[batch, heads * atoms]` class vectors to images.
    pub fn reconstruct(&self, class_vectors: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.constants(&tape);
        let r = self.reconstruct_vars(&p, tape.constant(class_vectors.clone()))?;
        Ok((*r.value()).clone())
    }

    /// Loss of one image's output against its label and `[H, W, 3]` pixels.
    pub fn loss(&self, out: &ClassOutput<T>, label: usize, image: &Tensor<T>) -> Result<f64> {
        let tape = Tape::new();
        let heads = self.config.heads();
        let scores = tape.constant(Tensor::new(vec![1, heads], out.class_scores.clone())?);
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let reconstruction = match &out.reconstruction {
            Some(r) => Some(tape.constant(r.clone().reshape(&shape)?)),
            None => None,
        };
        let outputs = Outputs {
            class_vectors: scores,
            scores,
            reconstruction,
        };
        let terms = self.loss_vars(&outputs, &[label], tape.constant(image.clone().reshape(&shape)?))?;
        Ok(terms.total.value().item().as_f64())
    }

    fn constants<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.params
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect()
    }
}

/// Stack `[H, W, 3]` images into a batch.
pub fn stack_refs<T: Real>(images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::shape("cannot stack zero images"))?;
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::shape(format!(
                "image shapes differ: {:?} vs {:?}",
                img.shape(),
                first.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

const TRANSFORM_GAIN: f64 = 2.0;

/// Average number of in-bounds kernel taps per output position along one
/// axis under same padding.
fn mean_taps(n: usize, k: usize, stride: usize) -> f64 {
    let out = n.div_ceil(stride);
    let pad = ((out - 1) * stride + k).saturating_sub(n) / 2;
    let total: usize = (0..out)
        .map(|o| {
            (0..k)
                .filter(|&t| (o * stride + t).checked_sub(pad).is_some_and(|y| y < n))
                .count()
        })
        .sum();
    total as f64 / out as f64
}

fn check_finite<T: Real>(v: Var<'_, T>, term: &str) -> Result<()> {
    let x = v.value().item();
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{term} is {x}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_size_budget() {
        let net = DCaps::<f32>::build(DCapsConfig::full_size(), 0).unwrap();
        let n = net.num_parameters();
        assert!((1_000_000..=1_600_000).contains(&n), "{n}");
    }

    #[test]
    fn chaining_errors_name_the_layer() {
        let mut c = DCapsConfig::desk();
        c.layer_specs[3].in_types = 5;
        let err = DCaps::<f32>::build(c, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("layer 3"), "{err}");
    }

    #[test]
    fn head_must_match_classes() {
        let mut c = DCapsConfig::desk();
        c.num_classes = 3;
        assert!(DCaps::<f32>::build(c, 0).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = DCaps::<f32>::build(DCapsConfig::tiny(), 7).unwrap();
        let b = DCaps::<f32>::build(DCapsConfig::tiny(), 7).unwrap();
        let c = DCaps::<f32>::build(DCapsConfig::tiny(), 8).unwrap();
        for (x, y) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(x.value, y.value);
        }
        assert_ne!(a.params().get(0).value, c.params().get(0).value);
    }

    #[test]
    fn scores_are_sub_unit_and_recon_matches_input_shape() {
        let net = DCaps::<f64>::build(DCapsConfig::tiny(), 1).unwrap();
        let x = Tensor::from_fn(&[2, 8, 10, 3], |i| ((i * 37) % 11) as f64 / 10.0);
        let outs = net.forward(&x).unwrap();
        assert_eq!(outs.len(), 2);
        for o in &outs {
            assert!(o.class_scores.iter().all(|&s| (0.0..1.0).contains(&s)));
            assert_eq!(o.reconstruction.as_ref().unwrap().shape(), &[8, 10, 3]);
        }
    }

    #[test]
    fn zero_input_and_zero_final_layer_give_zero_score() {
        let mut net = DCaps::<f64>::build(DCapsConfig::tiny(), 1).unwrap();
        let idx = net.layout.caps[1].0;
        net.params_mut().get_mut(idx).value.fill(0.0);
        let outs = net.forward(&Tensor::zeros(&[1, 8, 10, 3])).unwrap();
        assert_eq!(outs[0].class_scores, vec![0.0]);
    }

    #[test]
    fn zero_code_reconstructs_sigmoid_of_bias() {
        let mut net = DCaps::<f64>::build(DCapsConfig::tiny(), 1).unwrap();
        let bias = net.layout.out.1;
        net.params_mut().get_mut(bias).value = Tensor::from_f64(vec![3], &[0.0, 1.0, -2.0]).unwrap();
        let img = net.reconstruct(&Tensor::zeros(&[1, 4])).unwrap();
        assert_eq!(img.shape(), &[1, 8, 10, 3]);
        for px in img.data().chunks(3) {
            assert_eq!(px[0], 0.5);
            assert!((px[1] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
            assert!((px[2] - 1.0 / (1.0 + 2.0f64.exp())).abs() < 1e-15);
        }
    }

    #[test]
    fn bce_examples() {
        let mut c = DCapsConfig::tiny();
        c.recon_weight = 0.0;
        c.recon_enabled = false;
        let net = DCaps::<f64>::build(c, 0).unwrap();
        let img = Tensor::zeros(&[8, 10, 3]);
        let out = |s: f64| ClassOutput {
            class_vectors: vec![vec![s, 0.0, 0.0, 0.0]],
            class_scores: vec![s],
            reconstruction: None,
        };
        let l = net.loss(&out(0.5), 1, &img).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let l = net.loss(&out(0.9), 1, &img).unwrap();
        assert!((l - 0.10536051565782628).abs() < 1e-12);
        // A score of exactly zero is clamped rather than producing infinity.
        assert!(net.loss(&out(0.0), 1, &img).unwrap().is_finite());
    }

    #[test]
    fn perfect_reconstruction_adds_nothing() {
        let net = DCaps::<f64>::build(DCapsConfig::tiny(), 0).unwrap();
        let img = Tensor::from_fn(&[8, 10, 3], |i| (i % 5) as f64 / 5.0);
        let out = ClassOutput {
            class_vectors: vec![vec![0.5, 0.0, 0.0, 0.0]],
            class_scores: vec![0.5],
            reconstruction: Some(img.clone()),
        };
        let l = net.loss(&out, 0, &img).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn predict_examples() {
        let p = predict_scores(&[0.5]);
        assert_eq!((p.class, p.confidence), (1, 0.0));
        let p = predict_scores(&[0.0]);
        assert_eq!((p.class, p.confidence), (0, 1.0));
        let p = predict_scores(&[0.9, 0.3]);
        assert_eq!(p.class, 0);
        assert!((p.confidence - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn config_round_trips() {
        let mut c = DCapsConfig::desk();
        c.recon_weight = 0.1 + 0.2;
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<DCapsConfig>(&json).unwrap(), c);
        let toml_text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<DCapsConfig>(&toml_text).unwrap(), c);
    }
}
