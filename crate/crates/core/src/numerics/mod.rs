//! Dense tensors, reverse-mode differentiation and the finite-difference
//! oracle used to check it.

pub mod kernels;
mod tape;
mod tensor;

pub use kernels::Padding;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

use crate::error::{Error, Result};

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    /// Register a parameter; returns its index.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Parameter<T> {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Parameter<T> {
        &mut self.params[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn as_slice(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Record every parameter on `tape` as a tracked leaf, in store order.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.params
            .iter()
            .map(|p| tape.variable(p.value.clone()))
            .collect()
    }

    /// Add the gradients of `bound` (from [`ParamStore::bind`]) into `grad`.
    pub fn accumulate(&mut self, grads: &Gradients<T>, bound: &[Var<'_, T>]) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(bound) {
            if let Some(g) = grads.get(v) {
                p.grad.add_assign(g)?;
            }
        }
        Ok(())
    }
}

/// Total number of scalar weights.
pub fn count_parameters<T: Real>(params: &[Parameter<T>]) -> usize {
    params.iter().map(|p| p.value.numel()).sum()
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for
/// every element of `at`.
pub fn finite_diff_grad<F>(mut f: F, at: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::config(format!("finite difference step must be positive, got {eps}")));
    }
    let mut x = at.clone();
    let mut grad = Tensor::zeros(at.shape());
    for i in 0..at.numel() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let plus = f(&x)?;
        x.data_mut()[i] = orig - eps;
        let minus = f(&x)?;
        x.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "function value not finite at element {i} ({plus}, {minus})"
            )));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Largest elementwise deviation, relative to the larger of the two
/// tensors' max-abs entries (floored at 1e-6 so that all-but-zero
/// gradients compare absolutely).
pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    let scale = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(1e-6);
    analytic.max_abs_diff(numeric) / scale
}
