//! Small numerical kernel: layers with explicit backward passes, Adam, and a
//! finite-difference gradient checker.
//!
//! There is no tape. Every layer exposes `forward` plus a `backward` that takes
//! whatever the forward pass cached and returns parameter gradients (as a value
//! of the layer's own type) together with the input gradient.

mod activation;
mod adam;
mod conv;
mod dense;
mod gradcheck;
mod lstm;
mod mlp;

pub use activation::{
    bce_with_logits, bce_with_logits_grad, huber, huber_grad, relu, relu_backward, sigmoid, softmax,
};
pub use adam::{Adam, AdamConfig};
pub use conv::{Conv2d, ConvCache};
pub use dense::Dense;
pub use gradcheck::{grad_check, GradCheck};
pub use lstm::{LstmCache, LstmCell};
pub use mlp::{Mlp, MlpCache};

use ndarray::{ArrayViewD, ArrayViewMutD};

use crate::error::{Error, Result};

/// A bundle of trainable tensors with stable names and order.
///
/// Gradients are represented by a second value of the same type, so anything
/// that walks parameters (Adam, checkpoints, gradient checks) only needs this
/// trait.
pub trait Parameters {
    fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)>;
    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>>;

    fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t) in self.named_tensors() {
            out.extend(t.iter().copied());
        }
        out
    }

    fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.num_params();
        if values.len() != expected {
            return Err(Error::ShapeMismatch(format!("{} values for {expected} parameters", values.len())));
        }
        let mut off = 0;
        for mut t in self.tensors_mut() {
            for (dst, src) in t.iter_mut().zip(&values[off..]) {
                *dst = *src;
            }
            off += t.len();
        }
        Ok(())
    }

    fn fill(&mut self, value: f64) {
        for mut t in self.tensors_mut() {
            t.fill(value);
        }
    }

    fn scale(&mut self, alpha: f64) {
        for mut t in self.tensors_mut() {
            t.mapv_inplace(|x| x * alpha);
        }
    }

    /// `self += alpha * other`; both must have identical structure.
    fn add_scaled(&mut self, other: &Self, alpha: f64)
    where
        Self: Sized,
    {
        let src = other.named_tensors();
        for (mut dst, (_, s)) in self.tensors_mut().into_iter().zip(src) {
            dst.zip_mut_with(&s, |d, s| *d += alpha * s);
        }
    }

    fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// A structurally identical value filled with zeros.
    fn zeros_like(&self) -> Self
    where
        Self: Sized + Clone,
    {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }
}

/// Prefix every tensor name of a child with `prefix.`.
pub fn prefixed<'a>(prefix: &str, tensors: Vec<(String, ArrayViewD<'a, f64>)>) -> Vec<(String, ArrayViewD<'a, f64>)> {
    tensors.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

/// Sum of per-item gradients, accumulated in index order.
pub fn sum_grads<P: Parameters + Clone>(grads: Vec<P>) -> Option<P> {
    let mut it = grads.into_iter();
    let mut acc = it.next()?;
    for g in it {
        acc.add_scaled(&g, 1.0);
    }
    Some(acc)
}

/// Uniform draw in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub(crate) fn init_uniform<R: rand::Rng + ?Sized>(rng: &mut R, fan_in: usize) -> impl FnMut() -> f64 + '_ {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    move || rng.random_range(-bound..=bound)
}
