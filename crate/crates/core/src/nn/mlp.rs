use ndarray::{Array2, ArrayView2, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use super::{prefixed, Dense, Parameters};
use crate::error::{Error, Result};

/// Stack of dense layers with ReLU between them and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Input of every layer, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    /// `sizes` lists the widths from input to output, e.g. `[72, 64, 64, 1]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output widths");
        Self { layers: sizes.windows(2).map(|w| Dense::new(w[0], w[1], rng)).collect() }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output widths");
        Self { layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect() }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    /// Zero the output layer so every input maps to the same output.
    pub fn zero_output_layer(&mut self) {
        self.layers.last_mut().expect("non-empty").fill(0.0);
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, MlpCache)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!("MLP expects {} inputs, got {}", self.input_dim(), x.ncols())));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = layer.forward(h.view())?;
            if i < last {
                out.mapv_inplace(super::relu);
            }
            inputs.push(h);
            h = out;
        }
        Ok((h, MlpCache { inputs }))
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x)?.0)
    }

    /// Returns (parameter gradients, input gradient).
    pub fn backward(&self, cache: &MlpCache, dy: ArrayView2<'_, f64>) -> (Mlp, Array2<f64>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut d = dy.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (g, dx) = layer.backward(cache.inputs[i].view(), d.view());
            grads.push(g);
            d = dx;
            if i > 0 {
                // inputs[i] = relu(output of layer i-1)
                d.zip_mut_with(&cache.inputs[i], |g, &out| *g = super::relu_backward(out, *g));
            }
        }
        grads.reverse();
        (Mlp { layers: grads }, d)
    }
}

impl Parameters for Mlp {
    fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        self.layers.iter().enumerate().flat_map(|(i, l)| prefixed(&format!("l{i}"), l.named_tensors())).collect()
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}
