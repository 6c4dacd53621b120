use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::{init_uniform, Parameters};
use crate::error::{Error, Result};

/// Fully connected layer `y = W x + b`, with `W` stored as (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let mut draw = init_uniform(rng, input);
        let w = Array2::from_shape_simple_fn((output, input), &mut draw);
        let b = Array1::from_shape_simple_fn(output, &mut draw);
        Self { w, b }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { w: Array2::zeros((output, input)), b: Array1::zeros(output) }
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }

    fn check(&self, got: usize) -> Result<()> {
        if got != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "dense layer expects {} inputs, got {got}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Batched forward; rows of `x` are samples.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check(x.ncols())?;
        Ok(x.dot(&self.w.t()) + &self.b)
    }

    pub fn forward_one(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check(x.len())?;
        Ok(self.w.dot(&x) + &self.b)
    }

    /// Returns (parameter gradients, input gradient) for upstream gradient `dy`.
    pub fn backward(&self, x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>) -> (Dense, Array2<f64>) {
        let grad = Dense { w: dy.t().dot(&x), b: dy.sum_axis(Axis(0)) };
        (grad, dy.dot(&self.w))
    }

    /// Single-sample backward; `grad` is accumulated into.
    pub fn backward_one(&self, x: ArrayView1<'_, f64>, dy: ArrayView1<'_, f64>, grad: &mut Dense) -> Array1<f64> {
        for (i, &d) in dy.iter().enumerate() {
            if d != 0.0 {
                grad.w.row_mut(i).scaled_add(d, &x);
            }
        }
        grad.b += &dy;
        self.w.t().dot(&dy)
    }
}

impl Parameters for Dense {
    fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![("w".into(), self.w.view().into_dyn()), ("b".into(), self.b.view().into_dyn())]
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        vec![self.w.view_mut().into_dyn(), self.b.view_mut().into_dyn()]
    }
}
