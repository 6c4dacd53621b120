use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::{init_uniform, sigmoid, Parameters};
use crate::error::{Error, Result};

/// One LSTM cell. Gate rows of `w`/`b` are ordered input, forget, cell
/// candidate, output; columns are `[x; h_prev]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Activations of one step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LstmCache {
    xh: Array1<f64>,
    i: Array1<f64>,
    f: Array1<f64>,
    g: Array1<f64>,
    o: Array1<f64>,
    c_prev: Array1<f64>,
    tanh_c: Array1<f64>,
}

impl LstmCell {
    /// Uniform init with the forget-gate bias set to +1.
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut draw = init_uniform(rng, input + hidden);
        let w = Array2::from_shape_simple_fn((4 * hidden, input + hidden), &mut draw);
        let mut b = Array1::from_shape_simple_fn(4 * hidden, &mut draw);
        b.slice_mut(s![hidden..2 * hidden]).fill(1.0);
        Self { w, b }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self { w: Array2::zeros((4 * hidden, input + hidden)), b: Array1::zeros(4 * hidden) }
    }

    pub fn hidden(&self) -> usize {
        self.b.len() / 4
    }

    pub fn input(&self) -> usize {
        self.w.ncols() - self.hidden()
    }

    pub fn step(
        &self,
        x: ArrayView1<'_, f64>,
        h_prev: ArrayView1<'_, f64>,
        c_prev: ArrayView1<'_, f64>,
    ) -> Result<(Array1<f64>, Array1<f64>, LstmCache)> {
        let hd = self.hidden();
        if x.len() != self.input() || h_prev.len() != hd || c_prev.len() != hd {
            return Err(Error::ShapeMismatch(format!(
                "lstm cell ({} -> {hd}) got x={}, h={}, c={}",
                self.input(),
                x.len(),
                h_prev.len(),
                c_prev.len()
            )));
        }
        let xh = concatenate(Axis(0), &[x, h_prev]).expect("1-d concat");
        let z = self.w.dot(&xh) + &self.b;
        let i = z.slice(s![..hd]).mapv(sigmoid);
        let f = z.slice(s![hd..2 * hd]).mapv(sigmoid);
        let g = z.slice(s![2 * hd..3 * hd]).mapv(f64::tanh);
        let o = z.slice(s![3 * hd..]).mapv(sigmoid);
        let c = &f * &c_prev + &i * &g;
        let tanh_c = c.mapv(f64::tanh);
        let h = &o * &tanh_c;
        Ok((h, c, LstmCache { xh, i, f, g, o, c_prev: c_prev.to_owned(), tanh_c }))
    }

    /// Backward through one step given gradients w.r.t. `h_t` and `c_t`.
    /// Accumulates into `grad`; returns gradients for (x_t, h_{t-1}, c_{t-1}).
    pub fn backward(
        &self,
        cache: &LstmCache,
        dh: ArrayView1<'_, f64>,
        dc: ArrayView1<'_, f64>,
        grad: &mut LstmCell,
    ) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
        let hd = self.hidden();
        let LstmCache { xh, i, f, g, o, c_prev, tanh_c } = cache;
        let dc_total = &dc + &(&dh * o * &tanh_c.mapv(|t| 1.0 - t * t));
        let mut dz = Array1::zeros(4 * hd);
        dz.slice_mut(s![..hd]).assign(&(&dc_total * g * i * &i.mapv(|v| 1.0 - v)));
        dz.slice_mut(s![hd..2 * hd]).assign(&(&dc_total * c_prev * f * &f.mapv(|v| 1.0 - v)));
        dz.slice_mut(s![2 * hd..3 * hd]).assign(&(&dc_total * i * &g.mapv(|v| 1.0 - v * v)));
        dz.slice_mut(s![3 * hd..]).assign(&(&dh * tanh_c * o * &o.mapv(|v| 1.0 - v)));
        for (r, &d) in dz.iter().enumerate() {
            if d != 0.0 {
                grad.w.row_mut(r).scaled_add(d, xh);
            }
        }
        grad.b += &dz;
        let dxh = self.w.t().dot(&dz);
        let nx = self.input();
        let dx = dxh.slice(s![..nx]).to_owned();
        let dh_prev = dxh.slice(s![nx..]).to_owned();
        let dc_prev = &dc_total * f;
        (dx, dh_prev, dc_prev)
    }
}

impl Parameters for LstmCell {
    fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![("w".into(), self.w.view().into_dyn()), ("b".into(), self.b.view().into_dyn())]
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        vec![self.w.view_mut().into_dyn(), self.b.view_mut().into_dyn()]
    }
}
