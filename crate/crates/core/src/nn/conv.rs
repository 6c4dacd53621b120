use ndarray::{Array1, Array2, Array3, ArrayView3, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::{init_uniform, Parameters};
use crate::error::{Error, Result};

/// 2D cross-correlation with "same" zero padding followed by stride
/// subsampling, so each spatial side becomes `ceil(n / stride)`.
///
/// Kernels are stored flattened as (out_channels, in_channels * k * k).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// What the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    input_dims: (usize, usize, usize),
    output_dims: (usize, usize),
}

fn out_and_pad(n: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = n.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(n);
    (out, total / 2)
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let mut draw = init_uniform(rng, fan_in);
        let w = Array2::from_shape_simple_fn((out_channels, fan_in), &mut draw);
        let b = Array1::from_shape_simple_fn(out_channels, &mut draw);
        Self { w, b, in_channels, kernel, stride }
    }

    pub fn out_channels(&self) -> usize {
        self.w.nrows()
    }

    /// Spatial output size for an input side of `n`.
    pub fn output_size(&self, n: usize) -> usize {
        n.div_ceil(self.stride)
    }

    fn im2col(&self, img: ArrayView3<'_, f64>) -> (Array2<f64>, (usize, usize)) {
        let (c, h, w) = img.dim();
        let k = self.kernel;
        let (ho, pad_y) = out_and_pad(h, k, self.stride);
        let (wo, pad_x) = out_and_pad(w, k, self.stride);
        let mut cols = Array2::zeros((c * k * k, ho * wo));
        for ch in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ch * k + ky) * k + kx;
                    let mut dst = cols.row_mut(row);
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - pad_y as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - pad_x as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * wo + ox] = img[[ch, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
        (cols, (ho, wo))
    }

    fn col2im(&self, dcols: &Array2<f64>, input_dims: (usize, usize, usize), out: (usize, usize)) -> Array3<f64> {
        let (c, h, w) = input_dims;
        let k = self.kernel;
        let (ho, wo) = out;
        let pad_y = out_and_pad(h, k, self.stride).1;
        let pad_x = out_and_pad(w, k, self.stride).1;
        let mut img = Array3::zeros((c, h, w));
        for ch in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let src = dcols.row((ch * k + ky) * k + kx);
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - pad_y as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - pad_x as isize;
                            if ix >= 0 && ix < w as isize {
                                img[[ch, iy as usize, ix as usize]] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        img
    }

    pub fn forward(&self, img: ArrayView3<'_, f64>) -> Result<(Array3<f64>, ConvCache)> {
        if img.dim().0 != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                img.dim().0
            )));
        }
        let (cols, (ho, wo)) = self.im2col(img);
        let mut out = self.w.dot(&cols);
        out += &self.b.view().insert_axis(Axis(1));
        let out = out.into_shape_with_order((self.out_channels(), ho, wo)).expect("conv output shape");
        Ok((out, ConvCache { cols, input_dims: img.dim(), output_dims: (ho, wo) }))
    }

    /// Returns (parameter gradients, input gradient).
    pub fn backward(&self, cache: &ConvCache, dy: ArrayView3<'_, f64>) -> (Conv2d, Array3<f64>) {
        let (ho, wo) = cache.output_dims;
        let dy2 = dy
            .to_owned()
            .into_shape_with_order((self.out_channels(), ho * wo))
            .expect("conv upstream gradient shape");
        let grad = Conv2d {
            w: dy2.dot(&cache.cols.t()),
            b: dy2.sum_axis(Axis(1)),
            in_channels: self.in_channels,
            kernel: self.kernel,
            stride: self.stride,
        };
        let dcols = self.w.t().dot(&dy2);
        let dimg = self.col2im(&dcols, cache.input_dims, cache.output_dims);
        (grad, dimg)
    }
}

impl Parameters for Conv2d {
    fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![("w".into(), self.w.view().into_dyn()), ("b".into(), self.b.view().into_dyn())]
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        vec![self.w.view_mut().into_dyn(), self.b.view_mut().into_dyn()]
    }
}
