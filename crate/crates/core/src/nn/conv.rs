//! 2D convolution via im2col + matrix multiply.

use ndarray::{Array2, Array4, ArrayView2};

use super::{Batch, ParamAlloc};

/// Convolution layer descriptor. Weights are `[out_c, in_c * k * k]` and the
/// bias is `[out_c]`, both stored in the network's flat parameter vector.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    w_off: usize,
    b_off: usize,
}

pub struct ConvCache {
    cols: Array2<f64>,
    in_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(
        alloc: &mut ParamAlloc,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w_off = alloc.alloc(out_c * in_c * k * k);
        let b_off = alloc.alloc(out_c);
        Self {
            in_c,
            out_c,
            k,
            stride,
            pad,
            w_off,
            b_off,
        }
    }

    pub fn init(&self, params: &mut [f64], rng: &mut impl rand::Rng) {
        let fan_in = self.in_c * self.k * self.k;
        super::kaiming_uniform(
            rng,
            &mut params[self.w_off..self.w_off + self.out_c * fan_in],
            fan_in,
        );
        for b in &mut params[self.b_off..self.b_off + self.out_c] {
            *b = 0.0;
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn weights<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        let fan_in = self.in_c * self.k * self.k;
        ArrayView2::from_shape(
            (self.out_c, fan_in),
            &params[self.w_off..self.w_off + self.out_c * fan_in],
        )
        .expect("conv weight slab")
    }

    pub fn forward(&self, params: &[f64], x: &Batch) -> (Batch, ConvCache) {
        let (n, c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_c);
        let (ho, wo) = self.out_hw(h, w);
        let cols = self.im2col(x, ho, wo);
        let y2 = self.weights(params).dot(&cols); // [out_c, n*ho*wo]
        let bias = &params[self.b_off..self.b_off + self.out_c];
        let mut y = Array4::zeros((n, self.out_c, ho, wo));
        for co in 0..self.out_c {
            let row = y2.row(co);
            let b = bias[co];
            for ni in 0..n {
                for oh in 0..ho {
                    for ow in 0..wo {
                        y[[ni, co, oh, ow]] = row[(ni * ho + oh) * wo + ow] + b;
                    }
                }
            }
        }
        (
            y,
            ConvCache {
                cols,
                in_dim: (n, c, h, w),
                out_hw: (ho, wo),
            },
        )
    }

    /// Accumulates weight/bias gradients into `grads` and returns the input
    /// gradient.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ConvCache,
        gy: &Batch,
        grads: &mut [f64],
    ) -> Batch {
        let (n, _, h, w) = cache.in_dim;
        let (ho, wo) = cache.out_hw;
        let fan_in = self.in_c * self.k * self.k;

        // [out_c, n*ho*wo] layout matching the forward columns.
        let mut gy2 = Array2::zeros((self.out_c, n * ho * wo));
        for ni in 0..n {
            for co in 0..self.out_c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        gy2[[co, (ni * ho + oh) * wo + ow]] = gy[[ni, co, oh, ow]];
                    }
                }
            }
        }

        let gw = gy2.dot(&cache.cols.t()); // [out_c, fan_in]
        {
            let gw_slab = &mut grads[self.w_off..self.w_off + self.out_c * fan_in];
            for (dst, src) in gw_slab.iter_mut().zip(gw.iter()) {
                *dst += src;
            }
            let gb_slab = &mut grads[self.b_off..self.b_off + self.out_c];
            for (co, dst) in gb_slab.iter_mut().enumerate() {
                *dst += gy2.row(co).sum();
            }
        }

        let gcols = self.weights(params).t().dot(&gy2); // [fan_in, n*ho*wo]
        self.col2im(&gcols, n, h, w, ho, wo)
    }

    fn im2col(&self, x: &Batch, ho: usize, wo: usize) -> Array2<f64> {
        let (n, _, h, w) = x.dim();
        let fan_in = self.in_c * self.k * self.k;
        let mut cols = Array2::zeros((fan_in, n * ho * wo));
        for ci in 0..self.in_c {
            for kr in 0..self.k {
                for kc in 0..self.k {
                    let row = (ci * self.k + kr) * self.k + kc;
                    for ni in 0..n {
                        for oh in 0..ho {
                            let ih = (oh * self.stride + kr) as isize - self.pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for ow in 0..wo {
                                let iw = (ow * self.stride + kc) as isize - self.pad as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                cols[[row, (ni * ho + oh) * wo + ow]] =
                                    x[[ni, ci, ih as usize, iw as usize]];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(
        &self,
        gcols: &Array2<f64>,
        n: usize,
        h: usize,
        w: usize,
        ho: usize,
        wo: usize,
    ) -> Batch {
        let mut gx = Array4::zeros((n, self.in_c, h, w));
        for ci in 0..self.in_c {
            for kr in 0..self.k {
                for kc in 0..self.k {
                    let row = (ci * self.k + kr) * self.k + kc;
                    for ni in 0..n {
                        for oh in 0..ho {
                            let ih = (oh * self.stride + kr) as isize - self.pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for ow in 0..wo {
                                let iw = (ow * self.stride + kc) as isize - self.pad as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                gx[[ni, ci, ih as usize, iw as usize]] +=
                                    gcols[[row, (ni * ho + oh) * wo + ow]];
                            }
                        }
                    }
                }
            }
        }
        gx
    }
}
