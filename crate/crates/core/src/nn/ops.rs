//! Pointwise activations, pooling, upsampling, dense layers, dropout, and the
//! softmax cross-entropy head.

use ndarray::{Array1, Array2, Array4, ArrayView2};
use rand::Rng;

use super::{Batch, ParamAlloc};

pub fn relu_forward(x: &Batch) -> Batch {
    x.mapv(|v| if v > 0.0 { v } else { 0.0 })
}

/// `y` must be the forward output; gradient is passed where `y > 0`.
pub fn relu_backward(y: &Batch, gy: &Batch) -> Batch {
    let mut gx = gy.clone();
    gx.zip_mut_with(y, |g, &v| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
    gx
}

pub fn sigmoid_forward(x: &Batch) -> Batch {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn sigmoid_backward(y: &Batch, gy: &Batch) -> Batch {
    let mut gx = gy.clone();
    gx.zip_mut_with(y, |g, &v| *g *= v * (1.0 - v));
    gx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward(x: &Batch) -> Batch {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::zeros((n, c, 2 * h, 2 * w));
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let v = x[[ni, ci, hi, wi]];
                    y[[ni, ci, 2 * hi, 2 * wi]] = v;
                    y[[ni, ci, 2 * hi, 2 * wi + 1]] = v;
                    y[[ni, ci, 2 * hi + 1, 2 * wi]] = v;
                    y[[ni, ci, 2 * hi + 1, 2 * wi + 1]] = v;
                }
            }
        }
    }
    y
}

pub fn upsample2_backward(gy: &Batch) -> Batch {
    let (n, c, h2, w2) = gy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    gx[[ni, ci, hi, wi]] = gy[[ni, ci, 2 * hi, 2 * wi]]
                        + gy[[ni, ci, 2 * hi, 2 * wi + 1]]
                        + gy[[ni, ci, 2 * hi + 1, 2 * wi]]
                        + gy[[ni, ci, 2 * hi + 1, 2 * wi + 1]];
                }
            }
        }
    }
    gx
}

pub struct MaxPoolCache {
    argmax: Vec<(usize, usize)>, // per output cell, flattened [n][c][ho][wo]
    in_dim: (usize, usize, usize, usize),
}

/// 2x2 max pooling with stride 2.
pub fn maxpool2_forward(x: &Batch) -> (Batch, MaxPoolCache) {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Array4::zeros((n, c, ho, wo));
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for ni in 0..n {
        for ci in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_pos = (2 * oh, 2 * ow);
                    for dh in 0..2 {
                        for dw in 0..2 {
                            let (hi, wi) = (2 * oh + dh, 2 * ow + dw);
                            let v = x[[ni, ci, hi, wi]];
                            if v > best {
                                best = v;
                                best_pos = (hi, wi);
                            }
                        }
                    }
                    y[[ni, ci, oh, ow]] = best;
                    argmax.push(best_pos);
                }
            }
        }
    }
    (
        y,
        MaxPoolCache {
            argmax,
            in_dim: (n, c, h, w),
        },
    )
}

pub fn maxpool2_backward(cache: &MaxPoolCache, gy: &Batch) -> Batch {
    let (n, c, h, w) = cache.in_dim;
    let (ho, wo) = (h / 2, w / 2);
    let mut gx = Array4::zeros((n, c, h, w));
    let mut idx = 0;
    for ni in 0..n {
        for ci in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let (hi, wi) = cache.argmax[idx];
                    gx[[ni, ci, hi, wi]] += gy[[ni, ci, oh, ow]];
                    idx += 1;
                }
            }
        }
    }
    gx
}

/// Average over the spatial grid: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool_forward(x: &Batch) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let area = (h * w) as f64;
    let mut y = Array2::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let mut s = 0.0;
            for hi in 0..h {
                for wi in 0..w {
                    s += x[[ni, ci, hi, wi]];
                }
            }
            y[[ni, ci]] = s / area;
        }
    }
    y
}

pub fn global_avg_pool_backward(
    gy: &Array2<f64>,
    in_dim: (usize, usize, usize, usize),
) -> Batch {
    let (n, c, h, w) = in_dim;
    let area = (h * w) as f64;
    let mut gx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let g = gy[[ni, ci]] / area;
            for hi in 0..h {
                for wi in 0..w {
                    gx[[ni, ci, hi, wi]] = g;
                }
            }
        }
    }
    gx
}

/// Fully connected layer over flattened features, weights `[out, in]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub in_f: usize,
    pub out_f: usize,
    w_off: usize,
    b_off: usize,
}

impl Dense {
    pub fn new(alloc: &mut ParamAlloc, in_f: usize, out_f: usize) -> Self {
        let w_off = alloc.alloc(out_f * in_f);
        let b_off = alloc.alloc(out_f);
        Self {
            in_f,
            out_f,
            w_off,
            b_off,
        }
    }

    pub fn init(&self, params: &mut [f64], rng: &mut impl rand::Rng) {
        super::kaiming_uniform(
            rng,
            &mut params[self.w_off..self.w_off + self.out_f * self.in_f],
            self.in_f,
        );
        for b in &mut params[self.b_off..self.b_off + self.out_f] {
            *b = 0.0;
        }
    }

    fn weights<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape(
            (self.out_f, self.in_f),
            &params[self.w_off..self.w_off + self.out_f * self.in_f],
        )
        .expect("dense weight slab")
    }
}

pub fn dense_forward(layer: &Dense, params: &[f64], x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.dot(&layer.weights(params).t());
    let bias = &params[layer.b_off..layer.b_off + layer.out_f];
    for mut row in y.rows_mut() {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    y
}

pub fn dense_backward(
    layer: &Dense,
    params: &[f64],
    x: &Array2<f64>,
    gy: &Array2<f64>,
    grads: &mut [f64],
) -> Array2<f64> {
    let gw = gy.t().dot(x); // [out, in]
    {
        let slab = &mut grads[layer.w_off..layer.w_off + layer.out_f * layer.in_f];
        for (dst, src) in slab.iter_mut().zip(gw.iter()) {
            *dst += src;
        }
        let gb = &mut grads[layer.b_off..layer.b_off + layer.out_f];
        for (o, dst) in gb.iter_mut().enumerate() {
            *dst += gy.column(o).sum();
        }
    }
    gy.dot(&layer.weights(params))
}

pub struct DropoutCache {
    mask: Option<Array2<f64>>,
}

/// Inverted dropout on flattened features. `rng = None` disables (inference).
pub fn dropout_forward(
    x: &Array2<f64>,
    p_drop: f64,
    rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> (Array2<f64>, DropoutCache) {
    match rng {
        Some(rng) if p_drop > 0.0 => {
            let keep = 1.0 - p_drop;
            let mask = Array2::from_shape_fn(x.dim(), |_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            (x * &mask, DropoutCache { mask: Some(mask) })
        }
        _ => (x.clone(), DropoutCache { mask: None }),
    }
}

pub fn dropout_backward(cache: &DropoutCache, gy: &Array2<f64>) -> Array2<f64> {
    match &cache.mask {
        Some(mask) => gy * mask,
        None => gy.clone(),
    }
}

/// Mean cross-entropy over the batch; returns the loss and `dL/dlogits`.
pub fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[u8]) -> (f64, Array2<f64>) {
    let (n, classes) = logits.dim();
    debug_assert_eq!(n, labels.len());
    let mut dlogits = Array2::zeros((n, classes));
    let mut loss = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Array1<f64> = row.mapv(|v| (v - max).exp());
        let z = exps.sum();
        let label = labels[i] as usize;
        loss -= ((exps[label] / z).max(f64::MIN_POSITIVE)).ln();
        for j in 0..classes {
            let p = exps[j] / z;
            dlogits[[i, j]] = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, dlogits)
}
