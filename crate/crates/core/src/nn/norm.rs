//! Instance normalization (per sample, per channel, no affine parameters).

use ndarray::Array4;

use super::Batch;

const EPS: f64 = 1e-5;

pub struct InstanceNormCache {
    xhat: Batch,
    inv_std: Vec<f64>, // indexed [n * C + c]
}

pub fn instance_norm_forward(x: &Batch) -> (Batch, InstanceNormCache) {
    let (n, c, h, w) = x.dim();
    let area = (h * w) as f64;
    let mut y = Array4::zeros((n, c, h, w));
    let mut inv_std = vec![0.0; n * c];
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.index_axis(ndarray::Axis(0), ni);
            let plane = plane.index_axis(ndarray::Axis(0), ci);
            let mean = plane.sum() / area;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / area;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[ni * c + ci] = is;
            for hi in 0..h {
                for wi in 0..w {
                    y[[ni, ci, hi, wi]] = (x[[ni, ci, hi, wi]] - mean) * is;
                }
            }
        }
    }
    let xhat = y.clone();
    (y, InstanceNormCache { xhat, inv_std })
}

pub fn instance_norm_backward(cache: &InstanceNormCache, gy: &Batch) -> Batch {
    let (n, c, h, w) = gy.dim();
    let area = (h * w) as f64;
    let mut gx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let mut sum_gy = 0.0;
            let mut sum_gy_xhat = 0.0;
            for hi in 0..h {
                for wi in 0..w {
                    let g = gy[[ni, ci, hi, wi]];
                    sum_gy += g;
                    sum_gy_xhat += g * cache.xhat[[ni, ci, hi, wi]];
                }
            }
            let mean_gy = sum_gy / area;
            let mean_gy_xhat = sum_gy_xhat / area;
            let is = cache.inv_std[ni * c + ci];
            for hi in 0..h {
                for wi in 0..w {
                    let g = gy[[ni, ci, hi, wi]];
                    let xh = cache.xhat[[ni, ci, hi, wi]];
                    gx[[ni, ci, hi, wi]] = is * (g - mean_gy - xh * mean_gy_xhat);
                }
            }
        }
    }
    gx
}
