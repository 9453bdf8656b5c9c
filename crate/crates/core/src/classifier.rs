//! Small softmax CNN classifiers.
//!
//! These serve two roles: the conventionally supervised substitute baseline,
//! and the toy victim zoo. All architectures are sequences of a spatial stage
//! (convs, pooling, residual blocks) followed by a vector stage (flatten or
//! global average pooling, dense layers, dropout). The activation entering
//! the vector stage is the feature tap used for intermediate-level attacks
//! and for verification embeddings.

use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::nn::{
    dense_backward, dense_forward, dropout_backward, dropout_forward, global_avg_pool_backward,
    global_avg_pool_forward, image_to_batch, maxpool2_backward, maxpool2_forward, relu_backward,
    relu_forward, softmax_cross_entropy, Batch, Conv2d, ConvCache, Dense, DropoutCache,
    MaxPoolCache, ParamAlloc,
};
use crate::rng::rng_from_seed;

pub const NUM_CLASSES: usize = 2;

/// Architecture family for softmax classifiers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ClassifierArch {
    /// Plain conv stacks with max pooling and a dropout-regularized head.
    VggSmall { width: usize, dropout: f64 },
    /// Residual blocks with a strided transition and global average pooling.
    ResnetSmall { width: usize },
    /// Two conv/pool stages straight into a linear head.
    PoolNet { width: usize },
    /// Strided convolutions, no pooling, global average pooling head.
    StridedNet { width: usize },
    /// 5x5 kernels with pooling.
    KernelNet { width: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub arch: ClassifierArch,
    pub input_shape: [usize; 3],
    pub seed: u64,
}

enum SpatialLayer {
    Conv(Conv2d),
    Relu,
    MaxPool2,
    /// conv-relu-conv with identity skip.
    ResBlock(Conv2d, Conv2d),
}

enum Boundary {
    Flatten,
    GlobalAvgPool,
}

enum VectorLayer {
    Dense(Dense),
    Relu,
    Dropout(f64),
}

pub struct ClassifierNet {
    spec: ClassifierSpec,
    spatial: Vec<SpatialLayer>,
    boundary: Boundary,
    vector: Vec<VectorLayer>,
    params: Vec<f64>,
}

enum SpatialCache {
    Conv(ConvCache),
    Relu(Batch),
    MaxPool(MaxPoolCache),
    ResBlock {
        c1: ConvCache,
        y1: Batch,
        c2: ConvCache,
    },
}

enum VectorCache {
    Dense(Array2<f64>),
    Relu(Array2<f64>),
    Dropout(DropoutCache),
}

pub struct ClassifierForward {
    spatial: Vec<SpatialCache>,
    /// Activation entering the vector stage (the feature tap).
    pub features: Batch,
    feature_dim: (usize, usize, usize, usize),
    vector: Vec<VectorCache>,
    pub logits: Array2<f64>,
}

impl ClassifierNet {
    pub fn build(spec: ClassifierSpec) -> Result<Self> {
        let [c, h, w] = spec.input_shape;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidModelSpec(format!(
                "classifier input {h}x{w} must be divisible by 4"
            )));
        }
        let mut alloc = ParamAlloc::new();
        let mut spatial = Vec::new();
        let mut vector = Vec::new();
        let boundary;
        match spec.arch {
            ClassifierArch::VggSmall { width, dropout } => {
                spatial.push(SpatialLayer::Conv(Conv2d::new(&mut alloc, c, width, 3, 1, 1)));
                spatial.push(SpatialLayer::Relu);
                spatial.push(SpatialLayer::Conv(Conv2d::new(
                    &mut alloc, width, width, 3, 1, 1,
                )));
                spatial.push(SpatialLayer::Relu);
                spatial.push(SpatialLayer::MaxPool2);
                spatial.push(SpatialLayer::Conv(Conv2d::new(
                    &mut alloc,
                    width,
                    2 * width,
                    3,
                    1,
                    1,
                )));
                spatial.push(SpatialLayer::Relu);
                spatial.push(SpatialLayer::MaxPool2);
                boundary = Boundary::Flatten;
                let feat = 2 * width * (h / 4) * (w / 4);
                vector.push(VectorLayer::Dropout(dropout));
                vector.push(VectorLayer::Dense(Dense::new(&mut alloc, feat, 64)));
                vector.push(VectorLayer::Relu);
                vector.push(VectorLayer::Dropout(dropout));
                vector.push(VectorLayer::Dense(Dense::new(&mut alloc, 64, NUM_CLASSES)));
            }
            ClassifierArch::ResnetSmall { width } => {
                spatial.push(SpatialLayer::Conv(Conv2d::new(&mut alloc, c, width, 3, 1, 1)));
                spatial.push(SpatialLayer::Relu);
                spatial.push(SpatialLayer::ResBlock(
                    Conv2d::new(&mut alloc, width, width, 3, 1, 1),
                    Conv2d::new(&mut alloc, width, width, 3, 1, 1),
                ));
                spatial.push(SpatialLayer::Conv(Conv2d::new(
                    &mut alloc,
                    width,
                    2 * width,
                    3,
                    2,
                    1,
                )));
                spatial.push(SpatialLayer::Relu);
                spatial.push(SpatialLayer::ResBlock(
                    Conv2d::new(&mut alloc, 2 * width, 2 * width, 3, 1, 1),
                    Conv2d::new(&mut alloc, 2 * width, 2 * width, 3, 1, 1),
                ));
                boundary = Boundary::GlobalAvgPool;
                vector.push(VectorLayer::Dense(Dense::new(
                    &mut alloc,
                    2 * width,
                    NUM_CLASSES,
                )));
            }
            ClassifierArch::PoolNet { width } => {
                spatial.push(SpatialLayer::Conv(Conv2d::new(&mut alloc, c, width, 3, 1, 1)));
                spatial.push(SpatialLayer::Relu);
                spatial.push(SpatialLayer::MaxPool2);
                spatial.push(SpatialLayer::Conv(Conv2d::new(
                    &mut alloc,
                    width,
                    2 * width,
                    3,
                    1,
                    1,
                )));
                spatial.push(SpatialLayer::Relu);
                spatial.push(SpatialLayer::MaxPool2);
                boundary = Boundary::Flatten;
                let feat = 2 * width * (h / 4) * (w / 4);
                vector.push(VectorLayer::Dense(Dense::new(&mut alloc, feat, NUM_CLASSES)));
            }
            ClassifierArch::StridedNet { width } => {
                spatial.push(SpatialLayer::Conv(Conv2d::new(&mut alloc, c, width, 3, 2, 1)));
                spatial.push(SpatialLayer::Relu);
                spatial.push(SpatialLayer::Conv(Conv2d::new(
                    &mut alloc,
                    width,
                    2 * width,
                    3,
                    2,
                    1,
                )));
                spatial.push(SpatialLayer::Relu);
                spatial.push(SpatialLayer::Conv(Conv2d::new(
                    &mut alloc,
                    2 * width,
                    2 * width,
                    3,
                    1,
                    1,
                )));
                spatial.push(SpatialLayer::Relu);
                boundary = Boundary::GlobalAvgPool;
                vector.push(VectorLayer::Dense(Dense::new(
                    &mut alloc,
                    2 * width,
                    NUM_CLASSES,
                )));
            }
            ClassifierArch::KernelNet { width } => {
                spatial.push(SpatialLayer::Conv(Conv2d::new(&mut alloc, c, width, 5, 1, 2)));
                spatial.push(SpatialLayer::Relu);
                spatial.push(SpatialLayer::MaxPool2);
                spatial.push(SpatialLayer::Conv(Conv2d::new(
                    &mut alloc,
                    width,
                    2 * width,
                    5,
                    1,
                    2,
                )));
                spatial.push(SpatialLayer::Relu);
                spatial.push(SpatialLayer::MaxPool2);
                boundary = Boundary::Flatten;
                let feat = 2 * width * (h / 4) * (w / 4);
                vector.push(VectorLayer::Dense(Dense::new(&mut alloc, feat, NUM_CLASSES)));
            }
        }

        let mut params = vec![0.0; alloc.total()];
        let mut rng = rng_from_seed(spec.seed);
        for layer in &spatial {
            match layer {
                SpatialLayer::Conv(c) => c.init(&mut params, &mut rng),
                SpatialLayer::ResBlock(c1, c2) => {
                    c1.init(&mut params, &mut rng);
                    c2.init(&mut params, &mut rng);
                }
                _ => {}
            }
        }
        for layer in &vector {
            if let VectorLayer::Dense(d) = layer {
                d.init(&mut params, &mut rng);
            }
        }
        Ok(Self {
            spec,
            spatial,
            boundary,
            vector,
            params,
        })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::CheckpointFormat(format!(
                "parameter count mismatch: expected {}, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Forward pass. Pass a seeded RNG to enable dropout (training mode).
    pub fn forward(&self, x: &Batch, mut dropout_rng: Option<&mut ChaCha8Rng>) -> ClassifierForward {
        let p = &self.params;
        let mut h = x.clone();
        let mut spatial_caches = Vec::with_capacity(self.spatial.len());
        for layer in &self.spatial {
            match layer {
                SpatialLayer::Conv(conv) => {
                    let (y, c) = conv.forward(p, &h);
                    spatial_caches.push(SpatialCache::Conv(c));
                    h = y;
                }
                SpatialLayer::Relu => {
                    h = relu_forward(&h);
                    spatial_caches.push(SpatialCache::Relu(h.clone()));
                }
                SpatialLayer::MaxPool2 => {
                    let (y, c) = maxpool2_forward(&h);
                    spatial_caches.push(SpatialCache::MaxPool(c));
                    h = y;
                }
                SpatialLayer::ResBlock(conv1, conv2) => {
                    let (t1, c1) = conv1.forward(p, &h);
                    let y1 = relu_forward(&t1);
                    let (t2, c2) = conv2.forward(p, &y1);
                    h = &h + &t2;
                    spatial_caches.push(SpatialCache::ResBlock { c1, y1, c2 });
                }
            }
        }
        let features = h.clone();
        let feature_dim = h.dim();
        let mut v: Array2<f64> = match self.boundary {
            Boundary::Flatten => flatten(&h),
            Boundary::GlobalAvgPool => global_avg_pool_forward(&h),
        };
        let mut vector_caches = Vec::with_capacity(self.vector.len());
        for layer in &self.vector {
            match layer {
                VectorLayer::Dense(d) => {
                    vector_caches.push(VectorCache::Dense(v.clone()));
                    v = dense_forward(d, p, &v);
                }
                VectorLayer::Relu => {
                    v.mapv_inplace(|a| if a > 0.0 { a } else { 0.0 });
                    vector_caches.push(VectorCache::Relu(v.clone()));
                }
                VectorLayer::Dropout(pd) => {
                    let (y, c) = dropout_forward(&v, *pd, dropout_rng.as_deref_mut());
                    vector_caches.push(VectorCache::Dropout(c));
                    v = y;
                }
            }
        }
        ClassifierForward {
            spatial: spatial_caches,
            features,
            feature_dim,
            vector: vector_caches,
            logits: v,
        }
    }

    /// Backward from a logits cotangent all the way to the input gradient.
    pub fn backward(
        &self,
        fwd: &ClassifierForward,
        dlogits: &Array2<f64>,
        grads: &mut [f64],
    ) -> Batch {
        let mut gv = dlogits.clone();
        for (layer, cache) in self.vector.iter().zip(fwd.vector.iter()).rev() {
            gv = match (layer, cache) {
                (VectorLayer::Dense(d), VectorCache::Dense(x)) => {
                    dense_backward(d, &self.params, x, &gv, grads)
                }
                (VectorLayer::Relu, VectorCache::Relu(y)) => {
                    let mut g = gv;
                    g.zip_mut_with(y, |gi, &yi| {
                        if yi <= 0.0 {
                            *gi = 0.0;
                        }
                    });
                    g
                }
                (VectorLayer::Dropout(_), VectorCache::Dropout(c)) => dropout_backward(c, &gv),
                _ => unreachable!("cache/layer mismatch"),
            };
        }
        let gfeat = match self.boundary {
            Boundary::Flatten => unflatten(&gv, fwd.feature_dim),
            Boundary::GlobalAvgPool => global_avg_pool_backward(&gv, fwd.feature_dim),
        };
        self.spatial_backward(fwd, &gfeat, grads)
    }

    /// Backward from a cotangent at the feature tap (used by ILA).
    pub fn feature_pullback(
        &self,
        fwd: &ClassifierForward,
        gfeat: &Batch,
        grads: &mut [f64],
    ) -> Batch {
        self.spatial_backward(fwd, gfeat, grads)
    }

    fn spatial_backward(&self, fwd: &ClassifierForward, gfeat: &Batch, grads: &mut [f64]) -> Batch {
        let p = &self.params;
        let mut g = gfeat.clone();
        for (layer, cache) in self.spatial.iter().zip(fwd.spatial.iter()).rev() {
            g = match (layer, cache) {
                (SpatialLayer::Conv(conv), SpatialCache::Conv(c)) => conv.backward(p, c, &g, grads),
                (SpatialLayer::Relu, SpatialCache::Relu(y)) => relu_backward(y, &g),
                (SpatialLayer::MaxPool2, SpatialCache::MaxPool(c)) => maxpool2_backward(c, &g),
                (SpatialLayer::ResBlock(conv1, conv2), SpatialCache::ResBlock { c1, y1, c2 }) => {
                    let g_skip = g.clone();
                    let g2 = conv2.backward(p, c2, &g, grads);
                    let g2 = relu_backward(y1, &g2);
                    let g_main = conv1.backward(p, c1, &g2, grads);
                    &g_main + &g_skip
                }
                _ => unreachable!("cache/layer mismatch"),
            };
        }
        g
    }

    /// Mean cross-entropy and parameter gradient on a labeled batch.
    pub fn loss_and_param_grad(
        &self,
        x: &Batch,
        labels: &[u8],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> (f64, Vec<f64>) {
        let fwd = self.forward(x, dropout_rng);
        let (loss, dlogits) = softmax_cross_entropy(&fwd.logits, labels);
        let mut grads = vec![0.0; self.params.len()];
        self.backward(&fwd, &dlogits, &mut grads);
        (loss, grads)
    }

    /// Deterministic argmax predictions (dropout disabled).
    pub fn predict_batch(&self, x: &Batch) -> Vec<u8> {
        let fwd = self.forward(x, None);
        fwd.logits
            .rows()
            .into_iter()
            .map(|row| if row[1] > row[0] { 1 } else { 0 })
            .collect()
    }

    pub fn predict(&self, image: &ImageTensor) -> u8 {
        self.predict_batch(&image_to_batch(image))[0]
    }

    /// Penultimate vector activation (input to the final dense layer).
    pub fn embed(&self, image: &ImageTensor) -> Vec<f64> {
        let fwd = self.forward(&image_to_batch(image), None);
        // Input cached by the last Dense layer.
        for (layer, cache) in self.vector.iter().zip(fwd.vector.iter()).rev() {
            if let (VectorLayer::Dense(_), VectorCache::Dense(x)) = (layer, cache) {
                return x.row(0).to_vec();
            }
        }
        unreachable!("classifier has a dense head");
    }
}

fn flatten(x: &Batch) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let mut out = Array2::zeros((n, c * h * w));
    for ni in 0..n {
        let mut j = 0;
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    out[[ni, j]] = x[[ni, ci, hi, wi]];
                    j += 1;
                }
            }
        }
    }
    out
}

fn unflatten(g: &Array2<f64>, dim: (usize, usize, usize, usize)) -> Batch {
    let (n, c, h, w) = dim;
    let mut out = Batch::zeros(dim);
    for ni in 0..n {
        let mut j = 0;
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    out[[ni, ci, hi, wi]] = g[[ni, j]];
                    j += 1;
                }
            }
        }
    }
    out
}

// ---- checkpoint container ----

const MAGIC: &[u8; 4] = b"NBCL";

pub fn save_classifier(net: &ClassifierNet, path: &Path) -> Result<()> {
    let spec_json = serde_json::to_vec(net.spec()).expect("spec serializes");
    crate::container::save(path, MAGIC, &spec_json, net.params())
}

pub fn load_classifier(path: &Path) -> Result<ClassifierNet> {
    let (spec_json, params) = crate::container::load(path, MAGIC)?;
    let spec: ClassifierSpec = serde_json::from_slice(&spec_json)
        .map_err(|e| Error::CheckpointFormat(format!("bad spec json: {e}")))?;
    let mut net = ClassifierNet::build(spec)?;
    net.set_params(&params)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use ndarray::Array3;
    use rand::Rng;

    fn random_image(seed: u64) -> ImageTensor {
        let mut rng = rng_from_seed(seed);
        ImageTensor::new(Array3::from_shape_fn((3, 8, 8), |_| rng.gen_range(0.05..0.95)))
            .unwrap()
    }

    fn all_archs() -> Vec<ClassifierArch> {
        vec![
            ClassifierArch::VggSmall {
                width: 8,
                dropout: 0.5,
            },
            ClassifierArch::ResnetSmall { width: 8 },
            ClassifierArch::PoolNet { width: 8 },
            ClassifierArch::StridedNet { width: 8 },
            ClassifierArch::KernelNet { width: 8 },
        ]
    }

    #[test]
    fn forward_shapes_and_determinism() {
        for arch in all_archs() {
            let net = ClassifierNet::build(ClassifierSpec {
                arch,
                input_shape: [3, 8, 8],
                seed: 5,
            })
            .unwrap();
            let x = random_image(1);
            let a = net.predict(&x);
            let b = net.predict(&x);
            assert_eq!(a, b);
            assert!(a <= 1);
            let e = net.embed(&x);
            assert!(!e.is_empty());
        }
    }

    #[test]
    fn uniform_logits_give_ln2_loss() {
        // Zero-initialized head on any input yields logits (0, 0).
        let net = ClassifierNet::build(ClassifierSpec {
            arch: ClassifierArch::PoolNet { width: 8 },
            input_shape: [3, 8, 8],
            seed: 0,
        })
        .unwrap();
        let mut zeroed = net;
        zeroed.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let x = crate::nn::image_to_batch(&random_image(2));
        let fwd = zeroed.forward(&x, None);
        let (loss, _) = softmax_cross_entropy(&fwd.logits, &[0]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("victim.nbcl");
        let net = ClassifierNet::build(ClassifierSpec {
            arch: ClassifierArch::StridedNet { width: 8 },
            input_shape: [3, 8, 8],
            seed: 9,
        })
        .unwrap();
        save_classifier(&net, &path).unwrap();
        let loaded = load_classifier(&path).unwrap();
        assert_eq!(loaded.spec(), net.spec());
        assert_eq!(loaded.params(), net.params());
    }
}
