//! Minimal CPU neural-network stack: batched `[N, C, H, W]` tensors in f64,
//! explicit forward caches, and hand-written backward passes.
//!
//! Parameters for a whole network live in one flat `Vec<f64>`; layers hold
//! offsets into it. Gradients accumulate into a parallel flat vector, which
//! keeps the optimizer, checkpointing, and finite-difference probing trivial.

mod conv;
mod norm;
mod ops;
mod adam;

pub use adam::Adam;
pub use conv::{Conv2d, ConvCache};
pub use norm::{instance_norm_backward, instance_norm_forward, InstanceNormCache};
pub use ops::{
    dense_backward, dense_forward, dropout_backward, dropout_forward, global_avg_pool_backward,
    global_avg_pool_forward, maxpool2_backward, maxpool2_forward, relu_backward, relu_forward,
    sigmoid_backward, sigmoid_forward, softmax_cross_entropy, upsample2_backward,
    upsample2_forward, Dense, DropoutCache, MaxPoolCache,
};

use ndarray::{Array4, ArrayView1};

use crate::data::ImageTensor;

/// Batched activation tensor `[N, C, H, W]`.
pub type Batch = Array4<f64>;

/// Assigns offsets into the flat parameter vector while a network is built.
#[derive(Default)]
pub struct ParamAlloc {
    next: usize,
}

impl ParamAlloc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, len: usize) -> usize {
        let off = self.next;
        self.next += len;
        off
    }

    pub fn total(&self) -> usize {
        self.next
    }
}

/// Kaiming-uniform fill for a weight slab with the given fan-in.
pub fn kaiming_uniform(rng: &mut impl rand::Rng, params: &mut [f64], fan_in: usize) {
    let bound = (6.0 / fan_in as f64).sqrt();
    for p in params {
        *p = rng.gen_range(-bound..bound);
    }
}

pub fn image_to_batch(image: &ImageTensor) -> Batch {
    let [c, h, w] = image.shape();
    let mut out = Array4::zeros((1, c, h, w));
    out.index_axis_mut(ndarray::Axis(0), 0).assign(image.data());
    out
}

pub fn images_to_batch(images: &[&ImageTensor]) -> Batch {
    assert!(!images.is_empty());
    let [c, h, w] = images[0].shape();
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(img.data());
    }
    out
}

/// Extracts sample `i` of a batch as a raw `[C, H, W]` array (not range-checked).
pub fn batch_slice(batch: &Batch, i: usize) -> ndarray::Array3<f64> {
    batch.index_axis(ndarray::Axis(0), i).to_owned()
}

/// Squared Euclidean norm of a view.
pub fn sq_norm(v: ArrayView1<f64>) -> f64 {
    v.iter().map(|x| x * x).sum()
}
