//! Shared test helpers: random fixtures and finite-difference probes.

use ndarray::Array3;
use nobox_core::data::{ImageTensor, LabeledImage};
use nobox_core::model::{EmbeddingTap, ModelSpec, SubstituteModel};
use nobox_core::rng::rng_from_seed;
use rand::Rng;

pub fn tiny_spec(k: usize, seed: u64) -> ModelSpec {
    ModelSpec {
        input_shape: [3, 8, 8],
        base_width: 8,
        num_residual_blocks: 1,
        num_decoders: k,
        seed,
        embedding_tap: EmbeddingTap::default(),
    }
}

pub fn tiny_model(k: usize, seed: u64) -> SubstituteModel {
    SubstituteModel::build(tiny_spec(k, seed)).unwrap()
}

pub fn random_image(seed: u64, shape: [usize; 3]) -> ImageTensor {
    let mut rng = rng_from_seed(seed);
    ImageTensor::new(Array3::from_shape_fn(
        (shape[0], shape[1], shape[2]),
        |_| rng.gen_range(0.1..0.9),
    ))
    .unwrap()
}

pub fn random_images(count: usize, seed: u64, shape: [usize; 3]) -> Vec<ImageTensor> {
    (0..count)
        .map(|i| random_image(seed.wrapping_mul(1000).wrapping_add(i as u64), shape))
        .collect()
}

pub fn labeled_halves(images: Vec<ImageTensor>) -> Vec<LabeledImage> {
    let half = images.len() / 2;
    images
        .into_iter()
        .enumerate()
        .map(|(i, img)| LabeledImage::new(img, u8::from(i >= half)).unwrap())
        .collect()
}

/// Relative error between an analytic and a numerical derivative, with a
/// floor so near-zero pairs compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-8 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Central finite difference of `f` along parameter coordinate `idx` of the
/// substitute model.
pub fn param_fd(
    model: &mut SubstituteModel,
    idx: usize,
    h: f64,
    mut f: impl FnMut(&SubstituteModel) -> f64,
) -> f64 {
    let orig = model.params()[idx];
    model.params_mut()[idx] = orig + h;
    let plus = f(model);
    model.params_mut()[idx] = orig - h;
    let minus = f(model);
    model.params_mut()[idx] = orig;
    (plus - minus) / (2.0 * h)
}

/// Central finite difference of `f` along one input-pixel coordinate.
pub fn input_fd(
    image: &ImageTensor,
    coord: (usize, usize, usize),
    h: f64,
    mut f: impl FnMut(&ImageTensor) -> f64,
) -> f64 {
    let mut plus = image.data().clone();
    plus[[coord.0, coord.1, coord.2]] += h;
    let mut minus = image.data().clone();
    minus[[coord.0, coord.1, coord.2]] -= h;
    let fp = f(&ImageTensor::new(plus).unwrap());
    let fm = f(&ImageTensor::new(minus).unwrap());
    (fp - fm) / (2.0 * h)
}
