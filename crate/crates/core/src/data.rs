//! Tiny auxiliary datasets and the chaos transformations applied to them.
//!
//! Images are real-valued `[C, H, W]` tensors in `[0, 1]`. The auxiliary set
//! is the handful of labeled images (two classes) used to train one
//! substitute model, and always contains the instance to be perturbed.

use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// A `[C, H, W]` image with all values in `[0, 1]`.
///
/// `H` and `W` must be even so the image can be cut into a 2x2 jigsaw grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 1 && c != 3 {
            return Err(Error::InvalidTensor(format!(
                "channel count must be 1 or 3, got {c}"
            )));
        }
        if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidTensor(format!(
                "height and width must be positive and even, got {h}x{w}"
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidTensor(format!(
                "value {v} outside [0, 1]"
            )));
        }
        Ok(Self { data })
    }

    /// Builds a tensor, clamping values into `[0, 1]` first.
    pub fn from_unclamped(mut data: Array3<f64>) -> Result<Self> {
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Self::new(data)
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Result<Self> {
        Self::new(Array3::zeros((c, h, w)))
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        let (c, h, w) = self.data.dim();
        [c, h, w]
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// Largest absolute pixel difference to another image of the same shape.
    pub fn linf_distance(&self, other: &ImageTensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Euclidean distance to another image of the same shape.
    pub fn l2_distance(&self, other: &ImageTensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// An image with its class id (0 or 1).
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub image: ImageTensor,
    pub label: u8,
}

impl LabeledImage {
    pub fn new(image: ImageTensor, label: u8) -> Result<Self> {
        if label > 1 {
            return Err(Error::InvalidLabel(label));
        }
        Ok(Self { image, label })
    }
}

/// The tiny labeled training set for one substitute model, with the index of
/// the benign instance to be perturbed.
#[derive(Clone, Debug)]
pub struct AuxiliarySet {
    examples: Vec<LabeledImage>,
    target_index: usize,
}

pub const MAX_AUXILIARY_SIZE: usize = 40;

impl AuxiliarySet {
    pub fn new(examples: Vec<LabeledImage>, target_index: usize) -> Result<Self> {
        let n = examples.len();
        if n < 2 || n > MAX_AUXILIARY_SIZE {
            return Err(Error::InvalidAuxiliarySet(format!(
                "size {n} outside [2, {MAX_AUXILIARY_SIZE}]"
            )));
        }
        if target_index >= n {
            return Err(Error::InvalidAuxiliarySet(format!(
                "target index {target_index} out of range for {n} examples"
            )));
        }
        let has0 = examples.iter().any(|e| e.label == 0);
        let has1 = examples.iter().any(|e| e.label == 1);
        if !has0 || !has1 {
            return Err(Error::InvalidAuxiliarySet(
                "both classes must be present".into(),
            ));
        }
        let shape = examples[0].image.shape();
        if examples.iter().any(|e| e.image.shape() != shape) {
            return Err(Error::InvalidAuxiliarySet(
                "all images must share the same shape".into(),
            ));
        }
        Ok(Self {
            examples,
            target_index,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[LabeledImage] {
        &self.examples
    }

    pub fn target_index(&self) -> usize {
        self.target_index
    }

    pub fn target(&self) -> &LabeledImage {
        &self.examples[self.target_index]
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.examples[0].image.shape()
    }

    pub fn images_of_class(&self, label: u8) -> Vec<&ImageTensor> {
        self.examples
            .iter()
            .filter(|e| e.label == label)
            .map(|e| &e.image)
            .collect()
    }
}

/// Per-decoder (class 0, class 1) prototype pairs drawn from an auxiliary set.
#[derive(Clone, Debug)]
pub struct PrototypeBank {
    pairs: Vec<(ImageTensor, ImageTensor)>,
}

impl PrototypeBank {
    pub fn new(pairs: Vec<(ImageTensor, ImageTensor)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidAuxiliarySet(
                "prototype bank needs at least one pair".into(),
            ));
        }
        Ok(Self { pairs })
    }

    /// Samples `k` prototype pairs from the auxiliary set, one per decoder.
    /// Pairs are distinct when enough combinations exist, otherwise sampled
    /// with replacement.
    pub fn sample(aux: &AuxiliarySet, k: usize, seed: u64) -> Result<Self> {
        let class0 = aux.images_of_class(0);
        let class1 = aux.images_of_class(1);
        let combos = class0.len() * class1.len();
        let mut rng = rng_from_seed(seed);
        let mut pairs = Vec::with_capacity(k);
        if k <= combos {
            let mut all: Vec<(usize, usize)> = (0..class0.len())
                .flat_map(|i| (0..class1.len()).map(move |j| (i, j)))
                .collect();
            all.shuffle(&mut rng);
            for &(i, j) in all.iter().take(k) {
                pairs.push((class0[i].clone(), class1[j].clone()));
            }
        } else {
            for _ in 0..k {
                let i = rng.gen_range(0..class0.len());
                let j = rng.gen_range(0..class1.len());
                pairs.push((class0[i].clone(), class1[j].clone()));
            }
        }
        Self::new(pairs)
    }

    pub fn k(&self) -> usize {
        self.pairs.len()
    }

    pub fn pair(&self, k: usize) -> &(ImageTensor, ImageTensor) {
        &self.pairs[k]
    }

    pub fn pairs(&self) -> &[(ImageTensor, ImageTensor)] {
        &self.pairs
    }

    /// Prototype of class `label` for decoder `k`.
    pub fn prototype(&self, k: usize, label: u8) -> &ImageTensor {
        if label == 0 {
            &self.pairs[k].0
        } else {
            &self.pairs[k].1
        }
    }
}

/// Loads every PNG in `path`, resized to `expected_shape` and scaled to [0,1].
/// Files are visited in lexicographic name order.
pub fn load_class_dir(path: &Path, expected_shape: [usize; 3]) -> Result<Vec<ImageTensor>> {
    if !path.is_dir() {
        return Err(Error::MissingPath(path.display().to_string()));
    }
    let mut files: Vec<_> = std::fs::read_dir(path)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::NoImagesFound(path.display().to_string()));
    }
    files
        .iter()
        .map(|f| load_image(f, expected_shape))
        .collect()
}

fn load_image(path: &Path, expected_shape: [usize; 3]) -> Result<ImageTensor> {
    let [c, h, w] = expected_shape;
    let img = image::open(path).map_err(|source| Error::UndecodableImage {
        path: path.display().to_string(),
        source,
    })?;
    let native_channels = match img.color() {
        image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 => 1,
        _ => 3,
    };
    if native_channels != c {
        return Err(Error::ChannelMismatch {
            path: path.display().to_string(),
            expected: c,
            got: native_channels,
        });
    }
    let (iw, ih) = (img.width() as usize, img.height() as usize);
    let mut raw = Array3::zeros((c, ih, iw));
    match c {
        1 => {
            let gray = img.to_luma8();
            for (x, y, p) in gray.enumerate_pixels() {
                raw[[0, y as usize, x as usize]] = f64::from(p.0[0]) / 255.0;
            }
        }
        _ => {
            let rgb = img.to_rgb8();
            for (x, y, p) in rgb.enumerate_pixels() {
                for ch in 0..3 {
                    raw[[ch, y as usize, x as usize]] = f64::from(p.0[ch]) / 255.0;
                }
            }
        }
    }
    let resized = if ih == h && iw == w {
        raw
    } else {
        resize_bilinear(&raw, h, w)
    };
    ImageTensor::from_unclamped(resized)
}

/// Loads a single PNG, resized to `expected_shape` and scaled to [0,1].
pub fn load_png(path: &Path, expected_shape: [usize; 3]) -> Result<ImageTensor> {
    load_image(path, expected_shape)
}

/// Encodes an image as PNG bytes, quantizing each value to `round(v * 255)`.
pub fn image_to_png_bytes(image: &ImageTensor) -> Result<Vec<u8>> {
    let [c, h, w] = image.shape();
    let mut bytes: Vec<u8> = Vec::new();
    let mut cursor = std::io::Cursor::new(&mut bytes);
    let quant = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    match c {
        1 => {
            let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([quant(image.data()[[0, y as usize, x as usize]])])
            });
            image::DynamicImage::ImageLuma8(buf)
                .write_to(&mut cursor, image::ImageFormat::Png)
                .map_err(|e| Error::InvalidTensor(format!("png encode failed: {e}")))?;
        }
        _ => {
            let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                image::Rgb([
                    quant(image.data()[[0, y as usize, x as usize]]),
                    quant(image.data()[[1, y as usize, x as usize]]),
                    quant(image.data()[[2, y as usize, x as usize]]),
                ])
            });
            image::DynamicImage::ImageRgb8(buf)
                .write_to(&mut cursor, image::ImageFormat::Png)
                .map_err(|e| Error::InvalidTensor(format!("png encode failed: {e}")))?;
        }
    }
    Ok(bytes)
}

/// Writes an image as a lossless PNG.
pub fn save_png(image: &ImageTensor, path: &Path) -> Result<()> {
    let bytes = image_to_png_bytes(image)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Bilinear resize of a `[C, H, W]` array.
pub fn resize_bilinear(data: &Array3<f64>, new_h: usize, new_w: usize) -> Array3<f64> {
    let (c, h, w) = data.dim();
    let mut out = Array3::zeros((c, new_h, new_w));
    let sy = if new_h > 1 { (h - 1) as f64 / (new_h - 1) as f64 } else { 0.0 };
    let sx = if new_w > 1 { (w - 1) as f64 / (new_w - 1) as f64 } else { 0.0 };
    for ch in 0..c {
        for y in 0..new_h {
            let fy = y as f64 * sy;
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let dy = fy - y0 as f64;
            for x in 0..new_w {
                let fx = x as f64 * sx;
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let dx = fx - x0 as f64;
                let top = data[[ch, y0, x0]] * (1.0 - dx) + data[[ch, y0, x1]] * dx;
                let bot = data[[ch, y1, x0]] * (1.0 - dx) + data[[ch, y1, x1]] * dx;
                out[[ch, y, x]] = top * (1.0 - dy) + bot * dy;
            }
        }
    }
    out
}

/// Draws a balanced auxiliary set of `n` images (n/2 per class) that includes
/// the target image, deterministically for a given seed.
///
/// `target` is `(class id, index into that class's list)`.
pub fn sample_auxiliary_set(
    class0: &[ImageTensor],
    class1: &[ImageTensor],
    n: usize,
    target: (u8, usize),
    seed: u64,
) -> Result<AuxiliarySet> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::InvalidAuxiliarySet(format!(
            "n must be even and >= 2, got {n}"
        )));
    }
    if n > MAX_AUXILIARY_SIZE {
        return Err(Error::InvalidAuxiliarySet(format!(
            "n={n} exceeds the supported maximum {MAX_AUXILIARY_SIZE}"
        )));
    }
    let half = n / 2;
    for (label, class) in [(0u8, class0), (1u8, class1)] {
        if class.len() < half {
            return Err(Error::InsufficientImages {
                class: label,
                available: class.len(),
                needed: half,
            });
        }
    }
    let (t_class, t_idx) = target;
    if t_class > 1 {
        return Err(Error::InvalidTarget {
            class: t_class,
            index: t_idx,
        });
    }
    let t_len = if t_class == 0 { class0.len() } else { class1.len() };
    if t_idx >= t_len {
        return Err(Error::InvalidTarget {
            class: t_class,
            index: t_idx,
        });
    }

    let mut rng = rng_from_seed(seed);
    let pick = |rng: &mut rand_chacha::ChaCha8Rng,
                len: usize,
                count: usize,
                force: Option<usize>|
     -> Vec<usize> {
        let mut pool: Vec<usize> = (0..len).filter(|&i| Some(i) != force).collect();
        pool.shuffle(rng);
        let mut chosen: Vec<usize> = force.into_iter().collect();
        chosen.extend(pool.into_iter().take(count - chosen.len()));
        chosen.sort_unstable();
        chosen
    };

    let idx0 = pick(&mut rng, class0.len(), half, (t_class == 0).then_some(t_idx));
    let idx1 = pick(&mut rng, class1.len(), half, (t_class == 1).then_some(t_idx));

    let mut examples = Vec::with_capacity(n);
    let mut target_index = 0;
    for &i in &idx0 {
        if t_class == 0 && i == t_idx {
            target_index = examples.len();
        }
        examples.push(LabeledImage::new(class0[i].clone(), 0)?);
    }
    for &i in &idx1 {
        if t_class == 1 && i == t_idx {
            target_index = examples.len();
        }
        examples.push(LabeledImage::new(class1[i].clone(), 1)?);
    }
    AuxiliarySet::new(examples, target_index)
}

/// Counter-clockwise rotation by a multiple of 90 degrees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn degrees(self) -> u32 {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 90,
            Rotation::R180 => 180,
            Rotation::R270 => 270,
        }
    }

    pub fn inverse(self) -> Rotation {
        match self {
            Rotation::R0 => Rotation::R0,
            Rotation::R90 => Rotation::R270,
            Rotation::R180 => Rotation::R180,
            Rotation::R270 => Rotation::R90,
        }
    }
}

/// Rotates the pixel grid counter-clockwise. 90/270 degree rotations require
/// a square image.
pub fn rotate(image: &ImageTensor, angle: Rotation) -> Result<ImageTensor> {
    let (c, h, w) = image.data().dim();
    if h != w && matches!(angle, Rotation::R90 | Rotation::R270) {
        return Err(Error::NonSquareRotation {
            angle_deg: angle.degrees(),
            h,
            w,
        });
    }
    let src = image.data();
    let out = match angle {
        Rotation::R0 => src.clone(),
        Rotation::R90 => Array3::from_shape_fn((c, w, h), |(ch, r, col)| src[[ch, col, w - 1 - r]]),
        Rotation::R180 => {
            Array3::from_shape_fn((c, h, w), |(ch, r, col)| src[[ch, h - 1 - r, w - 1 - col]])
        }
        Rotation::R270 => Array3::from_shape_fn((c, w, h), |(ch, r, col)| src[[ch, h - 1 - col, r]]),
    };
    ImageTensor::new(out)
}

/// 2x2 tile order: 0 = top-left, 1 = top-right, 2 = bottom-left, 3 = bottom-right.
/// Output tile position `i` receives input tile `permutation[i]`.
pub fn jigsaw(image: &ImageTensor, permutation: [usize; 4]) -> Result<ImageTensor> {
    let mut seen = [false; 4];
    for &p in &permutation {
        if p > 3 || seen[p] {
            return Err(Error::InvalidPermutation(permutation));
        }
        seen[p] = true;
    }
    let (c, h, w) = image.data().dim();
    let (th, tw) = (h / 2, w / 2);
    let src = image.data();
    let mut out = Array3::zeros((c, h, w));
    for (pos, &tile) in permutation.iter().enumerate() {
        let (pr, pc) = (pos / 2, pos % 2);
        let (tr, tc) = (tile / 2, tile % 2);
        for ch in 0..c {
            for r in 0..th {
                for col in 0..tw {
                    out[[ch, pr * th + r, pc * tw + col]] =
                        src[[ch, tr * th + r, tc * tw + col]];
                }
            }
        }
    }
    ImageTensor::new(out)
}

/// Inverse of a 4-tile permutation.
pub fn invert_permutation(p: [usize; 4]) -> [usize; 4] {
    let mut inv = [0usize; 4];
    for (i, &v) in p.iter().enumerate() {
        inv[v] = i;
    }
    inv
}

/// Which chaos mechanism to use for pretext training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChaosMechanism {
    Rotation,
    Jigsaw,
}

/// Record of a sampled chaos transform, kept for the run manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformDescriptor {
    Rotation { angle_deg: u32 },
    Jigsaw { permutation: [usize; 4] },
}

/// Samples a transform uniformly (given seed) and applies it.
pub fn chaos_transform(
    image: &ImageTensor,
    mechanism: ChaosMechanism,
    seed: u64,
) -> Result<(ImageTensor, TransformDescriptor)> {
    let mut rng = rng_from_seed(seed);
    match mechanism {
        ChaosMechanism::Rotation => {
            let angle = Rotation::ALL[rng.gen_range(0..4)];
            let out = rotate(image, angle)?;
            Ok((
                out,
                TransformDescriptor::Rotation {
                    angle_deg: angle.degrees(),
                },
            ))
        }
        ChaosMechanism::Jigsaw => {
            let mut perm = [0usize, 1, 2, 3];
            perm.shuffle(&mut rng);
            let out = jigsaw(image, perm)?;
            Ok((out, TransformDescriptor::Jigsaw { permutation: perm }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr3;

    fn img_2x2(a: f64, b: f64, c: f64, d: f64) -> ImageTensor {
        ImageTensor::new(arr3(&[[[a, b], [c, d]]])).unwrap()
    }

    #[test]
    fn tensor_rejects_out_of_range_values() {
        let arr = arr3(&[[[0.0, 1.5], [0.2, 0.3]]]);
        assert!(ImageTensor::new(arr).is_err());
    }

    #[test]
    fn tensor_rejects_odd_dimensions() {
        let arr = Array3::zeros((1, 3, 4));
        assert!(ImageTensor::new(arr).is_err());
    }

    #[test]
    fn rotate_identity() {
        let x = img_2x2(0.1, 0.2, 0.3, 0.4);
        assert_eq!(rotate(&x, Rotation::R0).unwrap(), x);
    }

    #[test]
    fn rotate_90_matches_hand_oracle() {
        // [[a,b],[c,d]] rotated 90 CCW -> [[b,d],[a,c]]
        let x = img_2x2(0.1, 0.2, 0.3, 0.4);
        let r = rotate(&x, Rotation::R90).unwrap();
        assert_eq!(r, img_2x2(0.2, 0.4, 0.1, 0.3));
    }

    #[test]
    fn rotate_90_then_270_is_identity() {
        let x = img_2x2(0.1, 0.2, 0.3, 0.4);
        let r = rotate(&rotate(&x, Rotation::R90).unwrap(), Rotation::R270).unwrap();
        assert_eq!(r, x);
    }

    #[test]
    fn rotate_rejects_non_square_for_90() {
        let x = ImageTensor::new(Array3::zeros((1, 2, 4))).unwrap();
        assert!(rotate(&x, Rotation::R90).is_err());
        assert!(rotate(&x, Rotation::R180).is_ok());
    }

    #[test]
    fn jigsaw_identity() {
        let x = img_2x2(0.1, 0.2, 0.3, 0.4);
        assert_eq!(jigsaw(&x, [0, 1, 2, 3]).unwrap(), x);
    }

    #[test]
    fn jigsaw_swap_top_tiles_on_half_tone_image() {
        // Left half black, right half white; swapping TL/TR mirrors the layout.
        let x = ImageTensor::new(arr3(&[[[0.0, 1.0], [0.0, 1.0]]])).unwrap();
        let y = jigsaw(&x, [1, 0, 2, 3]).unwrap();
        assert_eq!(y, ImageTensor::new(arr3(&[[[1.0, 0.0], [0.0, 1.0]]])).unwrap());
    }

    #[test]
    fn jigsaw_then_inverse_is_identity() {
        let x = ImageTensor::new(arr3(&[[[0.1, 0.2, 0.3, 0.4], [0.5, 0.6, 0.7, 0.8]]]))
            .unwrap();
        let p = [2, 0, 3, 1];
        let y = jigsaw(&jigsaw(&x, p).unwrap(), invert_permutation(p)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn jigsaw_rejects_non_bijection() {
        let x = img_2x2(0.1, 0.2, 0.3, 0.4);
        assert!(jigsaw(&x, [0, 0, 2, 3]).is_err());
        assert!(jigsaw(&x, [0, 1, 2, 4]).is_err());
    }

    #[test]
    fn chaos_transform_is_deterministic() {
        let x = img_2x2(0.1, 0.2, 0.3, 0.4);
        for mech in [ChaosMechanism::Rotation, ChaosMechanism::Jigsaw] {
            let (a, da) = chaos_transform(&x, mech, 42).unwrap();
            let (b, db) = chaos_transform(&x, mech, 42).unwrap();
            assert_eq!(a, b);
            assert_eq!(da, db);
        }
    }

    #[test]
    fn chaos_rotation_angles_are_uniform() {
        let x = img_2x2(0.1, 0.2, 0.3, 0.4);
        let mut counts = [0usize; 4];
        for seed in 0..10_000u64 {
            let (_, d) = chaos_transform(&x, ChaosMechanism::Rotation, seed).unwrap();
            match d {
                TransformDescriptor::Rotation { angle_deg } => {
                    counts[(angle_deg / 90) as usize] += 1
                }
                _ => unreachable!(),
            }
        }
        for &c in &counts {
            let freq = c as f64 / 10_000.0;
            assert!((freq - 0.25).abs() < 0.02, "frequency {freq} off 0.25");
        }
    }

    #[test]
    fn auxiliary_sampling_is_balanced_and_deterministic() {
        let class0: Vec<_> = (0..10)
            .map(|i| img_2x2(i as f64 / 20.0, 0.0, 0.0, 0.0))
            .collect();
        let class1: Vec<_> = (0..10)
            .map(|i| img_2x2(0.0, i as f64 / 20.0, 0.0, 0.0))
            .collect();
        let a = sample_auxiliary_set(&class0, &class1, 20, (0, 3), 0).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a.examples().iter().filter(|e| e.label == 0).count(), 10);
        assert_eq!(a.target().label, 0);
        assert_eq!(a.target().image, class0[3]);

        let b = sample_auxiliary_set(&class0, &class1, 20, (0, 3), 0).unwrap();
        for (x, y) in a.examples().iter().zip(b.examples()) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.label, y.label);
        }
        assert_eq!(a.target_index(), b.target_index());
    }

    #[test]
    fn auxiliary_sampling_minimal_set() {
        let class0 = vec![img_2x2(0.1, 0.0, 0.0, 0.0)];
        let class1 = vec![img_2x2(0.0, 0.1, 0.0, 0.0)];
        let a = sample_auxiliary_set(&class0, &class1, 2, (1, 0), 7).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a.target().label, 1);
    }

    #[test]
    fn auxiliary_sampling_rejects_bad_inputs() {
        let class0 = vec![img_2x2(0.1, 0.0, 0.0, 0.0)];
        let class1 = vec![img_2x2(0.0, 0.1, 0.0, 0.0)];
        assert!(matches!(
            sample_auxiliary_set(&class0, &class1, 4, (0, 0), 0),
            Err(Error::InsufficientImages { .. })
        ));
        assert!(matches!(
            sample_auxiliary_set(&class0, &class1, 2, (0, 5), 0),
            Err(Error::InvalidTarget { .. })
        ));
    }

    #[test]
    fn prototype_bank_pairs_are_distinct_when_possible() {
        let class0: Vec<_> = (0..3)
            .map(|i| img_2x2(i as f64 / 10.0, 0.0, 0.0, 0.0))
            .collect();
        let class1: Vec<_> = (0..3)
            .map(|i| img_2x2(0.0, i as f64 / 10.0, 0.0, 0.0))
            .collect();
        let mut examples = Vec::new();
        for i in &class0 {
            examples.push(LabeledImage::new(i.clone(), 0).unwrap());
        }
        for i in &class1 {
            examples.push(LabeledImage::new(i.clone(), 1).unwrap());
        }
        let aux = AuxiliarySet::new(examples, 0).unwrap();
        let bank = PrototypeBank::sample(&aux, 9, 3).unwrap();
        assert_eq!(bank.k(), 9);
        for i in 0..9 {
            for j in (i + 1)..9 {
                assert!(bank.pair(i) != bank.pair(j), "pairs {i} and {j} collide");
            }
        }
        // More pairs than combinations still works (with replacement).
        let big = PrototypeBank::sample(&aux, 12, 3).unwrap();
        assert_eq!(big.k(), 12);
    }
}
