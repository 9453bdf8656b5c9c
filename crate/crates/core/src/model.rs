//! Auto-encoding substitute models: one shared encoder, K decoders.
//!
//! The architecture is a scaled-down image-to-image generator: an initial
//! conv stage, two stride-2 downsampling stages, residual blocks at the
//! bottleneck, and per-decoder two nearest-neighbour upsampling stages with
//! a sigmoid output head so reconstructions always lie in `[0, 1]`.
//!
//! The encoder output is the feature tap used by intermediate-level attacks;
//! a configurable decoder activation (default: the first up-block, two layers
//! before the output head) is the embedding tap for the cosine loss.

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::nn::{
    image_to_batch, instance_norm_backward, instance_norm_forward, relu_backward, relu_forward,
    sigmoid_backward, sigmoid_forward, upsample2_backward, upsample2_forward, Batch, Conv2d,
    ConvCache, InstanceNormCache, ParamAlloc,
};
use crate::rng::rng_from_seed;

/// Stride product of the two downsampling stages.
pub const DOWNSAMPLE_FACTOR: usize = 4;

/// Which decoder activation feeds the embedding used by the cosine loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingTap {
    /// Output of the first up-block (two layers before the output head).
    #[default]
    UpBlock1,
    /// Output of the second up-block (one layer before the output head).
    UpBlock2,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: [usize; 3],
    pub base_width: usize,
    pub num_residual_blocks: usize,
    pub num_decoders: usize,
    pub seed: u64,
    #[serde(default)]
    pub embedding_tap: EmbeddingTap,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_shape;
        if c != 1 && c != 3 {
            return Err(Error::InvalidModelSpec(format!(
                "input channels must be 1 or 3, got {c}"
            )));
        }
        if h % DOWNSAMPLE_FACTOR != 0 || w % DOWNSAMPLE_FACTOR != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidModelSpec(format!(
                "input {h}x{w} not divisible by the downsampling stride {DOWNSAMPLE_FACTOR}"
            )));
        }
        if self.base_width < 8 {
            return Err(Error::InvalidModelSpec(format!(
                "base_width must be >= 8, got {}",
                self.base_width
            )));
        }
        if self.num_residual_blocks < 1 {
            return Err(Error::InvalidModelSpec(
                "num_residual_blocks must be >= 1".into(),
            ));
        }
        if self.num_decoders < 1 {
            return Err(Error::InvalidModelSpec("num_decoders must be >= 1".into()));
        }
        Ok(())
    }

    /// Shape of the bottleneck code for this spec.
    pub fn code_shape(&self) -> [usize; 3] {
        let [_, h, w] = self.input_shape;
        [
            4 * self.base_width,
            h / DOWNSAMPLE_FACTOR,
            w / DOWNSAMPLE_FACTOR,
        ]
    }

    /// Stable hash of the spec's canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex_digest(&json)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Spatial bottleneck code `[C', H', W']` for a single image.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeTensor {
    pub data: Array3<f64>,
}

struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

struct EncoderLayout {
    conv_in: Conv2d,
    down1: Conv2d,
    down2: Conv2d,
    res: Vec<ResBlock>,
}

struct DecoderLayout {
    up1: Conv2d,
    up2: Conv2d,
    out: Conv2d,
}

pub struct SubstituteModel {
    spec: ModelSpec,
    enc: EncoderLayout,
    decs: Vec<DecoderLayout>,
    params: Vec<f64>,
}

pub(crate) struct ResCache {
    c1: ConvCache,
    n1: InstanceNormCache,
    y1: Batch,
    c2: ConvCache,
    n2: InstanceNormCache,
}

pub(crate) struct EncCache {
    c_in: ConvCache,
    n_in: InstanceNormCache,
    y_in: Batch,
    c_d1: ConvCache,
    n_d1: InstanceNormCache,
    y_d1: Batch,
    c_d2: ConvCache,
    n_d2: InstanceNormCache,
    y_d2: Batch,
    res: Vec<ResCache>,
}

pub(crate) struct DecCache {
    c_u1: ConvCache,
    n_u1: InstanceNormCache,
    pub(crate) y_u1: Batch,
    c_u2: ConvCache,
    n_u2: InstanceNormCache,
    pub(crate) y_u2: Batch,
    c_out: ConvCache,
    pub(crate) y: Batch,
}

impl SubstituteModel {
    /// Builds a model with parameters initialized deterministically from
    /// `spec.seed`.
    pub fn build(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let [c, _, _] = spec.input_shape;
        let w = spec.base_width;
        let mut alloc = ParamAlloc::new();
        let enc = EncoderLayout {
            conv_in: Conv2d::new(&mut alloc, c, w, 3, 1, 1),
            down1: Conv2d::new(&mut alloc, w, 2 * w, 3, 2, 1),
            down2: Conv2d::new(&mut alloc, 2 * w, 4 * w, 3, 2, 1),
            res: (0..spec.num_residual_blocks)
                .map(|_| ResBlock {
                    conv1: Conv2d::new(&mut alloc, 4 * w, 4 * w, 3, 1, 1),
                    conv2: Conv2d::new(&mut alloc, 4 * w, 4 * w, 3, 1, 1),
                })
                .collect(),
        };
        let decs: Vec<DecoderLayout> = (0..spec.num_decoders)
            .map(|_| DecoderLayout {
                up1: Conv2d::new(&mut alloc, 4 * w, 2 * w, 3, 1, 1),
                up2: Conv2d::new(&mut alloc, 2 * w, w, 3, 1, 1),
                out: Conv2d::new(&mut alloc, w, c, 3, 1, 1),
            })
            .collect();

        let mut params = vec![0.0; alloc.total()];
        let mut rng = rng_from_seed(spec.seed);
        for conv in [&enc.conv_in, &enc.down1, &enc.down2] {
            conv.init(&mut params, &mut rng);
        }
        for block in &enc.res {
            block.conv1.init(&mut params, &mut rng);
            block.conv2.init(&mut params, &mut rng);
        }
        for dec in &decs {
            dec.up1.init(&mut params, &mut rng);
            dec.up2.init(&mut params, &mut rng);
            dec.out.init(&mut params, &mut rng);
        }
        Ok(Self {
            spec,
            enc,
            decs,
            params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_decoders(&self) -> usize {
        self.spec.num_decoders
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

    fn check_input(&self, x: &ImageTensor) -> Result<()> {
        if x.shape() != self.spec.input_shape {
            return Err(Error::ShapeMismatch {
                expected: self.spec.input_shape,
                got: x.shape(),
            });
        }
        Ok(())
    }

    fn check_decoder(&self, k: usize) -> Result<()> {
        if k >= self.decs.len() {
            return Err(Error::DecoderOutOfRange {
                k,
                num_decoders: self.decs.len(),
            });
        }
        Ok(())
    }

    /// Deterministic encoder map for a single image.
    pub fn encode(&self, x: &ImageTensor) -> Result<CodeTensor> {
        self.check_input(x)?;
        let (code, _) = self.encode_batch(&image_to_batch(x));
        Ok(CodeTensor {
            data: code.index_axis(ndarray::Axis(0), 0).to_owned(),
        })
    }

    /// Decoder `k` applied to a code; output has the input shape with values
    /// in `[0, 1]`.
    pub fn decode(&self, code: &CodeTensor, k: usize) -> Result<ImageTensor> {
        self.check_decoder(k)?;
        let cs = self.spec.code_shape();
        let got = code.data.dim();
        if [got.0, got.1, got.2] != cs {
            return Err(Error::ShapeMismatch {
                expected: cs,
                got: [got.0, got.1, got.2],
            });
        }
        let mut batch = Batch::zeros((1, cs[0], cs[1], cs[2]));
        batch.index_axis_mut(ndarray::Axis(0), 0).assign(&code.data);
        let (y, _) = self.decode_batch(k, &batch);
        ImageTensor::new(y.index_axis(ndarray::Axis(0), 0).to_owned())
    }

    /// `decode(encode(x), k)` in one call.
    pub fn reconstruct(&self, x: &ImageTensor, k: usize) -> Result<ImageTensor> {
        self.check_input(x)?;
        self.check_decoder(k)?;
        let (code, _) = self.encode_batch(&image_to_batch(x));
        let (y, _) = self.decode_batch(k, &code);
        ImageTensor::new(y.index_axis(ndarray::Axis(0), 0).to_owned())
    }

    /// Flattened activation at the decoder's embedding tap.
    pub fn embedding(&self, x: &ImageTensor, k: usize) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.check_decoder(k)?;
        let (code, _) = self.encode_batch(&image_to_batch(x));
        let (_, dec_cache) = self.decode_batch(k, &code);
        let tap = match self.spec.embedding_tap {
            EmbeddingTap::UpBlock1 => &dec_cache.y_u1,
            EmbeddingTap::UpBlock2 => &dec_cache.y_u2,
        };
        Ok(tap.iter().cloned().collect())
    }

    // ---- batched internals shared by training and attacks ----

    pub(crate) fn encode_batch(&self, x: &Batch) -> (Batch, EncCache) {
        let p = &self.params;
        let (t, c_in) = self.enc.conv_in.forward(p, x);
        let (t, n_in) = instance_norm_forward(&t);
        let y_in = relu_forward(&t);
        let (t, c_d1) = self.enc.down1.forward(p, &y_in);
        let (t, n_d1) = instance_norm_forward(&t);
        let y_d1 = relu_forward(&t);
        let (t, c_d2) = self.enc.down2.forward(p, &y_d1);
        let (t, n_d2) = instance_norm_forward(&t);
        let y_d2 = relu_forward(&t);

        let mut h = y_d2.clone();
        let mut res_caches = Vec::with_capacity(self.enc.res.len());
        for block in &self.enc.res {
            let (t1, c1) = block.conv1.forward(p, &h);
            let (t1, n1) = instance_norm_forward(&t1);
            let y1 = relu_forward(&t1);
            let (t2, c2) = block.conv2.forward(p, &y1);
            let (t2, n2) = instance_norm_forward(&t2);
            h = &h + &t2;
            res_caches.push(ResCache { c1, n1, y1, c2, n2 });
        }
        (
            h,
            EncCache {
                c_in,
                n_in,
                y_in,
                c_d1,
                n_d1,
                y_d1,
                c_d2,
                n_d2,
                y_d2,
                res: res_caches,
            },
        )
    }

    /// Backpropagates a cotangent at the code through the encoder,
    /// accumulating parameter gradients and returning the input gradient.
    pub(crate) fn encoder_backward(
        &self,
        cache: &EncCache,
        gcode: &Batch,
        grads: &mut [f64],
    ) -> Batch {
        let p = &self.params;
        let mut g = gcode.clone();
        for (block, bc) in self.enc.res.iter().zip(cache.res.iter()).rev() {
            let g_skip = g.clone();
            let g2 = instance_norm_backward(&bc.n2, &g);
            let g2 = block.conv2.backward(p, &bc.c2, &g2, grads);
            let g2 = relu_backward(&bc.y1, &g2);
            let g2 = instance_norm_backward(&bc.n1, &g2);
            let g_main = block.conv1.backward(p, &bc.c1, &g2, grads);
            g = &g_main + &g_skip;
        }
        let g = relu_backward(&cache.y_d2, &g);
        let g = instance_norm_backward(&cache.n_d2, &g);
        let g = self.enc.down2.backward(p, &cache.c_d2, &g, grads);
        let g = relu_backward(&cache.y_d1, &g);
        let g = instance_norm_backward(&cache.n_d1, &g);
        let g = self.enc.down1.backward(p, &cache.c_d1, &g, grads);
        let g = relu_backward(&cache.y_in, &g);
        let g = instance_norm_backward(&cache.n_in, &g);
        self.enc.conv_in.backward(p, &cache.c_in, &g, grads)
    }

    pub(crate) fn decode_batch(&self, k: usize, code: &Batch) -> (Batch, DecCache) {
        let p = &self.params;
        let dec = &self.decs[k];
        let u = upsample2_forward(code);
        let (t, c_u1) = dec.up1.forward(p, &u);
        let (t, n_u1) = instance_norm_forward(&t);
        let y_u1 = relu_forward(&t);
        let u2 = upsample2_forward(&y_u1);
        let (t, c_u2) = dec.up2.forward(p, &u2);
        let (t, n_u2) = instance_norm_forward(&t);
        let y_u2 = relu_forward(&t);
        let (logits, c_out) = dec.out.forward(p, &y_u2);
        let y = sigmoid_forward(&logits);
        (
            y.clone(),
            DecCache {
                c_u1,
                n_u1,
                y_u1,
                c_u2,
                n_u2,
                y_u2,
                c_out,
                y,
            },
        )
    }

    /// Backpropagates an output cotangent through decoder `k`, returning the
    /// gradient at the code.
    pub(crate) fn decoder_backward(
        &self,
        k: usize,
        cache: &DecCache,
        gy: &Batch,
        grads: &mut [f64],
    ) -> Batch {
        let dec = &self.decs[k];
        let g = sigmoid_backward(&cache.y, gy);
        let g = dec.out.backward(&self.params, &cache.c_out, &g, grads);
        let g = relu_backward(&cache.y_u2, &g);
        self.decoder_backward_from_preact_u2(k, cache, g, grads)
    }

    /// Backpropagates a cotangent injected at the embedding tap.
    pub(crate) fn decoder_backward_from_tap(
        &self,
        k: usize,
        cache: &DecCache,
        gtap: &Batch,
        grads: &mut [f64],
    ) -> Batch {
        match self.spec.embedding_tap {
            EmbeddingTap::UpBlock1 => {
                let g = relu_backward(&cache.y_u1, gtap);
                self.decoder_backward_from_preact_u1(k, cache, g, grads)
            }
            EmbeddingTap::UpBlock2 => {
                let g = relu_backward(&cache.y_u2, gtap);
                self.decoder_backward_from_preact_u2(k, cache, g, grads)
            }
        }
    }

    fn decoder_backward_from_preact_u2(
        &self,
        k: usize,
        cache: &DecCache,
        g: Batch,
        grads: &mut [f64],
    ) -> Batch {
        let dec = &self.decs[k];
        let g = instance_norm_backward(&cache.n_u2, &g);
        let g = dec.up2.backward(&self.params, &cache.c_u2, &g, grads);
        let g = upsample2_backward(&g);
        let g = relu_backward(&cache.y_u1, &g);
        self.decoder_backward_from_preact_u1(k, cache, g, grads)
    }

    fn decoder_backward_from_preact_u1(
        &self,
        k: usize,
        cache: &DecCache,
        g: Batch,
        grads: &mut [f64],
    ) -> Batch {
        let dec = &self.decs[k];
        let g = instance_norm_backward(&cache.n_u1, &g);
        let g = dec.up1.backward(&self.params, &cache.c_u1, &g, grads);
        upsample2_backward(&g)
    }
}

// ---- checkpoint container ----

const MAGIC: &[u8; 4] = b"NBAE";

/// Writes `(spec, parameters)` to a self-describing binary container.
pub fn save_checkpoint(model: &SubstituteModel, path: &Path) -> Result<()> {
    let spec_json = serde_json::to_vec(model.spec()).expect("spec serializes");
    crate::container::save(path, MAGIC, &spec_json, model.params())
}

/// Reads a checkpoint, rejecting unknown formats, spec-hash mismatches, and
/// corrupted parameter payloads.
pub fn load_checkpoint(path: &Path) -> Result<SubstituteModel> {
    let (spec_json, params) = crate::container::load(path, MAGIC)?;
    let spec: ModelSpec = serde_json::from_slice(&spec_json)
        .map_err(|e| Error::CheckpointFormat(format!("bad spec json: {e}")))?;
    let mut model = SubstituteModel::build(spec)?;
    if params.len() != model.num_params() {
        return Err(Error::CheckpointFormat(format!(
            "parameter count {} does not match spec layout {}",
            params.len(),
            model.num_params()
        )));
    }
    model.set_params(&params)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    pub(crate) fn small_spec(k: usize) -> ModelSpec {
        ModelSpec {
            input_shape: [3, 8, 8],
            base_width: 8,
            num_residual_blocks: 1,
            num_decoders: k,
            seed: 11,
            embedding_tap: EmbeddingTap::default(),
        }
    }

    fn random_image(seed: u64, shape: [usize; 3]) -> ImageTensor {
        let mut rng = rng_from_seed(seed);
        ImageTensor::new(Array3::from_shape_fn(
            (shape[0], shape[1], shape[2]),
            |_| rng.gen_range(0.05..0.95),
        ))
        .unwrap()
    }

    #[test]
    fn reconstruct_has_input_shape_and_valid_range() {
        let model = SubstituteModel::build(small_spec(1)).unwrap();
        let x = random_image(0, [3, 8, 8]);
        let y = model.reconstruct(&x, 0).unwrap();
        assert_eq!(y.shape(), [3, 8, 8]);
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn code_shape_follows_spec() {
        let model = SubstituteModel::build(small_spec(1)).unwrap();
        let x = random_image(1, [3, 8, 8]);
        let code = model.encode(&x).unwrap();
        assert_eq!(code.data.dim(), (32, 2, 2));
    }

    #[test]
    fn build_is_deterministic() {
        let a = SubstituteModel::build(small_spec(2)).unwrap();
        let b = SubstituteModel::build(small_spec(2)).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn encode_is_deterministic() {
        let model = SubstituteModel::build(small_spec(1)).unwrap();
        let x = random_image(2, [3, 8, 8]);
        let a = model.encode(&x).unwrap();
        let b = model.encode(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_pixel_perturbation_changes_code() {
        let model = SubstituteModel::build(small_spec(1)).unwrap();
        let x = random_image(3, [3, 8, 8]);
        let mut data = x.data().clone();
        data[[0, 4, 4]] += 1e-3;
        let x2 = ImageTensor::new(data).unwrap();
        let a = model.encode(&x).unwrap();
        let b = model.encode(&x2).unwrap();
        let diff: f64 = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(u, v)| (u - v).abs())
            .sum();
        assert!(diff > 0.0, "code insensitive to input perturbation");
    }

    #[test]
    fn decoder_index_out_of_range_is_reported() {
        let model = SubstituteModel::build(small_spec(2)).unwrap();
        let x = random_image(4, [3, 8, 8]);
        let code = model.encode(&x).unwrap();
        assert!(model.decode(&code, 1).is_ok());
        assert!(matches!(
            model.decode(&code, 2),
            Err(Error::DecoderOutOfRange { .. })
        ));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = small_spec(1);
        spec.input_shape = [3, 10, 10]; // not divisible by 4
        assert!(SubstituteModel::build(spec).is_err());
        let mut spec = small_spec(1);
        spec.base_width = 4;
        assert!(SubstituteModel::build(spec).is_err());
    }

    #[test]
    fn embedding_self_similarity_is_one() {
        let model = SubstituteModel::build(small_spec(1)).unwrap();
        let x = random_image(5, [3, 8, 8]);
        let e = model.embedding(&x, 0).unwrap();
        let norm: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 0.0);
        let cos: f64 = e.iter().map(|v| v * v).sum::<f64>() / (norm * norm);
        assert!((cos - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_and_hash_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nbae");
        let model = SubstituteModel::build(small_spec(2)).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.spec(), model.spec());
        assert_eq!(loaded.params(), model.params());

        // Corrupt one byte inside the spec json region.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[14] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointHashMismatch) | Err(Error::CheckpointFormat(_))
        ));
    }
}
