//! Crafting adversarial examples on trained substitutes.
//!
//! The adversarial loss is a softmax over prototype distances (or cosine
//! similarities of tap embeddings): maximizing it pushes the reconstruction
//! away from the positive prototype and toward the negatives. A gradient
//! baseline (I-FGSM or PGD) maximizes that loss to obtain a directional
//! guide; ILA then amplifies the guide's displacement at the encoder output.
//! Every iterate is projected into the perturbation budget and `[0, 1]`.
//!
//! This module never touches victim models: objectives and feature maps are
//! narrow traits, so anything with input gradients can be attacked, but
//! evaluation stays on the other side of the fence.

use ndarray::{Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::ClassifierNet;
use crate::data::{AuxiliarySet, ImageTensor, PrototypeBank};
use crate::error::{Error, Result};
use crate::model::SubstituteModel;
use crate::nn::image_to_batch;
use crate::rng::{derive_seed, rng_from_seed};

pub const DEFAULT_STEP_SIZE: f64 = 1.0 / 255.0;
const EMBEDDING_NORM_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Linf,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub norm: NormKind,
    pub epsilon: f64,
    pub step_size: f64,
}

impl Budget {
    pub fn linf(epsilon: f64) -> Self {
        Self {
            norm: NormKind::Linf,
            epsilon,
            step_size: DEFAULT_STEP_SIZE,
        }
    }

    pub fn l2(epsilon: f64) -> Self {
        Self {
            norm: NormKind::L2,
            epsilon,
            step_size: DEFAULT_STEP_SIZE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // epsilon == 0 is the documented degenerate budget: outputs equal x0.
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            return Err(Error::InvalidAttackConfig("epsilon must be >= 0".into()));
        }
        if self.step_size <= 0.0 {
            return Err(Error::InvalidAttackConfig("step_size must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Ifgsm,
    Pgd,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Euclidean,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub budget: Budget,
    pub baseline: BaselineKind,
    pub baseline_iters: usize,
    pub ila_iters: usize,
    pub lambda: f64,
    /// Negative prototypes to sample; `None` uses the mechanism default
    /// (1 for self-reconstructing models, one per decoder for prototypical).
    pub num_negatives: Option<usize>,
    pub loss_kind: LossKind,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            budget: Budget::linf(0.1),
            baseline: BaselineKind::Ifgsm,
            baseline_iters: 200,
            ila_iters: 100,
            lambda: 1.0,
            num_negatives: None,
            loss_kind: LossKind::Euclidean,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        if self.lambda <= 0.0 {
            return Err(Error::InvalidAttackConfig("lambda must be > 0".into()));
        }
        if let Some(n) = self.num_negatives {
            if n == 0 {
                return Err(Error::InvalidAttackConfig(
                    "num_negatives must be >= 1".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&json);
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Positive prototype(s) for the target's class plus sampled opposite-class
/// negatives. Prototypical models carry one positive per decoder; the
/// self-reconstructing mechanisms carry exactly one (the target itself).
#[derive(Clone, Debug)]
pub struct GuideSet {
    positives: Vec<ImageTensor>,
    negatives: Vec<ImageTensor>,
}

impl GuideSet {
    pub fn new(positives: Vec<ImageTensor>, negatives: Vec<ImageTensor>) -> Result<Self> {
        if positives.is_empty() {
            return Err(Error::InvalidAttackConfig(
                "guide set needs at least one positive".into(),
            ));
        }
        if negatives.is_empty() {
            return Err(Error::EmptyNegatives);
        }
        Ok(Self {
            positives,
            negatives,
        })
    }

    /// Builds guides for an auxiliary target: positives from the prototype
    /// bank when present (one per decoder), otherwise the target itself;
    /// negatives from the bank's opposite prototypes or sampled from the
    /// opposite class.
    pub fn build(
        aux: &AuxiliarySet,
        bank: Option<&PrototypeBank>,
        num_negatives: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        let target = aux.target();
        let opposite = 1 - target.label;
        let positives = match bank {
            Some(b) => (0..b.k()).map(|k| b.prototype(k, target.label).clone()).collect(),
            None => vec![target.image.clone()],
        };
        let negatives = match (bank, num_negatives) {
            // Default for prototypical models: one negative per decoder.
            (Some(b), None) => (0..b.k()).map(|k| b.prototype(k, opposite).clone()).collect(),
            (bank_opt, requested) => {
                let count = requested.unwrap_or(1);
                if count == 0 {
                    return Err(Error::InvalidAttackConfig(
                        "num_negatives must be >= 1".into(),
                    ));
                }
                let _ = bank_opt;
                let pool = aux.images_of_class(opposite);
                let mut order: Vec<usize> = (0..pool.len()).collect();
                use rand::seq::SliceRandom;
                order.shuffle(&mut rng_from_seed(seed));
                (0..count).map(|i| pool[order[i % order.len()]].clone()).collect()
            }
        };
        Self::new(positives, negatives)
    }

    pub fn positive_for(&self, k: usize) -> &ImageTensor {
        if self.positives.len() == 1 {
            &self.positives[0]
        } else {
            &self.positives[k]
        }
    }

    pub fn positive(&self) -> &ImageTensor {
        &self.positives[0]
    }

    pub fn negatives(&self) -> &[ImageTensor] {
        &self.negatives
    }
}

// ---- budget projection ----

/// Clamps `x` into the budget ball around `x0`, then into `[0, 1]`.
pub fn project(x0: &ImageTensor, x: &ImageTensor, budget: &Budget) -> ImageTensor {
    project_raw(x0, x.data(), budget)
}

pub(crate) fn project_raw(x0: &ImageTensor, x: &Array3<f64>, budget: &Budget) -> ImageTensor {
    let mut delta = x - x0.data();
    match budget.norm {
        NormKind::Linf => {
            delta.mapv_inplace(|d| d.clamp(-budget.epsilon, budget.epsilon));
        }
        NormKind::L2 => {
            let norm = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
            if norm > budget.epsilon {
                let scale = budget.epsilon / norm;
                delta.mapv_inplace(|d| d * scale);
            }
        }
    }
    let mut out = x0.data() + &delta;
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    ImageTensor::new(out).expect("projection output is in range")
}

// ---- pure softmax cores (independently testable) ----

/// `-log` softmax share of the positive under negative scaled squared
/// distances: `s_j = -lambda * ||r - p_j||^2` with the positive at index 0.
pub fn prototype_softmax_loss(
    recon: &Array3<f64>,
    positive: &Array3<f64>,
    negatives: &[&Array3<f64>],
    lambda: f64,
) -> f64 {
    let scores = prototype_scores(recon, positive, negatives, lambda);
    neg_log_softmax_share(&scores)
}

fn prototype_scores(
    recon: &Array3<f64>,
    positive: &Array3<f64>,
    negatives: &[&Array3<f64>],
    lambda: f64,
) -> Vec<f64> {
    let mut scores = Vec::with_capacity(1 + negatives.len());
    let d2 = |a: &Array3<f64>, b: &Array3<f64>| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    scores.push(-lambda * d2(recon, positive));
    for neg in negatives {
        scores.push(-lambda * d2(recon, neg));
    }
    scores
}

/// `-log(exp(s_0) / sum_j exp(s_j))` computed stably.
fn neg_log_softmax_share(scores: &[f64]) -> f64 {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    lse - scores[0]
}

/// Softmax weights for the scores.
fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Cosine-similarity softmax loss on embedding vectors, positive at index 0.
/// Norms below the documented `1e-12` guard are reported as errors.
pub fn cosine_softmax_loss(
    embedding: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
    lambda: f64,
) -> Result<f64> {
    let scores = cosine_scores(embedding, positive, negatives, lambda)?;
    Ok(neg_log_softmax_share(&scores))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn checked_norm(v: &[f64]) -> Result<f64> {
    let n = norm(v);
    if n < EMBEDDING_NORM_GUARD {
        return Err(Error::ZeroNormEmbedding(n));
    }
    Ok(n)
}

fn cosine_scores(
    embedding: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
    lambda: f64,
) -> Result<Vec<f64>> {
    let ne = checked_norm(embedding)?;
    let mut scores = Vec::with_capacity(1 + negatives.len());
    let np = checked_norm(positive)?;
    scores.push(lambda * dot(embedding, positive) / (ne * np));
    for neg in negatives {
        let nn = checked_norm(neg)?;
        scores.push(lambda * dot(embedding, neg) / (ne * nn));
    }
    Ok(scores)
}

// ---- model-coupled adversarial losses ----

/// Prototype-softmax adversarial loss for decoder `k` (Euclidean distances).
pub fn adversarial_loss(
    model: &SubstituteModel,
    x: &ImageTensor,
    guides: &GuideSet,
    lambda: f64,
    k: usize,
) -> Result<f64> {
    if lambda <= 0.0 {
        return Err(Error::InvalidAttackConfig("lambda must be > 0".into()));
    }
    let recon = model.reconstruct(x, k)?;
    let negs: Vec<&Array3<f64>> = guides.negatives.iter().map(|n| n.data()).collect();
    Ok(prototype_softmax_loss(
        recon.data(),
        guides.positive_for(k).data(),
        &negs,
        lambda,
    ))
}

/// Cosine-similarity adversarial loss for decoder `k`, computed on embedding
/// tap activations.
pub fn adversarial_loss_cosine(
    model: &SubstituteModel,
    x: &ImageTensor,
    guides: &GuideSet,
    lambda: f64,
    k: usize,
) -> Result<f64> {
    if lambda <= 0.0 {
        return Err(Error::InvalidAttackConfig("lambda must be > 0".into()));
    }
    let e = model.embedding(x, k)?;
    let e_pos = model.embedding(guides.positive_for(k), k)?;
    let e_negs: Result<Vec<Vec<f64>>> = guides
        .negatives
        .iter()
        .map(|n| model.embedding(n, k))
        .collect();
    cosine_softmax_loss(&e, &e_pos, &e_negs?, lambda)
}

/// Decoder-averaged adversarial loss and its input gradient.
pub fn adversarial_loss_and_input_grad(
    model: &SubstituteModel,
    x: &ImageTensor,
    guides: &GuideSet,
    lambda: f64,
    loss_kind: LossKind,
) -> Result<(f64, Array3<f64>)> {
    match loss_kind {
        LossKind::Euclidean => euclidean_loss_grad(model, x, guides, lambda),
        LossKind::Cosine => cosine_loss_grad(model, x, guides, lambda),
    }
}

fn euclidean_loss_grad(
    model: &SubstituteModel,
    x: &ImageTensor,
    guides: &GuideSet,
    lambda: f64,
) -> Result<(f64, Array3<f64>)> {
    let k_total = model.num_decoders();
    let batch = image_to_batch(x);
    let (code, enc_cache) = model.encode_batch(&batch);
    let mut scratch = vec![0.0; model.num_params()];
    let mut loss = 0.0;
    let mut gcode: Option<crate::nn::Batch> = None;
    for k in 0..k_total {
        let (y, dec_cache) = model.decode_batch(k, &code);
        let recon = y.index_axis(Axis(0), 0).to_owned();
        let positive = guides.positive_for(k).data();
        let negs: Vec<&Array3<f64>> = guides.negatives.iter().map(|n| n.data()).collect();
        let scores = prototype_scores(&recon, positive, &negs, lambda);
        loss += neg_log_softmax_share(&scores) / k_total as f64;
        let q = softmax(&scores);
        // dL/dr = sum_j (q_j - [j==0]) * (-2 lambda) (r - p_j)
        let mut grad_r = Array3::<f64>::zeros(recon.dim());
        for (j, p) in std::iter::once(positive).chain(negs.iter().copied()).enumerate() {
            let w = (q[j] - if j == 0 { 1.0 } else { 0.0 }) * (-2.0 * lambda) / k_total as f64;
            grad_r.zip_mut_with(&(&recon - p), |g, d| *g += w * d);
        }
        let mut gy = crate::nn::Batch::zeros(y.dim());
        gy.index_axis_mut(Axis(0), 0).assign(&grad_r);
        let gc = model.decoder_backward(k, &dec_cache, &gy, &mut scratch);
        gcode = Some(match gcode {
            Some(acc) => acc + gc,
            None => gc,
        });
    }
    let gx = model.encoder_backward(&enc_cache, &gcode.expect("K >= 1"), &mut scratch);
    Ok((loss, gx.index_axis(Axis(0), 0).to_owned()))
}

fn cosine_loss_grad(
    model: &SubstituteModel,
    x: &ImageTensor,
    guides: &GuideSet,
    lambda: f64,
) -> Result<(f64, Array3<f64>)> {
    let k_total = model.num_decoders();
    let batch = image_to_batch(x);
    let (code, enc_cache) = model.encode_batch(&batch);
    let mut scratch = vec![0.0; model.num_params()];
    let mut loss = 0.0;
    let mut gcode: Option<crate::nn::Batch> = None;
    for k in 0..k_total {
        let (_, dec_cache) = model.decode_batch(k, &code);
        let tap = match model.spec().embedding_tap {
            crate::model::EmbeddingTap::UpBlock1 => &dec_cache.y_u1,
            crate::model::EmbeddingTap::UpBlock2 => &dec_cache.y_u2,
        };
        let e: Vec<f64> = tap.iter().cloned().collect();
        let e_pos = model.embedding(guides.positive_for(k), k)?;
        let e_negs: Result<Vec<Vec<f64>>> = guides
            .negatives
            .iter()
            .map(|n| model.embedding(n, k))
            .collect();
        let e_negs = e_negs?;
        let scores = cosine_scores(&e, &e_pos, &e_negs, lambda)?;
        loss += neg_log_softmax_share(&scores) / k_total as f64;
        let q = softmax(&scores);
        // dL/de = sum_j (q_j - [j==0]) * lambda * dcos(e, b_j)/de
        let ne = norm(&e);
        let mut ge = vec![0.0; e.len()];
        for (j, b) in std::iter::once(&e_pos).chain(e_negs.iter()).enumerate() {
            let nb = norm(b);
            let cos = dot(&e, b) / (ne * nb);
            let w = (q[j] - if j == 0 { 1.0 } else { 0.0 }) * lambda / k_total as f64;
            for i in 0..e.len() {
                ge[i] += w * (b[i] / (ne * nb) - cos * e[i] / (ne * ne));
            }
        }
        let mut gtap = crate::nn::Batch::zeros(tap.dim());
        for (dst, src) in gtap.iter_mut().zip(ge.iter()) {
            *dst = *src;
        }
        let gc = model.decoder_backward_from_tap(k, &dec_cache, &gtap, &mut scratch);
        gcode = Some(match gcode {
            Some(acc) => acc + gc,
            None => gc,
        });
    }
    let gx = model.encoder_backward(&enc_cache, &gcode.expect("K >= 1"), &mut scratch);
    Ok((loss, gx.index_axis(Axis(0), 0).to_owned()))
}

// ---- attack seams ----

/// A scalar objective with input gradients; baselines maximize it.
pub trait AttackObjective {
    fn loss_and_grad(&self, x: &ImageTensor) -> Result<(f64, Array3<f64>)>;
}

/// A feature map with a vector-Jacobian product; ILA works on it.
pub trait FeatureMap {
    fn feature_len(&self) -> usize;
    fn features(&self, x: &ImageTensor) -> Result<Vec<f64>>;
    /// Returns the features at `x` and the input gradient of
    /// `<features(x), cotangent>`.
    fn features_and_pullback(
        &self,
        x: &ImageTensor,
        cotangent: &[f64],
    ) -> Result<(Vec<f64>, Array3<f64>)>;
}

/// The decoder-averaged adversarial objective on a substitute model.
pub struct SubstituteObjective<'a> {
    pub model: &'a SubstituteModel,
    pub guides: &'a GuideSet,
    pub lambda: f64,
    pub loss_kind: LossKind,
}

impl AttackObjective for SubstituteObjective<'_> {
    fn loss_and_grad(&self, x: &ImageTensor) -> Result<(f64, Array3<f64>)> {
        adversarial_loss_and_input_grad(self.model, x, self.guides, self.lambda, self.loss_kind)
    }
}

/// The encoder output of a substitute model, flattened.
pub struct SubstituteFeatures<'a> {
    pub model: &'a SubstituteModel,
}

impl FeatureMap for SubstituteFeatures<'_> {
    fn feature_len(&self) -> usize {
        let [c, h, w] = self.model.spec().code_shape();
        c * h * w
    }

    fn features(&self, x: &ImageTensor) -> Result<Vec<f64>> {
        Ok(self.model.encode(x)?.data.iter().cloned().collect())
    }

    fn features_and_pullback(
        &self,
        x: &ImageTensor,
        cotangent: &[f64],
    ) -> Result<(Vec<f64>, Array3<f64>)> {
        let batch = image_to_batch(x);
        let (code, cache) = self.model.encode_batch(&batch);
        let feats: Vec<f64> = code.iter().cloned().collect();
        let mut gcode = crate::nn::Batch::zeros(code.dim());
        for (dst, src) in gcode.iter_mut().zip(cotangent.iter()) {
            *dst = *src;
        }
        let mut scratch = vec![0.0; self.model.num_params()];
        let gx = self.model.encoder_backward(&cache, &gcode, &mut scratch);
        Ok((feats, gx.index_axis(Axis(0), 0).to_owned()))
    }
}

/// Cross-entropy of the true label on a softmax classifier; maximizing it is
/// the untargeted attack objective for the supervised baseline.
pub struct ClassifierObjective<'a> {
    pub net: &'a ClassifierNet,
    pub label: u8,
}

impl AttackObjective for ClassifierObjective<'_> {
    fn loss_and_grad(&self, x: &ImageTensor) -> Result<(f64, Array3<f64>)> {
        let batch = image_to_batch(x);
        let fwd = self.net.forward(&batch, None);
        let (loss, dlogits) = crate::nn::softmax_cross_entropy(&fwd.logits, &[self.label]);
        let mut scratch = vec![0.0; self.net.num_params()];
        let gx = self.net.backward(&fwd, &dlogits, &mut scratch);
        Ok((loss, gx.index_axis(Axis(0), 0).to_owned()))
    }
}

/// The classifier's last spatial activation, flattened.
pub struct ClassifierFeatures<'a> {
    pub net: &'a ClassifierNet,
}

impl FeatureMap for ClassifierFeatures<'_> {
    fn feature_len(&self) -> usize {
        0 // unknown until a forward pass; unused
    }

    fn features(&self, x: &ImageTensor) -> Result<Vec<f64>> {
        let fwd = self.net.forward(&image_to_batch(x), None);
        Ok(fwd.features.iter().cloned().collect())
    }

    fn features_and_pullback(
        &self,
        x: &ImageTensor,
        cotangent: &[f64],
    ) -> Result<(Vec<f64>, Array3<f64>)> {
        let fwd = self.net.forward(&image_to_batch(x), None);
        let feats: Vec<f64> = fwd.features.iter().cloned().collect();
        let mut gfeat = crate::nn::Batch::zeros(fwd.features.dim());
        for (dst, src) in gfeat.iter_mut().zip(cotangent.iter()) {
            *dst = *src;
        }
        let mut scratch = vec![0.0; self.net.num_params()];
        let gx = self.net.feature_pullback(&fwd, &gfeat, &mut scratch);
        Ok((feats, gx.index_axis(Axis(0), 0).to_owned()))
    }
}

// ---- baseline attacks and ILA ----

fn signum(g: &Array3<f64>) -> Array3<f64> {
    g.mapv(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

/// Runs the configured gradient baseline from `x0`, maximizing the objective.
/// Returns the directional guide: the final feasible iterate for I-FGSM/PGD,
/// or a sampled opposite-class image when no baseline is requested.
pub fn run_baseline<O: AttackObjective>(
    objective: &O,
    x0: &ImageTensor,
    guides: &GuideSet,
    config: &AttackConfig,
) -> Result<(ImageTensor, Vec<f64>)> {
    config.validate()?;
    let budget = &config.budget;
    match config.baseline {
        BaselineKind::None => {
            let mut rng = rng_from_seed(derive_seed(config.seed, "none-guide"));
            let idx = rng.gen_range(0..guides.negatives().len());
            Ok((guides.negatives()[idx].clone(), Vec::new()))
        }
        BaselineKind::Ifgsm | BaselineKind::Pgd => {
            let mut x = match config.baseline {
                BaselineKind::Pgd => {
                    let mut rng = rng_from_seed(derive_seed(config.seed, "pgd-start"));
                    let noise = Array3::from_shape_fn(x0.data().dim(), |_| {
                        rng.gen_range(-budget.epsilon..=budget.epsilon)
                    });
                    project_raw(x0, &(x0.data() + &noise), budget)
                }
                _ => x0.clone(),
            };
            let mut trace = Vec::with_capacity(config.baseline_iters);
            for _ in 0..config.baseline_iters {
                let (loss, grad) = objective.loss_and_grad(&x)?;
                trace.push(loss);
                let stepped = x.data() + &(signum(&grad) * budget.step_size);
                x = project_raw(x0, &stepped, budget);
            }
            Ok((x, trace))
        }
    }
}

/// ILA refinement: sign-gradient ascent on the projection of the feature
/// displacement onto the guide's displacement, starting from `x0`.
pub fn run_ila<F: FeatureMap>(
    features: &F,
    x0: &ImageTensor,
    guide: &ImageTensor,
    config: &AttackConfig,
) -> Result<(ImageTensor, Vec<f64>)> {
    config.validate()?;
    let budget = &config.budget;
    let f0 = features.features(x0)?;
    let fg = features.features(guide)?;
    let direction: Vec<f64> = fg.iter().zip(&f0).map(|(g, o)| g - o).collect();
    let dir_norm = norm(&direction);
    if dir_norm < EMBEDDING_NORM_GUARD {
        return Err(Error::ZeroGuideDirection);
    }
    let mut x = x0.clone();
    let mut trace = Vec::with_capacity(config.ila_iters);
    for _ in 0..config.ila_iters {
        let (feats, grad) = features.features_and_pullback(&x, &direction)?;
        let objective: f64 = feats
            .iter()
            .zip(&f0)
            .zip(&direction)
            .map(|((f, o), d)| (f - o) * d)
            .sum();
        trace.push(objective);
        let stepped = x.data() + &(signum(&grad) * budget.step_size);
        x = project_raw(x0, &stepped, budget);
    }
    Ok((x, trace))
}

// ---- full pipeline ----

/// Provenance record written alongside each crafted example.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CraftRecord {
    pub config_hash: String,
    pub seed: u64,
    pub epsilon: f64,
    pub norm: NormKind,
    pub baseline: BaselineKind,
    pub baseline_iters: usize,
    pub ila_iters: usize,
    pub lambda: f64,
    pub loss_kind: LossKind,
    pub baseline_final_loss: Option<f64>,
    pub ila_final_objective: Option<f64>,
    /// Set when the ILA guide direction collapsed and the baseline output was
    /// used as the crafted example.
    pub zero_guide_fallback: bool,
    pub achieved_linf: f64,
    pub achieved_l2: f64,
}

fn feasibility_check(x0: &ImageTensor, x: &ImageTensor, budget: &Budget) {
    let linf = x.linf_distance(x0);
    let l2 = x.l2_distance(x0);
    match budget.norm {
        NormKind::Linf => assert!(
            linf <= budget.epsilon + 1e-9,
            "crafted example violates linf budget: {linf} > {}",
            budget.epsilon
        ),
        NormKind::L2 => assert!(
            l2 <= budget.epsilon + 1e-6,
            "crafted example violates l2 budget: {l2} > {}",
            budget.epsilon
        ),
    }
    assert!(
        x.data().iter().all(|v| (0.0..=1.0).contains(v)),
        "crafted example leaves [0, 1]"
    );
}

fn finish_craft(
    x0: &ImageTensor,
    guide: ImageTensor,
    guide_feasible: bool,
    baseline_trace: Vec<f64>,
    ila: Result<(ImageTensor, Vec<f64>)>,
    config: &AttackConfig,
) -> Result<(ImageTensor, CraftRecord)> {
    let mut zero_guide_fallback = false;
    let (example, ila_trace) = if config.ila_iters == 0 {
        // Documented convention: without ILA the guide itself is the crafted
        // example when feasible, otherwise the attack degenerates to x0.
        (if guide_feasible { guide } else { x0.clone() }, Vec::new())
    } else {
        match ila {
            Ok((x, trace)) => (x, trace),
            Err(Error::ZeroGuideDirection) => {
                zero_guide_fallback = true;
                (if guide_feasible { guide } else { x0.clone() }, Vec::new())
            }
            Err(e) => return Err(e),
        }
    };
    feasibility_check(x0, &example, &config.budget);
    let record = CraftRecord {
        config_hash: config.hash(),
        seed: config.seed,
        epsilon: config.budget.epsilon,
        norm: config.budget.norm,
        baseline: config.baseline,
        baseline_iters: config.baseline_iters,
        ila_iters: config.ila_iters,
        lambda: config.lambda,
        loss_kind: config.loss_kind,
        baseline_final_loss: baseline_trace.last().copied(),
        ila_final_objective: ila_trace.last().copied(),
        zero_guide_fallback,
        achieved_linf: example.linf_distance(x0),
        achieved_l2: example.l2_distance(x0),
    };
    Ok((example, record))
}

/// Crafts an adversarial example for the auxiliary target on a trained
/// substitute: guide construction, baseline attack, then ILA.
///
/// `bank` must be the prototype bank the model was trained against for
/// prototypical models, and `None` otherwise.
pub fn craft(
    model: &SubstituteModel,
    aux: &AuxiliarySet,
    bank: Option<&PrototypeBank>,
    config: &AttackConfig,
) -> Result<(ImageTensor, CraftRecord)> {
    config.validate()?;
    if let Some(b) = bank {
        if b.k() != model.num_decoders() {
            return Err(Error::PrototypeCountMismatch {
                bank_k: b.k(),
                model_k: model.num_decoders(),
            });
        }
    }
    let x0 = &aux.target().image;
    let guides = GuideSet::build(
        aux,
        bank,
        config.num_negatives,
        derive_seed(config.seed, "negatives"),
    )?;
    let objective = SubstituteObjective {
        model,
        guides: &guides,
        lambda: config.lambda,
        loss_kind: config.loss_kind,
    };
    let (guide, baseline_trace) = run_baseline(&objective, x0, &guides, config)?;
    let guide_feasible = !matches!(config.baseline, BaselineKind::None);
    let features = SubstituteFeatures { model };
    let ila = run_ila(&features, x0, &guide, config);
    finish_craft(x0, guide, guide_feasible, baseline_trace, ila, config)
}

/// The same pipeline on the supervised-baseline classifier: I-FGSM/PGD on the
/// true-label cross-entropy, then ILA on the last spatial feature map.
pub fn craft_on_classifier(
    net: &ClassifierNet,
    aux: &AuxiliarySet,
    config: &AttackConfig,
) -> Result<(ImageTensor, CraftRecord)> {
    config.validate()?;
    let target = aux.target();
    let x0 = &target.image;
    let guides = GuideSet::build(
        aux,
        None,
        config.num_negatives,
        derive_seed(config.seed, "negatives"),
    )?;
    let objective = ClassifierObjective {
        net,
        label: target.label,
    };
    let (guide, baseline_trace) = run_baseline(&objective, x0, &guides, config)?;
    let guide_feasible = !matches!(config.baseline, BaselineKind::None);
    let features = ClassifierFeatures { net };
    let ila = run_ila(&features, x0, &guide, config);
    finish_craft(x0, guide, guide_feasible, baseline_trace, ila, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr3;

    fn flat_image(v: f64) -> ImageTensor {
        ImageTensor::new(Array3::from_elem((1, 2, 2), v)).unwrap()
    }

    #[test]
    fn project_returns_feasible_input_unchanged() {
        let x0 = flat_image(0.5);
        let x = flat_image(0.55);
        let budget = Budget::linf(0.1);
        assert_eq!(project(&x0, &x, &budget), x);
    }

    #[test]
    fn project_clamps_linf_overshoot() {
        let x0 = flat_image(0.2);
        let x = flat_image(0.7);
        let budget = Budget::linf(0.1);
        let out = project(&x0, &x, &budget);
        for v in out.data() {
            assert!((v - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn project_rescales_l2_overshoot() {
        let x0 = flat_image(0.5);
        let delta = arr3(&[[[0.2, -0.2], [0.2, -0.2]]]);
        let x = ImageTensor::new(x0.data() + &delta).unwrap();
        let eps = x.l2_distance(&x0) / 2.0;
        let budget = Budget::l2(eps);
        let out = project(&x0, &x, &budget);
        let achieved = out.l2_distance(&x0);
        assert!(achieved <= eps + 1e-9, "{achieved} > {eps}");
        assert!((achieved - eps).abs() < 1e-9, "should land on the sphere");
    }

    #[test]
    fn prototype_softmax_symmetry_is_ln2() {
        // Reconstruction equidistant from positive and a single negative.
        let recon = arr3(&[[[0.5, 0.5], [0.5, 0.5]]]);
        let pos = arr3(&[[[0.6, 0.5], [0.5, 0.5]]]);
        let neg = arr3(&[[[0.4, 0.5], [0.5, 0.5]]]);
        let loss = prototype_softmax_loss(&recon, &pos, &[&neg], 1.0);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn prototype_softmax_positive_hit_closed_form() {
        // recon == positive, negative at squared distance d2:
        // L = ln(1 + exp(-lambda d2))
        let recon = arr3(&[[[0.5, 0.5], [0.5, 0.5]]]);
        let neg = arr3(&[[[0.8, 0.5], [0.5, 0.6]]]);
        let d2 = 0.3f64 * 0.3 + 0.1 * 0.1;
        for lambda in [0.5, 1.0, 4.0] {
            let loss = prototype_softmax_loss(&recon, &recon.clone(), &[&neg], lambda);
            let expected = (1.0 + (-lambda * d2).exp()).ln();
            assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
        }
    }

    #[test]
    fn lambda_scaling_preserves_preference_order() {
        let pos = arr3(&[[[0.9, 0.5], [0.5, 0.5]]]);
        let neg = arr3(&[[[0.1, 0.5], [0.5, 0.5]]]);
        // Candidate closer to the positive keeps the lower loss at any lambda.
        let near_pos = arr3(&[[[0.8, 0.5], [0.5, 0.5]]]);
        let near_neg = arr3(&[[[0.2, 0.5], [0.5, 0.5]]]);
        for lambda in [0.1, 1.0, 10.0] {
            let l_near = prototype_softmax_loss(&near_pos, &pos, &[&neg], lambda);
            let l_far = prototype_softmax_loss(&near_neg, &pos, &[&neg], lambda);
            assert!(l_near < l_far);
        }
    }

    #[test]
    fn cosine_softmax_closed_forms() {
        // e == positive, orthogonal negative: L = -ln(e^l / (e^l + 1)).
        let e = vec![1.0, 0.0];
        let neg = vec![0.0, 1.0];
        for lambda in [0.5, 1.0, 2.0] {
            let loss = cosine_softmax_loss(&e, &e.clone(), &[neg.clone()], lambda).unwrap();
            let expected = (1.0 + (-lambda as f64).exp()).ln();
            assert!((loss - expected).abs() < 1e-12);
        }
        // Identical positive and negative: ln 2 regardless of lambda.
        let loss = cosine_softmax_loss(&e, &neg.clone(), &[neg.clone()], 3.0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        // lambda -> 0 with m negatives: ln(m + 1).
        let negs = vec![vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.5, 0.5]];
        let loss = cosine_softmax_loss(&e, &e.clone(), &negs, 1e-12).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn cosine_softmax_reports_zero_norm() {
        let e = vec![0.0, 0.0];
        let p = vec![1.0, 0.0];
        assert!(matches!(
            cosine_softmax_loss(&e, &p, &[p.clone()], 1.0),
            Err(Error::ZeroNormEmbedding(_))
        ));
    }

    // A linear "model": objective w.x and features A.x, for closed-form
    // oracles on the attack loops.
    struct LinearObjective {
        w: Array3<f64>,
    }

    impl AttackObjective for LinearObjective {
        fn loss_and_grad(&self, x: &ImageTensor) -> Result<(f64, Array3<f64>)> {
            let loss = (x.data() * &self.w).sum();
            Ok((loss, self.w.clone()))
        }
    }

    struct LinearFeatures {
        rows: Vec<Array3<f64>>,
    }

    impl FeatureMap for LinearFeatures {
        fn feature_len(&self) -> usize {
            self.rows.len()
        }

        fn features(&self, x: &ImageTensor) -> Result<Vec<f64>> {
            Ok(self.rows.iter().map(|r| (x.data() * r).sum()).collect())
        }

        fn features_and_pullback(
            &self,
            x: &ImageTensor,
            cotangent: &[f64],
        ) -> Result<(Vec<f64>, Array3<f64>)> {
            let feats = self.features(x)?;
            let mut g = Array3::zeros(x.data().dim());
            for (r, c) in self.rows.iter().zip(cotangent) {
                g.zip_mut_with(r, |gi, ri| *gi += c * ri);
            }
            Ok((feats, g))
        }
    }

    fn toy_guides() -> GuideSet {
        GuideSet::new(vec![flat_image(0.9)], vec![flat_image(0.1)]).unwrap()
    }

    #[test]
    fn ifgsm_single_step_moves_by_step_sign_w() {
        let w = arr3(&[[[1.0, -2.0], [0.5, -0.25]]]);
        let objective = LinearObjective { w: w.clone() };
        let x0 = flat_image(0.5);
        let mut config = AttackConfig::new(0);
        config.baseline_iters = 1;
        config.ila_iters = 0;
        let (x, _) = run_baseline(&objective, &x0, &toy_guides(), &config).unwrap();
        for (out, wi) in x.data().iter().zip(w.iter()) {
            let expected = 0.5 + DEFAULT_STEP_SIZE * wi.signum();
            assert!((out - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn ifgsm_zero_iters_returns_x0() {
        let objective = LinearObjective {
            w: Array3::zeros((1, 2, 2)),
        };
        let x0 = flat_image(0.3);
        let mut config = AttackConfig::new(0);
        config.baseline_iters = 0;
        let (x, _) = run_baseline(&objective, &x0, &toy_guides(), &config).unwrap();
        assert_eq!(x, x0);
    }

    #[test]
    fn every_baseline_iterate_stays_feasible() {
        let w = arr3(&[[[3.0, -1.0], [2.0, -4.0]]]);
        let objective = LinearObjective { w };
        let x0 = flat_image(0.5);
        let mut config = AttackConfig::new(1);
        config.budget = Budget::linf(0.05);
        config.baseline_iters = 40;
        config.baseline = BaselineKind::Pgd;
        let (x, _) = run_baseline(&objective, &x0, &toy_guides(), &config).unwrap();
        assert!(x.linf_distance(&x0) <= 0.05 + 1e-12);
        assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn ila_objective_non_decreasing_on_linear_features() {
        let rows = vec![
            arr3(&[[[1.0, 0.0], [0.0, -1.0]]]),
            arr3(&[[[0.0, 2.0], [-1.0, 0.0]]]),
        ];
        let features = LinearFeatures { rows };
        let x0 = flat_image(0.5);
        let guide = ImageTensor::new(arr3(&[[[0.9, 0.1], [0.4, 0.2]]])).unwrap();
        let mut config = AttackConfig::new(2);
        config.ila_iters = 30;
        let (x, trace) = run_ila(&features, &x0, &guide, &config).unwrap();
        for pair in trace.windows(2) {
            assert!(
                pair[1] >= pair[0] - 1e-12,
                "ILA objective decreased: {pair:?}"
            );
        }
        assert!(x.linf_distance(&x0) <= config.budget.epsilon + 1e-12);
    }

    #[test]
    fn ila_zero_guide_direction_is_reported() {
        let features = LinearFeatures {
            rows: vec![Array3::zeros((1, 2, 2))],
        };
        let x0 = flat_image(0.5);
        let guide = flat_image(0.9);
        let config = AttackConfig::new(3);
        assert!(matches!(
            run_ila(&features, &x0, &guide, &config),
            Err(Error::ZeroGuideDirection)
        ));
    }
}
