//! Procedural two-class toy imagery and the small victim zoo used for
//! desk-scale transfer experiments.
//!
//! Class 0 draws a filled disk, class 1 a cross, over a background with a
//! fixed-direction brightness ramp (so undoing rotations and jigsaw shuffles
//! stays well-posed) plus per-image color, position, size, contrast, and
//! noise variation.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::{ClassifierArch, ClassifierNet, ClassifierSpec};
use crate::data::{ImageTensor, LabeledImage};
use crate::error::Result;
use crate::evaluation::{LocalVerifier, LocalVictim};
use crate::rng::{derive_seed, rng_from_seed};
use crate::training::{train_classifier, Mechanism, TrainConfig};

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on open-interval uniforms.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generates one toy image of the given class (`size` must be divisible by 4).
///
/// The class cue is a global diagonal grating (+45 degrees for class 0,
/// -45 for class 1) whose amplitude is comparable to the attack budgets, so
/// a directed perturbation can meaningfully corrupt it. Images also carry a
/// fixed-direction brightness ramp (an orientation anchor that keeps the
/// rotation and jigsaw pretexts well-posed) and class-agnostic clutter
/// patches that a 20-image supervised fit happily shortcuts onto.
pub fn toy_image(class: u8, size: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    let s = size as f64;
    let base: [f64; 3] = [
        rng.gen_range(0.35..0.60),
        rng.gen_range(0.35..0.60),
        rng.gen_range(0.35..0.60),
    ];
    let ramp_v = rng.gen_range(0.08..0.15);
    let ramp_h = rng.gen_range(0.05..0.10);
    let amplitude = rng.gen_range(0.15..0.25);
    let freq = rng.gen_range(1.5..3.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let tint: [f64; 3] = [
        rng.gen_range(0.80..1.20),
        rng.gen_range(0.80..1.20),
        rng.gen_range(0.80..1.20),
    ];
    // +45 degrees for class 0, -45 for class 1.
    let dir = if class == 0 { 1.0 } else { -1.0 };

    let num_distractors = rng.gen_range(2..=3);
    let distractors: Vec<(f64, f64, f64, f64)> = (0..num_distractors)
        .map(|_| {
            (
                rng.gen_range(0.0..s),
                rng.gen_range(0.0..s),
                rng.gen_range(0.08..0.14) * s,
                rng.gen_range(0.10..0.20) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
            )
        })
        .collect();

    let mut data = Array3::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let fy = y as f64;
            let fx = x as f64;
            let ramp = ramp_v * (1.0 - fy / (s - 1.0));
            let grating = amplitude
                * (std::f64::consts::TAU * freq * (fx + dir * fy) / s + phase).sin();
            let clutter: f64 = distractors
                .iter()
                .filter(|(dx, dy, half, _)| {
                    (fx + 0.5 - dx).abs() <= *half && (fy + 0.5 - dy).abs() <= *half
                })
                .map(|(_, _, _, c)| c)
                .sum();
            for c in 0..3 {
                let mut v = base[c] + ramp + grating * tint[c] + clutter;
                if c == 0 {
                    v += ramp_h * fx / (s - 1.0);
                }
                v += 0.04 * gaussian(rng);
                data[[c, y, x]] = v.clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(data).expect("toy image construction")
}

/// A pool of toy images for one class.
pub fn toy_pool(class: u8, count: usize, size: usize, seed: u64) -> Vec<ImageTensor> {
    let mut rng = rng_from_seed(seed);
    (0..count).map(|_| toy_image(class, size, &mut rng)).collect()
}

/// Disjoint splits for one experiment: victim training data, a held-out test
/// split, and the auxiliary pools the attacker may draw from.
pub struct ToyDataset {
    pub victim_train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub aux_class0: Vec<ImageTensor>,
    pub aux_class1: Vec<ImageTensor>,
}

pub fn toy_dataset(
    seed: u64,
    size: usize,
    victim_per_class: usize,
    test_per_class: usize,
    aux_per_class: usize,
) -> ToyDataset {
    let labeled = |label: u8, pool: Vec<ImageTensor>| -> Vec<LabeledImage> {
        pool.into_iter()
            .map(|img| LabeledImage::new(img, label).expect("valid label"))
            .collect()
    };
    let mut victim_train = labeled(0, toy_pool(0, victim_per_class, size, derive_seed(seed, "victim-0")));
    victim_train.extend(labeled(1, toy_pool(1, victim_per_class, size, derive_seed(seed, "victim-1"))));
    let mut test = labeled(0, toy_pool(0, test_per_class, size, derive_seed(seed, "test-0")));
    test.extend(labeled(1, toy_pool(1, test_per_class, size, derive_seed(seed, "test-1"))));
    ToyDataset {
        victim_train,
        test,
        aux_class0: toy_pool(0, aux_per_class, size, derive_seed(seed, "aux-0")),
        aux_class1: toy_pool(1, aux_per_class, size, derive_seed(seed, "aux-1")),
    }
}

/// The three architecturally distinct victims of the toy zoo.
pub fn victim_archs() -> Vec<(&'static str, ClassifierArch)> {
    vec![
        ("pool_net", ClassifierArch::PoolNet { width: 12 }),
        ("strided_net", ClassifierArch::StridedNet { width: 12 }),
        ("kernel_net", ClassifierArch::KernelNet { width: 10 }),
    ]
}

fn victim_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        mechanism: Mechanism::NaiveSupervised,
        max_iterations: 800,
        learning_rate: 1e-3,
        batch: Some(32),
        seed,
        plateau_patience: 4,
        plateau_tolerance: 1e-3,
        plateau_check_every: 50,
        supervised_arch: Default::default(),
        weight_decay: 1e-4,
        dropout: 0.0,
        augment: false,
    }
}

/// Trains the zoo on the victim split.
pub fn train_victim_zoo(train: &[LabeledImage], input_size: usize, seed: u64) -> Result<Vec<LocalVictim>> {
    victim_archs()
        .into_iter()
        .map(|(name, arch)| {
            let mut net = ClassifierNet::build(ClassifierSpec {
                arch,
                input_shape: [3, input_size, input_size],
                seed: derive_seed(seed, name),
            })?;
            train_classifier(&mut net, train, &victim_train_config(derive_seed(seed, name)))?;
            Ok(LocalVictim {
                name: name.to_string(),
                net,
            })
        })
        .collect()
}

/// Trains a verification embedder (classifier backbone, penultimate features).
pub fn train_toy_verifier(train: &[LabeledImage], input_size: usize, seed: u64) -> Result<LocalVerifier> {
    let mut net = ClassifierNet::build(ClassifierSpec {
        arch: ClassifierArch::VggSmall {
            width: 8,
            dropout: 0.0,
        },
        input_shape: [3, input_size, input_size],
        seed: derive_seed(seed, "verifier"),
    })?;
    train_classifier(&mut net, train, &victim_train_config(derive_seed(seed, "verifier-train")))?;
    Ok(LocalVerifier {
        name: "toy_verifier".to_string(),
        net,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_images_are_valid_and_deterministic() {
        let a = toy_pool(0, 3, 16, 7);
        let b = toy_pool(0, 3, 16, 7);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
        assert_eq!(a[0].shape(), [3, 16, 16]);
    }

    #[test]
    fn classes_differ_visibly() {
        let mut rng = rng_from_seed(3);
        let a = toy_image(0, 16, &mut rng);
        let b = toy_image(1, 16, &mut rng);
        assert!(a.linf_distance(&b) > 0.1);
    }
}
