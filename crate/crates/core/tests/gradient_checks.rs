//! Finite-difference verification of the analytic parameter gradients used
//! in training.

mod common;

use common::*;
use nobox_core::data::{ChaosMechanism, PrototypeBank};
use nobox_core::training::{
    chaos_loss, chaos_loss_with_grad, naive_ae_loss, naive_ae_loss_with_grad, prototypical_loss,
    prototypical_loss_with_grad,
};
use nobox_core::rng::rng_from_seed;
use rand::Rng;

const FD_STEP: f64 = 1e-4;
const REL_TOL: f64 = 1e-2;

fn probe_indices(total: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_from_seed(seed);
    (0..count).map(|_| rng.gen_range(0..total)).collect()
}

#[test]
fn chaos_loss_param_gradients_match_fd() {
    let mut model = tiny_model(1, 21);
    let images = random_images(3, 100, [3, 8, 8]);
    let seed = 9;
    let (_, grads) =
        chaos_loss_with_grad(&model, &images, ChaosMechanism::Rotation, seed).unwrap();
    for idx in probe_indices(model.num_params(), 10, 1) {
        let fd = param_fd(&mut model, idx, FD_STEP, |m| {
            chaos_loss(m, &images, ChaosMechanism::Rotation, seed).unwrap()
        });
        let rel = relative_error(grads[idx], fd);
        assert!(
            rel < REL_TOL,
            "param {idx}: analytic {} vs fd {} (rel {rel})",
            grads[idx],
            fd
        );
    }
}

#[test]
fn jigsaw_loss_param_gradients_match_fd() {
    let mut model = tiny_model(1, 22);
    let images = random_images(2, 200, [3, 8, 8]);
    let seed = 10;
    let (_, grads) = chaos_loss_with_grad(&model, &images, ChaosMechanism::Jigsaw, seed).unwrap();
    for idx in probe_indices(model.num_params(), 8, 2) {
        let fd = param_fd(&mut model, idx, FD_STEP, |m| {
            chaos_loss(m, &images, ChaosMechanism::Jigsaw, seed).unwrap()
        });
        let rel = relative_error(grads[idx], fd);
        assert!(rel < REL_TOL, "param {idx}: {} vs {fd} (rel {rel})", grads[idx]);
    }
}

#[test]
fn naive_ae_loss_param_gradients_match_fd() {
    let mut model = tiny_model(1, 23);
    let images = random_images(2, 300, [3, 8, 8]);
    let (_, grads) = naive_ae_loss_with_grad(&model, &images).unwrap();
    for idx in probe_indices(model.num_params(), 8, 3) {
        let fd = param_fd(&mut model, idx, FD_STEP, |m| {
            naive_ae_loss(m, &images).unwrap()
        });
        let rel = relative_error(grads[idx], fd);
        assert!(rel < REL_TOL, "param {idx}: {} vs {fd} (rel {rel})", grads[idx]);
    }
}

#[test]
fn prototypical_loss_param_gradients_match_fd_multi_decoder() {
    let mut model = tiny_model(2, 24);
    let examples = labeled_halves(random_images(4, 400, [3, 8, 8]));
    let bank = PrototypeBank::new(vec![
        (examples[0].image.clone(), examples[2].image.clone()),
        (examples[1].image.clone(), examples[3].image.clone()),
    ])
    .unwrap();
    let (_, grads) = prototypical_loss_with_grad(&model, &examples, &bank).unwrap();
    for idx in probe_indices(model.num_params(), 10, 4) {
        let fd = param_fd(&mut model, idx, FD_STEP, |m| {
            prototypical_loss(m, &examples, &bank).unwrap()
        });
        let rel = relative_error(grads[idx], fd);
        assert!(rel < REL_TOL, "param {idx}: {} vs {fd} (rel {rel})", grads[idx]);
    }
}

#[test]
fn classifier_ce_param_gradients_match_fd() {
    use nobox_core::classifier::{ClassifierArch, ClassifierNet, ClassifierSpec};
    use nobox_core::nn::images_to_batch;

    for arch in [
        ClassifierArch::VggSmall {
            width: 8,
            dropout: 0.0,
        },
        ClassifierArch::ResnetSmall { width: 8 },
        ClassifierArch::PoolNet { width: 8 },
        ClassifierArch::StridedNet { width: 8 },
        ClassifierArch::KernelNet { width: 8 },
    ] {
        let mut net = ClassifierNet::build(ClassifierSpec {
            arch: arch.clone(),
            input_shape: [3, 8, 8],
            seed: 31,
        })
        .unwrap();
        let images = random_images(4, 500, [3, 8, 8]);
        let labels = [0u8, 0, 1, 1];
        let refs: Vec<_> = images.iter().collect();
        let x = images_to_batch(&refs);
        let (_, grads) = net.loss_and_param_grad(&x, &labels, None);
        let mut rng = rng_from_seed(77);
        for _ in 0..8 {
            let idx = rng.gen_range(0..net.num_params());
            let orig = net.params()[idx];
            net.params_mut()[idx] = orig + FD_STEP;
            let fwd = net.forward(&x, None);
            let (plus, _) = nobox_core::nn::softmax_cross_entropy(&fwd.logits, &labels);
            net.params_mut()[idx] = orig - FD_STEP;
            let fwd = net.forward(&x, None);
            let (minus, _) = nobox_core::nn::softmax_cross_entropy(&fwd.logits, &labels);
            net.params_mut()[idx] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let rel = relative_error(grads[idx], fd);
            assert!(
                rel < REL_TOL,
                "{arch:?} param {idx}: {} vs {fd} (rel {rel})",
                grads[idx]
            );
        }
    }
}
