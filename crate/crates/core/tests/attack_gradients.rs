//! Finite-difference verification of the adversarial-loss input gradients
//! and attack-pipeline behaviour on real substitute models.

mod common;

use common::*;
use nobox_core::attack::{
    adversarial_loss, adversarial_loss_and_input_grad, adversarial_loss_cosine, craft,
    AttackConfig, BaselineKind, Budget, GuideSet, LossKind,
};
use nobox_core::data::AuxiliarySet;
use nobox_core::rng::rng_from_seed;
use nobox_core::training::{prototype_bank_for, train_substitute, Mechanism, TrainConfig};
use rand::Rng;

const FD_STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-2;

fn guides_for(seed: u64) -> GuideSet {
    GuideSet::new(
        vec![random_image(seed, [3, 8, 8])],
        vec![
            random_image(seed + 1, [3, 8, 8]),
            random_image(seed + 2, [3, 8, 8]),
        ],
    )
    .unwrap()
}

#[test]
fn euclidean_adversarial_input_grad_matches_fd() {
    let model = tiny_model(1, 40);
    let x = random_image(41, [3, 8, 8]);
    let guides = guides_for(600);
    let (_, grad) =
        adversarial_loss_and_input_grad(&model, &x, &guides, 1.0, LossKind::Euclidean).unwrap();
    let mut rng = rng_from_seed(42);
    for _ in 0..10 {
        let coord = (
            rng.gen_range(0..3usize),
            rng.gen_range(0..8usize),
            rng.gen_range(0..8usize),
        );
        let fd = input_fd(&x, coord, FD_STEP, |img| {
            adversarial_loss(&model, img, &guides, 1.0, 0).unwrap()
        });
        let analytic = grad[[coord.0, coord.1, coord.2]];
        let rel = relative_error(analytic, fd);
        assert!(rel < REL_TOL, "coord {coord:?}: {analytic} vs {fd} (rel {rel})");
    }
}

#[test]
fn euclidean_adversarial_input_grad_matches_fd_multi_decoder() {
    let model = tiny_model(3, 43);
    let x = random_image(44, [3, 8, 8]);
    let guides = GuideSet::new(
        vec![
            random_image(700, [3, 8, 8]),
            random_image(701, [3, 8, 8]),
            random_image(702, [3, 8, 8]),
        ],
        vec![random_image(703, [3, 8, 8])],
    )
    .unwrap();
    let (_, grad) =
        adversarial_loss_and_input_grad(&model, &x, &guides, 2.0, LossKind::Euclidean).unwrap();
    let mut rng = rng_from_seed(45);
    for _ in 0..8 {
        let coord = (
            rng.gen_range(0..3usize),
            rng.gen_range(0..8usize),
            rng.gen_range(0..8usize),
        );
        let fd = input_fd(&x, coord, FD_STEP, |img| {
            (0..3)
                .map(|k| adversarial_loss(&model, img, &guides, 2.0, k).unwrap())
                .sum::<f64>()
                / 3.0
        });
        let analytic = grad[[coord.0, coord.1, coord.2]];
        let rel = relative_error(analytic, fd);
        assert!(rel < REL_TOL, "coord {coord:?}: {analytic} vs {fd} (rel {rel})");
    }
}

#[test]
fn cosine_adversarial_input_grad_matches_fd() {
    let model = tiny_model(1, 46);
    let x = random_image(47, [3, 8, 8]);
    let guides = guides_for(800);
    let (_, grad) =
        adversarial_loss_and_input_grad(&model, &x, &guides, 1.0, LossKind::Cosine).unwrap();
    let mut rng = rng_from_seed(48);
    for _ in 0..10 {
        let coord = (
            rng.gen_range(0..3usize),
            rng.gen_range(0..8usize),
            rng.gen_range(0..8usize),
        );
        let fd = input_fd(&x, coord, FD_STEP, |img| {
            adversarial_loss_cosine(&model, img, &guides, 1.0, 0).unwrap()
        });
        let analytic = grad[[coord.0, coord.1, coord.2]];
        let rel = relative_error(analytic, fd);
        assert!(rel < REL_TOL, "coord {coord:?}: {analytic} vs {fd} (rel {rel})");
    }
}

fn trained_aux_and_model() -> (AuxiliarySet, nobox_core::model::SubstituteModel) {
    let aux = AuxiliarySet::new(
        labeled_halves(random_images(6, 900, [3, 8, 8])),
        0,
    )
    .unwrap();
    let mut model = tiny_model(1, 49);
    let mut config = TrainConfig::new(Mechanism::NaiveAe, 50);
    config.max_iterations = 60;
    config.plateau_check_every = 30;
    train_substitute(&mut model, &aux, &config).unwrap();
    (aux, model)
}

#[test]
fn craft_default_pipeline_is_feasible_and_deterministic() {
    let (aux, model) = trained_aux_and_model();
    let mut config = AttackConfig::new(7);
    config.budget = Budget::linf(0.1);
    config.baseline_iters = 12;
    config.ila_iters = 6;
    let (a, rec_a) = craft(&model, &aux, None, &config).unwrap();
    let (b, rec_b) = craft(&model, &aux, None, &config).unwrap();
    assert_eq!(a, b, "craft must be bit-reproducible");
    assert_eq!(rec_a.config_hash, rec_b.config_hash);
    assert!(a.linf_distance(&aux.target().image) <= 0.1 + 1e-9);
    assert!(rec_a.achieved_linf <= 0.1 + 1e-9);
}

#[test]
fn craft_zero_epsilon_returns_target_exactly() {
    let (aux, model) = trained_aux_and_model();
    let mut config = AttackConfig::new(8);
    config.budget = Budget::linf(0.0);
    config.baseline_iters = 5;
    config.ila_iters = 5;
    let (x, _) = craft(&model, &aux, None, &config).unwrap();
    assert_eq!(x, aux.target().image);
}

#[test]
fn craft_none_baseline_uses_opposite_class_guide() {
    let (aux, model) = trained_aux_and_model();
    let mut config = AttackConfig::new(9);
    config.baseline = BaselineKind::None;
    config.baseline_iters = 0;
    config.ila_iters = 8;
    let (x, record) = craft(&model, &aux, None, &config).unwrap();
    assert!(x.linf_distance(&aux.target().image) <= config.budget.epsilon + 1e-9);
    assert!(!record.zero_guide_fallback);
}

#[test]
fn craft_prototypical_uses_bank_guides() {
    let aux = AuxiliarySet::new(
        labeled_halves(random_images(6, 950, [3, 8, 8])),
        1,
    )
    .unwrap();
    let mut model = tiny_model(2, 51);
    let mut tc = TrainConfig::new(Mechanism::Prototypical, 52);
    tc.max_iterations = 40;
    tc.plateau_check_every = 20;
    let outcome = train_substitute(&mut model, &aux, &tc).unwrap();
    let bank = outcome.bank.unwrap();
    let rebuilt = prototype_bank_for(&aux, 2, tc.seed).unwrap();
    for k in 0..2 {
        assert_eq!(bank.pair(k).0, rebuilt.pair(k).0);
        assert_eq!(bank.pair(k).1, rebuilt.pair(k).1);
    }
    let mut config = AttackConfig::new(10);
    config.baseline_iters = 10;
    config.ila_iters = 5;
    let (x, _) = craft(&model, &aux, Some(&bank), &config).unwrap();
    assert!(x.linf_distance(&aux.target().image) <= 0.1 + 1e-9);
}

#[test]
fn baseline_loss_is_mostly_non_decreasing_on_trained_model() {
    let (aux, model) = trained_aux_and_model();
    let guides = GuideSet::build(&aux, None, None, 3).unwrap();
    let objective = nobox_core::attack::SubstituteObjective {
        model: &model,
        guides: &guides,
        lambda: 1.0,
        loss_kind: LossKind::Euclidean,
    };
    let mut config = AttackConfig::new(11);
    config.baseline_iters = 50;
    let (_, trace) =
        nobox_core::attack::run_baseline(&objective, &aux.target().image, &guides, &config)
            .unwrap();
    let increases = trace
        .windows(2)
        .filter(|p| p[1] >= p[0] - 1e-12)
        .count();
    let frac = increases as f64 / (trace.len() - 1) as f64;
    assert!(
        frac >= 0.9,
        "sign-gradient ascent increased the loss in only {frac:.2} of steps"
    );
}
