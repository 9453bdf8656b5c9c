//! Temporary calibration harness (not part of the deliverable surface).

use std::time::Instant;

use nobox_core::attack::{craft, craft_on_classifier, AttackConfig};
use nobox_core::data::sample_auxiliary_set;
use nobox_core::evaluation::{accuracy_on, prototype_classify_multi, VictimClassifier};
use nobox_core::model::{EmbeddingTap, ModelSpec, SubstituteModel};
use nobox_core::rng::{derive_seed, derive_seed_indexed};
use nobox_core::toy::{toy_dataset, train_victim_zoo};
use nobox_core::training::{
    train_substitute, train_supervised, Mechanism, SupervisedArch, TrainConfig,
};

const SIZE: usize = 16;
const N_AUX: usize = 20;

fn sub_spec(k: usize, seed: u64) -> ModelSpec {
    ModelSpec {
        input_shape: [3, SIZE, SIZE],
        base_width: 8,
        num_residual_blocks: 1,
        num_decoders: k,
        seed,
        embedding_tap: EmbeddingTap::UpBlock1,
    }
}

fn sub_train_config(mechanism: Mechanism, seed: u64, iters: usize, lr: f64) -> TrainConfig {
    let mut c = TrainConfig::new(mechanism, seed);
    c.max_iterations = iters;
    c.learning_rate = lr;
    c.plateau_check_every = 100;
    c.plateau_patience = 8;
    c.plateau_tolerance = 1e-3;
    c
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("quality");
    match mode {
        "quality" => quality_probe(&args[2..]),
        "transfer" => transfer_probe(&args[2..]),
        "variants" => variants_probe(&args[2..]),
        _ => eprintln!("unknown mode"),
    }
}

/// Compare substitute variants (width, blocks, K, negatives) on a few targets.
fn variants_probe(args: &[String]) {
    let iters: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(1500);
    let targets_per_class: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let data = toy_dataset(4321, SIZE, 300, 50, 60);
    let victims = train_victim_zoo(&data.victim_train, SIZE, 17).unwrap();
    let test_pairs: Vec<_> = data
        .test
        .iter()
        .map(|e| (e.image.clone(), e.label))
        .collect();
    for v in &victims {
        let acc = accuracy_on(v as &dyn VictimClassifier, &test_pairs).unwrap();
        println!("clean acc {}: {:.3}", v.name, acc);
    }

    // (label, width, blocks, K, num_negatives)
    let variants: Vec<(&str, usize, usize, usize, Option<usize>)> = vec![
        ("w8 b1 K1", 8, 1, 1, None),
        ("w12 b2 K1", 12, 2, 1, None),
        ("w8 b1 K5", 8, 1, 5, None),
        ("w8 b1 K1 neg9", 8, 1, 1, Some(9)),
        ("w12 b2 K5", 12, 2, 5, None),
    ];
    for (label, width, blocks, k, negs) in variants {
        let t0 = Instant::now();
        let mut correct = 0usize;
        let mut total = 0usize;
        for class in 0..2u8 {
            for t in 0..targets_per_class {
                let tseed = derive_seed_indexed(3, "vt", (class as u64) << 32 | t as u64);
                let aux = sample_auxiliary_set(
                    &data.aux_class0,
                    &data.aux_class1,
                    N_AUX,
                    (class, t),
                    tseed,
                )
                .unwrap();
                let spec = ModelSpec {
                    input_shape: [3, SIZE, SIZE],
                    base_width: width,
                    num_residual_blocks: blocks,
                    num_decoders: k,
                    seed: derive_seed(tseed, "model"),
                    embedding_tap: EmbeddingTap::UpBlock1,
                };
                let mut model = SubstituteModel::build(spec).unwrap();
                let out = train_substitute(
                    &mut model,
                    &aux,
                    &sub_train_config(Mechanism::Prototypical, tseed, iters, 1e-3),
                )
                .unwrap();
                let mut acfg = AttackConfig::new(derive_seed(tseed, "attack"));
                acfg.budget.epsilon = 0.1;
                acfg.num_negatives = negs;
                let (adv, _) = craft(&model, &aux, out.bank.as_ref(), &acfg).unwrap();
                for v in &victims {
                    if v.net.predict(&adv) == class {
                        correct += 1;
                    }
                    total += 1;
                }
            }
        }
        println!(
            "{:<16} victim acc on adv: {:.3} ({} outcomes, {:?})",
            label,
            correct as f64 / total as f64,
            total,
            t0.elapsed()
        );
    }
}

/// Substitute self-quality and supervised-baseline overfit vs iterations/lr.
fn quality_probe(args: &[String]) {
    let iters: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let data = toy_dataset(1234, SIZE, 300, 100, 60);
    let test_pairs: Vec<_> = data
        .test
        .iter()
        .map(|e| (e.image.clone(), e.label))
        .collect();

    let t0 = Instant::now();
    let victims = train_victim_zoo(&data.victim_train, SIZE, 99).unwrap();
    println!("victims trained in {:?}", t0.elapsed());
    for v in &victims {
        let acc = accuracy_on(v as &dyn VictimClassifier, &test_pairs).unwrap();
        println!("  clean acc {}: {:.3}", v.name, acc);
    }

    let aux = sample_auxiliary_set(&data.aux_class0, &data.aux_class1, N_AUX, (0, 0), 7).unwrap();

    // Prototypical substitute: own train/test accuracy via Eq. 5.
    let t0 = Instant::now();
    let mut model = SubstituteModel::build(sub_spec(1, 5)).unwrap();
    let out = train_substitute(
        &mut model,
        &aux,
        &sub_train_config(Mechanism::Prototypical, 5, iters, lr),
    )
    .unwrap();
    let bank = out.bank.as_ref().unwrap();
    let train_acc = aux
        .examples()
        .iter()
        .filter(|e| prototype_classify_multi(&model, &e.image, bank).unwrap() == e.label)
        .count() as f64
        / aux.len() as f64;
    let test_acc = data
        .test
        .iter()
        .filter(|e| prototype_classify_multi(&model, &e.image, bank).unwrap() == e.label)
        .count() as f64
        / data.test.len() as f64;
    println!(
        "proto iters={} lr={}: stopped {} best {} loss {:.4} | train acc {:.3} test acc {:.3} | {:?}",
        iters,
        lr,
        out.log.stopped_at,
        out.log.best_iteration,
        out.log.losses.last().unwrap(),
        train_acc,
        test_acc,
        t0.elapsed()
    );

    // Supervised baseline: overfit gap.
    let mut tc = sub_train_config(Mechanism::NaiveSupervised, 6, iters, lr);
    tc.supervised_arch = SupervisedArch::Vgg;
    let t0 = Instant::now();
    let (net, log) = train_supervised(&aux, &tc).unwrap();
    let train_acc = aux
        .examples()
        .iter()
        .filter(|e| net.predict(&e.image) == e.label)
        .count() as f64
        / aux.len() as f64;
    let test_acc = data
        .test
        .iter()
        .filter(|e| net.predict(&e.image) == e.label)
        .count() as f64
        / data.test.len() as f64;
    println!(
        "naive_sup iters={}: stopped {} | train acc {:.3} test acc {:.3} | {:?}",
        iters,
        log.stopped_at,
        train_acc,
        test_acc,
        t0.elapsed()
    );

    // Transfer from this single prototypical model, with in-model diagnostics.
    let mut acfg = AttackConfig::new(3);
    acfg.budget.epsilon = 0.1;
    let x0 = &aux.target().image;
    let guides =
        nobox_core::attack::GuideSet::build(&aux, out.bank.as_ref(), None, 11).unwrap();
    let objective = nobox_core::attack::SubstituteObjective {
        model: &model,
        guides: &guides,
        lambda: acfg.lambda,
        loss_kind: acfg.loss_kind,
    };
    let (guide, trace) =
        nobox_core::attack::run_baseline(&objective, x0, &guides, &acfg).unwrap();
    println!(
        "baseline loss: start {:.4} end {:.4}; substitute pred of guide: {} (true {})",
        trace.first().unwrap(),
        trace.last().unwrap(),
        prototype_classify_multi(&model, &guide, bank).unwrap(),
        aux.target().label
    );
    let (adv, rec) = craft(&model, &aux, out.bank.as_ref(), &acfg).unwrap();
    println!(
        "substitute pred of final adv: {}; linf {:.4}",
        prototype_classify_multi(&model, &adv, bank).unwrap(),
        rec.achieved_linf
    );
    for v in &victims {
        println!(
            "  {}: guide pred {} | adv pred {} (true {})",
            v.name,
            v.net.predict(&guide),
            v.net.predict(&adv),
            aux.target().label
        );
    }

    // White-box ceiling: I-FGSM directly on each victim at the same budget.
    for v in &victims {
        let vobj = nobox_core::attack::ClassifierObjective {
            net: &v.net,
            label: aux.target().label,
        };
        let mut wcfg = acfg.clone();
        wcfg.baseline_iters = 100;
        let (wb, _) = nobox_core::attack::run_baseline(&vobj, x0, &guides, &wcfg).unwrap();
        println!(
            "  white-box on {}: pred {} (true {})",
            v.name,
            v.net.predict(&wb),
            aux.target().label
        );
    }
}

/// Small multi-target transfer run.
fn transfer_probe(args: &[String]) {
    let iters: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(1500);
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let targets_per_class: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let seeds: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);

    let mechanisms = [
        Mechanism::Prototypical,
        Mechanism::Rotation,
        Mechanism::Jigsaw,
        Mechanism::NaiveAe,
        Mechanism::NaiveSupervised,
    ];
    for mech in mechanisms {
        let t0 = Instant::now();
        let mut correct = 0usize;
        let mut total = 0usize;
        for seed in 0..seeds {
            let data = toy_dataset(derive_seed(9000 + seed, "data"), SIZE, 300, 50, 60);
            let victims =
                train_victim_zoo(&data.victim_train, SIZE, derive_seed(seed, "zoo")).unwrap();
            for class in 0..2u8 {
                for t in 0..targets_per_class {
                    let tseed =
                        derive_seed_indexed(seed, "target", (class as u64) << 32 | t as u64);
                    let aux = sample_auxiliary_set(
                        &data.aux_class0,
                        &data.aux_class1,
                        N_AUX,
                        (class, t),
                        tseed,
                    )
                    .unwrap();
                    let mut acfg = AttackConfig::new(derive_seed(tseed, "attack"));
                    acfg.budget.epsilon = 0.1;
                    let adv = match mech {
                        Mechanism::NaiveSupervised => {
                            let mut tc = sub_train_config(mech, tseed, iters, lr);
                            tc.supervised_arch = SupervisedArch::Vgg;
                            let (net, _) = train_supervised(&aux, &tc).unwrap();
                            craft_on_classifier(&net, &aux, &acfg).unwrap().0
                        }
                        _ => {
                            let mut model = SubstituteModel::build(sub_spec(
                                1,
                                derive_seed(tseed, "model"),
                            ))
                            .unwrap();
                            let out = train_substitute(
                                &mut model,
                                &aux,
                                &sub_train_config(mech, tseed, iters, lr),
                            )
                            .unwrap();
                            craft(&model, &aux, out.bank.as_ref(), &acfg).unwrap().0
                        }
                    };
                    for v in &victims {
                        if v.net.predict(&adv) == class {
                            correct += 1;
                        }
                        total += 1;
                    }
                }
            }
        }
        println!(
            "{:<18} victim acc on adv: {:.3}  ({} outcomes, {:?})",
            mech.name(),
            correct as f64 / total as f64,
            total,
            t0.elapsed()
        );
    }
}
