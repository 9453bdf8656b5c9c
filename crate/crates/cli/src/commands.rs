//! Subcommand implementations: dataset generation, victim zoo training, the
//! train -> craft -> eval -> report pipeline, and reproducibility manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};

use nobox_core::attack::{craft, craft_on_classifier, CraftRecord};
use nobox_core::classifier::{load_classifier, save_classifier, ClassifierNet};
use nobox_core::data::{
    load_class_dir, load_png, sample_auxiliary_set, save_png, AuxiliarySet, ImageTensor,
};
use nobox_core::evaluation::{evaluate_local, EvalReport, LocalVictim, RemoteVictimConfig};
use nobox_core::model::{load_checkpoint, save_checkpoint, SubstituteModel};
use nobox_core::rng::{derive_seed, derive_seed_indexed};
use nobox_core::toy::{toy_pool, train_victim_zoo};
use nobox_core::training::{
    prototype_bank_for, train_substitute, train_supervised, Mechanism, TrainLog,
};

use crate::config::RunConfig;
use crate::manifest::{RunManifest, TargetArtifacts};
use crate::plot::{write_line_plot, Series};

/// Sidecar JSON written next to each crafted PNG.
#[derive(Serialize, Deserialize)]
pub struct Sidecar {
    pub true_label: u8,
    pub class_index: usize,
    pub image_size: usize,
    pub channels: usize,
    pub record: CraftRecord,
}

pub struct TargetId {
    pub class: u8,
    pub index: usize,
    pub seed: u64,
}

pub fn target_list(config: &RunConfig) -> Vec<TargetId> {
    let mut targets = Vec::new();
    for class in 0..2u8 {
        for index in 0..config.run.targets_per_class {
            let seed = derive_seed_indexed(
                config.run.seed,
                "target",
                ((class as u64) << 32) | index as u64,
            );
            targets.push(TargetId { class, index, seed });
        }
    }
    targets
}

pub struct LoadedData {
    pub class0: Vec<ImageTensor>,
    pub class1: Vec<ImageTensor>,
}

pub fn load_data(config: &RunConfig) -> anyhow::Result<LoadedData> {
    let shape = [
        config.data.channels,
        config.data.image_size,
        config.data.image_size,
    ];
    let root = &config.data.root;
    let class0 = load_class_dir(&root.join(&config.data.class_dirs[0]), shape)?;
    let class1 = load_class_dir(&root.join(&config.data.class_dirs[1]), shape)?;
    Ok(LoadedData { class0, class1 })
}

pub fn aux_for_target(
    config: &RunConfig,
    data: &LoadedData,
    target: &TargetId,
) -> anyhow::Result<AuxiliarySet> {
    Ok(sample_auxiliary_set(
        &data.class0,
        &data.class1,
        config.run.n,
        (target.class, target.index),
        derive_seed(target.seed, "aux"),
    )?)
}

fn checkpoint_path(out: &Path, config: &RunConfig, t: &TargetId) -> PathBuf {
    let ext = if config.substitute.mechanism == Mechanism::NaiveSupervised {
        "nbcl"
    } else {
        "nbae"
    };
    out.join("checkpoints")
        .join(format!("target_{}_{}.{ext}", t.class, t.index))
}

fn log_path(out: &Path, t: &TargetId) -> PathBuf {
    out.join("logs").join(format!("target_{}_{}.csv", t.class, t.index))
}

fn adv_paths(out: &Path, t: &TargetId) -> (PathBuf, PathBuf) {
    let dir = out.join("adversarial");
    (
        dir.join(format!("target_{}_{}.png", t.class, t.index)),
        dir.join(format!("target_{}_{}.json", t.class, t.index)),
    )
}

fn write_log(path: &Path, log: &TrainLog) -> anyhow::Result<()> {
    std::fs::write(path, log.to_csv()).with_context(|| format!("writing {}", path.display()))
}

fn base_manifest(config: &RunConfig) -> RunManifest {
    RunManifest::new(
        config.hash(),
        config.substitute.mechanism.name().to_string(),
        config.substitute.num_decoders,
        config.run.n,
        config.attack.epsilon,
        config.run.seed,
    )
}

fn in_pool<T: Send>(workers: usize, job: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("worker pool")
        .install(job)
}

// ---- gen-data ----

pub fn cmd_gen_data(
    root: &Path,
    per_class: usize,
    size: usize,
    seed: u64,
    class_dirs: &[String; 2],
) -> anyhow::Result<()> {
    for (class, dir) in class_dirs.iter().enumerate() {
        let dir = root.join(dir);
        std::fs::create_dir_all(&dir)?;
        let pool = toy_pool(class as u8, per_class, size, derive_seed(seed, dir.to_str().unwrap_or("class")));
        for (i, img) in pool.iter().enumerate() {
            save_png(img, &dir.join(format!("{i:04}.png")))?;
        }
    }
    println!("wrote {per_class} images per class under {}", root.display());
    Ok(())
}

// ---- train-victims ----

pub fn cmd_train_victims(
    out: &Path,
    size: usize,
    per_class: usize,
    seed: u64,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    let mut train = Vec::new();
    for class in 0..2u8 {
        for img in toy_pool(class, per_class, size, derive_seed_indexed(seed, "victim-train", class as u64)) {
            train.push(nobox_core::data::LabeledImage::new(img, class)?);
        }
    }
    let zoo = train_victim_zoo(&train, size, derive_seed(seed, "zoo"))?;
    for victim in &zoo {
        let path = out.join(format!("{}.nbcl", victim.name));
        save_classifier(&victim.net, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

// ---- train ----

enum Trained {
    Substitute(Box<SubstituteModel>, TrainLog),
    Classifier(Box<ClassifierNet>, TrainLog),
}

fn train_one(config: &RunConfig, data: &LoadedData, target: &TargetId) -> anyhow::Result<Trained> {
    let aux = aux_for_target(config, data, target)?;
    let tc = config.train_config(derive_seed(target.seed, "train"));
    match config.substitute.mechanism {
        Mechanism::NaiveSupervised => {
            let (net, log) = train_supervised(&aux, &tc)?;
            Ok(Trained::Classifier(Box::new(net), log))
        }
        _ => {
            let spec = config.model_spec(derive_seed(target.seed, "model"));
            let mut model = SubstituteModel::build(spec)?;
            let outcome = train_substitute(&mut model, &aux, &tc)?;
            Ok(Trained::Substitute(Box::new(model), outcome.log))
        }
    }
}

pub fn cmd_train(config: &RunConfig) -> anyhow::Result<PathBuf> {
    let out = config.run.output_root.clone();
    std::fs::create_dir_all(out.join("checkpoints"))?;
    std::fs::create_dir_all(out.join("logs"))?;
    let data = load_data(config)?;
    let targets = target_list(config);
    let started = Instant::now();

    let results: Vec<anyhow::Result<(TargetArtifacts, Trained)>> = in_pool(config.run.workers, || {
        use rayon::prelude::*;
        targets
            .par_iter()
            .map(|t| {
                let trained = train_one(config, &data, t)?;
                let ckpt = checkpoint_path(&out, config, t);
                let log_file = log_path(&out, t);
                match &trained {
                    Trained::Substitute(model, log) => {
                        save_checkpoint(model, &ckpt)?;
                        write_log(&log_file, log)?;
                    }
                    Trained::Classifier(net, log) => {
                        save_classifier(net, &ckpt)?;
                        write_log(&log_file, log)?;
                    }
                }
                Ok((
                    TargetArtifacts {
                        class: t.class,
                        index: t.index,
                        seed: t.seed,
                        checkpoint: Some(ckpt),
                        train_log: Some(log_file),
                        adversarial_png: None,
                        sidecar: None,
                    },
                    trained,
                ))
            })
            .collect()
    });

    let mut manifest = base_manifest(config);
    for r in results {
        let (artifact, _) = r?;
        manifest.targets.push(artifact);
    }
    manifest
        .timings
        .insert("train_secs".into(), started.elapsed().as_secs_f64());
    manifest.save(&out)?;
    println!("trained {} substitutes into {}", manifest.targets.len(), out.display());
    Ok(out)
}

// ---- craft ----

fn craft_one(
    config: &RunConfig,
    data: &LoadedData,
    target: &TargetId,
    checkpoint: &Path,
) -> anyhow::Result<(ImageTensor, CraftRecord)> {
    let aux = aux_for_target(config, data, target)?;
    let attack = config.attack_config(derive_seed(target.seed, "attack"));
    match config.substitute.mechanism {
        Mechanism::NaiveSupervised => {
            let net = load_classifier(checkpoint)?;
            if net.spec().input_shape != [config.data.channels, config.data.image_size, config.data.image_size] {
                bail!("checkpoint input shape does not match config");
            }
            Ok(craft_on_classifier(&net, &aux, &attack)?)
        }
        Mechanism::Prototypical => {
            let model = load_checkpoint(checkpoint)?;
            let expected = config.model_spec(derive_seed(target.seed, "model"));
            if model.spec() != &expected {
                bail!(
                    "checkpoint spec mismatch for target {}_{}",
                    target.class,
                    target.index
                );
            }
            let bank = prototype_bank_for(
                &aux,
                model.num_decoders(),
                derive_seed(target.seed, "train"),
            )?;
            Ok(craft(&model, &aux, Some(&bank), &attack)?)
        }
        _ => {
            let model = load_checkpoint(checkpoint)?;
            let expected = config.model_spec(derive_seed(target.seed, "model"));
            if model.spec() != &expected {
                bail!(
                    "checkpoint spec mismatch for target {}_{}",
                    target.class,
                    target.index
                );
            }
            Ok(craft(&model, &aux, None, &attack)?)
        }
    }
}

pub fn cmd_craft(config: &RunConfig) -> anyhow::Result<PathBuf> {
    let out = config.run.output_root.clone();
    std::fs::create_dir_all(out.join("adversarial"))?;
    let data = load_data(config)?;
    let targets = target_list(config);
    let mut manifest = RunManifest::load(&out)
        .map_err(|e| anyhow!("craft requires a completed train step in {}: {e}", out.display()))?;
    if manifest.config_hash != config.hash() {
        bail!("config hash does not match the manifest in {}", out.display());
    }
    let started = Instant::now();

    let results: Vec<anyhow::Result<(usize, PathBuf, PathBuf)>> = in_pool(config.run.workers, || {
        use rayon::prelude::*;
        targets
            .par_iter()
            .enumerate()
            .map(|(i, t)| {
                let ckpt = checkpoint_path(&out, config, t);
                let (adv, record) = craft_one(config, &data, t, &ckpt)?;
                let (png_path, sidecar_path) = adv_paths(&out, t);
                save_png(&adv, &png_path)?;
                let sidecar = Sidecar {
                    true_label: t.class,
                    class_index: t.index,
                    image_size: config.data.image_size,
                    channels: config.data.channels,
                    record,
                };
                std::fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
                Ok((i, png_path, sidecar_path))
            })
            .collect()
    });

    for r in results {
        let (i, png, sidecar) = r?;
        manifest.targets[i].adversarial_png = Some(png);
        manifest.targets[i].sidecar = Some(sidecar);
    }
    manifest
        .timings
        .insert("craft_secs".into(), started.elapsed().as_secs_f64());
    manifest.save(&out)?;
    println!("crafted {} adversarial examples into {}", manifest.targets.len(), out.display());
    Ok(out)
}

// ---- eval ----

pub fn load_victims(dir: &Path) -> anyhow::Result<Vec<LocalVictim>> {
    let mut victims = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading victims dir {}", dir.display()))?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "nbcl"))
        .collect();
    entries.sort();
    for path in entries {
        let net = load_classifier(&path)
            .with_context(|| format!("loading victim {}", path.display()))?;
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("victim")
            .to_string();
        victims.push(LocalVictim { name, net });
    }
    if victims.is_empty() {
        bail!("no victim checkpoints (*.nbcl) found in {}", dir.display());
    }
    Ok(victims)
}

pub fn load_adversarial_dir(dir: &Path) -> anyhow::Result<Vec<(ImageTensor, u8)>> {
    let mut pngs: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading adversarial dir {}", dir.display()))?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    pngs.sort();
    if pngs.is_empty() {
        bail!("no crafted examples found in {}", dir.display());
    }
    let mut out = Vec::new();
    for png in pngs {
        let sidecar_path = png.with_extension("json");
        if !sidecar_path.exists() {
            bail!("missing sidecar for {}", png.display());
        }
        let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(&sidecar_path)?)
            .with_context(|| format!("parsing sidecar {}", sidecar_path.display()))?;
        let image = load_png(
            &png,
            [sidecar.channels, sidecar.image_size, sidecar.image_size],
        )?;
        out.push((image, sidecar.true_label));
    }
    Ok(out)
}

pub fn cmd_eval(
    adv_dir: &Path,
    victims_dir: &Path,
    out_dir: &Path,
    remote: Option<RemoteVictimConfig>,
    seed: u64,
) -> anyhow::Result<EvalReport> {
    std::fs::create_dir_all(out_dir)?;
    let examples = load_adversarial_dir(adv_dir)?;
    let victims = load_victims(victims_dir)?;
    let refs: Vec<&dyn nobox_core::evaluation::VictimClassifier> = victims
        .iter()
        .map(|v| v as &dyn nobox_core::evaluation::VictimClassifier)
        .collect();
    let mut report = evaluate_local(&refs, &examples, "", seed)?;
    if let Some(remote_config) = remote {
        let remote_report = nobox_core::evaluation::remote_victim_eval(&remote_config, &examples, seed)?;
        for (name, acc) in remote_report.accuracies {
            report.accuracies.insert(name.clone(), acc);
        }
        for (name, counts) in remote_report.counts {
            report.counts.insert(name, counts);
        }
        report.incomplete |= remote_report.incomplete;
    }
    std::fs::write(
        out_dir.join("eval_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    std::fs::write(out_dir.join("eval_report.csv"), report.to_csv())?;
    println!(
        "evaluated {} examples against {} victims; average accuracy {:.4}",
        examples.len(),
        report.accuracies.len(),
        report.average_accuracy()
    );
    Ok(report)
}

// ---- report ----

/// Table-1-style row order.
fn mechanism_order(name: &str) -> usize {
    match name {
        "naive_ae" => 0,
        "jigsaw" => 1,
        "rotation" => 2,
        "naive_supervised" => 3,
        "prototypical" => 4,
        _ => 5,
    }
}

pub fn cmd_report(run_dirs: &[PathBuf], out_dir: &Path) -> anyhow::Result<()> {
    if run_dirs.is_empty() {
        bail!("report needs at least one run directory");
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rows: Vec<(RunManifest, EvalReport)> = Vec::new();
    for dir in run_dirs {
        let manifest = RunManifest::load(dir)?;
        let report_path = dir.join("report").join("eval_report.json");
        let report: EvalReport = serde_json::from_str(
            &std::fs::read_to_string(&report_path)
                .with_context(|| format!("reading {}", report_path.display()))?,
        )?;
        rows.push((manifest, report));
    }
    rows.sort_by_key(|(m, _)| (mechanism_order(&m.mechanism), m.num_decoders, m.n));

    // Victim columns: union over runs; runs missing a victim get blanks.
    let mut victims: Vec<String> = Vec::new();
    for (_, r) in &rows {
        for name in r.accuracies.keys() {
            if !victims.contains(name) {
                victims.push(name.clone());
            }
        }
    }
    victims.sort();
    let consistent = rows
        .iter()
        .all(|(_, r)| r.accuracies.len() == victims.len());
    if !consistent {
        eprintln!("warning: victim sets differ across runs; blanks inserted");
    }

    let mut csv = String::from("method,K,n,epsilon");
    for v in &victims {
        csv.push(',');
        csv.push_str(v);
    }
    csv.push_str(",Average\n");
    for (m, r) in &rows {
        csv.push_str(&format!("{},{},{},{}", m.mechanism, m.num_decoders, m.n, m.epsilon));
        for v in &victims {
            match r.accuracies.get(v) {
                Some(acc) => csv.push_str(&format!(",{acc:.4}")),
                None => csv.push(','),
            }
        }
        csv.push_str(&format!(",{:.4}\n", r.average_accuracy()));
    }
    std::fs::write(out_dir.join("comparison.csv"), &csv)?;

    // Training curves: overlay per-run mean loss series.
    let mut curve_series = Vec::new();
    for (dir, (m, _)) in run_dirs.iter().zip(&rows) {
        let logs_dir = dir.join("logs");
        if let Ok(entries) = std::fs::read_dir(&logs_dir) {
            let mut sum: Vec<(f64, usize)> = Vec::new();
            for entry in entries.flatten() {
                if entry.path().extension().is_some_and(|e| e == "csv") {
                    for (i, line) in std::fs::read_to_string(entry.path())?
                        .lines()
                        .skip(1)
                        .enumerate()
                    {
                        let loss: f64 = line.split(',').nth(1).unwrap_or("0").parse().unwrap_or(0.0);
                        if i >= sum.len() {
                            sum.push((0.0, 0));
                        }
                        sum[i].0 += loss;
                        sum[i].1 += 1;
                    }
                }
            }
            if !sum.is_empty() {
                curve_series.push(Series {
                    label: m.mechanism.clone(),
                    points: sum
                        .iter()
                        .enumerate()
                        .map(|(i, (s, c))| (i as f64, s / *c as f64))
                        .collect(),
                });
            }
        }
    }
    if !curve_series.is_empty() {
        write_line_plot(
            &out_dir.join("training_curves.svg"),
            "Training loss",
            "iteration",
            "loss",
            &curve_series,
        )?;
    }

    // Decoder-count and n sweeps among prototypical runs.
    let mut k_points: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut n_points: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (m, r) in &rows {
        if m.mechanism == "prototypical" {
            k_points.entry(m.num_decoders).or_default().push(r.average_accuracy());
            n_points.entry(m.n).or_default().push(r.average_accuracy());
        }
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    if k_points.len() > 1 {
        write_line_plot(
            &out_dir.join("decoder_sweep.svg"),
            "Average victim accuracy vs decoder count",
            "decoders",
            "avg accuracy",
            &[Series {
                label: "prototypical".into(),
                points: k_points.iter().map(|(k, v)| (*k as f64, mean(v))).collect(),
            }],
        )?;
    }
    if n_points.len() > 1 {
        write_line_plot(
            &out_dir.join("n_sweep.svg"),
            "Average victim accuracy vs training-set size",
            "n",
            "avg accuracy",
            &[Series {
                label: "prototypical".into(),
                points: n_points.iter().map(|(n, v)| (*n as f64, mean(v))).collect(),
            }],
        )?;
    }
    println!("report written to {}", out_dir.display());
    Ok(())
}

// ---- pipeline ----

pub fn cmd_pipeline(config: &RunConfig, victims_dir: Option<&Path>) -> anyhow::Result<EvalReport> {
    let out = config.run.output_root.clone();
    cmd_train(config)?;
    cmd_craft(config)?;
    let victims = match victims_dir {
        Some(dir) => dir.to_path_buf(),
        None => {
            let dir = out.join("victims");
            if !dir.exists() {
                cmd_train_victims(
                    &dir,
                    config.data.image_size,
                    300,
                    derive_seed(config.run.seed, "victims"),
                )?;
            }
            dir
        }
    };
    let report = cmd_eval(
        &out.join("adversarial"),
        &victims,
        &out.join("report"),
        None,
        config.run.seed,
    )?;
    cmd_report(&[out.clone()], &out.join("report"))?;
    Ok(report)
}
