//! Turning substitutes into classifiers, scoring crafted examples against
//! victim models, and verification ROC curves.
//!
//! Victims are pluggable behind narrow traits. Crafting never sees them: this
//! module depends on the attack module's outputs only as plain images.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierNet;
use crate::data::{image_to_png_bytes, ImageTensor, PrototypeBank};
use crate::error::{Error, Result};
use crate::model::SubstituteModel;

/// A deterministic, side-effect-free label predictor.
pub trait VictimClassifier {
    fn name(&self) -> &str;
    fn num_classes(&self) -> usize;
    fn predict(&self, images: &[ImageTensor]) -> Vec<u8>;
}

/// An embedding model compared by cosine similarity.
pub trait VerificationModel {
    fn name(&self) -> &str;
    fn embed(&self, image: &ImageTensor) -> Vec<f64>;
    fn similarity(&self, a: &[f64], b: &[f64]) -> f64 {
        cosine_similarity(a, b)
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// A named classifier-net victim.
pub struct LocalVictim {
    pub name: String,
    pub net: ClassifierNet,
}

impl VictimClassifier for LocalVictim {
    fn name(&self) -> &str {
        &self.name
    }

    fn num_classes(&self) -> usize {
        crate::classifier::NUM_CLASSES
    }

    fn predict(&self, images: &[ImageTensor]) -> Vec<u8> {
        images.iter().map(|img| self.net.predict(img)).collect()
    }
}

/// A classifier net used as a verification embedder (penultimate features,
/// cosine similarity).
pub struct LocalVerifier {
    pub name: String,
    pub net: ClassifierNet,
}

impl VerificationModel for LocalVerifier {
    fn name(&self) -> &str {
        &self.name
    }

    fn embed(&self, image: &ImageTensor) -> Vec<f64> {
        self.net.embed(image)
    }
}

// ---- prototype-distance classification ----

/// Single-decoder classification: the class whose prototype is nearest (in
/// unsquared Euclidean distance) to the reconstruction. Ties go to class 0.
pub fn prototype_classify(
    model: &SubstituteModel,
    x: &ImageTensor,
    bank: &PrototypeBank,
) -> Result<u8> {
    if model.num_decoders() != 1 {
        return Err(Error::MechanismDecoderMismatch {
            mechanism: "prototype_classify".into(),
            k: model.num_decoders(),
        });
    }
    if bank.k() != 1 {
        return Err(Error::PrototypeCountMismatch {
            bank_k: bank.k(),
            model_k: 1,
        });
    }
    prototype_classify_multi(model, x, bank)
}

/// Multi-decoder classification: average the unsquared distances between
/// each decoder's reconstruction and its class prototype, then take the
/// argmin. Ties go to class 0.
pub fn prototype_classify_multi(
    model: &SubstituteModel,
    x: &ImageTensor,
    bank: &PrototypeBank,
) -> Result<u8> {
    if bank.k() != model.num_decoders() {
        return Err(Error::PrototypeCountMismatch {
            bank_k: bank.k(),
            model_k: model.num_decoders(),
        });
    }
    let code = model.encode(x)?;
    let mut dist = [0.0f64; 2];
    for k in 0..bank.k() {
        let recon = model.decode(&code, k)?;
        for y in 0..2u8 {
            dist[y as usize] += recon.l2_distance(bank.prototype(k, y)) / bank.k() as f64;
        }
    }
    Ok(u8::from(dist[1] < dist[0]))
}

// ---- accuracy ----

/// Fraction of correct predictions on labeled examples.
pub fn accuracy_on(
    victim: &dyn VictimClassifier,
    examples: &[(ImageTensor, u8)],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyExamples);
    }
    let images: Vec<ImageTensor> = examples.iter().map(|(img, _)| img.clone()).collect();
    let preds = victim.predict(&images);
    let correct = preds
        .iter()
        .zip(examples.iter().map(|(_, l)| l))
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / examples.len() as f64)
}

// ---- evaluation reports ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    /// Victim name -> accuracy on the evaluated examples.
    pub accuracies: BTreeMap<String, f64>,
    /// Victim name -> (correct, scored, total).
    pub counts: BTreeMap<String, (usize, usize, usize)>,
    pub config_hash: String,
    pub seed: u64,
    /// Set when some items could not be scored (remote failures).
    pub incomplete: bool,
}

impl EvalReport {
    pub fn average_accuracy(&self) -> f64 {
        if self.accuracies.is_empty() {
            return 0.0;
        }
        self.accuracies.values().sum::<f64>() / self.accuracies.len() as f64
    }

    /// One-row CSV: victims as columns plus the Average.
    pub fn to_csv(&self) -> String {
        let mut header = vec!["method".to_string()];
        header.extend(self.accuracies.keys().cloned());
        header.push("Average".into());
        let mut row = vec!["-".to_string()];
        row.extend(self.accuracies.values().map(|a| format!("{:.4}", a)));
        row.push(format!("{:.4}", self.average_accuracy()));
        format!("{}\n{}\n", header.join(","), row.join(","))
    }
}

/// Scores examples against a set of local victims.
pub fn evaluate_local(
    victims: &[&dyn VictimClassifier],
    examples: &[(ImageTensor, u8)],
    config_hash: &str,
    seed: u64,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::EmptyExamples);
    }
    let mut accuracies = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for victim in victims {
        let acc = accuracy_on(*victim, examples)?;
        let correct = (acc * examples.len() as f64).round() as usize;
        accuracies.insert(victim.name().to_string(), acc);
        counts.insert(
            victim.name().to_string(),
            (correct, examples.len(), examples.len()),
        );
    }
    Ok(EvalReport {
        accuracies,
        counts,
        config_hash: config_hash.to_string(),
        seed,
        incomplete: false,
    })
}

// ---- ROC curves ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RocCurve {
    /// Distinct decision thresholds, descending; predicting "genuine" means
    /// score >= threshold.
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub auc: f64,
}

/// Builds a ROC curve from raw similarity scores (all distinct scores swept
/// as thresholds, trapezoid AUC).
pub fn roc_from_scores(genuine: &[f64], impostor: &[f64]) -> Result<RocCurve> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::EmptyExamples);
    }
    let mut thresholds: Vec<f64> = genuine.iter().chain(impostor).cloned().collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
    thresholds.dedup();
    let mut tpr = Vec::with_capacity(thresholds.len());
    let mut fpr = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        tpr.push(genuine.iter().filter(|&&s| s >= t).count() as f64 / genuine.len() as f64);
        fpr.push(impostor.iter().filter(|&&s| s >= t).count() as f64 / impostor.len() as f64);
    }
    // Trapezoid from the implicit (0, 0) anchor through all swept points.
    let mut auc = 0.0;
    let (mut prev_f, mut prev_t) = (0.0, 0.0);
    for (&f, &t) in fpr.iter().zip(&tpr) {
        auc += (f - prev_f) * (t + prev_t) / 2.0;
        prev_f = f;
        prev_t = t;
    }
    Ok(RocCurve {
        thresholds,
        tpr,
        fpr,
        auc,
    })
}

/// Scores genuine/impostor pairs through a verification model and sweeps the
/// ROC curve.
pub fn roc_curve(
    model: &dyn VerificationModel,
    genuine_pairs: &[(ImageTensor, ImageTensor)],
    impostor_pairs: &[(ImageTensor, ImageTensor)],
) -> Result<RocCurve> {
    if genuine_pairs.is_empty() || impostor_pairs.is_empty() {
        return Err(Error::EmptyExamples);
    }
    let score = |pairs: &[(ImageTensor, ImageTensor)]| -> Vec<f64> {
        pairs
            .iter()
            .map(|(a, b)| model.similarity(&model.embed(a), &model.embed(b)))
            .collect()
    };
    roc_from_scores(&score(genuine_pairs), &score(impostor_pairs))
}

// ---- remote victim client (evaluation only) ----

/// Remote endpoint configuration. The client is only ever used to score
/// finished examples; crafting has no access to it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RemoteVictimConfig {
    pub endpoint: String,
    /// Bearer token, typically injected from the environment.
    pub auth_token: Option<String>,
    /// Maximum request rate.
    pub requests_per_sec: f64,
    pub max_retries: usize,
    pub timeout_secs: u64,
}

impl RemoteVictimConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            auth_token: None,
            requests_per_sec: 2.0,
            max_retries: 2,
            timeout_secs: 10,
        }
    }
}

#[derive(Deserialize)]
struct RemoteLabel {
    label: u8,
}

/// Posts each example as PNG bytes and scores the returned top-1 labels.
/// Failed items (after retries with backoff) leave the report flagged
/// incomplete.
pub fn remote_victim_eval(
    config: &RemoteVictimConfig,
    examples: &[(ImageTensor, u8)],
    seed: u64,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::EmptyExamples);
    }
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(config.timeout_secs))
        .build()
        .map_err(|e| Error::RemoteVictim(format!("client build failed: {e}")))?;
    let min_interval = if config.requests_per_sec > 0.0 {
        Duration::from_secs_f64(1.0 / config.requests_per_sec)
    } else {
        Duration::ZERO
    };
    let mut last_request: Option<Instant> = None;
    let mut correct = 0usize;
    let mut scored = 0usize;
    for (image, label) in examples {
        let bytes = image_to_png_bytes(image)?;
        let mut attempt = 0usize;
        let response = loop {
            if let Some(t) = last_request {
                let elapsed = t.elapsed();
                if elapsed < min_interval {
                    std::thread::sleep(min_interval - elapsed);
                }
            }
            last_request = Some(Instant::now());
            let mut req = client
                .post(&config.endpoint)
                .header(reqwest::header::CONTENT_TYPE, "image/png")
                .body(bytes.clone());
            if let Some(token) = &config.auth_token {
                req = req.bearer_auth(token);
            }
            match req.send() {
                Ok(resp) if resp.status() == reqwest::StatusCode::UNAUTHORIZED => {
                    return Err(Error::RemoteVictim("authentication failed (401)".into()));
                }
                Ok(resp) if resp.status().is_success() => {
                    break resp.json::<RemoteLabel>().ok();
                }
                Ok(_) | Err(_) if attempt < config.max_retries => {
                    attempt += 1;
                    std::thread::sleep(Duration::from_millis(100 << attempt));
                }
                _ => break None,
            }
        };
        if let Some(remote) = response {
            scored += 1;
            if remote.label == *label {
                correct += 1;
            }
        }
    }
    let mut accuracies = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let name = "remote".to_string();
    let acc = if scored > 0 {
        correct as f64 / scored as f64
    } else {
        0.0
    };
    accuracies.insert(name.clone(), acc);
    counts.insert(name, (correct, scored, examples.len()));
    Ok(EvalReport {
        accuracies,
        counts,
        config_hash: String::new(),
        seed,
        incomplete: scored != examples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct StubVictim {
        answer: Option<u8>,
    }

    impl VictimClassifier for StubVictim {
        fn name(&self) -> &str {
            "stub"
        }

        fn num_classes(&self) -> usize {
            2
        }

        fn predict(&self, images: &[ImageTensor]) -> Vec<u8> {
            images
                .iter()
                .map(|img| {
                    self.answer
                        .unwrap_or_else(|| u8::from(img.data()[[0, 0, 0]] > 0.5))
                })
                .collect()
        }
    }

    fn flat(v: f64) -> ImageTensor {
        ImageTensor::new(ndarray::Array3::from_elem((1, 2, 2), v)).unwrap()
    }

    #[test]
    fn accuracy_all_correct_and_all_wrong_stubs() {
        let examples = vec![(flat(0.2), 0u8), (flat(0.8), 1u8)];
        let right = StubVictim { answer: None };
        assert_eq!(accuracy_on(&right, &examples).unwrap(), 1.0);
        let wrong = StubVictim { answer: Some(0) };
        assert_eq!(accuracy_on(&wrong, &examples).unwrap(), 0.5);
        assert!(accuracy_on(&right, &[]).is_err());
    }

    #[test]
    fn accuracy_matches_confusion_matrix_oracle() {
        let examples: Vec<(ImageTensor, u8)> = (0..10)
            .map(|i| (flat(i as f64 / 10.0), u8::from(i % 3 == 0)))
            .collect();
        let victim = StubVictim { answer: None };
        let acc = accuracy_on(&victim, &examples).unwrap();
        // Oracle: explicit confusion matrix trace over total.
        let images: Vec<ImageTensor> = examples.iter().map(|(i, _)| i.clone()).collect();
        let preds = victim.predict(&images);
        let mut confusion = [[0usize; 2]; 2];
        for (p, (_, l)) in preds.iter().zip(&examples) {
            confusion[*l as usize][*p as usize] += 1;
        }
        let trace = confusion[0][0] + confusion[1][1];
        assert_eq!(acc, trace as f64 / examples.len() as f64);
    }

    #[test]
    fn roc_perfect_separation_has_auc_one() {
        let roc = roc_from_scores(&[0.9, 0.8, 0.7], &[0.3, 0.2, 0.1]).unwrap();
        assert!((roc.auc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn roc_identical_scores_has_auc_half() {
        let roc = roc_from_scores(&[0.5, 0.5], &[0.5, 0.5, 0.5]).unwrap();
        assert!((roc.auc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn roc_matches_rank_statistic_on_hand_scores() {
        let genuine = [0.9, 0.6, 0.4];
        let impostor = [0.8, 0.5, 0.3];
        let roc = roc_from_scores(&genuine, &impostor).unwrap();
        // Mann-Whitney: mean of [g > i] + 0.5 [g == i].
        let mut u = 0.0;
        for g in genuine {
            for i in impostor {
                u += if g > i {
                    1.0
                } else if g == i {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let expected = u / (genuine.len() * impostor.len()) as f64;
        assert!((roc.auc - expected).abs() < 1e-12);
    }

    #[test]
    fn roc_is_monotone_along_threshold_sweep() {
        let genuine = [0.9, 0.6, 0.6, 0.2];
        let impostor = [0.7, 0.5, 0.2];
        let roc = roc_from_scores(&genuine, &impostor).unwrap();
        for pair in roc.tpr.windows(2) {
            assert!(pair[1] >= pair[0]);
        }
        for pair in roc.fpr.windows(2) {
            assert!(pair[1] >= pair[0]);
        }
        for pair in roc.thresholds.windows(2) {
            assert!(pair[0] > pair[1]);
        }
    }

    #[test]
    fn report_average_is_arithmetic_mean() {
        let mut accuracies = BTreeMap::new();
        accuracies.insert("a".into(), 0.4);
        accuracies.insert("b".into(), 0.8);
        let report = EvalReport {
            accuracies,
            counts: BTreeMap::new(),
            config_hash: "x".into(),
            seed: 0,
            incomplete: false,
        };
        assert!((report.average_accuracy() - 0.6).abs() < 1e-12);
        let csv = report.to_csv();
        assert!(csv.contains("Average"));
    }
}
