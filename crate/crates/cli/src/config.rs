//! Run configuration: versioned TOML, unknown fields rejected, stable hash.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use nobox_core::attack::{AttackConfig, BaselineKind, Budget, LossKind, NormKind};
use nobox_core::model::{EmbeddingTap, ModelSpec};
use nobox_core::training::{Mechanism, SupervisedArch, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub data: DataSection,
    pub substitute: SubstituteSection,
    pub training: TrainingSection,
    pub attack: AttackSection,
    pub run: RunSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory-per-class root: `<root>/<class_dir>/*.png`.
    pub root: PathBuf,
    pub class_dirs: [String; 2],
    pub image_size: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubstituteSection {
    pub mechanism: Mechanism,
    pub base_width: usize,
    pub num_residual_blocks: usize,
    pub num_decoders: usize,
    #[serde(default)]
    pub embedding_tap: EmbeddingTap,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub max_iterations: usize,
    pub learning_rate: f64,
    pub plateau_patience: usize,
    pub plateau_tolerance: f64,
    pub plateau_check_every: usize,
    #[serde(default)]
    pub supervised_arch: SupervisedArch,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_augment")]
    pub augment: bool,
}

fn default_weight_decay() -> f64 {
    5e-4
}

fn default_dropout() -> f64 {
    0.5
}

fn default_augment() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub norm: NormKind,
    pub epsilon: f64,
    pub step_size: f64,
    pub baseline: BaselineKind,
    pub baseline_iters: usize,
    pub ila_iters: usize,
    pub lambda: f64,
    #[serde(default)]
    pub num_negatives: Option<usize>,
    pub loss_kind: LossKind,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Auxiliary set size (n/2 per class), including the target.
    pub n: usize,
    /// Adversarial examples are crafted for the first `targets_per_class`
    /// images of each class directory.
    pub targets_per_class: usize,
    /// Master seed; per-target and per-purpose seeds are derived from it.
    pub seed: u64,
    pub output_root: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    1
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig = toml::from_str(&text).context("parsing config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.version != CONFIG_VERSION {
            bail!(
                "config field `version`: expected {CONFIG_VERSION}, got {}",
                self.version
            );
        }
        if self.data.image_size % 4 != 0 || self.data.image_size == 0 {
            bail!("config field `data.image_size`: must be a positive multiple of 4");
        }
        if self.data.channels != 1 && self.data.channels != 3 {
            bail!("config field `data.channels`: must be 1 or 3");
        }
        if self.run.n < 2 || self.run.n % 2 != 0 {
            bail!("config field `run.n`: must be even and >= 2");
        }
        if self.run.targets_per_class == 0 {
            bail!("config field `run.targets_per_class`: must be >= 1");
        }
        if self.run.workers == 0 {
            bail!("config field `run.workers`: must be >= 1");
        }
        if self.substitute.mechanism != Mechanism::Prototypical
            && self.substitute.num_decoders != 1
        {
            bail!("config field `substitute.num_decoders`: must be 1 unless mechanism is prototypical");
        }
        self.model_spec(0).validate()?;
        self.train_config(0).validate()?;
        self.attack_config(0).validate()?;
        Ok(())
    }

    /// Stable content hash: canonical JSON of the parsed struct, so field
    /// order in the TOML file does not matter.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&json);
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn model_spec(&self, model_seed: u64) -> ModelSpec {
        ModelSpec {
            input_shape: [self.data.channels, self.data.image_size, self.data.image_size],
            base_width: self.substitute.base_width,
            num_residual_blocks: self.substitute.num_residual_blocks,
            num_decoders: self.substitute.num_decoders,
            seed: model_seed,
            embedding_tap: self.substitute.embedding_tap,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            mechanism: self.substitute.mechanism,
            max_iterations: self.training.max_iterations,
            learning_rate: self.training.learning_rate,
            batch: None,
            seed,
            plateau_patience: self.training.plateau_patience,
            plateau_tolerance: self.training.plateau_tolerance,
            plateau_check_every: self.training.plateau_check_every,
            supervised_arch: self.training.supervised_arch,
            weight_decay: self.training.weight_decay,
            dropout: self.training.dropout,
            augment: self.training.augment,
        }
    }

    pub fn attack_config(&self, seed: u64) -> AttackConfig {
        AttackConfig {
            budget: Budget {
                norm: self.attack.norm,
                epsilon: self.attack.epsilon,
                step_size: self.attack.step_size,
            },
            baseline: self.attack.baseline,
            baseline_iters: self.attack.baseline_iters,
            ila_iters: self.attack.ila_iters,
            lambda: self.attack.lambda,
            num_negatives: self.attack.num_negatives,
            loss_kind: self.attack.loss_kind,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const EXAMPLE: &str = r#"
version = 1

[data]
root = "data/toy"
class_dirs = ["class0", "class1"]
image_size = 16
channels = 3

[substitute]
mechanism = "prototypical"
base_width = 8
num_residual_blocks = 1
num_decoders = 1

[training]
max_iterations = 1500
learning_rate = 0.001
plateau_patience = 8
plateau_tolerance = 0.001
plateau_check_every = 100

[attack]
norm = "linf"
epsilon = 0.1
step_size = 0.00392156862745098
baseline = "ifgsm"
baseline_iters = 200
ila_iters = 100
lambda = 1.0
loss_kind = "euclidean"

[run]
n = 20
targets_per_class = 2
seed = 7
output_root = "runs/demo"
"#;

    #[test]
    fn parses_and_validates() {
        let config: RunConfig = toml::from_str(EXAMPLE).unwrap();
        config.validate().unwrap();
        assert_eq!(config.substitute.mechanism, Mechanism::Prototypical);
    }

    #[test]
    fn rejects_unknown_fields() {
        let bad = EXAMPLE.replace("epsilon = 0.1", "epsilon = 0.1\ntypo_field = 3");
        assert!(toml::from_str::<RunConfig>(&bad).is_err());
    }

    #[test]
    fn rejects_invalid_mechanism() {
        let bad = EXAMPLE.replace("\"prototypical\"", "\"prototypic\"");
        assert!(toml::from_str::<RunConfig>(&bad).is_err());
    }

    #[test]
    fn hash_ignores_field_order() {
        let config: RunConfig = toml::from_str(EXAMPLE).unwrap();
        // Same semantic content, different section order in the file.
        let reordered = r#"
version = 1

[run]
n = 20
targets_per_class = 2
seed = 7
output_root = "runs/demo"

[attack]
norm = "linf"
epsilon = 0.1
step_size = 0.00392156862745098
baseline = "ifgsm"
baseline_iters = 200
ila_iters = 100
lambda = 1.0
loss_kind = "euclidean"

[training]
max_iterations = 1500
learning_rate = 0.001
plateau_patience = 8
plateau_tolerance = 0.001
plateau_check_every = 100

[substitute]
mechanism = "prototypical"
base_width = 8
num_residual_blocks = 1
num_decoders = 1

[data]
root = "data/toy"
class_dirs = ["class0", "class1"]
image_size = 16
channels = 3
"#;
        let config2: RunConfig = toml::from_str(reordered).unwrap();
        assert_eq!(config.hash(), config2.hash());
    }
}
