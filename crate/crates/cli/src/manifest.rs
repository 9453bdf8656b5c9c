//! Run manifests: what was produced, from which config, reproducibly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TargetArtifacts {
    pub class: u8,
    pub index: usize,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub train_log: Option<PathBuf>,
    pub adversarial_png: Option<PathBuf>,
    pub sidecar: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub mechanism: String,
    pub num_decoders: usize,
    pub n: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub targets: Vec<TargetArtifacts>,
    /// Wall-clock timings in seconds; excluded from the manifest hash.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(config_hash: String, mechanism: String, num_decoders: usize, n: usize, epsilon: f64, seed: u64) -> Self {
        Self {
            config_hash,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            mechanism,
            num_decoders,
            n,
            epsilon,
            seed,
            targets: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    /// Hash over everything except timings.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.timings = BTreeMap::new();
        let json = serde_json::to_vec(&canonical).expect("manifest serializes");
        let mut hasher = Sha256::new();
        hasher.update(&json);
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        // Artifacts must exist before the manifest is written.
        for t in &self.targets {
            for path in [&t.checkpoint, &t.train_log, &t.adversarial_png, &t.sidecar]
                .into_iter()
                .flatten()
            {
                if !path.exists() {
                    bail!("manifest references missing artifact {}", path.display());
                }
            }
        }
        let path = dir.join("run_manifest.json");
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, json)
            .with_context(|| format!("writing manifest {}", path.display()))?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join("run_manifest.json");
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}
