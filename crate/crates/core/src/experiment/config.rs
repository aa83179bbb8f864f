use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm::grammar::GrammarConfig;
use crate::lm::{LmConfig, LmTrainOptions};
use crate::probing::{ProbeOptions, SyntheticTask};

/// Subject model: either a checkpoint on disk or one trained on the grammar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Existing checkpoint; when absent `train-lm` writes one into the run.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub config: LmConfig,
    pub grammar: GrammarConfig,
    pub train_tokens: usize,
    pub corpus_seed: u64,
    pub train: LmTrainOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeSpec {
    pub d: usize,
    pub k: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub dead_feature_window: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Faithful {
        n_tokens: usize,
        max_len: usize,
        temperature: f32,
        seed: u64,
    },
    Random {
        n_tokens: usize,
        seq_len: usize,
        seed: u64,
    },
    /// An FTOK file; relative paths resolve against the run directory.
    External { path: PathBuf },
    /// The grammar text the subject model was trained on, resampled.
    Pretrain { n_tokens: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub source: DatasetSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    /// Cap on evaluation rows per dataset.
    pub max_rows: usize,
    pub n_ood_tokens: usize,
    /// Larger OOD sample used to check that the FFR estimate has settled.
    pub n_ood_tokens_large: usize,
    pub ood_seq_len: usize,
    pub ood_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub tasks: Vec<SyntheticTask>,
    pub options: ProbeOptions,
    pub split_seed: u64,
    pub shuffle_seed: u64,
}

/// Sizes of the self-checks run by `report`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSpec {
    pub seed: u64,
    pub equivalence_instances: usize,
    pub gradient_probes: usize,
    pub hungarian_instances: usize,
    /// Row budget for the subspace reconstruction check.
    pub subspace_rows: usize,
    /// Base sample size of the KL convergence check; the large sample is 10×.
    pub kl_tokens: usize,
    pub kl_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelSpec,
    pub layer: usize,
    pub sae: SaeSpec,
    /// SAE seeds, paired in order: `(s0, s1)`, `(s2, s3)`, ...
    pub seeds: Vec<u64>,
    pub datasets: Vec<DatasetSpec>,
    /// In-distribution and OOD dataset names compared by the ordering checks.
    pub compare: (String, String),
    pub tau_s: f64,
    pub tau_f: f64,
    pub eval: EvalSpec,
    pub probe: ProbeSpec,
    pub checks: CheckSpec,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

fn default_jobs() -> usize {
    1
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_value(read_value(path)?, path)
    }

    /// Loads `path` and applies `key=value` overrides to the raw JSON first.
    pub fn load_with_overrides(path: &Path, overrides: &[String]) -> Result<Self> {
        let mut value = read_value(path)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value, path)
    }

    fn from_value(value: Value, path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.config.validate()?;
        if self.layer >= self.model.config.n_layers {
            return bad(format!("layer {} but the model has {} blocks", self.layer, self.model.config.n_layers));
        }
        if self.seeds.len() < 2 || self.seeds.len() % 2 != 0 {
            return bad(format!("seed list needs an even count of at least 2, got {}", self.seeds.len()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return bad("seed list has duplicates".into());
        }
        if !(-1.0..=1.0).contains(&self.tau_s) {
            return bad(format!("tau_s {} outside [-1, 1]", self.tau_s));
        }
        if !(self.tau_f > 0.0 && self.tau_f < 1.0) {
            return bad(format!("tau_f {} outside (0, 1)", self.tau_f));
        }
        if self.datasets.is_empty() {
            return bad("no datasets configured".into());
        }
        for (i, d) in self.datasets.iter().enumerate() {
            if d.name.is_empty() || !d.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return bad(format!("dataset name {:?} must be nonempty [A-Za-z0-9_-]", d.name));
            }
            if self.datasets[..i].iter().any(|o| o.name == d.name) {
                return bad(format!("dataset name {} repeated", d.name));
            }
        }
        for name in [&self.compare.0, &self.compare.1] {
            if self.dataset(name).is_none() {
                return bad(format!("compared dataset {name} is not configured"));
            }
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        if self.eval.n_ood_tokens == 0 || self.eval.ood_seq_len == 0 {
            return bad("OOD sample must be nonempty".into());
        }
        self.sae_config().validate()?;
        self.train_config(0).validate()?;
        Ok(())
    }

    pub fn dataset(&self, name: &str) -> Option<&DatasetSpec> {
        self.datasets.iter().find(|d| d.name == name)
    }

    pub fn sae_config(&self) -> crate::sae::SaeConfig {
        crate::sae::SaeConfig {
            a: self.model.config.d_model,
            d: self.sae.d,
            k: self.sae.k,
        }
    }

    pub fn train_config(&self, seed: u64) -> crate::sae::TrainConfig {
        crate::sae::TrainConfig {
            lr: self.sae.lr,
            steps: self.sae.steps,
            batch_size: self.sae.batch_size,
            seed,
            dead_feature_window: self.sae.dead_feature_window,
        }
    }

    /// Consecutive seed pairs, one per repetition.
    pub fn seed_pairs(&self) -> Vec<(u64, u64)> {
        self.seeds.chunks(2).map(|p| (p[0], p[1])).collect()
    }

    /// Replaces the SAE seeds with `base, base + 1, ...`.
    pub fn override_seeds(&mut self, base: u64) {
        let n = self.seeds.len() as u64;
        self.seeds = (0..n).map(|i| base + i).collect();
    }

    /// SHA-256 of the canonical JSON with the output directory and worker
    /// count removed, as 16 hex digits.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut v {
            map.remove("out_dir");
            map.remove("jobs");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn read_value(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Sets a dotted path such as `sae.steps=100` or `seeds.0=7`. The value is
/// parsed as JSON and kept as a string when that fails.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.get_mut(*part)
                    .ok_or_else(|| Error::Config(format!("override key {key}: no field {part}")))?
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("override key {key}: {part} is not an index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("override key {key}: index {idx} out of {len}")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("override key {key}: {part} is not inside an object"))),
        };
    }
    Err(Error::Config(format!("override key {key:?} is empty")))
}
