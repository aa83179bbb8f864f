//! Experiment orchestration: a JSON config drives a fixed sequence of
//! stages, each reading its inputs from and writing its outputs to one run
//! directory.
//!
//! ```text
//! train-lm → generate → train → match ─┐
//!                           ├→ evaluate ├→ report
//!                           └→ probe ───┘
//! ```
//!
//! Every artifact except `manifest.json` is a deterministic function of the
//! config, so two runs with the same config produce identical bytes.

pub mod checks;
mod config;
mod report;
mod stages;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub use config::{
    apply_override, CheckSpec, DatasetSource, DatasetSpec, EvalSpec, ExperimentConfig, ModelSpec, ProbeSpec, SaeSpec,
};
pub use report::{render_markdown, report, Property, PropertyStatus, Summary};
pub use stages::{
    evaluate, generate, match_saes, probe, train, train_lm, ControlRow, DatasetFfr, DatasetMatch, DatasetRow,
    FaithfulnessFile, FfrConvergence, FfrFile, GridRow, MatchFile, PairMatch, ProbeFile, SaeEval, SaeFfr,
    ShuffledControl,
};

use crate::error::{Error, Result};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Pipeline stages in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    TrainLm,
    Generate,
    Train,
    Match,
    Evaluate,
    Probe,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::TrainLm,
        Stage::Generate,
        Stage::Train,
        Stage::Match,
        Stage::Evaluate,
        Stage::Probe,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::TrainLm => "train-lm",
            Stage::Generate => "generate",
            Stage::Train => "train",
            Stage::Match => "match",
            Stage::Evaluate => "evaluate",
            Stage::Probe => "probe",
            Stage::Report => "report",
        }
    }
}

/// A config bound to its run directory.
#[derive(Clone, Debug)]
pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
}

impl Run {
    /// Uses `out`, else the config's `out_dir`, else `runs/<name>`.
    pub fn new(cfg: ExperimentConfig, out: Option<PathBuf>) -> Self {
        let dir = out
            .or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
        Self { cfg, dir }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn model_path(&self) -> PathBuf {
        match &self.cfg.model.checkpoint {
            Some(p) => p.clone(),
            None => self.path("model/lm.json"),
        }
    }

    pub fn corpus_rel(name: &str) -> String {
        format!("corpora/{name}.ftok")
    }

    pub fn stats_rel(name: &str) -> String {
        format!("stats/{name}.json")
    }

    pub fn sae_rel(name: &str, seed: u64) -> String {
        format!("saes/{name}-s{seed}.json")
    }

    pub fn loss_rel(name: &str, seed: u64) -> String {
        format!("saes/{name}-s{seed}.loss.csv")
    }

    /// Runs `stage` and records it in the manifest.
    pub fn run_stage(&self, stage: Stage) -> Result<Vec<String>> {
        let started = unix_now();
        log::info!("stage {} in {}", stage.as_str(), self.dir.display());
        let artifacts = match stage {
            Stage::TrainLm => train_lm(self)?,
            Stage::Generate => generate(self)?.1,
            Stage::Train => train(self)?,
            Stage::Match => match_saes(self)?.1,
            Stage::Evaluate => evaluate(self)?.1,
            Stage::Probe => probe(self)?.1,
            Stage::Report => report(self, None)?.1,
        };
        self.record(stage, started, &artifacts)?;
        Ok(artifacts)
    }

    /// Adds a stage and its artifacts to `manifest.json`.
    pub fn record(&self, stage: Stage, started: u64, artifacts: &[String]) -> Result<()> {
        let path = self.path("manifest.json");
        let mut manifest = if path.exists() {
            RunManifest::load(&path)?
        } else {
            RunManifest::default()
        };
        let hash = self.cfg.hash();
        if manifest.config_hash != hash {
            manifest = RunManifest {
                config_hash: hash,
                ..RunManifest::default()
            };
        }
        manifest.toolkit_version = TOOLKIT_VERSION.to_string();
        for a in artifacts {
            manifest.artifacts.insert(a.clone(), stage.as_str().to_string());
        }
        manifest.stages.insert(
            stage.as_str().to_string(),
            StageTiming {
                started_unix: started,
                finished_unix: unix_now(),
            },
        );
        manifest.save(&self.dir, &path)
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub started_unix: u64,
    pub finished_unix: u64,
}

/// Index of a run: which stage wrote which file, and when.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub toolkit_version: String,
    /// Relative artifact path to the stage that wrote it.
    pub artifacts: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageTiming>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        crate::checkpoint::read_json(path)
    }

    /// Writes the manifest after checking that every artifact exists.
    pub fn save(&self, root: &Path, path: &Path) -> Result<()> {
        if let Some(missing) = self.artifacts.keys().find(|a| !root.join(a).exists()) {
            return Err(Error::Invariant(format!("manifest references missing artifact {missing}")));
        }
        crate::checkpoint::write_json(path, self)
    }
}

/// Writes `bytes` to `dir/rel`, creating parent directories.
pub(crate) fn write_artifact(dir: &Path, rel: &str, bytes: &[u8]) -> Result<String> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(rel.to_string())
}

pub(crate) fn write_json_artifact<T: Serialize>(dir: &Path, rel: &str, value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: dir.join(rel),
        source,
    })?;
    text.push('\n');
    write_artifact(dir, rel, text.as_bytes())
}

pub(crate) fn read_json_artifact<T: serde::de::DeserializeOwned>(dir: &Path, rel: &str) -> Result<T> {
    crate::checkpoint::read_json(&dir.join(rel))
}

/// Rayon pool sized by the `jobs` setting.
pub(crate) fn worker_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))
}

/// Shortest round-trip rendering shared by JSON and markdown output.
pub fn fmt_num(x: f64) -> String {
    serde_json::to_string(&x).unwrap_or_else(|_| "null".into())
}
