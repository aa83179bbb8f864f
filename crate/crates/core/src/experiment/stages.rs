use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{read_json_artifact, worker_pool, write_artifact, write_json_artifact, DatasetSource, Run};
use crate::data::{
    capture, dataset_stats, generate_faithful, generate_random_corpus, ActivationStore, Corpus, DatasetStats,
    FaithfulOptions, SourceTag,
};
use crate::error::{Error, Result};
use crate::lm::grammar::Grammar;
use crate::lm::TinyLm;
use crate::matching::{shared_feature_ratio, MatchSummary};
use crate::math::Rng;
use crate::metrics::{
    ce_difference_with, ce_differences, evaluate_faithfulness_many, fake_feature_ratio_on, ood_activations,
    FaithfulnessReport,
};
use crate::probing::{
    pooled_representation, probe_split, probing_suite, synthetic_task, InputKind, LabeledCorpus, ProbingReport,
};
use crate::sae::{train_sae, TopKSae};

/// Similarity thresholds swept by the monotonicity check.
pub const TAU_SWEEP: [f64; 3] = [0.5, 0.7, 0.9];

fn csv_curve(curve: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, v) in curve.iter().enumerate() {
        let _ = writeln!(out, "{i},{}", super::fmt_num(*v));
    }
    out
}

pub(crate) fn load_model(run: &Run) -> Result<TinyLm> {
    let path = run.model_path();
    if !path.exists() {
        return Err(Error::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "model checkpoint not found; run train-lm"),
        ));
    }
    TinyLm::load(&path)
}

/// Trains the subject model on grammar text unless the config names a checkpoint.
pub fn train_lm(run: &Run) -> Result<Vec<String>> {
    let spec = &run.cfg.model;
    if spec.checkpoint.is_some() {
        let model = load_model(run)?;
        log::info!("using checkpoint {} ({})", run.model_path().display(), model.fingerprint());
        return Ok(Vec::new());
    }
    let grammar = Grammar::new(spec.grammar.clone())?;
    let corpus = grammar.corpus(spec.train_tokens, &mut Rng::new(spec.corpus_seed));
    let (model, report) = crate::lm::train_lm(&corpus, spec.config.clone(), &spec.train)?;
    std::fs::create_dir_all(run.path("model")).map_err(|e| Error::io(run.path("model"), e))?;
    model.save(&run.model_path())?;
    log::info!(
        "trained model {}: loss {:.4} -> {:.4}",
        model.fingerprint(),
        report.loss_curve.first().copied().unwrap_or(f64::NAN),
        report.loss_curve.last().copied().unwrap_or(f64::NAN)
    );
    let csv = write_artifact(&run.dir, "model/lm.loss.csv", csv_curve(&report.loss_curve).as_bytes())?;
    Ok(vec!["model/lm.json".into(), "model/lm.bin".into(), csv])
}

/// One row of the dataset statistics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub dataset: String,
    pub source: SourceTag,
    #[serde(flatten)]
    pub stats: DatasetStats,
}

fn build_corpus(run: &Run, model: &TinyLm, source: &DatasetSource) -> Result<Corpus> {
    let vocab = model.config.vocab_size;
    match source {
        DatasetSource::Faithful {
            n_tokens,
            max_len,
            temperature,
            seed,
        } => generate_faithful(
            model,
            &FaithfulOptions {
                n_tokens: *n_tokens,
                max_len: *max_len,
                temperature: *temperature,
                seed: *seed,
            },
        ),
        DatasetSource::Random { n_tokens, seq_len, seed } => generate_random_corpus(vocab, *n_tokens, *seq_len, *seed),
        DatasetSource::External { path } => {
            let path = if path.is_relative() { run.dir.join(path) } else { path.clone() };
            let corpus = Corpus::load(&path, SourceTag::External)?;
            if corpus.vocab_size != vocab {
                return Err(Error::Config(format!(
                    "{} has vocabulary {} but the model has {vocab}",
                    path.display(),
                    corpus.vocab_size
                )));
            }
            Ok(corpus)
        }
        DatasetSource::Pretrain { n_tokens, seed } => {
            let grammar = Grammar::new(run.cfg.model.grammar.clone())?;
            let seqs = grammar.corpus(*n_tokens, &mut Rng::new(*seed));
            Corpus::new(vocab, seqs, SourceTag::External)
        }
    }
}

/// Builds every configured corpus and its statistics.
pub fn generate(run: &Run) -> Result<(Vec<DatasetRow>, Vec<String>)> {
    let model = load_model(run)?;
    let mut rows = Vec::new();
    let mut artifacts = Vec::new();
    for spec in &run.cfg.datasets {
        let corpus = build_corpus(run, &model, &spec.source)?;
        let rel = Run::corpus_rel(&spec.name);
        let mut bytes = Vec::new();
        corpus.write_ftok(&mut bytes).map_err(|e| Error::io(run.path(&rel), e))?;
        artifacts.push(write_artifact(&run.dir, &rel, &bytes)?);
        let row = DatasetRow {
            dataset: spec.name.clone(),
            source: corpus.source_tag,
            stats: dataset_stats(&corpus, &model)?,
        };
        artifacts.push(write_json_artifact(&run.dir, &Run::stats_rel(&spec.name), &row)?);
        rows.push(row);
    }
    Ok((rows, artifacts))
}

pub(crate) fn load_corpus(run: &Run, name: &str) -> Result<Corpus> {
    let spec = run
        .cfg
        .dataset(name)
        .ok_or_else(|| Error::Config(format!("dataset {name} is not configured")))?;
    let tag = match spec.source {
        DatasetSource::Faithful { .. } => SourceTag::Faithful,
        DatasetSource::Random { .. } => SourceTag::Random,
        _ => SourceTag::External,
    };
    let path = run.path(&Run::corpus_rel(name));
    if !path.exists() {
        return Err(Error::Config(format!("missing corpus {}; run generate", path.display())));
    }
    Corpus::load(&path, tag)
}

/// Trains one SAE per dataset and seed.
pub fn train(run: &Run) -> Result<Vec<String>> {
    let cfg = &run.cfg;
    let model = load_model(run)?;
    let sae_cfg = cfg.sae_config();
    let mut stores: Vec<ActivationStore> = Vec::new();
    for spec in &cfg.datasets {
        let corpus = load_corpus(run, &spec.name)?;
        let mut store = capture(&model, &corpus, cfg.layer, None)?;
        store.dataset_tag = spec.name.clone();
        stores.push(store);
    }
    let jobs: Vec<(usize, u64)> = (0..stores.len())
        .flat_map(|d| cfg.seeds.iter().map(move |&s| (d, s)))
        .collect();
    let pool = worker_pool(cfg.jobs)?;
    let trained: Vec<(usize, u64, TopKSae, Vec<f64>)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(d, seed)| {
                let (sae, report) = train_sae(&stores[d], sae_cfg, &cfg.train_config(seed))?;
                log::info!(
                    "trained {}: final loss {:.5}, {} dead features",
                    sae.id(),
                    report.loss_curve.last().copied().unwrap_or(f64::NAN),
                    report.dead_features.len()
                );
                Ok((d, seed, sae, report.loss_curve))
            })
            .collect::<Result<_>>()
    })?;
    let mut artifacts = Vec::new();
    for (d, seed, sae, curve) in trained {
        let name = &cfg.datasets[d].name;
        let rel = Run::sae_rel(name, seed);
        std::fs::create_dir_all(run.path("saes")).map_err(|e| Error::io(run.path("saes"), e))?;
        sae.save(&run.path(&rel))?;
        artifacts.push(rel.clone());
        artifacts.push(rel.replace(".json", ".bin"));
        artifacts.push(write_artifact(&run.dir, &Run::loss_rel(name, seed), csv_curve(&curve).as_bytes())?);
    }
    Ok(artifacts)
}

/// Loads the SAEs of `dataset` in seed order.
pub(crate) fn load_saes(run: &Run, dataset: &str) -> Result<Vec<(u64, TopKSae)>> {
    run.cfg
        .seeds
        .iter()
        .map(|&seed| {
            let path = run.path(&Run::sae_rel(dataset, seed));
            if !path.exists() {
                return Err(Error::Config(format!("missing checkpoint {}; run train", path.display())));
            }
            Ok((seed, TopKSae::load(&path)?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMatch {
    pub seed_a: u64,
    pub seed_b: u64,
    pub sfr: f64,
    /// `(tau_s, sfr)` at each swept threshold.
    pub tau_sweep: Vec<(f64, f64)>,
    pub summary: MatchSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMatch {
    pub dataset: String,
    pub pairs: Vec<PairMatch>,
    pub mean_sfr: f64,
    /// `(sae id, SFR against itself)`.
    pub self_sfr: Vec<(String, f64)>,
    /// `(sae id, zero decoder rows)`.
    pub zero_rows: Vec<(String, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchFile {
    pub tau_s: f64,
    pub datasets: Vec<DatasetMatch>,
}

impl MatchFile {
    pub fn dataset(&self, name: &str) -> Option<&DatasetMatch> {
        self.datasets.iter().find(|d| d.dataset == name)
    }

    pub fn text_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>10}  per-pair SFR (tau_s = {})", "dataset", "mean_sfr", self.tau_s);
        for d in &self.datasets {
            let pairs: Vec<String> = d.pairs.iter().map(|p| format!("{:.4}", p.sfr)).collect();
            let _ = writeln!(out, "{:<12} {:>10.4}  {}", d.dataset, d.mean_sfr, pairs.join(" "));
        }
        out
    }
}

/// Pairwise SFR across seeds within each dataset.
pub fn match_saes(run: &Run) -> Result<(MatchFile, Vec<String>)> {
    let cfg = &run.cfg;
    let mut datasets = Vec::new();
    for spec in &cfg.datasets {
        let saes = load_saes(run, &spec.name)?;
        let by_seed = |s: u64| &saes.iter().find(|(seed, _)| *seed == s).expect("seed loaded").1;
        let mut pairs = Vec::new();
        for (sa, sb) in cfg.seed_pairs() {
            let (a, b) = (by_seed(sa), by_seed(sb));
            let result = shared_feature_ratio(a, b, cfg.tau_s)?;
            let tau_sweep = TAU_SWEEP
                .iter()
                .map(|&t| Ok((t, shared_feature_ratio(a, b, t)?.sfr)))
                .collect::<Result<_>>()?;
            pairs.push(PairMatch {
                seed_a: sa,
                seed_b: sb,
                sfr: result.sfr,
                tau_sweep,
                summary: result.summary(),
            });
        }
        let self_sfr = saes
            .iter()
            .map(|(_, s)| Ok((s.id(), shared_feature_ratio(s, s, cfg.tau_s)?.sfr)))
            .collect::<Result<_>>()?;
        let zero_rows = saes
            .iter()
            .map(|(_, s)| (s.id(), (0..s.d()).filter(|&j| s.w_dec.row(j).iter().all(|&v| v == 0.0)).count()))
            .collect();
        let mean_sfr = pairs.iter().map(|p| p.sfr).sum::<f64>() / pairs.len() as f64;
        datasets.push(DatasetMatch {
            dataset: spec.name.clone(),
            pairs,
            mean_sfr,
            self_sfr,
            zero_rows,
        });
    }
    let file = MatchFile {
        tau_s: cfg.tau_s,
        datasets,
    };
    let artifacts = vec![
        write_json_artifact(&run.dir, "reports/match.json", &file)?,
        write_artifact(&run.dir, "reports/match.txt", file.text_table().as_bytes())?,
    ];
    Ok((file, artifacts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeEval {
    pub sae_id: String,
    pub seed: u64,
    #[serde(flatten)]
    pub report: FaithfulnessReport,
}

/// Seed-averaged metrics for one (training set, evaluation set) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub train_dataset: String,
    pub eval_dataset: String,
    pub ce_difference: f64,
    pub l2_error: f64,
    pub explained_variance: f64,
    pub n_saes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlRow {
    pub eval_dataset: String,
    /// Clean states patched back in.
    pub identity_ce_difference: f64,
    /// All-zero SAE reconstruction patched in.
    pub zero_sae_ce_difference: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessFile {
    pub layer: usize,
    pub max_rows: usize,
    pub per_sae: Vec<SaeEval>,
    pub grid: Vec<GridRow>,
    pub controls: Vec<ControlRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeFfr {
    pub sae_id: String,
    pub dataset: String,
    pub seed: u64,
    pub ffr: f64,
    pub fake_features: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFfr {
    pub dataset: String,
    pub mean_ffr: f64,
    pub per_seed: Vec<f64>,
}

/// The same SAE's FFR on a small and a 10× larger OOD sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfrConvergence {
    pub sae_id: String,
    pub n_small: usize,
    pub ffr_small: f64,
    pub n_large: usize,
    pub ffr_large: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfrFile {
    pub tau_f: f64,
    pub n_ood_tokens: usize,
    pub per_sae: Vec<SaeFfr>,
    pub per_dataset: Vec<DatasetFfr>,
    pub convergence: Vec<FfrConvergence>,
}

impl FfrFile {
    pub fn dataset(&self, name: &str) -> Option<&DatasetFfr> {
        self.per_dataset.iter().find(|d| d.dataset == name)
    }
}

/// Faithfulness grid over (training set, evaluation set) and FFR per SAE.
pub fn evaluate(run: &Run) -> Result<((FaithfulnessFile, FfrFile), Vec<String>)> {
    let cfg = &run.cfg;
    let model = load_model(run)?;
    let mut all: Vec<(String, u64, TopKSae)> = Vec::new();
    for spec in &cfg.datasets {
        for (seed, sae) in load_saes(run, &spec.name)? {
            all.push((spec.name.clone(), seed, sae));
        }
    }
    let refs: Vec<&TopKSae> = all.iter().map(|(_, _, s)| s).collect();
    let zero = TopKSae::zeros(cfg.sae_config())?;
    let mut per_sae = Vec::new();
    let mut controls = Vec::new();
    for spec in &cfg.datasets {
        let corpus = load_corpus(run, &spec.name)?;
        log::info!("evaluating {} SAEs on {}", refs.len(), spec.name);
        let reports = evaluate_faithfulness_many(&model, &refs, &corpus, &spec.name, cfg.layer, Some(cfg.eval.max_rows))?;
        for ((_, seed, sae), report) in all.iter().zip(reports) {
            per_sae.push(SaeEval {
                sae_id: sae.id(),
                seed: *seed,
                report,
            });
        }
        let subset = crate::metrics::truncate_corpus(&corpus, cfg.eval.max_rows, model.config.max_seq_len - 1);
        controls.push(ControlRow {
            eval_dataset: spec.name.clone(),
            identity_ce_difference: ce_difference_with(&model, &subset, cfg.layer, |x| Ok(x.clone()))?,
            zero_sae_ce_difference: ce_differences(&model, &[&zero], &subset, cfg.layer)?[0],
        });
    }
    let mut grid = Vec::new();
    for train in &cfg.datasets {
        for eval in &cfg.datasets {
            let cell: Vec<&FaithfulnessReport> = per_sae
                .iter()
                .map(|e| &e.report)
                .filter(|r| r.train_dataset_tag == train.name && r.eval_dataset_tag == eval.name)
                .collect();
            let mean = |f: fn(&FaithfulnessReport) -> f64| cell.iter().map(|r| f(r)).sum::<f64>() / cell.len() as f64;
            grid.push(GridRow {
                train_dataset: train.name.clone(),
                eval_dataset: eval.name.clone(),
                ce_difference: mean(|r| r.ce_difference),
                l2_error: mean(|r| r.l2_error),
                explained_variance: mean(|r| r.explained_variance),
                n_saes: cell.len(),
            });
        }
    }
    let faithfulness = FaithfulnessFile {
        layer: cfg.layer,
        max_rows: cfg.eval.max_rows,
        per_sae,
        grid,
        controls,
    };

    let ood = ood_activations(&model, cfg.layer, cfg.eval.n_ood_tokens, cfg.eval.ood_seq_len, cfg.eval.ood_seed)?;
    let ffr_reports = all
        .par_iter()
        .map(|(_, _, sae)| fake_feature_ratio_on(sae, &ood, cfg.tau_f))
        .collect::<Result<Vec<_>>>()?;
    let per_sae_ffr: Vec<SaeFfr> = all
        .iter()
        .zip(&ffr_reports)
        .map(|((name, seed, sae), r)| SaeFfr {
            sae_id: sae.id(),
            dataset: name.clone(),
            seed: *seed,
            ffr: r.ffr,
            fake_features: (0..r.activation_frequency.len())
                .filter(|&j| r.activation_frequency[j] > cfg.tau_f)
                .collect(),
        })
        .collect();
    let per_dataset = cfg
        .datasets
        .iter()
        .map(|spec| {
            let per_seed: Vec<f64> = per_sae_ffr.iter().filter(|f| f.dataset == spec.name).map(|f| f.ffr).collect();
            DatasetFfr {
                dataset: spec.name.clone(),
                mean_ffr: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
                per_seed,
            }
        })
        .collect();
    drop(ood);
    let mut convergence = Vec::new();
    if cfg.eval.n_ood_tokens_large > 0 {
        let large = ood_activations(
            &model,
            cfg.layer,
            cfg.eval.n_ood_tokens_large,
            cfg.eval.ood_seq_len,
            cfg.eval.ood_seed,
        )?;
        for name in [&cfg.compare.0, &cfg.compare.1] {
            let idx = all.iter().position(|(d, _, _)| d == name).expect("compared dataset has SAEs");
            let sae = &all[idx].2;
            convergence.push(FfrConvergence {
                sae_id: sae.id(),
                n_small: cfg.eval.n_ood_tokens,
                ffr_small: ffr_reports[idx].ffr,
                n_large: cfg.eval.n_ood_tokens_large,
                ffr_large: fake_feature_ratio_on(sae, &large, cfg.tau_f)?.ffr,
            });
        }
    }
    let ffr = FfrFile {
        tau_f: cfg.tau_f,
        n_ood_tokens: cfg.eval.n_ood_tokens,
        per_sae: per_sae_ffr,
        per_dataset,
        convergence,
    };
    let artifacts = vec![
        write_json_artifact(&run.dir, "reports/faithfulness.json", &faithfulness)?,
        write_json_artifact(&run.dir, "reports/ffr.json", &ffr)?,
    ];
    Ok(((faithfulness, ffr), artifacts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShuffledControl {
    pub task: String,
    pub accuracy: f64,
    pub chance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeFile {
    pub report: ProbingReport,
    /// Baseline probe trained on permuted labels.
    pub shuffled: Vec<ShuffledControl>,
}

/// Probing grid over tasks, SAEs and representation kinds.
pub fn probe(run: &Run) -> Result<(ProbeFile, Vec<String>)> {
    let cfg = &run.cfg;
    let model = load_model(run)?;
    let mut saes = Vec::new();
    for spec in &cfg.datasets {
        saes.extend(load_saes(run, &spec.name)?.into_iter().map(|(_, s)| s));
    }
    let tasks: Vec<(String, LabeledCorpus)> = cfg
        .probe
        .tasks
        .iter()
        .map(|t| Ok((t.name.clone(), synthetic_task(t, model.config.vocab_size)?)))
        .collect::<Result<_>>()?;
    let report = probing_suite(&model, &saes, &tasks, cfg.layer, &cfg.probe.options, cfg.probe.split_seed)?;
    let mut shuffled = Vec::new();
    for (name, task) in &tasks {
        let permuted = task.shuffled_labels(cfg.probe.shuffle_seed);
        let reps = pooled_representation(&model, None, &permuted, cfg.layer, InputKind::Baseline)?;
        let m = probe_split(
            &reps,
            &permuted.labels,
            permuted.n_classes,
            InputKind::Baseline,
            &cfg.probe.options,
            cfg.probe.split_seed,
        )?;
        shuffled.push(ShuffledControl {
            task: name.clone(),
            accuracy: m.accuracy,
            chance: 1.0 / task.n_classes as f64,
        });
    }
    let file = ProbeFile { report, shuffled };
    let artifacts = vec![
        write_json_artifact(&run.dir, "reports/probing.json", &file)?,
        write_artifact(&run.dir, "reports/probing.txt", file.report.text_table().as_bytes())?,
    ];
    Ok((file, artifacts))
}

pub(crate) fn read_report<T: serde::de::DeserializeOwned>(run: &Run, rel: &str) -> Result<T> {
    read_json_artifact(&run.dir, rel)
}
