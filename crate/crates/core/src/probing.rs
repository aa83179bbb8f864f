//! Linear probes on mean-pooled representations: raw hidden states, sparse
//! SAE features, and SAE reconstructions.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::model_input;
use crate::error::{Error, Result};
use crate::lm::TinyLm;
use crate::math::{log_softmax, AdamConfig, AdamState, Matrix, Rng};
use crate::sae::TopKSae;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledCorpus {
    pub sequences: Vec<Vec<u32>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl LabeledCorpus {
    pub fn new(sequences: Vec<Vec<u32>>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if sequences.len() != labels.len() {
            return Err(Error::Input(format!(
                "{} sequences but {} labels",
                sequences.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Input(format!("label {l} outside {n_classes} classes")));
        }
        if sequences.iter().any(Vec::is_empty) {
            return Err(Error::Input("labeled sequences must be nonempty".into()));
        }
        Ok(Self {
            sequences,
            labels,
            n_classes,
        })
    }

    /// Same sequences with labels permuted by `seed`.
    pub fn shuffled_labels(&self, seed: u64) -> Self {
        let mut labels = self.labels.clone();
        Rng::new(seed).shuffle(&mut labels);
        Self {
            labels,
            ..self.clone()
        }
    }
}

/// Settings for a synthetic classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub name: String,
    pub n_examples: usize,
    pub n_classes: usize,
    pub seq_len: usize,
    /// Probability that a token comes from the class's own token subset.
    pub signal: f64,
    /// Smallest token id used; lower ids are left to special tokens.
    pub first_token: u32,
    pub seed: u64,
}

/// Class `c` oversamples its own disjoint slice of the vocabulary.
pub fn synthetic_task(task: &SyntheticTask, vocab_size: usize) -> Result<LabeledCorpus> {
    let first = task.first_token as usize;
    if task.n_classes < 2 || vocab_size < first + task.n_classes || task.seq_len == 0 || task.n_examples == 0 {
        return Err(Error::Config(format!("synthetic task cannot be built: {task:?} with vocab {vocab_size}")));
    }
    if !(0.0..=1.0).contains(&task.signal) {
        return Err(Error::Config(format!("signal {} outside [0, 1]", task.signal)));
    }
    let pool = vocab_size - first;
    let slice = pool / task.n_classes;
    let mut rng = Rng::new(task.seed);
    let mut sequences = Vec::with_capacity(task.n_examples);
    let mut labels = Vec::with_capacity(task.n_examples);
    for i in 0..task.n_examples {
        let class = i % task.n_classes;
        let seq = (0..task.seq_len)
            .map(|_| {
                let t = if rng.unit_f64() < task.signal {
                    first + class * slice + rng.below(slice)
                } else {
                    first + rng.below(pool)
                };
                t as u32
            })
            .collect();
        sequences.push(seq);
        labels.push(class);
    }
    LabeledCorpus::new(sequences, labels, task.n_classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Baseline,
    SaeFeatures,
    Reconstruction,
}

impl InputKind {
    pub const ALL: [InputKind; 3] = [InputKind::Baseline, InputKind::SaeFeatures, InputKind::Reconstruction];

    pub fn as_str(self) -> &'static str {
        match self {
            InputKind::Baseline => "baseline",
            InputKind::SaeFeatures => "sae_features",
            InputKind::Reconstruction => "reconstruction",
        }
    }
}

/// Mean over every non-BOS position of the chosen representation.
pub fn pooled_representation(
    model: &TinyLm,
    sae: Option<&TopKSae>,
    corpus: &LabeledCorpus,
    layer: usize,
    kind: InputKind,
) -> Result<Matrix> {
    let sae = match (kind, sae) {
        (InputKind::Baseline, _) => None,
        (_, Some(s)) => Some(s),
        (_, None) => return Err(Error::Config(format!("{} probes need an SAE", kind.as_str()))),
    };
    let width = match (kind, sae) {
        (InputKind::SaeFeatures, Some(s)) => s.d(),
        _ => model.config.d_model,
    };
    let rows: Vec<Vec<f32>> = corpus
        .sequences
        .par_iter()
        .map(|seq| {
            let tokens = model_input(model, seq)?;
            let h = model.hidden_states(&tokens, layer)?;
            let body = h.select_rows(&(1..h.rows()).collect::<Vec<_>>());
            let rep = match (kind, sae) {
                (InputKind::Baseline, _) => body,
                (InputKind::SaeFeatures, Some(s)) => s.encode(&body)?,
                (_, Some(s)) => s.reconstruct(&body)?,
                _ => unreachable!("checked above"),
            };
            let mut mean = vec![0.0f64; width];
            for row in rep.iter_rows() {
                mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v as f64);
            }
            Ok(mean.iter().map(|m| (m / rep.rows() as f64) as f32).collect())
        })
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, width));
    }
    Matrix::from_rows(&rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub l2_penalty: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Training rows beyond this count are ignored.
    pub max_train: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            l2_penalty: 1e-4,
            epochs: 60,
            lr: 1e-2,
            batch_size: 64,
            seed: 0,
            max_train: 100_000,
        }
    }
}

/// Multinomial logistic regression on standardized inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    /// `input_dim × n_classes`, applied after standardization.
    pub weights: Matrix,
    pub bias: Vec<f32>,
    pub input_kind: InputKind,
    pub mean: Vec<f32>,
    pub scale: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub accuracy: f64,
    pub f1: f64,
}

impl Probe {
    fn logits(&self, x: &[f32]) -> Vec<f32> {
        let c = self.bias.len();
        let mut out: Vec<f64> = self.bias.iter().map(|&b| b as f64).collect();
        for (i, &v) in x.iter().enumerate() {
            let z = (v - self.mean[i]) * self.scale[i];
            if z == 0.0 {
                continue;
            }
            let w = self.weights.row(i);
            for k in 0..c {
                out[k] += z as f64 * w[k] as f64;
            }
        }
        out.into_iter().map(|v| v as f32).collect()
    }

    pub fn predict(&self, reps: &Matrix) -> Vec<usize> {
        reps.iter_rows()
            .map(|r| crate::math::argmax(&self.logits(r)))
            .collect()
    }
}

pub fn train_probe(
    reps: &Matrix,
    labels: &[usize],
    n_classes: usize,
    kind: InputKind,
    opts: &ProbeOptions,
) -> Result<Probe> {
    if reps.rows() != labels.len() {
        return Err(Error::shape("train_probe", reps.shape(), (labels.len(), reps.cols())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Input(format!("label {l} outside {n_classes} classes")));
    }
    let n = reps.rows().min(opts.max_train);
    let mut present: Vec<usize> = labels[..n].to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::DegenerateTask(format!(
            "training set has {} distinct class(es)",
            present.len()
        )));
    }
    if opts.epochs == 0 || opts.batch_size == 0 || !(opts.lr > 0.0) {
        return Err(Error::Param("probe epochs, batch size and lr must be positive".into()));
    }
    let dim = reps.cols();
    let mut mean = vec![0.0f64; dim];
    let mut sq = vec![0.0f64; dim];
    for r in 0..n {
        for (i, &v) in reps.row(r).iter().enumerate() {
            mean[i] += v as f64;
            sq[i] += v as f64 * v as f64;
        }
    }
    let mean: Vec<f32> = mean.iter().map(|m| (m / n as f64) as f32).collect();
    let scale: Vec<f32> = sq
        .iter()
        .zip(&mean)
        .map(|(s, &m)| {
            let var = (s / n as f64 - (m as f64).powi(2)).max(0.0);
            if var > 1e-12 {
                (1.0 / var.sqrt()) as f32
            } else {
                1.0
            }
        })
        .collect();
    let mut probe = Probe {
        weights: Matrix::zeros(dim, n_classes),
        bias: vec![0.0; n_classes],
        input_kind: kind,
        mean,
        scale,
    };
    let mut adam = AdamState::new(&[dim * n_classes, n_classes], AdamConfig::default());
    let mut rng = Rng::new(opts.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut gw = Matrix::zeros(dim, n_classes);
    let mut gb = vec![0.0f32; n_classes];
    let mut z = vec![0.0f32; dim];
    for _ in 0..opts.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(opts.batch_size) {
            gw.data_mut().iter_mut().for_each(|v| *v = 0.0);
            gb.iter_mut().for_each(|v| *v = 0.0);
            let inv = 1.0 / batch.len() as f64;
            for &r in batch {
                let x = reps.row(r);
                for i in 0..dim {
                    z[i] = (x[i] - probe.mean[i]) * probe.scale[i];
                }
                let lp = log_softmax(&probe.logits(x));
                for k in 0..n_classes {
                    let d = (lp[k].exp() - if k == labels[r] { 1.0 } else { 0.0 }) * inv;
                    let d = d as f32;
                    gb[k] += d;
                    for (i, &zi) in z.iter().enumerate() {
                        if zi != 0.0 {
                            gw.row_mut(i)[k] += zi * d;
                        }
                    }
                }
            }
            let pen = (2.0 * opts.l2_penalty) as f32;
            for (g, &w) in gw.data_mut().iter_mut().zip(probe.weights.data()) {
                *g += pen * w;
            }
            let mut params: [&mut [f32]; 2] = [probe.weights.data_mut(), &mut probe.bias];
            adam.step(&mut params, &[gw.data(), &gb], opts.lr)?;
        }
    }
    Ok(probe)
}

/// Accuracy and F1 macro-averaged over classes seen in labels or predictions.
pub fn classification_metrics(predicted: &[usize], labels: &[usize]) -> Result<ProbeMetrics> {
    if predicted.len() != labels.len() || labels.is_empty() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    let mut classes: Vec<usize> = predicted.iter().chain(labels).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let f1_sum: f64 = classes
        .iter()
        .map(|&c| {
            let tp = predicted.iter().zip(labels).filter(|&(&p, &l)| p == c && l == c).count() as f64;
            let pred = predicted.iter().filter(|&&p| p == c).count() as f64;
            let actual = labels.iter().filter(|&&l| l == c).count() as f64;
            if tp == 0.0 {
                0.0
            } else {
                let (precision, recall) = (tp / pred, tp / actual);
                2.0 * precision * recall / (precision + recall)
            }
        })
        .sum();
    Ok(ProbeMetrics {
        accuracy: correct as f64 / labels.len() as f64,
        f1: f1_sum / classes.len() as f64,
    })
}

pub fn eval_probe(probe: &Probe, reps: &Matrix, labels: &[usize]) -> Result<ProbeMetrics> {
    if reps.rows() != labels.len() {
        return Err(Error::shape("eval_probe", reps.shape(), (labels.len(), reps.cols())));
    }
    if reps.cols() != probe.weights.rows() {
        return Err(Error::shape("eval_probe", reps.shape(), probe.weights.shape()));
    }
    classification_metrics(&probe.predict(reps), labels)
}

/// Fixed 80/20 split of `0..n` after a seeded shuffle.
pub fn train_test_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut idx);
    let cut = (n * 4).div_ceil(5).min(n.saturating_sub(1)).max(1.min(n));
    let test = idx.split_off(cut);
    (idx, test)
}

/// Trains on the split's training rows and scores the held-out rows.
pub fn probe_split(
    reps: &Matrix,
    labels: &[usize],
    n_classes: usize,
    kind: InputKind,
    opts: &ProbeOptions,
    split_seed: u64,
) -> Result<ProbeMetrics> {
    let (train, test) = train_test_split(labels.len(), split_seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let probe = train_probe(&reps.select_rows(&train), &pick(&train), n_classes, kind, opts)?;
    eval_probe(&probe, &reps.select_rows(&test), &pick(&test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub task: String,
    pub sae_id: String,
    pub train_dataset: String,
    pub kind: InputKind,
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummaryRow {
    pub task: String,
    pub train_dataset: String,
    pub kind: InputKind,
    pub accuracy: f64,
    pub f1: f64,
    pub n_saes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbingReport {
    pub rows: Vec<ProbeRow>,
    /// Per task, SAE training dataset and kind, averaged over seeds.
    pub averaged: Vec<ProbeSummaryRow>,
}

/// Probes every task with every kind of representation for every SAE.
pub fn probing_suite(
    model: &TinyLm,
    saes: &[TopKSae],
    tasks: &[(String, LabeledCorpus)],
    layer: usize,
    opts: &ProbeOptions,
    split_seed: u64,
) -> Result<ProbingReport> {
    if saes.is_empty() || tasks.is_empty() {
        return Err(Error::Input("probing needs at least one SAE and one task".into()));
    }
    let mut rows = Vec::new();
    for (name, task) in tasks {
        let base = pooled_representation(model, None, task, layer, InputKind::Baseline)?;
        let baseline = probe_split(&base, &task.labels, task.n_classes, InputKind::Baseline, opts, split_seed)?;
        for sae in saes {
            for kind in InputKind::ALL {
                let m = if kind == InputKind::Baseline {
                    baseline
                } else {
                    let reps = pooled_representation(model, Some(sae), task, layer, kind)?;
                    probe_split(&reps, &task.labels, task.n_classes, kind, opts, split_seed)?
                };
                rows.push(ProbeRow {
                    task: name.clone(),
                    sae_id: sae.id(),
                    train_dataset: sae.dataset_tag.clone(),
                    kind,
                    accuracy: m.accuracy,
                    f1: m.f1,
                });
            }
        }
    }
    Ok(ProbingReport {
        averaged: average_rows(&rows),
        rows,
    })
}

fn average_rows(rows: &[ProbeRow]) -> Vec<ProbeSummaryRow> {
    let mut groups: BTreeMap<(usize, String, InputKind), (f64, f64, usize)> = BTreeMap::new();
    let mut task_order: Vec<&str> = Vec::new();
    for r in rows {
        if !task_order.contains(&r.task.as_str()) {
            task_order.push(&r.task);
        }
        let t = task_order.iter().position(|&t| t == r.task).unwrap_or(0);
        let e = groups.entry((t, r.train_dataset.clone(), r.kind)).or_default();
        e.0 += r.accuracy;
        e.1 += r.f1;
        e.2 += 1;
    }
    groups
        .into_iter()
        .map(|((t, train_dataset, kind), (acc, f1, n))| ProbeSummaryRow {
            task: task_order[t].to_string(),
            train_dataset,
            kind,
            accuracy: acc / n as f64,
            f1: f1 / n as f64,
            n_saes: n,
        })
        .collect()
}

impl ProbingReport {
    /// Aligned table of averaged accuracies: one row per task and SAE
    /// training dataset, one column per representation kind.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:<12} {:>10} {:>13} {:>15}",
            "task", "sae_data", "baseline", "sae_features", "reconstruction"
        );
        let mut keys: Vec<(&str, &str)> = Vec::new();
        for r in &self.averaged {
            if !keys.contains(&(r.task.as_str(), r.train_dataset.as_str())) {
                keys.push((&r.task, &r.train_dataset));
            }
        }
        for (task, data) in keys {
            let acc = |k: InputKind| {
                self.averaged
                    .iter()
                    .find(|r| r.task == task && r.train_dataset == data && r.kind == k)
                    .map(|r| format!("{:.4}", r.accuracy))
                    .unwrap_or_else(|| "-".into())
            };
            let _ = writeln!(
                out,
                "{:<16} {:<12} {:>10} {:>13} {:>15}",
                task,
                data,
                acc(InputKind::Baseline),
                acc(InputKind::SaeFeatures),
                acc(InputKind::Reconstruction)
            );
        }
        out
    }
}
