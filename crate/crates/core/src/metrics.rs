//! Faithfulness metrics: cross-entropy change under activation patching,
//! reconstruction error, explained variance and the fake feature ratio.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{capture, generate_random_corpus, model_input, ActivationStore, Corpus};
use crate::error::{Error, Result};
use crate::lm::{cross_entropy_sum, TinyLm};
use crate::math::Matrix;
use crate::sae::TopKSae;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    /// Mean increase in next-token cross-entropy, nats per token.
    pub ce_difference: f64,
    pub l2_error: f64,
    pub explained_variance: f64,
    pub eval_dataset_tag: String,
    pub train_dataset_tag: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfrReport {
    /// Fraction of OOD tokens on which each feature is nonzero.
    pub activation_frequency: Vec<f64>,
    pub ffr: f64,
    pub tau_f: f64,
    pub n_ood_tokens: usize,
}

/// Mean CE change when the non-BOS states after block `layer` are replaced by
/// `patch(states)`. BOS keeps its clean state.
pub fn ce_difference_with<F>(model: &TinyLm, corpus: &Corpus, layer: usize, patch: F) -> Result<f64>
where
    F: Fn(&Matrix) -> Result<Matrix> + Sync,
{
    Ok(ce_differences_with(model, corpus, layer, 1, |_, x| patch(x))?[0])
}

/// [`ce_difference_with`] for `n_patches` patches sharing one clean pass;
/// `patch(p, states)` applies patch `p`.
pub fn ce_differences_with<F>(model: &TinyLm, corpus: &Corpus, layer: usize, n_patches: usize, patch: F) -> Result<Vec<f64>>
where
    F: Fn(usize, &Matrix) -> Result<Matrix> + Sync,
{
    model.check_layer(layer)?;
    let per_seq: Vec<(f64, Vec<f64>, usize)> = corpus
        .sequences
        .par_iter()
        .filter(|s| !s.is_empty())
        .map(|seq| {
            let tokens = model_input(model, seq)?;
            let clean_states = model.hidden_states(&tokens, layer)?;
            let clean = model.logits_from_layer(layer, clean_states.clone())?;
            let (ce_clean, n) = cross_entropy_sum(&clean, &tokens[1..]);
            let body: Vec<usize> = (1..tokens.len()).collect();
            let body_states = clean_states.select_rows(&body);
            let mut patched_ce = Vec::with_capacity(n_patches);
            for p in 0..n_patches {
                let replaced = patch(p, &body_states)?;
                if replaced.shape() != body_states.shape() {
                    return Err(Error::shape("patch", body_states.shape(), replaced.shape()));
                }
                let mut patched_states = clean_states.clone();
                for (r, row) in replaced.iter_rows().enumerate() {
                    patched_states.row_mut(r + 1).copy_from_slice(row);
                }
                let patched = model.logits_from_layer(layer, patched_states)?;
                patched_ce.push(cross_entropy_sum(&patched, &tokens[1..]).0);
            }
            Ok((ce_clean, patched_ce, n))
        })
        .collect::<Result<_>>()?;
    let mut clean = 0.0;
    let mut patched = vec![0.0; n_patches];
    let mut n = 0;
    for (c, p, k) in per_seq {
        clean += c;
        patched.iter_mut().zip(p).for_each(|(acc, v)| *acc += v);
        n += k;
    }
    if n == 0 {
        return Err(Error::Input("corpus has no next-token targets".into()));
    }
    Ok(patched.into_iter().map(|p| (p - clean) / n as f64).collect())
}

fn check_model_width(model: &TinyLm, sae: &TopKSae) -> Result<()> {
    if sae.a() != model.config.d_model {
        return Err(Error::Config(format!(
            "SAE input size {} differs from model width {}",
            sae.a(),
            model.config.d_model
        )));
    }
    Ok(())
}

/// CE change when layer states are replaced by the SAE reconstruction.
pub fn ce_difference(model: &TinyLm, sae: &TopKSae, corpus: &Corpus, layer: usize) -> Result<f64> {
    check_model_width(model, sae)?;
    ce_difference_with(model, corpus, layer, |x| sae.reconstruct(x))
}

/// [`ce_difference`] for several SAEs at once.
pub fn ce_differences(model: &TinyLm, saes: &[&TopKSae], corpus: &Corpus, layer: usize) -> Result<Vec<f64>> {
    for sae in saes {
        check_model_width(model, sae)?;
    }
    ce_differences_with(model, corpus, layer, saes.len(), |p, x| saes[p].reconstruct(x))
}

fn check_width(sae: &TopKSae, acts: &Matrix) -> Result<()> {
    if acts.cols() != sae.a() {
        return Err(Error::shape("sae evaluation", acts.shape(), (acts.rows(), sae.a())));
    }
    Ok(())
}

/// Mean over rows of `‖x − x̂‖₂`.
pub fn l2_error_of(x: &Matrix, xh: &Matrix) -> Result<f64> {
    if x.shape() != xh.shape() {
        return Err(Error::shape("l2 error", x.shape(), xh.shape()));
    }
    if x.rows() == 0 {
        return Err(Error::Input("no rows to evaluate".into()));
    }
    let total: f64 = x
        .iter_rows()
        .zip(xh.iter_rows())
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / x.rows() as f64)
}

/// `1 − Σ‖x − x̂‖² / Σ‖x − x̄‖²` with `x̄` the per-dimension batch mean.
pub fn explained_variance_of(x: &Matrix, xh: &Matrix) -> Result<f64> {
    if x.shape() != xh.shape() {
        return Err(Error::shape("explained variance", x.shape(), xh.shape()));
    }
    if x.rows() < 2 {
        return Err(Error::Input("explained variance needs at least two rows".into()));
    }
    let n = x.rows() as f64;
    let mut mean = vec![0.0f64; x.cols()];
    for row in x.iter_rows() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let (mut resid, mut total) = (0.0f64, 0.0f64);
    for (a, b) in x.iter_rows().zip(xh.iter_rows()) {
        for ((&p, &q), &m) in a.iter().zip(b).zip(&mean) {
            resid += (p as f64 - q as f64).powi(2);
            total += (p as f64 - m).powi(2);
        }
    }
    if total == 0.0 {
        return Err(Error::UndefinedVariance("activations have zero variance".into()));
    }
    Ok(1.0 - resid / total)
}

pub fn l2_error(sae: &TopKSae, acts: &ActivationStore) -> Result<f64> {
    check_width(sae, &acts.acts)?;
    l2_error_of(&acts.acts, &sae.reconstruct(&acts.acts)?)
}

pub fn explained_variance(sae: &TopKSae, acts: &ActivationStore) -> Result<f64> {
    check_width(sae, &acts.acts)?;
    explained_variance_of(&acts.acts, &sae.reconstruct(&acts.acts)?)
}

/// All three faithfulness metrics of `sae` on `corpus`.
pub fn evaluate_faithfulness(
    model: &TinyLm,
    sae: &TopKSae,
    corpus: &Corpus,
    layer: usize,
    max_rows: Option<usize>,
) -> Result<FaithfulnessReport> {
    let acts = capture(model, corpus, layer, max_rows)?;
    let subset = if max_rows.is_some() {
        truncate_corpus(corpus, acts.len(), model.config.max_seq_len - 1)
    } else {
        corpus.clone()
    };
    Ok(FaithfulnessReport {
        ce_difference: ce_difference(model, sae, &subset, layer)?,
        l2_error: l2_error(sae, &acts)?,
        explained_variance: explained_variance(sae, &acts)?,
        eval_dataset_tag: corpus.source_tag.as_str().to_string(),
        train_dataset_tag: sae.dataset_tag.clone(),
    })
}

/// [`evaluate_faithfulness`] for several SAEs sharing one capture, with the
/// evaluation set named `eval_tag`.
pub fn evaluate_faithfulness_many(
    model: &TinyLm,
    saes: &[&TopKSae],
    corpus: &Corpus,
    eval_tag: &str,
    layer: usize,
    max_rows: Option<usize>,
) -> Result<Vec<FaithfulnessReport>> {
    let acts = capture(model, corpus, layer, max_rows)?;
    let subset = if max_rows.is_some() {
        truncate_corpus(corpus, acts.len(), model.config.max_seq_len - 1)
    } else {
        corpus.clone()
    };
    let ce = ce_differences(model, saes, &subset, layer)?;
    saes.iter()
        .zip(ce)
        .map(|(sae, ce_difference)| {
            Ok(FaithfulnessReport {
                ce_difference,
                l2_error: l2_error(sae, &acts)?,
                explained_variance: explained_variance(sae, &acts)?,
                eval_dataset_tag: eval_tag.to_string(),
                train_dataset_tag: sae.dataset_tag.clone(),
            })
        })
        .collect()
}

/// Leading sequences of `corpus` covering exactly the first `rows` captured rows.
pub(crate) fn truncate_corpus(corpus: &Corpus, rows: usize, per_seq: usize) -> Corpus {
    let mut out = corpus.clone();
    out.sequences.clear();
    let mut left = rows;
    for s in &corpus.sequences {
        if left == 0 {
            break;
        }
        let n = s.len().min(per_seq).min(left);
        if n > 0 {
            out.sequences.push(s[..n].to_vec());
            left -= n;
        }
    }
    out
}

/// Fraction of rows on which each feature is nonzero after TopK.
pub fn activation_frequency(sae: &TopKSae, acts: &Matrix) -> Result<Vec<f64>> {
    check_width(sae, acts)?;
    if acts.rows() == 0 {
        return Err(Error::Input("no rows to measure activation frequency on".into()));
    }
    let chunk = 4096;
    let partial: Vec<Vec<u64>> = (0..acts.rows().div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let rows: Vec<usize> = (c * chunk..((c + 1) * chunk).min(acts.rows())).collect();
            let codes = sae.encode_sparse(&acts.select_rows(&rows))?;
            let mut counts = vec![0u64; sae.d()];
            for (&j, &v) in codes.idx.iter().zip(&codes.val) {
                if v != 0.0 {
                    counts[j as usize] += 1;
                }
            }
            Ok(counts)
        })
        .collect::<Result<_>>()?;
    let mut counts = vec![0u64; sae.d()];
    for p in partial {
        counts.iter_mut().zip(p).for_each(|(c, x)| *c += x);
    }
    Ok(counts.iter().map(|&c| c as f64 / acts.rows() as f64).collect())
}

/// `|{i : freq_i > tau_f}| / D`
pub fn ffr_from_frequencies(freqs: &[f64], tau_f: f64) -> f64 {
    freqs.iter().filter(|&&f| f > tau_f).count() as f64 / freqs.len().max(1) as f64
}

fn check_tau_f(tau_f: f64) -> Result<()> {
    if !(tau_f > 0.0 && tau_f < 1.0) {
        return Err(Error::Param(format!("tau_f {tau_f} outside (0, 1)")));
    }
    Ok(())
}

/// Fake feature ratio on already captured OOD activations.
pub fn fake_feature_ratio_on(sae: &TopKSae, ood: &ActivationStore, tau_f: f64) -> Result<FfrReport> {
    check_tau_f(tau_f)?;
    let freqs = activation_frequency(sae, &ood.acts)?;
    Ok(FfrReport {
        ffr: ffr_from_frequencies(&freqs, tau_f),
        activation_frequency: freqs,
        tau_f,
        n_ood_tokens: ood.len(),
    })
}

/// Random OOD activations at the SAE's layer for FFR measurement.
pub fn ood_activations(model: &TinyLm, layer: usize, n_ood_tokens: usize, seq_len: usize, seed: u64) -> Result<ActivationStore> {
    let seq_len = seq_len.min(model.config.max_seq_len - 1);
    let corpus = generate_random_corpus(model.config.vocab_size, n_ood_tokens, seq_len, seed)?;
    capture(model, &corpus, layer, None)
}

/// Builds a random-token corpus, captures the SAE's layer and thresholds the
/// per-feature activation frequency at `tau_f`.
pub fn fake_feature_ratio(
    sae: &TopKSae,
    model: &TinyLm,
    n_ood_tokens: usize,
    seq_len: usize,
    tau_f: f64,
    seed: u64,
) -> Result<FfrReport> {
    check_tau_f(tau_f)?;
    let ood = ood_activations(model, sae.layer, n_ood_tokens, seq_len, seed)?;
    fake_feature_ratio_on(sae, &ood, tau_f)
}

/// Mean FFR over several SAEs.
pub fn mean_ffr(reports: &[FfrReport]) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::Input("no FFR reports to average".into()));
    }
    Ok(reports.iter().map(|r| r.ffr).sum::<f64>() / reports.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SourceTag;
    use crate::lm::{train_lm, LmConfig, LmTrainOptions};
    use crate::math::Rng;
    use crate::sae::{train_sae, SaeConfig, TrainConfig};

    fn tiny_model() -> TinyLm {
        let cfg = LmConfig {
            vocab_size: 8,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 12,
            bos_token_id: Some(0),
            eos_token_id: None,
            mlp_ratio: 2,
        };
        let corpus: Vec<Vec<u32>> = (0..40).map(|i| (0..10).map(|t| 1 + ((t + i) % 7) as u32).collect()).collect();
        let opts = LmTrainOptions {
            steps: 120,
            lr: 1e-2,
            batch_size: 8,
            seed: 3,
            ..LmTrainOptions::default()
        };
        train_lm(&corpus, cfg, &opts).unwrap().0
    }

    fn corpus() -> Corpus {
        let seqs = (0..12).map(|i| (0..9).map(|t| 1 + ((t + i) % 7) as u32).collect()).collect();
        Corpus::new(8, seqs, SourceTag::External).unwrap()
    }

    fn store(acts: Matrix) -> ActivationStore {
        ActivationStore {
            acts,
            layer: 0,
            model_id: String::new(),
            dataset_tag: "t".into(),
        }
    }

    #[test]
    fn identity_patch_is_exactly_zero() {
        let m = tiny_model();
        for layer in 0..2 {
            let d = ce_difference_with(&m, &corpus(), layer, |x| Ok(x.clone())).unwrap();
            assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn zero_sae_hurts_a_trained_model() {
        let m = tiny_model();
        let sae = TopKSae::zeros(SaeConfig { a: 8, d: 16, k: 2 }).unwrap();
        let d = ce_difference(&m, &sae, &corpus(), 0).unwrap();
        assert!(d > 0.0, "ce difference {d}");
        assert!(matches!(ce_difference(&m, &sae, &corpus(), 2), Err(Error::Config(_))));
    }

    #[test]
    fn shared_pass_matches_single_evaluations() {
        let m = tiny_model();
        let a = TopKSae::new(SaeConfig { a: 8, d: 16, k: 2 }, 1).unwrap();
        let b = TopKSae::zeros(SaeConfig { a: 8, d: 16, k: 2 }).unwrap();
        let many = ce_differences(&m, &[&a, &b], &corpus(), 1).unwrap();
        assert_eq!(many[0], ce_difference(&m, &a, &corpus(), 1).unwrap());
        assert_eq!(many[1], ce_difference(&m, &b, &corpus(), 1).unwrap());
        let reports = evaluate_faithfulness_many(&m, &[&a, &b], &corpus(), "ext", 1, Some(50)).unwrap();
        let single = evaluate_faithfulness(&m, &a, &corpus(), 1, Some(50)).unwrap();
        assert_eq!(reports[0].ce_difference, single.ce_difference);
        assert_eq!(reports[0].explained_variance, single.explained_variance);
        assert_eq!(reports[1].eval_dataset_tag, "ext");
    }

    #[test]
    fn near_perfect_sae_barely_changes_ce() {
        let m = tiny_model();
        let acts = capture(&m, &corpus(), 0, None).unwrap();
        // the corpus has 7 distinct token patterns, so a wide SAE fits it well
        let cfg = TrainConfig {
            lr: 3e-3,
            steps: 3000,
            batch_size: 32,
            seed: 1,
            dead_feature_window: 100,
        };
        let (sae, _) = train_sae(&acts, SaeConfig { a: 8, d: 32, k: 8 }, &cfg).unwrap();
        let ev = explained_variance(&sae, &acts).unwrap();
        assert!(ev > 0.999, "ev {ev}");
        let d = ce_difference(&m, &sae, &corpus(), 0).unwrap();
        assert!(d.abs() < 0.01, "ce difference {d}");
    }

    #[test]
    fn l2_and_ev_special_cases() {
        let x = Matrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0], [0.6, 0.8]]).unwrap();
        assert_eq!(l2_error_of(&x, &x).unwrap(), 0.0);
        assert!((l2_error_of(&x, &Matrix::zeros(3, 2)).unwrap() - 1.0).abs() < 1e-7);
        assert_eq!(explained_variance_of(&x, &x).unwrap(), 1.0);
        let mean = Matrix::from_rows(&[[1.6f32 / 3.0, 1.8 / 3.0]; 3]).unwrap();
        assert!(explained_variance_of(&x, &mean).unwrap().abs() < 1e-6);
        let bad = Matrix::from_rows(&[[-5.0f32, 5.0]; 3]).unwrap();
        assert!(explained_variance_of(&x, &bad).unwrap() < 0.0);
        let flat = Matrix::from_rows(&[[1.0f32, 2.0]; 4]).unwrap();
        assert!(matches!(explained_variance_of(&flat, &flat), Err(Error::UndefinedVariance(_))));
        assert!(explained_variance_of(&Matrix::zeros(1, 2), &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn l2_matches_recomposition() {
        let mut rng = Rng::new(2);
        let sae = TopKSae::new(SaeConfig { a: 6, d: 12, k: 3 }, 4).unwrap();
        let x = Matrix::from_vec(9, 6, (0..54).map(|_| rng.normal_f32()).collect()).unwrap();
        let xh = sae.decode(&sae.encode(&x).unwrap()).unwrap();
        let mut s = 0.0;
        for r in 0..9 {
            s += (0..6).map(|c| (x.get(r, c) as f64 - xh.get(r, c) as f64).powi(2)).sum::<f64>().sqrt();
        }
        assert!((l2_error(&sae, &store(x.clone())).unwrap() - s / 9.0).abs() < 1e-12);
        assert!(explained_variance(&sae, &store(x)).unwrap() <= 1.0);
    }

    #[test]
    fn ffr_counting() {
        assert_eq!(ffr_from_frequencies(&[0.5, 0.05, 0.2, 0.0], 0.1), 0.5);
        let freqs = [0.5, 0.05, 0.2, 0.0, 0.1];
        let mut last = 1.0;
        for tau in [0.01, 0.05, 0.1, 0.2, 0.5, 0.9] {
            let f = ffr_from_frequencies(&freqs, tau);
            assert!(f <= last);
            last = f;
        }
    }

    #[test]
    fn always_on_feature_is_fake() {
        let m = tiny_model();
        let mut sae = TopKSae::new(SaeConfig { a: 8, d: 16, k: 1 }, 3).unwrap();
        sae.b_enc[0] = 1e6;
        let r = fake_feature_ratio(&sae, &m, 2000, 8, 0.1, 5).unwrap();
        assert_eq!(r.activation_frequency[0], 1.0);
        assert_eq!(r.ffr, 1.0 / 16.0);
        assert_eq!(r.n_ood_tokens, 2000);
        assert!(r.activation_frequency.iter().all(|&f| (0.0..=1.0).contains(&f)));
        assert!(fake_feature_ratio(&sae, &m, 10, 8, 1.0, 5).is_err());
    }

    #[test]
    fn mean_ffr_is_arithmetic_mean() {
        let m = tiny_model();
        let a = TopKSae::new(SaeConfig { a: 8, d: 16, k: 2 }, 42).unwrap();
        let b = TopKSae::new(SaeConfig { a: 8, d: 16, k: 2 }, 49).unwrap();
        let ra = fake_feature_ratio(&a, &m, 3000, 8, 0.1, 1).unwrap();
        let rb = fake_feature_ratio(&b, &m, 3000, 8, 0.1, 1).unwrap();
        let mean = mean_ffr(&[ra.clone(), rb.clone()]).unwrap();
        assert!((mean - (ra.ffr + rb.ffr) / 2.0).abs() < 1e-9);
    }
}
