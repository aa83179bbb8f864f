use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{next_token_distribution, TinyLm};

use super::Corpus;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total_tokens: usize,
    pub vocab_size: usize,
    pub all_token_coverage: f64,
    pub first_token_coverage: f64,
    /// Forward KL from the model's BOS distribution to the empirical
    /// first-token distribution, in nats.
    pub kl_model_to_dataset: f64,
}

/// `Σ p ln(p/q)` in nats, skipping terms with `p = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Input(format!("distribution lengths {} and {}", p.len(), q.len())));
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::Input("q has zero mass where p is positive".into()));
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// Smoothing pseudo-count added to every vocabulary entry.
pub fn smoothing_alpha(vocab_size: usize) -> f64 {
    1.0 / (10.0 * vocab_size as f64)
}

/// Empirical first-token distribution with additive smoothing on the counts.
pub fn first_token_distribution(corpus: &Corpus) -> Vec<f64> {
    let v = corpus.vocab_size;
    let mut counts = vec![0.0f64; v];
    let mut n = 0.0;
    for s in corpus.sequences.iter().filter(|s| !s.is_empty()) {
        counts[s[0] as usize] += 1.0;
        n += 1.0;
    }
    let alpha = smoothing_alpha(v);
    let denom = n + alpha * v as f64;
    counts.iter().map(|c| (c + alpha) / denom).collect()
}

fn distinct_fraction(tokens: impl Iterator<Item = u32>, vocab: usize) -> f64 {
    let mut seen = vec![false; vocab];
    tokens.for_each(|t| seen[t as usize] = true);
    seen.iter().filter(|&&s| s).count() as f64 / vocab as f64
}

pub fn dataset_stats(corpus: &Corpus, model: &TinyLm) -> Result<DatasetStats> {
    corpus.validate()?;
    if corpus.vocab_size != model.config.vocab_size {
        return Err(Error::Config(format!(
            "corpus vocab {} differs from model vocab {}",
            corpus.vocab_size, model.config.vocab_size
        )));
    }
    let v = corpus.vocab_size;
    let p: Vec<f64> = next_token_distribution(model, &[model.config.bos()?])?
        .into_iter()
        .map(f64::from)
        .collect();
    let q = first_token_distribution(corpus);
    Ok(DatasetStats {
        total_tokens: corpus.total_tokens(),
        vocab_size: v,
        all_token_coverage: distinct_fraction(corpus.sequences.iter().flatten().copied(), v),
        first_token_coverage: distinct_fraction(corpus.sequences.iter().filter_map(|s| s.first().copied()), v),
        kl_model_to_dataset: kl_divergence(&p, &q)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_faithful, generate_random_corpus, FaithfulOptions, SourceTag};
    use crate::lm::LmConfig;

    fn model(vocab: usize) -> TinyLm {
        let cfg = LmConfig {
            vocab_size: vocab,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 8,
            bos_token_id: Some(0),
            eos_token_id: Some(1),
            mlp_ratio: 2,
        };
        let mut m = TinyLm::new(cfg, 2).unwrap();
        // sharpen the BOS distribution so it is far from uniform
        m.unembed.scale(200.0);
        m
    }

    #[test]
    fn hand_kl_example() {
        let kl = kl_divergence(&[0.75, 0.25], &[0.5, 0.5]).unwrap();
        let expect = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kl - expect).abs() < 1e-12);
        assert!((kl - 0.1308).abs() < 1e-4);
    }

    #[test]
    fn coverage_examples() {
        let m = model(4);
        let c = Corpus::new(4, vec![vec![0, 1], vec![2, 1]], SourceTag::External).unwrap();
        let s = dataset_stats(&c, &m).unwrap();
        assert_eq!(s.all_token_coverage, 0.75);
        assert_eq!(s.first_token_coverage, 0.5);
        assert_eq!(s.total_tokens, 4);
        let c = Corpus::new(4, vec![vec![0, 3], vec![0]], SourceTag::External).unwrap();
        assert_eq!(dataset_stats(&c, &m).unwrap().first_token_coverage, 0.25);
    }

    #[test]
    fn smoothing_keeps_uniform_q_and_sums_to_one() {
        let c = Corpus::new(2, vec![vec![0], vec![1]], SourceTag::External).unwrap();
        let q = first_token_distribution(&c);
        assert_eq!(q, vec![0.5, 0.5]);
        let c = Corpus::new(5, vec![vec![3]; 7], SourceTag::External).unwrap();
        let q = first_token_distribution(&c);
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(q.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn vocab_mismatch_is_rejected() {
        let c = Corpus::new(5, vec![vec![1]], SourceTag::External).unwrap();
        assert!(dataset_stats(&c, &model(4)).is_err());
    }

    #[test]
    fn faithful_corpus_beats_random_corpus() {
        let m = model(16);
        let opts = FaithfulOptions {
            n_tokens: 2000,
            max_len: 7,
            temperature: 1.0,
            seed: 4,
        };
        let faithful = generate_faithful(&m, &opts).unwrap();
        let n_seq = faithful.sequences.len();
        let random = generate_random_corpus(16, n_seq * 7, 7, 4).unwrap();
        let kf = dataset_stats(&faithful, &m).unwrap().kl_model_to_dataset;
        let kr = dataset_stats(&random, &m).unwrap().kl_model_to_dataset;
        assert!(kf < kr, "faithful {kf} random {kr}");
    }

    #[test]
    fn coverage_is_monotone_on_nested_prefixes() {
        let c = generate_random_corpus(32, 400, 5, 8).unwrap();
        let m = model(32);
        let mut last = (0.0, 0.0);
        for n in [1, 5, 20, 80] {
            let prefix = Corpus::new(32, c.sequences[..n].to_vec(), SourceTag::Random).unwrap();
            let s = dataset_stats(&prefix, &m).unwrap();
            assert!(s.all_token_coverage >= last.0 && s.first_token_coverage >= last.1);
            last = (s.all_token_coverage, s.first_token_coverage);
        }
    }
}
