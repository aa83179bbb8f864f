use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lm::{sample, SampleOptions, TinyLm};
use crate::math::Rng;

use super::{Corpus, SourceTag};

/// Sequences are sampled in parallel chunks of this size; order stays fixed.
const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaithfulOptions {
    pub n_tokens: usize,
    /// Most tokens per sequence, BOS excluded. Also bounded by the context window.
    pub max_len: usize,
    pub temperature: f32,
    pub seed: u64,
}

/// Samples whole sequences from a `[BOS]` prompt until `n_tokens` tokens are
/// collected. The final sequence is cut so the total is exactly `n_tokens`.
///
/// Sequence `i` draws from its own stream derived from `(seed, i)`, so output
/// does not depend on the thread count.
pub fn generate_faithful(model: &TinyLm, opts: &FaithfulOptions) -> Result<Corpus> {
    let bos = model.config.bos()?;
    if opts.n_tokens == 0 || opts.max_len == 0 {
        return Err(Error::Param("n_tokens and max_len must be positive".into()));
    }
    if !(opts.temperature > 0.0) {
        return Err(Error::Param(format!("temperature must be positive, got {}", opts.temperature)));
    }
    let sample_opts = SampleOptions {
        max_new: opts.max_len,
        temperature: opts.temperature,
        greedy: false,
        stop_at_eos: true,
    };
    let root = Rng::new(opts.seed);
    let mut sequences: Vec<Vec<u32>> = Vec::new();
    let mut total = 0;
    let mut next_index = 0u64;
    while total < opts.n_tokens {
        let chunk: Vec<Vec<u32>> = (next_index..next_index + CHUNK as u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = root.derive(i);
                sample(model, &[bos], &sample_opts, &mut rng).map(|mut s| {
                    s.remove(0);
                    s
                })
            })
            .collect::<Result<_>>()?;
        next_index += CHUNK as u64;
        for mut seq in chunk {
            if total >= opts.n_tokens {
                break;
            }
            if seq.is_empty() {
                continue;
            }
            seq.truncate(opts.n_tokens - total);
            total += seq.len();
            sequences.push(seq);
        }
    }
    let mut corpus = Corpus::new(model.config.vocab_size, sequences, SourceTag::Faithful)?;
    corpus.generator_model_id = Some(model.fingerprint());
    Ok(corpus)
}

/// I.i.d. uniform token ids in sequences of `seq_len`; the last one is cut to
/// make the total exactly `n_tokens`.
pub fn generate_random_corpus(vocab_size: usize, n_tokens: usize, seq_len: usize, seed: u64) -> Result<Corpus> {
    if vocab_size == 0 || n_tokens == 0 || seq_len == 0 {
        return Err(Error::Param("vocab_size, n_tokens and seq_len must be positive".into()));
    }
    let mut rng = Rng::new(seed);
    let sequences = (0..n_tokens.div_ceil(seq_len))
        .map(|i| {
            let len = seq_len.min(n_tokens - i * seq_len);
            (0..len).map(|_| rng.below(vocab_size) as u32).collect()
        })
        .collect();
    Corpus::new(vocab_size, sequences, SourceTag::Random)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;

    fn small_model(vocab: usize) -> TinyLm {
        let cfg = LmConfig {
            vocab_size: vocab,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 10,
            bos_token_id: Some(0),
            eos_token_id: Some(1),
            mlp_ratio: 2,
        };
        TinyLm::new(cfg, 7).unwrap()
    }

    fn opts(n_tokens: usize, seed: u64) -> FaithfulOptions {
        FaithfulOptions {
            n_tokens,
            max_len: 16,
            temperature: 1.0,
            seed,
        }
    }

    #[test]
    fn single_token_budget() {
        let c = generate_faithful(&small_model(6), &opts(1, 0)).unwrap();
        assert_eq!(c.sequences.len(), 1);
        assert_eq!(c.sequences[0].len(), 1);
        assert_eq!(c.source_tag, SourceTag::Faithful);
    }

    #[test]
    fn exact_budget_and_bounded_lengths() {
        let m = small_model(6);
        let c = generate_faithful(&m, &opts(500, 3)).unwrap();
        assert_eq!(c.total_tokens(), 500);
        assert!(c.sequences.iter().all(|s| !s.is_empty() && s.len() < m.config.max_seq_len));
        assert_eq!(c.generator_model_id.as_deref(), Some(m.fingerprint().as_str()));
    }

    #[test]
    fn generation_is_deterministic() {
        let m = small_model(6);
        let a = generate_faithful(&m, &opts(300, 9)).unwrap();
        let b = generate_faithful(&m, &opts(300, 9)).unwrap();
        let c = generate_faithful(&m, &opts(300, 10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn missing_bos_is_a_config_error() {
        let mut m = small_model(6);
        m.config.bos_token_id = None;
        assert!(matches!(generate_faithful(&m, &opts(5, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_first_token_splits_evenly() {
        // all-zero parameters give uniform logits over {0, 1}
        let cfg = LmConfig {
            vocab_size: 2,
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            max_seq_len: 4,
            bos_token_id: Some(0),
            eos_token_id: None,
            mlp_ratio: 1,
        };
        let m = TinyLm::zeros(cfg).unwrap();
        let n = 100_000;
        let c = generate_faithful(
            &m,
            &FaithfulOptions {
                n_tokens: n,
                max_len: 1,
                temperature: 1.0,
                seed: 5,
            },
        )
        .unwrap();
        assert_eq!(c.sequences.len(), n);
        let ones = c.sequences.iter().filter(|s| s[0] == 1).count() as f64 / n as f64;
        assert!((ones - 0.5).abs() < 0.01, "fraction of ones {ones}");
    }

    #[test]
    fn random_corpus_is_uniform_and_reproducible() {
        let a = generate_random_corpus(64, 1_000_000, 64, 1).unwrap();
        assert_eq!(a.total_tokens(), 1_000_000);
        assert_eq!(a, generate_random_corpus(64, 1_000_000, 64, 1).unwrap());
        let mut counts = [0usize; 64];
        a.sequences.iter().flatten().for_each(|&t| counts[t as usize] += 1);
        let expect = 1_000_000.0 / 64.0;
        for c in counts {
            assert!((c as f64 / expect - 1.0).abs() < 0.02, "count {c}");
        }
        let faithful = generate_faithful(&small_model(64), &opts(1000, 1)).unwrap();
        assert_ne!(a.sequences[0][..10], faithful.sequences.concat()[..10]);
    }

    #[test]
    fn random_corpus_tail_is_cut() {
        let c = generate_random_corpus(5, 10, 4, 0).unwrap();
        let lens: Vec<usize> = c.sequences.iter().map(Vec::len).collect();
        assert_eq!(lens, vec![4, 4, 2]);
    }
}
