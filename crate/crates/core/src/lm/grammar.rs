//! Synthetic formal language used to pretrain the tiny model.
//!
//! Each sequence picks a topic, walks a topic-specific sparse bigram chain
//! over content tokens and interleaves nested bracket pairs. Token ids
//! `0..4` are reserved: BOS, EOS, open bracket, close bracket.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Rng;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const OPEN: u32 = 2;
pub const CLOSE: u32 = 3;
const FIRST_CONTENT: u32 = 4;
const MAX_DEPTH: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrammarConfig {
    pub vocab_size: usize,
    pub n_topics: usize,
    /// Successor candidates per token and topic.
    pub successors: usize,
    pub min_len: usize,
    /// Most content tokens per sequence; brackets and EOS add at most 4 more.
    pub max_len: usize,
    pub bracket_prob: f64,
    /// Seed of the transition tables, not of the sampled text.
    pub structure_seed: u64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            n_topics: 4,
            successors: 3,
            min_len: 8,
            max_len: 24,
            bracket_prob: 0.08,
            structure_seed: 1234,
        }
    }
}

impl GrammarConfig {
    /// Longest sequence the grammar can emit.
    pub fn max_sequence_len(&self) -> usize {
        self.max_len + MAX_DEPTH + 1
    }
}

#[derive(Clone, Debug)]
struct Topic {
    weight: f64,
    starts: Vec<u32>,
    /// Indexed by `token - FIRST_CONTENT`.
    next: Vec<Vec<u32>>,
}

#[derive(Clone, Debug)]
pub struct Grammar {
    config: GrammarConfig,
    topics: Vec<Topic>,
    succ_weights: Vec<f32>,
}

impl Grammar {
    pub fn new(config: GrammarConfig) -> Result<Self> {
        let n_content = config.vocab_size.saturating_sub(FIRST_CONTENT as usize);
        if n_content < 2 || config.n_topics == 0 || config.successors == 0 {
            return Err(Error::Config(format!("grammar needs ≥ 2 content tokens and ≥ 1 topic: {config:?}")));
        }
        if config.min_len == 0 || config.min_len > config.max_len {
            return Err(Error::Config("grammar lengths must satisfy 1 ≤ min_len ≤ max_len".into()));
        }
        let mut rng = Rng::new(config.structure_seed);
        let subset_len = (n_content / 2).max(2).min(n_content);
        let mut topics = Vec::with_capacity(config.n_topics);
        let total: f64 = (0..config.n_topics).map(|t| 0.6f64.powi(t as i32)).sum();
        for t in 0..config.n_topics {
            let mut pool: Vec<u32> = (FIRST_CONTENT..config.vocab_size as u32).collect();
            rng.shuffle(&mut pool);
            pool.truncate(subset_len);
            let starts = pool[..pool.len().min(4)].to_vec();
            let next = (0..n_content)
                .map(|_| (0..config.successors).map(|_| pool[rng.below(pool.len())]).collect())
                .collect();
            topics.push(Topic {
                weight: 0.6f64.powi(t as i32) / total,
                starts,
                next,
            });
        }
        let succ_weights = (0..config.successors).map(|i| 0.5f32.powi(i as i32)).collect();
        Ok(Self {
            config,
            topics,
            succ_weights,
        })
    }

    pub fn config(&self) -> &GrammarConfig {
        &self.config
    }

    /// One sequence without BOS, ending in EOS.
    pub fn sample_sequence(&self, rng: &mut Rng) -> Vec<u32> {
        let weights: Vec<f32> = self.topics.iter().map(|t| t.weight as f32).collect();
        let topic = &self.topics[rng.categorical(&weights)];
        let target = self.config.min_len + rng.below(self.config.max_len - self.config.min_len + 1);
        let mut out = Vec::with_capacity(target + MAX_DEPTH + 1);
        let mut last = topic.starts[rng.below(topic.starts.len())];
        out.push(last);
        let mut content = 1;
        let mut depth = 0;
        let cap = self.config.max_sequence_len();
        // leave room for one more token, its closing bracket and EOS
        while content < target && out.len() + depth + 3 <= cap {
            let u = rng.unit_f64();
            if depth < MAX_DEPTH && u < self.config.bracket_prob {
                out.push(OPEN);
                depth += 1;
            } else if depth > 0 && u < self.config.bracket_prob + 0.2 {
                out.push(CLOSE);
                depth -= 1;
            } else {
                let cands = &topic.next[(last - FIRST_CONTENT) as usize];
                last = cands[rng.categorical(&self.succ_weights)];
                out.push(last);
                content += 1;
            }
        }
        out.extend(std::iter::repeat_n(CLOSE, depth));
        out.push(EOS);
        out
    }

    /// Whole sequences until at least `n_tokens` tokens are produced.
    pub fn corpus(&self, n_tokens: usize, rng: &mut Rng) -> Vec<Vec<u32>> {
        let mut out = Vec::new();
        let mut total = 0;
        while total < n_tokens {
            let s = self.sample_sequence(rng);
            total += s.len();
            out.push(s);
        }
        out
    }
}
