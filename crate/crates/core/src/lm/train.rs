use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{AdamConfig, AdamState, Rng};

use super::{LmConfig, TinyLm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmTrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub warmup_steps: usize,
}

fn default_clip() -> f64 {
    1.0
}

impl Default for LmTrainOptions {
    fn default() -> Self {
        Self {
            steps: 400,
            lr: 3e-3,
            batch_size: 16,
            seed: 0,
            grad_clip: 1.0,
            warmup_steps: 20,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LmTrainReport {
    /// Mean per-token cross-entropy of each step's batch.
    pub loss_curve: Vec<f64>,
}

/// Prepends BOS (when configured) and truncates to `limit` tokens.
pub fn with_bos(config: &LmConfig, seq: &[u32], limit: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(seq.len() + 1);
    if let Some(bos) = config.bos_token_id {
        out.push(bos);
    }
    out.extend_from_slice(seq);
    out.truncate(limit);
    out
}

/// Trains a fresh model on `corpus` with Adam and global-norm clipping.
pub fn train_lm(corpus: &[Vec<u32>], config: LmConfig, opts: &LmTrainOptions) -> Result<(TinyLm, LmTrainReport)> {
    config.validate()?;
    let usable: Vec<Vec<u32>> = corpus
        .iter()
        .map(|s| with_bos(&config, s, config.max_seq_len + 1))
        .filter(|s| s.len() >= 2)
        .collect();
    if usable.is_empty() {
        return Err(Error::Input("training corpus has no sequence with a next-token target".into()));
    }
    if let Some(t) = usable.iter().flatten().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::Input(format!("token {t} outside vocab {}", config.vocab_size)));
    }
    if opts.steps == 0 || opts.batch_size == 0 {
        return Err(Error::Param("steps and batch_size must be positive".into()));
    }

    let mut model = TinyLm::new(config.clone(), opts.seed)?;
    let lens: Vec<usize> = model.named_tensors().iter().map(|(_, m)| m.data().len()).collect();
    let mut adam = AdamState::new(&lens, AdamConfig::default());
    let mut rng = Rng::new(opts.seed).derive(1);
    let mut report = LmTrainReport::default();

    for step in 0..opts.steps {
        let batch: Vec<&Vec<u32>> = (0..opts.batch_size).map(|_| &usable[rng.below(usable.len())]).collect();
        let n_targets: usize = batch.iter().map(|s| s.len() - 1).sum();
        let scale = 1.0 / n_targets as f32;
        let mut grads = TinyLm::zeros(config.clone())?;
        let mut loss = 0.0;
        for seq in &batch {
            loss += model.accumulate_gradients(seq, &mut grads, scale)?.0;
        }
        report.loss_curve.push(loss / n_targets as f64);

        let norm: f64 = grads
            .named_tensors()
            .iter()
            .flat_map(|(_, m)| m.data().iter())
            .map(|&g| g as f64 * g as f64)
            .sum::<f64>()
            .sqrt();
        if norm > opts.grad_clip {
            let s = (opts.grad_clip / norm) as f32;
            grads.tensors_mut().into_iter().for_each(|m| m.scale(s));
        }
        let lr = if step < opts.warmup_steps {
            opts.lr * (step + 1) as f64 / opts.warmup_steps as f64
        } else {
            opts.lr
        };
        let grad_refs: Vec<&[f32]> = grads.named_tensors().into_iter().map(|(_, m)| m.data()).collect();
        let mut params: Vec<&mut [f32]> = model.tensors_mut().into_iter().map(|m| m.data_mut()).collect();
        adam.step(&mut params, &grad_refs, lr)?;
        if step % 50 == 0 {
            log::debug!("lm step {step}: loss {:.4}", report.loss_curve[step]);
        }
    }
    Ok((model, report))
}

/// Mean next-token cross-entropy (nats) with BOS prepended to each sequence.
pub fn mean_cross_entropy(model: &TinyLm, corpus: &[Vec<u32>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for seq in corpus {
        let toks = with_bos(&model.config, seq, model.config.max_seq_len + 1);
        let (l, n) = model.sequence_loss(&toks)?;
        total += l;
        count += n;
    }
    if count == 0 {
        return Err(Error::Input("no next-token targets in corpus".into()));
    }
    Ok(total / count as f64)
}
