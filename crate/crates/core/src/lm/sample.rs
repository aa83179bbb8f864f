//! Autoregressive sampling with a per-layer key/value cache.

use crate::error::{Error, Result};
use crate::math::{argmax, softmax, vecmat_into, Matrix, Rng};

use super::model::{attend_row, gelu};
use super::TinyLm;

/// Incremental decoder state: keys and values of every position seen so far.
pub struct DecodeState<'m> {
    model: &'m TinyLm,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl<'m> DecodeState<'m> {
    pub fn new(model: &'m TinyLm) -> Self {
        let n = model.config.n_layers;
        Self {
            model,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds one token and returns the logits for the next position.
    pub fn push(&mut self, token: u32) -> Result<Vec<f32>> {
        let m = self.model;
        let cfg = &m.config;
        if self.len >= cfg.max_seq_len {
            return Err(Error::Input(format!("context full at {} tokens", cfg.max_seq_len)));
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::Input(format!("token id {token} out of range for vocab {}", cfg.vocab_size)));
        }
        let (d, hd) = (cfg.d_model, cfg.head_dim());
        let mut acc = vec![0.0f64; cfg.mlp_width().max(d).max(cfg.vocab_size)];
        let mut x: Vec<f32> = m
            .tok_emb
            .row(token as usize)
            .iter()
            .zip(m.pos_emb.row(self.len))
            .map(|(a, b)| a + b)
            .collect();
        let mut hat = vec![0.0; d];
        let mut h = vec![0.0; d];
        for (l, b) in m.blocks.iter().enumerate() {
            b.ln1.apply_row(&x, &mut hat, &mut h);
            let mut q = vec![0.0; d];
            let mut k = vec![0.0; d];
            let mut v = vec![0.0; d];
            vecmat_into(&h, &b.w_q, &mut acc[..d], &mut q);
            vecmat_into(&h, &b.w_k, &mut acc[..d], &mut k);
            vecmat_into(&h, &b.w_v, &mut acc[..d], &mut v);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let mut cat = vec![0.0; d];
            for head in 0..cfg.n_heads {
                let off = head * hd;
                attend_row(
                    &q[off..off + hd],
                    &self.keys[l],
                    &self.values[l],
                    d,
                    off,
                    hd,
                    self.len + 1,
                    &mut cat[off..off + hd],
                );
            }
            let mut attn = vec![0.0; d];
            vecmat_into(&cat, &b.w_o, &mut acc[..d], &mut attn);
            x.iter_mut().zip(&attn).for_each(|(a, b)| *a += b);

            b.ln2.apply_row(&x, &mut hat, &mut h);
            let width = cfg.mlp_width();
            let mut pre = vec![0.0; width];
            vecmat_into(&h, &b.w_in, &mut acc[..width], &mut pre);
            let act: Vec<f32> = pre.iter().zip(b.b_in.data()).map(|(p, bias)| gelu(p + bias)).collect();
            let mut mlp = vec![0.0; d];
            vecmat_into(&act, &b.w_out, &mut acc[..d], &mut mlp);
            x.iter_mut()
                .zip(mlp.iter().zip(b.b_out.data()))
                .for_each(|(a, (m, bias))| *a += m + bias);
        }
        m.ln_f.apply_row(&x, &mut hat, &mut h);
        let mut logits = vec![0.0; cfg.vocab_size];
        vecmat_into(&h, &m.unembed, &mut acc[..cfg.vocab_size], &mut logits);
        self.len += 1;
        Ok(logits)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleOptions {
    pub max_new: usize,
    pub temperature: f32,
    /// Argmax decoding; the zero-temperature limit.
    pub greedy: bool,
    /// Stop after emitting the model's EOS token, when it has one.
    pub stop_at_eos: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            max_new: 32,
            temperature: 1.0,
            greedy: false,
            stop_at_eos: true,
        }
    }
}

/// Extends `prompt` by up to `max_new` sampled tokens and returns the whole sequence.
///
/// The returned sequence never exceeds the context window.
pub fn sample(model: &TinyLm, prompt: &[u32], opts: &SampleOptions, rng: &mut Rng) -> Result<Vec<u32>> {
    if !(opts.temperature > 0.0) {
        return Err(Error::Param(format!("temperature must be positive, got {}", opts.temperature)));
    }
    if prompt.is_empty() || prompt.len() > model.config.max_seq_len {
        return Err(Error::Input(format!(
            "prompt length {} outside 1..={}",
            prompt.len(),
            model.config.max_seq_len
        )));
    }
    let mut state = DecodeState::new(model);
    let mut logits = Vec::new();
    for &t in prompt {
        logits = state.push(t)?;
    }
    let mut out = prompt.to_vec();
    let limit = model.config.max_seq_len;
    for i in 0..opts.max_new {
        if out.len() == limit {
            break;
        }
        let next = if opts.greedy {
            argmax(&logits) as u32
        } else {
            rng.categorical(&softmax(&logits, opts.temperature)?) as u32
        };
        out.push(next);
        if opts.stop_at_eos && Some(next) == model.config.eos_token_id {
            break;
        }
        if i + 1 == opts.max_new || out.len() == limit {
            break;
        }
        logits = state.push(next)?;
    }
    Ok(out)
}

/// Next-token distribution after `prompt` at temperature 1.
pub fn next_token_distribution(model: &TinyLm, prompt: &[u32]) -> Result<Vec<f32>> {
    let logits: Matrix = model.forward(prompt)?.logits;
    softmax(logits.row(logits.rows() - 1), 1.0)
}
