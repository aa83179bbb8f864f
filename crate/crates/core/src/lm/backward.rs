//! Hand-derived backward pass for next-token cross-entropy.

use crate::error::{Error, Result};
use crate::math::{log_softmax, Matrix};

use super::model::{gelu_grad, BlockCache, LayerNorm};
use super::TinyLm;

/// `acc += aᵀ · b` for row-aligned `a` and `b`.
fn add_at_b(acc: &mut Matrix, a: &Matrix, b: &Matrix) {
    debug_assert_eq!(a.rows(), b.rows());
    for r in 0..a.rows() {
        let brow = b.row(r);
        for (i, &x) in a.row(r).iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, &y) in acc.row_mut(i).iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
}

fn add_col_sums(acc: &mut Matrix, g: &Matrix) {
    for r in 0..g.rows() {
        for (o, &x) in acc.data_mut().iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
}

/// `g · wᵀ`
fn times_transpose(g: &Matrix, w: &Matrix) -> Matrix {
    g.matmul_transposed(w).expect("backward shapes are fixed by the model")
}

/// Backward through a row-wise layer norm; accumulates gain/bias grads and
/// returns the input gradient.
fn layer_norm_backward(ln: &LayerNorm, grad_ln: &mut LayerNorm, hat: &Matrix, inv_std: &[f32], dy: &Matrix) -> Matrix {
    let d = hat.cols();
    let mut dx = Matrix::zeros(hat.rows(), d);
    let gain = ln.gain.data();
    for r in 0..hat.rows() {
        let (h, g_out) = (hat.row(r), dy.row(r));
        let dg = grad_ln.gain.data_mut();
        for i in 0..d {
            dg[i] += g_out[i] * h[i];
        }
        let db = grad_ln.bias.data_mut();
        for i in 0..d {
            db[i] += g_out[i];
        }
        let dhat: Vec<f64> = (0..d).map(|i| (g_out[i] * gain[i]) as f64).collect();
        let mean_dhat = dhat.iter().sum::<f64>() / d as f64;
        let mean_dhat_h = dhat.iter().zip(h).map(|(a, &b)| a * b as f64).sum::<f64>() / d as f64;
        let inv = inv_std[r] as f64;
        for (i, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = (inv * (dhat[i] - mean_dhat - h[i] as f64 * mean_dhat_h)) as f32;
        }
    }
    dx
}

impl TinyLm {
    /// Summed next-token cross-entropy over `tokens` (targets are `tokens[1..]`).
    ///
    /// Adds `scale ×` its gradient into `grads`, which must share this model's
    /// config. Returns the summed loss and the number of targets.
    pub fn accumulate_gradients(&self, tokens: &[u32], grads: &mut TinyLm, scale: f32) -> Result<(f64, usize)> {
        if tokens.len() < 2 {
            return Err(Error::Input("need at least two tokens for a next-token loss".into()));
        }
        if grads.config != self.config {
            return Err(Error::Config("gradient buffer has a different config".into()));
        }
        let inputs = &tokens[..tokens.len() - 1];
        let targets = &tokens[1..];
        self.check_tokens(inputs)?;
        self.check_tokens(targets)?;

        let cfg = &self.config;
        let (t, d, hd) = (inputs.len(), cfg.d_model, cfg.head_dim());

        let mut x = self.embed(inputs);
        let mut caches: Vec<BlockCache> = Vec::with_capacity(cfg.n_layers);
        for layer in 0..cfg.n_layers {
            let cache = self.block_forward(layer, x);
            x = self.block_output(layer, &cache);
            caches.push(cache);
        }
        let (normed, hat_f, inv_f) = self.final_norm(&x);
        let logits = self.unembed_rows(&normed);

        let mut loss = 0.0f64;
        let mut dlogits = Matrix::zeros(t, cfg.vocab_size);
        for (r, &target) in targets.iter().enumerate() {
            let lp = log_softmax(logits.row(r));
            loss -= lp[target as usize];
            for (c, o) in dlogits.row_mut(r).iter_mut().enumerate() {
                let p = lp[c].exp();
                let onehot = if c == target as usize { 1.0 } else { 0.0 };
                *o = ((p - onehot) * scale as f64) as f32;
            }
        }

        add_at_b(&mut grads.unembed, &normed, &dlogits);
        let dnormed = times_transpose(&dlogits, &self.unembed);
        let mut dx = layer_norm_backward(&self.ln_f, &mut grads.ln_f, &hat_f, &inv_f, &dnormed);

        for layer in (0..cfg.n_layers).rev() {
            let b = &self.blocks[layer];
            let gb = &mut grads.blocks[layer];
            let c = &caches[layer];

            // MLP branch
            add_at_b(&mut gb.w_out, &c.act, &dx);
            add_col_sums(&mut gb.b_out, &dx);
            let mut dpre = times_transpose(&dx, &b.w_out);
            for (g, &p) in dpre.data_mut().iter_mut().zip(c.pre_act.data()) {
                *g *= gelu_grad(p);
            }
            add_at_b(&mut gb.w_in, &c.h2, &dpre);
            add_col_sums(&mut gb.b_in, &dpre);
            let dh2 = times_transpose(&dpre, &b.w_in);
            let dmid_ln = layer_norm_backward(&b.ln2, &mut gb.ln2, &c.h2_hat, &c.h2_inv_std, &dh2);
            let mut dmid = dx;
            for (a, g) in dmid.data_mut().iter_mut().zip(dmid_ln.data()) {
                *a += g;
            }

            // attention branch
            add_at_b(&mut gb.w_o, &c.attn_cat, &dmid);
            let dcat = times_transpose(&dmid, &b.w_o);
            let mut dq = Matrix::zeros(t, d);
            let mut dk = Matrix::zeros(t, d);
            let mut dv = Matrix::zeros(t, d);
            let scale_qk = 1.0 / (hd as f64).sqrt();
            for h in 0..cfg.n_heads {
                let off = h * hd;
                for i in 0..t {
                    let probs = &c.probs[h][i];
                    let dout = &dcat.row(i)[off..off + hd];
                    // dP_ij = dout · v_j, then softmax backward
                    let dp: Vec<f64> = (0..=i)
                        .map(|j| crate::math::dot(dout, &c.v.row(j)[off..off + hd]))
                        .collect();
                    let inner: f64 = dp.iter().zip(probs).map(|(a, &p)| a * p as f64).sum();
                    for j in 0..=i {
                        let p = probs[j] as f64;
                        let ds = (p * (dp[j] - inner) * scale_qk) as f32;
                        let pf = probs[j];
                        let vrow = &mut dv.row_mut(j)[off..off + hd];
                        for (o, &g) in vrow.iter_mut().zip(dout) {
                            *o += pf * g;
                        }
                        if ds != 0.0 {
                            let krow = &c.k.row(j)[off..off + hd];
                            let qrow_i = &mut dq.row_mut(i)[off..off + hd];
                            for (o, &kk) in qrow_i.iter_mut().zip(krow) {
                                *o += ds * kk;
                            }
                            let qi = &c.q.row(i)[off..off + hd];
                            let krow_j = &mut dk.row_mut(j)[off..off + hd];
                            for (o, &qq) in krow_j.iter_mut().zip(qi) {
                                *o += ds * qq;
                            }
                        }
                    }
                }
            }
            add_at_b(&mut gb.w_q, &c.h1, &dq);
            add_at_b(&mut gb.w_k, &c.h1, &dk);
            add_at_b(&mut gb.w_v, &c.h1, &dv);
            let mut dh1 = times_transpose(&dq, &b.w_q);
            for part in [times_transpose(&dk, &b.w_k), times_transpose(&dv, &b.w_v)] {
                for (a, g) in dh1.data_mut().iter_mut().zip(part.data()) {
                    *a += g;
                }
            }
            let din_ln = layer_norm_backward(&b.ln1, &mut gb.ln1, &c.h1_hat, &c.h1_inv_std, &dh1);
            for (a, g) in dmid.data_mut().iter_mut().zip(din_ln.data()) {
                *a += g;
            }
            dx = dmid;
        }

        for (p, &tok) in inputs.iter().enumerate() {
            let g = dx.row(p);
            for (o, &v) in grads.tok_emb.row_mut(tok as usize).iter_mut().zip(g) {
                *o += v;
            }
            for (o, &v) in grads.pos_emb.row_mut(p).iter_mut().zip(g) {
                *o += v;
            }
        }
        Ok((loss, targets.len()))
    }

    /// Summed next-token cross-entropy without gradients.
    pub fn sequence_loss(&self, tokens: &[u32]) -> Result<(f64, usize)> {
        if tokens.len() < 2 {
            return Ok((0.0, 0));
        }
        let logits = self.forward(&tokens[..tokens.len() - 1])?.logits;
        Ok(cross_entropy_sum(&logits, &tokens[1..]))
    }
}

/// Summed cross-entropy of `targets[r]` under row `r` of `logits`.
pub fn cross_entropy_sum(logits: &Matrix, targets: &[u32]) -> (f64, usize) {
    let loss = targets
        .iter()
        .enumerate()
        .map(|(r, &t)| -log_softmax(logits.row(r))[t as usize])
        .sum();
    (loss, targets.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;
    use crate::math::Rng;

    /// Central differences in f32 are noisy, so the check only covers entries
    /// whose gradient is large enough to resolve.
    #[test]
    fn gradients_match_finite_differences() {
        let cfg = LmConfig {
            vocab_size: 7,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 8,
            bos_token_id: Some(0),
            eos_token_id: None,
            mlp_ratio: 2,
        };
        let mut model = TinyLm::new(cfg.clone(), 11).unwrap();
        // larger weights so every gradient path is exercised
        let mut rng = Rng::new(2);
        for m in model.tensors_mut() {
            m.data_mut().iter_mut().for_each(|x| *x += 0.3 * rng.normal_f32());
        }
        let tokens = [0u32, 3, 5, 1, 6, 2];
        let mut grads = TinyLm::zeros(cfg).unwrap();
        model.accumulate_gradients(&tokens, &mut grads, 1.0).unwrap();
        let analytic: Vec<Vec<f32>> = grads.named_tensors().iter().map(|(_, m)| m.data().to_vec()).collect();

        let h = 1e-2f32;
        let mut checked = 0;
        let n_tensors = analytic.len();
        for ti in 0..n_tensors {
            let len = analytic[ti].len();
            for _ in 0..6 {
                let idx = rng.below(len);
                let orig = model.tensors_mut()[ti].data()[idx];
                model.tensors_mut()[ti].data_mut()[idx] = orig + h;
                let plus = model.sequence_loss(&tokens).unwrap().0;
                model.tensors_mut()[ti].data_mut()[idx] = orig - h;
                let minus = model.sequence_loss(&tokens).unwrap().0;
                model.tensors_mut()[ti].data_mut()[idx] = orig;
                let numeric = (plus - minus) / (2.0 * h as f64);
                let a = analytic[ti][idx] as f64;
                if a.abs().max(numeric.abs()) < 5e-3 {
                    continue;
                }
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
                assert!(rel < 2e-2, "tensor {ti} idx {idx}: analytic {a} numeric {numeric}");
                checked += 1;
            }
        }
        assert!(checked > 30, "only {checked} entries were large enough to check");
    }

    #[test]
    fn sequence_loss_matches_accumulated_loss() {
        let cfg = LmConfig {
            vocab_size: 9,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 8,
            ..LmConfig::default()
        };
        let model = TinyLm::new(cfg.clone(), 3).unwrap();
        let toks = [0u32, 4, 4, 8, 2];
        let mut g = TinyLm::zeros(cfg).unwrap();
        let (a, n) = model.accumulate_gradients(&toks, &mut g, 1.0).unwrap();
        let (b, m) = model.sequence_loss(&toks).unwrap();
        assert_eq!(n, m);
        assert!((a - b).abs() < 1e-9);
    }
}
