//! Pre-norm decoder-only transformer with learned positional embeddings.
//!
//! Every position is computed row by row with the same kernels, so the
//! incremental decoder in [`super::sample`] reproduces full-forward logits
//! bit for bit.

use crate::error::{Error, Result};
use crate::math::{dot, softmax_unchecked, vecmat_into, Matrix, Rng};

use super::LmConfig;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Matrix,
    pub bias: Matrix,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self {
            gain: Matrix::from_vec(1, d, vec![1.0; d]).unwrap(),
            bias: Matrix::zeros(1, d),
        }
    }

    fn zeros(d: usize) -> Self {
        Self {
            gain: Matrix::zeros(1, d),
            bias: Matrix::zeros(1, d),
        }
    }

    /// Normalizes one row into `out`, returning `1/σ`; `xhat` receives the
    /// standardized input.
    pub(crate) fn apply_row(&self, x: &[f32], xhat: &mut [f32], out: &mut [f32]) -> f32 {
        let n = x.len() as f64;
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();
        let (g, b) = (self.gain.data(), self.bias.data());
        for i in 0..x.len() {
            let h = ((x[i] as f64 - mean) * inv_std) as f32;
            xhat[i] = h;
            out[i] = h * g[i] + b[i];
        }
        inv_std as f32
    }
}

/// One transformer block's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln2: LayerNorm,
    pub w_in: Matrix,
    pub b_in: Matrix,
    pub w_out: Matrix,
    pub b_out: Matrix,
}

impl Block {
    fn zeros(cfg: &LmConfig) -> Self {
        let (d, h) = (cfg.d_model, cfg.mlp_width());
        Self {
            ln1: LayerNorm::zeros(d),
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            ln2: LayerNorm::zeros(d),
            w_in: Matrix::zeros(d, h),
            b_in: Matrix::zeros(1, h),
            w_out: Matrix::zeros(h, d),
            b_out: Matrix::zeros(1, d),
        }
    }
}

/// Residual-stream hidden states captured at the output of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenCapture {
    pub layer_index: usize,
    /// tokens × d_model
    pub states: Matrix,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// seq_len × vocab_size
    pub logits: Matrix,
    /// One capture per block, in layer order.
    pub hidden: Vec<HiddenCapture>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyLm {
    pub config: LmConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    /// d_model × vocab_size
    pub unembed: Matrix,
}

/// Everything the backward pass needs from one block's forward.
#[derive(Debug)]
pub(crate) struct BlockCache {
    pub h1: Matrix,
    pub h1_hat: Matrix,
    pub h1_inv_std: Vec<f32>,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Per head, row `i` holds attention weights over positions `0..=i`.
    pub probs: Vec<Vec<Vec<f32>>>,
    pub attn_cat: Matrix,
    pub x_mid: Matrix,
    pub h2: Matrix,
    pub h2_hat: Matrix,
    pub h2_inv_std: Vec<f32>,
    pub pre_act: Matrix,
    pub act: Matrix,
}

pub(crate) fn gelu(x: f32) -> f32 {
    let x = x as f64;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())) as f32
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let x = x as f64;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let t = (c * (x + 0.044715 * x * x * x)).tanh();
    (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)) as f32
}

/// Layer norm of every row: (output, standardized input, 1/σ per row).
fn norm_rows(ln: &LayerNorm, x: &Matrix) -> (Matrix, Matrix, Vec<f32>) {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut hat = Matrix::zeros(x.rows(), x.cols());
    let mut inv = vec![0.0; x.rows()];
    for r in 0..x.rows() {
        inv[r] = ln.apply_row(x.row(r), hat.row_mut(r), out.row_mut(r));
    }
    (out, hat, inv)
}

fn matmul_rows(x: &Matrix, w: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.cols());
    let mut acc = vec![0.0f64; w.cols()];
    for r in 0..x.rows() {
        vecmat_into(x.row(r), w, &mut acc, out.row_mut(r));
    }
    out
}

/// Causal attention output for query row `i` of one head.
///
/// `keys`/`values` are row-major with stride `d`; `off` selects the head slice.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_row(
    q: &[f32],
    keys: &[f32],
    values: &[f32],
    d: usize,
    off: usize,
    hd: usize,
    n_visible: usize,
    out: &mut [f32],
) -> Vec<f32> {
    let scale = 1.0 / (hd as f64).sqrt();
    let scores: Vec<f32> = (0..n_visible)
        .map(|j| (dot(q, &keys[j * d + off..j * d + off + hd]) * scale) as f32)
        .collect();
    let probs = softmax_unchecked(&scores, 1.0);
    let mut acc = vec![0.0f64; hd];
    for (j, &p) in probs.iter().enumerate() {
        let v = &values[j * d + off..j * d + off + hd];
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += p as f64 * x as f64;
        }
    }
    for (o, a) in out.iter_mut().zip(acc) {
        *o = a as f32;
    }
    probs
}

impl TinyLm {
    /// Randomly initialized model.
    pub fn new(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut model = Self::zeros(config)?;
        let mut rng = Rng::new(seed);
        let resid_std = INIT_STD / (2.0 * model.config.n_layers as f32).sqrt();
        let fill = |m: &mut Matrix, std: f32, rng: &mut Rng| {
            m.data_mut().iter_mut().for_each(|x| *x = std * rng.normal_f32());
        };
        fill(&mut model.tok_emb, INIT_STD, &mut rng);
        fill(&mut model.pos_emb, INIT_STD, &mut rng);
        let d = model.config.d_model;
        for block in &mut model.blocks {
            block.ln1 = LayerNorm::new(d);
            block.ln2 = LayerNorm::new(d);
            fill(&mut block.w_q, INIT_STD, &mut rng);
            fill(&mut block.w_k, INIT_STD, &mut rng);
            fill(&mut block.w_v, INIT_STD, &mut rng);
            fill(&mut block.w_o, resid_std, &mut rng);
            fill(&mut block.w_in, INIT_STD, &mut rng);
            fill(&mut block.w_out, resid_std, &mut rng);
        }
        model.ln_f = LayerNorm::new(d);
        fill(&mut model.unembed, INIT_STD, &mut rng);
        Ok(model)
    }

    /// All parameters zero, layer-norm gains included. Used for gradient
    /// accumulators and hand-built test models.
    pub fn zeros(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let (v, d) = (config.vocab_size, config.d_model);
        Ok(Self {
            tok_emb: Matrix::zeros(v, d),
            pos_emb: Matrix::zeros(config.max_seq_len, d),
            blocks: (0..config.n_layers).map(|_| Block::zeros(&config)).collect(),
            ln_f: LayerNorm::zeros(d),
            unembed: Matrix::zeros(d, v),
            config,
        })
    }

    /// Parameter tensors with stable names, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("blocks.{l}.{n}");
            out.extend([
                (p("ln1.gain"), &b.ln1.gain),
                (p("ln1.bias"), &b.ln1.bias),
                (p("w_q"), &b.w_q),
                (p("w_k"), &b.w_k),
                (p("w_v"), &b.w_v),
                (p("w_o"), &b.w_o),
                (p("ln2.gain"), &b.ln2.gain),
                (p("ln2.bias"), &b.ln2.bias),
                (p("w_in"), &b.w_in),
                (p("b_in"), &b.b_in),
                (p("w_out"), &b.w_out),
                (p("b_out"), &b.b_out),
            ]);
        }
        out.extend([
            ("ln_f.gain".to_string(), &self.ln_f.gain),
            ("ln_f.bias".to_string(), &self.ln_f.bias),
            ("unembed".to_string(), &self.unembed),
        ]);
        out
    }

    /// Mutable parameter tensors in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1.gain,
                &mut b.ln1.bias,
                &mut b.w_q,
                &mut b.w_k,
                &mut b.w_v,
                &mut b.w_o,
                &mut b.ln2.gain,
                &mut b.ln2.bias,
                &mut b.w_in,
                &mut b.b_in,
                &mut b.w_out,
                &mut b.b_out,
            ]);
        }
        out.extend([&mut self.ln_f.gain, &mut self.ln_f.bias, &mut self.unembed]);
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, m)| m.data().len()).sum()
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} outside 1..={}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {t} out of range for vocab {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub(crate) fn embed(&self, tokens: &[u32]) -> Matrix {
        let d = self.config.d_model;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (p, &t) in tokens.iter().enumerate() {
            let row = x.row_mut(p);
            for ((o, &a), &b) in row
                .iter_mut()
                .zip(self.tok_emb.row(t as usize))
                .zip(self.pos_emb.row(p))
            {
                *o = a + b;
            }
        }
        x
    }

    pub(crate) fn block_forward(&self, layer: usize, x_in: Matrix) -> BlockCache {
        let cfg = &self.config;
        let b = &self.blocks[layer];
        let (t, d, hd) = (x_in.rows(), cfg.d_model, cfg.head_dim());

        let (h1, h1_hat, h1_inv_std) = norm_rows(&b.ln1, &x_in);
        let q = matmul_rows(&h1, &b.w_q);
        let k = matmul_rows(&h1, &b.w_k);
        let v = matmul_rows(&h1, &b.w_v);

        let mut attn_cat = Matrix::zeros(t, d);
        let mut probs = vec![Vec::with_capacity(t); cfg.n_heads];
        for i in 0..t {
            for (h, head_probs) in probs.iter_mut().enumerate() {
                let off = h * hd;
                let out = &mut attn_cat.row_mut(i)[off..off + hd];
                let p = attend_row(
                    &q.row(i)[off..off + hd],
                    k.data(),
                    v.data(),
                    d,
                    off,
                    hd,
                    i + 1,
                    out,
                );
                head_probs.push(p);
            }
        }
        let attn_out = matmul_rows(&attn_cat, &b.w_o);
        let mut x_mid = x_in;
        for (m, a) in x_mid.data_mut().iter_mut().zip(attn_out.data()) {
            *m += a;
        }

        let (h2, h2_hat, h2_inv_std) = norm_rows(&b.ln2, &x_mid);
        let mut pre_act = matmul_rows(&h2, &b.w_in);
        pre_act.add_row_broadcast(b.b_in.data()).unwrap();
        let mut act = pre_act.clone();
        act.data_mut().iter_mut().for_each(|x| *x = gelu(*x));

        BlockCache {
            h1,
            h1_hat,
            h1_inv_std,
            q,
            k,
            v,
            probs,
            attn_cat,
            x_mid,
            h2,
            h2_hat,
            h2_inv_std,
            pre_act,
            act,
        }
    }

    /// Block output from its cache: `x_mid + act · W_out + b_out`.
    pub(crate) fn block_output(&self, layer: usize, cache: &BlockCache) -> Matrix {
        let b = &self.blocks[layer];
        let mut mlp = matmul_rows(&cache.act, &b.w_out);
        mlp.add_row_broadcast(b.b_out.data()).unwrap();
        let mut out = cache.x_mid.clone();
        for (o, m) in out.data_mut().iter_mut().zip(mlp.data()) {
            *o += m;
        }
        out
    }

    pub(crate) fn final_norm(&self, x: &Matrix) -> (Matrix, Matrix, Vec<f32>) {
        norm_rows(&self.ln_f, x)
    }

    pub(crate) fn unembed_rows(&self, normed: &Matrix) -> Matrix {
        matmul_rows(normed, &self.unembed)
    }

    /// Logits for every position plus the residual stream after each block.
    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        let mut x = self.embed(tokens);
        let mut hidden = Vec::with_capacity(self.config.n_layers);
        for layer in 0..self.config.n_layers {
            let cache = self.block_forward(layer, x);
            x = self.block_output(layer, &cache);
            hidden.push(HiddenCapture {
                layer_index: layer,
                states: x.clone(),
            });
        }
        let (normed, _, _) = self.final_norm(&x);
        Ok(ForwardOutput {
            logits: self.unembed_rows(&normed),
            hidden,
        })
    }

    /// Residual stream after block `layer`, skipping the later blocks.
    pub fn hidden_states(&self, tokens: &[u32], layer: usize) -> Result<Matrix> {
        self.check_layer(layer)?;
        self.check_tokens(tokens)?;
        let mut x = self.embed(tokens);
        for l in 0..=layer {
            let cache = self.block_forward(l, x);
            x = self.block_output(l, &cache);
        }
        Ok(x)
    }

    /// Runs the model with the output of block `layer` replaced by `replacement`.
    pub fn forward_patched(&self, tokens: &[u32], layer: usize, replacement: &Matrix) -> Result<Matrix> {
        self.check_layer(layer)?;
        self.check_tokens(tokens)?;
        let want = (tokens.len(), self.config.d_model);
        if replacement.shape() != want {
            return Err(Error::shape("forward_patched", want, replacement.shape()));
        }
        self.logits_from_layer(layer, replacement.clone())
    }

    /// Continues a forward pass from the residual stream after block `layer`.
    pub fn logits_from_layer(&self, layer: usize, mut x: Matrix) -> Result<Matrix> {
        for l in layer + 1..self.config.n_layers {
            let cache = self.block_forward(l, x);
            x = self.block_output(l, &cache);
        }
        let (normed, _, _) = self.final_norm(&x);
        Ok(self.unembed_rows(&normed))
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.config.n_layers {
            return Err(Error::Config(format!(
                "layer {layer} out of range for {} layers",
                self.config.n_layers
            )));
        }
        Ok(())
    }
}
