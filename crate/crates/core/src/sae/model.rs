use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{assign_tensors, read_bundle, write_bundle};
use crate::error::{Error, Result};
use crate::math::{dot, norm, vecmat_into, Matrix, Rng};

/// Dimensions of a TopK autoencoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SaeConfig {
    /// Activation size.
    pub a: usize,
    /// Dictionary size.
    pub d: usize,
    pub k: usize,
}

impl SaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.a == 0 || self.d < self.a {
            return Err(Error::Config(format!(
                "dictionary size {} must be at least the activation size {} (> 0)",
                self.d, self.a
            )));
        }
        if self.k == 0 || self.k > self.d {
            return Err(Error::Config(format!("k = {} outside 1..={}", self.k, self.d)));
        }
        Ok(())
    }
}

/// TopK sparse autoencoder: `f = TopK(x·W_enc + b_enc)`, `x̂ = f·W_dec + b_dec`.
#[derive(Clone, Debug, PartialEq)]
pub struct TopKSae {
    pub config: SaeConfig,
    /// `A × D`
    pub w_enc: Matrix,
    pub b_enc: Vec<f32>,
    /// `D × A`; row `j` is the direction feature `j` writes.
    pub w_dec: Matrix,
    pub b_dec: Vec<f32>,
    pub seed: u64,
    pub dataset_tag: String,
    pub layer: usize,
    pub model_id: String,
}

/// Kept TopK entries, `k` per row, indices ascending within a row.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseCodes {
    pub k: usize,
    pub d: usize,
    pub idx: Vec<u32>,
    pub val: Vec<f32>,
}

impl SparseCodes {
    pub fn rows(&self) -> usize {
        self.idx.len() / self.k
    }

    pub fn row(&self, r: usize) -> (&[u32], &[f32]) {
        let s = r * self.k..(r + 1) * self.k;
        (&self.idx[s.clone()], &self.val[s])
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows(), self.d);
        for r in 0..self.rows() {
            let (idx, val) = self.row(r);
            let row = m.row_mut(r);
            for (&j, &v) in idx.iter().zip(val) {
                row[j as usize] = v;
            }
        }
        m
    }
}

/// Positions of the `k` largest entries of `z`, ties to the lowest index,
/// returned in ascending index order.
pub fn topk_indices(z: &[f32], k: usize, scratch: &mut Vec<u32>) -> Vec<u32> {
    scratch.clear();
    scratch.extend(0..z.len() as u32);
    let cmp = |a: &u32, b: &u32| -> Ordering { z[*b as usize].total_cmp(&z[*a as usize]).then(a.cmp(b)) };
    if k < z.len() {
        scratch.select_nth_unstable_by(k - 1, cmp);
    }
    let mut kept = scratch[..k].to_vec();
    kept.sort_unstable();
    kept
}

/// Applies TopK to each row of a dense pre-activation matrix.
pub fn topk_rows(z: &Matrix, k: usize) -> Matrix {
    let mut out = Matrix::zeros(z.rows(), z.cols());
    let mut scratch = Vec::with_capacity(z.cols());
    for r in 0..z.rows() {
        let zr = z.row(r);
        let o = out.row_mut(r);
        for j in topk_indices(zr, k, &mut scratch) {
            o[j as usize] = zr[j as usize];
        }
    }
    out
}

fn finish_with_bias(acc: &[f64], bias: &[f32], out: &mut [f32]) {
    for ((o, &a), &b) in out.iter_mut().zip(acc).zip(bias) {
        *o = (a + b as f64) as f32;
    }
}

impl TopKSae {
    /// Transpose-tied initialization with unit-norm decoder rows and zero biases.
    pub fn new(config: SaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let SaeConfig { a, d, .. } = config;
        let bound = 1.0 / (a as f32).sqrt();
        let mut rng = Rng::new(seed);
        let enc: Vec<f32> = (0..a * d).map(|_| rng.uniform_f32(-bound, bound)).collect();
        let w_enc = Matrix::from_vec(a, d, enc)?;
        let mut w_dec = w_enc.transpose();
        normalize_rows(&mut w_dec);
        Ok(Self {
            config,
            w_enc,
            b_enc: vec![0.0; d],
            w_dec,
            b_dec: vec![0.0; a],
            seed,
            dataset_tag: String::new(),
            layer: 0,
            model_id: String::new(),
        })
    }

    /// All parameters zero; decodes everything to zero.
    pub fn zeros(config: SaeConfig) -> Result<Self> {
        config.validate()?;
        let SaeConfig { a, d, .. } = config;
        Ok(Self {
            config,
            w_enc: Matrix::zeros(a, d),
            b_enc: vec![0.0; d],
            w_dec: Matrix::zeros(d, a),
            b_dec: vec![0.0; a],
            seed: 0,
            dataset_tag: String::new(),
            layer: 0,
            model_id: String::new(),
        })
    }

    /// Identifier used in reports: dataset tag and seed.
    pub fn id(&self) -> String {
        let tag = if self.dataset_tag.is_empty() { "sae" } else { &self.dataset_tag };
        format!("{tag}-s{}", self.seed)
    }

    pub fn a(&self) -> usize {
        self.config.a
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn is_finite(&self) -> bool {
        self.w_enc.is_finite()
            && self.w_dec.is_finite()
            && self.b_enc.iter().chain(&self.b_dec).all(|x| x.is_finite())
    }

    fn check_input(&self, op: &'static str, x: &Matrix, width: usize) -> Result<()> {
        if x.cols() != width {
            return Err(Error::shape(op, x.shape(), (width, width)));
        }
        Ok(())
    }

    /// `x·W_enc + b_enc` before TopK.
    pub fn pre_activations(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input("sae pre-activation", x, self.a())?;
        let mut z = Matrix::zeros(x.rows(), self.d());
        let mut acc = vec![0.0f64; self.d()];
        let mut tmp = vec![0.0f32; self.d()];
        for r in 0..x.rows() {
            vecmat_into(x.row(r), &self.w_enc, &mut acc, &mut tmp);
            finish_with_bias(&acc, &self.b_enc, z.row_mut(r));
        }
        Ok(z)
    }

    /// Sparse encoding: the kept TopK entries of every row.
    pub fn encode_sparse(&self, x: &Matrix) -> Result<SparseCodes> {
        self.check_input("sae encode", x, self.a())?;
        let (d, k) = (self.d(), self.k());
        let mut codes = SparseCodes {
            k,
            d,
            idx: Vec::with_capacity(x.rows() * k),
            val: Vec::with_capacity(x.rows() * k),
        };
        let mut acc = vec![0.0f64; d];
        let mut tmp = vec![0.0f32; d];
        let mut z = vec![0.0f32; d];
        let mut scratch = Vec::with_capacity(d);
        for r in 0..x.rows() {
            vecmat_into(x.row(r), &self.w_enc, &mut acc, &mut tmp);
            finish_with_bias(&acc, &self.b_enc, &mut z);
            for j in topk_indices(&z, k, &mut scratch) {
                codes.idx.push(j);
                codes.val.push(z[j as usize]);
            }
        }
        Ok(codes)
    }

    /// Dense TopK features, `batch × D`.
    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.encode_sparse(x)?.to_dense())
    }

    /// `f·W_dec + b_dec` for dense features.
    pub fn decode(&self, f: &Matrix) -> Result<Matrix> {
        self.check_input("sae decode", f, self.d())?;
        let mut out = Matrix::zeros(f.rows(), self.a());
        let mut acc = vec![0.0f64; self.a()];
        let mut tmp = vec![0.0f32; self.a()];
        for r in 0..f.rows() {
            vecmat_into(f.row(r), &self.w_dec, &mut acc, &mut tmp);
            finish_with_bias(&acc, &self.b_dec, out.row_mut(r));
        }
        Ok(out)
    }

    pub fn decode_sparse(&self, codes: &SparseCodes) -> Result<Matrix> {
        if codes.d != self.d() {
            return Err(Error::shape("sae decode", (codes.rows(), codes.d), (self.d(), self.a())));
        }
        let a = self.a();
        let mut out = Matrix::zeros(codes.rows(), a);
        let mut acc = vec![0.0f64; a];
        for r in 0..codes.rows() {
            acc.iter_mut().for_each(|v| *v = 0.0);
            let (idx, val) = codes.row(r);
            for (&j, &v) in idx.iter().zip(val) {
                if v == 0.0 {
                    continue;
                }
                let v = v as f64;
                for (s, &w) in acc.iter_mut().zip(self.w_dec.row(j as usize)) {
                    *s += v * w as f64;
                }
            }
            finish_with_bias(&acc, &self.b_dec, out.row_mut(r));
        }
        Ok(out)
    }

    pub fn reconstruct(&self, x: &Matrix) -> Result<Matrix> {
        self.decode_sparse(&self.encode_sparse(x)?)
    }

    /// Encoder as a sum over activation-indexed rows of `W_enc`, then TopK.
    pub fn encode_decomposed_rows(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input("sae encode", x, self.a())?;
        let d = self.d();
        let mut z = Matrix::zeros(x.rows(), d);
        for r in 0..x.rows() {
            let mut acc = vec![0.0f64; d];
            for (i, &xi) in x.row(r).iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (s, &w) in acc.iter_mut().zip(self.w_enc.row(i)) {
                    *s += xi as f64 * w as f64;
                }
            }
            finish_with_bias(&acc, &self.b_enc, z.row_mut(r));
        }
        Ok(topk_rows(&z, self.k()))
    }

    /// Encoder as a concatenation of per-feature column dot products, then TopK.
    pub fn encode_decomposed_cols(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input("sae encode", x, self.a())?;
        let cols: Vec<Vec<f32>> = (0..self.d()).map(|j| self.w_enc.column(j)).collect();
        let mut z = Matrix::zeros(x.rows(), self.d());
        for r in 0..x.rows() {
            for (j, col) in cols.iter().enumerate() {
                z.set(r, j, (dot(x.row(r), col) + self.b_enc[j] as f64) as f32);
            }
        }
        Ok(topk_rows(&z, self.k()))
    }

    /// Decoder as a sum of feature-weighted decoder rows plus one bias.
    pub fn decode_decomposed_rows(&self, f: &Matrix) -> Result<Matrix> {
        self.check_input("sae decode", f, self.d())?;
        let a = self.a();
        let mut out = Matrix::zeros(f.rows(), a);
        for r in 0..f.rows() {
            let mut acc = vec![0.0f64; a];
            for (j, &fj) in f.row(r).iter().enumerate() {
                if fj == 0.0 {
                    continue;
                }
                for (s, &w) in acc.iter_mut().zip(self.w_dec.row(j)) {
                    *s += fj as f64 * w as f64;
                }
            }
            finish_with_bias(&acc, &self.b_dec, out.row_mut(r));
        }
        Ok(out)
    }

    /// Decoder as a concatenation of per-output column dot products.
    pub fn decode_decomposed_cols(&self, f: &Matrix) -> Result<Matrix> {
        self.check_input("sae decode", f, self.d())?;
        let cols: Vec<Vec<f32>> = (0..self.a()).map(|i| self.w_dec.column(i)).collect();
        let mut out = Matrix::zeros(f.rows(), self.a());
        for r in 0..f.rows() {
            for (i, col) in cols.iter().enumerate() {
                out.set(r, i, (dot(f.row(r), col) + self.b_dec[i] as f64) as f32);
            }
        }
        Ok(out)
    }

    /// Reconstruction MSE averaged over batch and dimensions.
    pub fn loss(&self, x: &Matrix) -> Result<f64> {
        let xh = self.reconstruct(x)?;
        Ok(mse(x, &xh))
    }

    /// Loss and gradients with the TopK selection held fixed.
    pub fn loss_and_grad(&self, x: &Matrix) -> Result<(f64, SaeGrads)> {
        let codes = self.encode_sparse(x)?;
        let xh = self.decode_sparse(&codes)?;
        let (a, d) = (self.a(), self.d());
        let n = (x.rows() * a) as f64;
        let loss = mse(x, &xh);
        let mut g = SaeGrads::zeros(a, d);
        let mut dxh = vec![0.0f32; a];
        let mut dz = vec![0.0f32; self.k()];
        for r in 0..x.rows() {
            for ((o, &p), &t) in dxh.iter_mut().zip(xh.row(r)).zip(x.row(r)) {
                *o = (2.0 * (p as f64 - t as f64) / n) as f32;
            }
            for (o, &v) in g.b_dec.iter_mut().zip(&dxh) {
                *o += v;
            }
            let (idx, val) = codes.row(r);
            for (slot, (&j, &f)) in idx.iter().zip(val).enumerate() {
                let j = j as usize;
                for (o, &v) in g.w_dec.row_mut(j).iter_mut().zip(&dxh) {
                    *o += f * v;
                }
                dz[slot] = dot(&dxh, self.w_dec.row(j)) as f32;
                g.b_enc[j] += dz[slot];
            }
            for (i, &xi) in x.row(r).iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let row = g.w_enc.row_mut(i);
                for (&j, &gz) in idx.iter().zip(&dz) {
                    row[j as usize] += xi * gz;
                }
            }
        }
        Ok((loss, g))
    }

    /// Scales every decoder row to unit norm; zero rows stay zero.
    pub fn normalize_decoder(&mut self) {
        normalize_rows(&mut self.w_dec);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = SaeMeta {
            kind: "topk_sae".into(),
            a: self.a(),
            d: self.d(),
            k: self.k(),
            seed: self.seed,
            dataset_tag: self.dataset_tag.clone(),
            layer: self.layer,
            model_id: self.model_id.clone(),
        };
        let b_enc = Matrix::row_vector(&self.b_enc);
        let b_dec = Matrix::row_vector(&self.b_dec);
        let tensors = [
            ("w_enc".to_string(), &self.w_enc),
            ("b_enc".to_string(), &b_enc),
            ("w_dec".to_string(), &self.w_dec),
            ("b_dec".to_string(), &b_dec),
        ];
        write_bundle(path, &meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors): (SaeMeta, _) = read_bundle(path)?;
        let config = SaeConfig {
            a: meta.a,
            d: meta.d,
            k: meta.k,
        };
        let mut sae = TopKSae::zeros(config).map_err(|e| Error::Format {
            path: path.into(),
            reason: e.to_string(),
        })?;
        let mut b_enc = Matrix::zeros(1, meta.d);
        let mut b_dec = Matrix::zeros(1, meta.a);
        assign_tensors(
            path,
            tensors,
            vec![
                ("w_enc".into(), &mut sae.w_enc),
                ("b_enc".into(), &mut b_enc),
                ("w_dec".into(), &mut sae.w_dec),
                ("b_dec".into(), &mut b_dec),
            ],
        )?;
        sae.b_enc = b_enc.into_vec();
        sae.b_dec = b_dec.into_vec();
        sae.seed = meta.seed;
        sae.dataset_tag = meta.dataset_tag;
        sae.layer = meta.layer;
        sae.model_id = meta.model_id;
        Ok(sae)
    }
}

#[derive(Serialize, Deserialize)]
struct SaeMeta {
    kind: String,
    a: usize,
    d: usize,
    k: usize,
    seed: u64,
    dataset_tag: String,
    layer: usize,
    model_id: String,
}

/// Gradients for the four parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct SaeGrads {
    pub w_enc: Matrix,
    pub b_enc: Vec<f32>,
    pub w_dec: Matrix,
    pub b_dec: Vec<f32>,
}

impl SaeGrads {
    fn zeros(a: usize, d: usize) -> Self {
        Self {
            w_enc: Matrix::zeros(a, d),
            b_enc: vec![0.0; d],
            w_dec: Matrix::zeros(d, a),
            b_dec: vec![0.0; a],
        }
    }
}

fn mse(x: &Matrix, xh: &Matrix) -> f64 {
    let sum: f64 = x
        .data()
        .iter()
        .zip(xh.data())
        .map(|(&a, &b)| {
            let e = a as f64 - b as f64;
            e * e
        })
        .sum();
    sum / x.data().len().max(1) as f64
}

fn normalize_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let n = norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
        }
    }
}
