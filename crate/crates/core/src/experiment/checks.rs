//! Self-contained checks that the report reruns on every invocation.

use crate::data::{dataset_stats, generate_faithful, kl_divergence, FaithfulOptions};
use crate::error::{Error, Result};
use crate::lm::TinyLm;
use crate::math::{Matrix, Rng};
use crate::matching::hungarian;
use crate::metrics::explained_variance_of;
use crate::sae::{SaeConfig, SaeTrainer, TopKSae, TrainConfig};

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal_f32()).collect()).expect("sized buffer")
}

fn random_sae(cfg: SaeConfig, rng: &mut Rng) -> Result<TopKSae> {
    let mut sae = TopKSae::new(cfg, rng.next_u64())?;
    sae.b_enc.iter_mut().for_each(|b| *b = 0.1 * rng.normal_f32());
    sae.b_dec.iter_mut().for_each(|b| *b = 0.1 * rng.normal_f32());
    Ok(sae)
}

/// Largest disagreement between the direct and decomposed encode and decode
/// forms over `instances` random SAEs with `8 ≤ A ≤ 64`, `16 ≤ D ≤ 512`.
pub fn equivalence_max_error(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let a = 8 + rng.below(57);
        let d = (16 + rng.below(497)).max(a);
        let k = 1 + rng.below(d);
        let sae = random_sae(SaeConfig { a, d, k }, &mut rng)?;
        let x = random_matrix(2, a, &mut rng);
        let f = sae.encode(&x)?;
        let xh = sae.decode(&f)?;
        for other in [sae.encode_decomposed_rows(&x)?, sae.encode_decomposed_cols(&x)?] {
            worst = worst.max(f.max_abs_diff(&other)? as f64);
        }
        for other in [sae.decode_decomposed_rows(&f)?, sae.decode_decomposed_cols(&f)?] {
            worst = worst.max(xh.max_abs_diff(&other)? as f64);
        }
    }
    Ok(worst)
}

struct F64Sae {
    a: usize,
    d: usize,
    k: usize,
    tensors: [Vec<f64>; 4],
}

impl F64Sae {
    fn from(sae: &TopKSae) -> Self {
        let up = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        Self {
            a: sae.a(),
            d: sae.d(),
            k: sae.k(),
            tensors: [up(sae.w_enc.data()), up(&sae.b_enc), up(sae.w_dec.data()), up(&sae.b_dec)],
        }
    }

    /// Loss with the given TopK mask, `None` if the perturbation moved it.
    fn loss(&self, x: &Matrix, mask: &[Vec<usize>]) -> Option<f64> {
        let [w_enc, b_enc, w_dec, b_dec] = &self.tensors;
        let (a, d) = (self.a, self.d);
        let mut total = 0.0;
        for (r, kept_expected) in mask.iter().enumerate() {
            let z: Vec<f64> = (0..d)
                .map(|j| (0..a).map(|i| x.get(r, i) as f64 * w_enc[i * d + j]).sum::<f64>() + b_enc[j])
                .collect();
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&p, &q| z[q].total_cmp(&z[p]).then(p.cmp(&q)));
            let mut kept = order[..self.k].to_vec();
            kept.sort_unstable();
            if &kept != kept_expected {
                return None;
            }
            for i in 0..a {
                let xh: f64 = kept.iter().map(|&j| z[j] * w_dec[j * a + i]).sum::<f64>() + b_dec[i];
                total += (xh - x.get(r, i) as f64).powi(2);
            }
        }
        Some(total / (x.rows() * a) as f64)
    }
}

/// Worst relative gap between analytic gradients and f64 central differences
/// over `probes` entries of each parameter tensor.
pub fn gradient_max_relative_error(probes: usize, seed: u64) -> Result<f64> {
    let (a, d, k) = (32, 96, 8);
    let mut rng = Rng::new(seed);
    let sae = random_sae(SaeConfig { a, d, k }, &mut rng)?;
    let x = random_matrix(8, a, &mut rng);
    let (_, g) = sae.loss_and_grad(&x)?;
    let codes = sae.encode_sparse(&x)?;
    let mask: Vec<Vec<usize>> = (0..x.rows())
        .map(|r| codes.row(r).0.iter().map(|&j| j as usize).collect())
        .collect();
    let mut active: Vec<usize> = mask.concat();
    active.sort_unstable();
    active.dedup();
    let grads: [&[f32]; 4] = [g.w_enc.data(), &g.b_enc, g.w_dec.data(), &g.b_dec];
    let h = 1e-3;
    let mut worst = 0.0f64;
    for (t, grad) in grads.iter().enumerate() {
        let (mut checked, mut tries) = (0, 0);
        while checked < probes {
            tries += 1;
            if tries > 50 * probes.max(1) {
                return Err(Error::Invariant(format!("TopK mask too unstable to probe tensor {t}")));
            }
            let feat = active[rng.below(active.len())];
            let idx = match t {
                0 => rng.below(a) * d + feat,
                1 => feat,
                2 => feat * a + rng.below(a),
                _ => rng.below(a),
            };
            let mut plus = F64Sae::from(&sae);
            plus.tensors[t][idx] += h;
            let mut minus = F64Sae::from(&sae);
            minus.tensors[t][idx] -= h;
            let (Some(lp), Some(lm)) = (plus.loss(&x, &mask), minus.loss(&x, &mask)) else {
                continue;
            };
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = grad[idx] as f64;
            let scale = analytic.abs().max(numeric.abs());
            if scale > 1e-12 {
                worst = worst.max((analytic - numeric).abs() / scale);
            }
            checked += 1;
        }
    }
    Ok(worst)
}

/// Best total over all permutations of a square matrix.
fn brute_force_best(s: &Matrix) -> f64 {
    fn go(s: &Matrix, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == s.rows() {
            *best = best.max(acc);
            return;
        }
        for c in 0..s.cols() {
            if !used[c] {
                used[c] = true;
                go(s, row + 1, used, acc + s.get(row, c) as f64, best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::NEG_INFINITY;
    go(s, 0, &mut vec![false; s.cols()], 0.0, &mut best);
    best
}

/// Number of random 7×7 matrices where the assignment total differs from
/// the brute-force optimum.
pub fn hungarian_mismatches(instances: usize, seed: u64) -> Result<usize> {
    let mut rng = Rng::new(seed);
    let mut bad = 0;
    for _ in 0..instances {
        let s = Matrix::from_vec(7, 7, (0..49).map(|_| rng.uniform_f32(-1.0, 1.0)).collect())?;
        let perm = hungarian(&s)?;
        let total: f64 = perm.iter().enumerate().map(|(r, &c)| s.get(r, c) as f64).sum();
        if total != brute_force_best(&s) {
            bad += 1;
        }
    }
    Ok(bad)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SubspaceOutcome {
    pub explained_variance: f64,
    pub rows_used: usize,
}

/// Trains an `A=64, D=512, k=8` SAE on rows confined to a random 8-dim
/// subspace, streaming fresh batches until held-out EV exceeds 0.95 or
/// `max_rows` rows have been consumed.
pub fn subspace_reconstruction(max_rows: usize, seed: u64) -> Result<SubspaceOutcome> {
    let (a, dim, batch) = (64, 8, 256);
    let mut rng = Rng::new(seed);
    let basis = random_matrix(dim, a, &mut rng);
    let sample = |n: usize, rng: &mut Rng| random_matrix(n, dim, rng).matmul(&basis);
    let held = sample(4096, &mut rng)?;
    let steps = (max_rows / batch).max(1);
    let cfg = TrainConfig {
        lr: 1e-3,
        steps,
        batch_size: batch,
        seed,
        dead_feature_window: 500,
    };
    let mut trainer = SaeTrainer::new(SaeConfig { a, d: 512, k: 8 }, cfg, batch)?;
    let mut ev = f64::NEG_INFINITY;
    let mut rows_used = 0;
    while !trainer.is_done() {
        trainer.step(&sample(batch, &mut rng)?)?;
        rows_used += batch;
        if trainer.steps_done() % 250 == 0 || trainer.is_done() {
            ev = explained_variance_of(&held, &trainer.sae().reconstruct(&held)?)?;
            if ev > 0.95 {
                break;
            }
        }
    }
    Ok(SubspaceOutcome {
        explained_variance: ev,
        rows_used,
    })
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KlConvergence {
    pub small_tokens: usize,
    pub kl_small: Vec<f64>,
    pub kl_large: Vec<f64>,
    pub mean_small: f64,
    pub mean_large: f64,
    pub hand_example: f64,
}

/// KL(model→dataset) of faithful corpora at `n` and `10n` tokens per seed.
pub fn kl_convergence(model: &TinyLm, n: usize, max_len: usize, seeds: &[u64]) -> Result<KlConvergence> {
    if seeds.is_empty() {
        return Err(Error::Config("KL check needs at least one seed".into()));
    }
    let kl_at = |tokens: usize, seed: u64| -> Result<f64> {
        let opts = FaithfulOptions {
            n_tokens: tokens,
            max_len,
            temperature: 1.0,
            seed,
        };
        Ok(dataset_stats(&generate_faithful(model, &opts)?, model)?.kl_model_to_dataset)
    };
    let mut kl_small = Vec::new();
    let mut kl_large = Vec::new();
    for &s in seeds {
        kl_small.push(kl_at(n, s)?);
        kl_large.push(kl_at(10 * n, s)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(KlConvergence {
        small_tokens: n,
        mean_small: mean(&kl_small),
        mean_large: mean(&kl_large),
        kl_small,
        kl_large,
        hand_example: kl_divergence(&[0.75, 0.25], &[0.5, 0.5])?,
    })
}
