use proptest::prelude::*;

use super::*;
use crate::data::ActivationStore;
use crate::math::{Matrix, Rng};

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal_f32()).collect()).unwrap()
}

fn random_sae(a: usize, d: usize, k: usize, seed: u64) -> TopKSae {
    let mut sae = TopKSae::new(SaeConfig { a, d, k }, seed).unwrap();
    let mut rng = Rng::new(seed ^ 0xabc);
    sae.b_enc.iter_mut().for_each(|b| *b = 0.1 * rng.normal_f32());
    sae.b_dec.iter_mut().for_each(|b| *b = 0.1 * rng.normal_f32());
    sae
}

fn store(acts: Matrix) -> ActivationStore {
    ActivationStore {
        acts,
        layer: 0,
        model_id: "test".into(),
        dataset_tag: "synthetic".into(),
    }
}

/// Full-sort TopK: order all entries by value (then index) and keep the first k.
fn sort_topk(z: &Matrix, k: usize) -> Matrix {
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for r in 0..z.rows() {
        let mut idx: Vec<usize> = (0..z.cols()).collect();
        idx.sort_by(|&a, &b| z.get(r, b).partial_cmp(&z.get(r, a)).unwrap().then(a.cmp(&b)));
        for &j in &idx[..k] {
            out.set(r, j, z.get(r, j));
        }
    }
    out
}

fn explained_variance(x: &Matrix, xh: &Matrix) -> f64 {
    let n = x.rows() as f64;
    let mut resid = 0.0;
    let mut total = 0.0;
    for c in 0..x.cols() {
        let col = x.column(c);
        let mean = col.iter().map(|&v| v as f64).sum::<f64>() / n;
        for r in 0..x.rows() {
            resid += (x.get(r, c) as f64 - xh.get(r, c) as f64).powi(2);
            total += (x.get(r, c) as f64 - mean).powi(2);
        }
    }
    1.0 - resid / total
}

#[test]
fn topk_hand_example() {
    let mut sae = TopKSae::zeros(SaeConfig { a: 3, d: 3, k: 2 }).unwrap();
    sae.w_enc = Matrix::identity(3);
    let f = sae.encode(&Matrix::row_vector(&[3.0, 1.0, 2.0])).unwrap();
    assert_eq!(f.data(), &[3.0, 0.0, 2.0]);
}

#[test]
fn ties_go_to_lowest_index() {
    let mut scratch = Vec::new();
    assert_eq!(topk_indices(&[1.0, 2.0, 2.0, 2.0], 2, &mut scratch), vec![1, 2]);
    assert_eq!(topk_indices(&[0.0, 0.0, 0.0], 1, &mut scratch), vec![0]);
    assert_eq!(topk_indices(&[-5.0, -1.0, -3.0], 2, &mut scratch), vec![1, 2]);
}

#[test]
fn full_k_keeps_every_pre_activation() {
    let mut rng = Rng::new(1);
    let sae = random_sae(6, 10, 10, 2);
    let x = random_matrix(5, 6, &mut rng);
    assert_eq!(sae.encode(&x).unwrap(), sae.pre_activations(&x).unwrap());
}

#[test]
fn encode_matches_full_sort_oracle() {
    let mut rng = Rng::new(3);
    for k in [1, 3, 7, 16] {
        let sae = random_sae(8, 16, k, k as u64);
        let x = random_matrix(20, 8, &mut rng);
        let z = sae.pre_activations(&x).unwrap();
        assert_eq!(sae.encode(&x).unwrap(), sort_topk(&z, k));
    }
}

#[test]
fn exactly_k_nonzeros() {
    let mut rng = Rng::new(4);
    let sae = random_sae(8, 32, 5, 5);
    let f = sae.encode(&random_matrix(50, 8, &mut rng)).unwrap();
    for r in 0..f.rows() {
        assert_eq!(f.row(r).iter().filter(|&&v| v != 0.0).count(), 5);
    }
}

#[test]
fn shape_errors() {
    let sae = random_sae(4, 8, 2, 0);
    assert!(sae.encode(&Matrix::zeros(2, 5)).is_err());
    assert!(sae.decode(&Matrix::zeros(2, 4)).is_err());
    assert!(sae.encode_decomposed_rows(&Matrix::zeros(1, 3)).is_err());
    assert!(sae.decode_decomposed_cols(&Matrix::zeros(1, 3)).is_err());
    assert!(TopKSae::new(SaeConfig { a: 4, d: 3, k: 1 }, 0).is_err());
    assert!(TopKSae::new(SaeConfig { a: 4, d: 8, k: 9 }, 0).is_err());
}

#[test]
fn decode_special_cases() {
    let sae = random_sae(4, 8, 2, 6);
    let x = sae.decode(&Matrix::zeros(3, 8)).unwrap();
    for r in 0..3 {
        assert_eq!(x.row(r), sae.b_dec.as_slice());
    }
    let mut onehot = Matrix::zeros(1, 8);
    onehot.set(0, 5, 1.0);
    let x = sae.decode(&onehot).unwrap();
    for i in 0..4 {
        assert_eq!(x.get(0, i), sae.w_dec.get(5, i) + sae.b_dec[i]);
    }
    let rows = sae.decode_decomposed_rows(&onehot).unwrap();
    assert_eq!(rows, x);
    let zero_rows = sae.decode_decomposed_rows(&Matrix::zeros(2, 8)).unwrap();
    let zero_cols = sae.decode_decomposed_cols(&Matrix::zeros(2, 8)).unwrap();
    assert_eq!(zero_rows.row(1), sae.b_dec.as_slice());
    assert_eq!(zero_cols.row(0), sae.b_dec.as_slice());
}

#[test]
fn decode_matches_triple_loop() {
    let mut rng = Rng::new(7);
    let sae = random_sae(5, 9, 3, 8);
    let f = random_matrix(4, 9, &mut rng);
    let got = sae.decode(&f).unwrap();
    for r in 0..4 {
        for i in 0..5 {
            let mut s = sae.b_dec[i];
            for j in 0..9 {
                s += f.get(r, j) * sae.w_dec.get(j, i);
            }
            assert!((got.get(r, i) - s).abs() < 1e-6);
        }
    }
}

#[test]
fn degenerate_decomposition_sizes() {
    let mut rng = Rng::new(9);
    for (a, d) in [(1, 4), (1, 1)] {
        let sae = random_sae(a, d, 1, 3);
        let x = random_matrix(6, a, &mut rng);
        let f = sae.encode(&x).unwrap();
        assert_eq!(sae.encode_decomposed_rows(&x).unwrap(), f);
        assert_eq!(sae.encode_decomposed_cols(&x).unwrap(), f);
        let xh = sae.decode(&f).unwrap();
        assert_eq!(sae.decode_decomposed_rows(&f).unwrap(), xh);
        assert_eq!(sae.decode_decomposed_cols(&f).unwrap(), xh);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decomposed_forms_agree(a in 1usize..24, extra in 0usize..40, kf in 0.0f64..1.0, seed in any::<u64>()) {
        let d = a + extra;
        let k = 1 + ((d - 1) as f64 * kf) as usize;
        let sae = random_sae(a, d, k, seed);
        let mut rng = Rng::new(seed.wrapping_add(1));
        let x = random_matrix(3, a, &mut rng);
        let f = sae.encode(&x).unwrap();
        prop_assert!(sae.encode_decomposed_rows(&x).unwrap().max_abs_diff(&f).unwrap() <= 1e-5);
        prop_assert!(sae.encode_decomposed_cols(&x).unwrap().max_abs_diff(&f).unwrap() <= 1e-5);
        let g = random_matrix(3, d, &mut rng);
        let xh = sae.decode(&g).unwrap();
        prop_assert!(sae.decode_decomposed_rows(&g).unwrap().max_abs_diff(&xh).unwrap() <= 1e-5);
        prop_assert!(sae.decode_decomposed_cols(&g).unwrap().max_abs_diff(&xh).unwrap() <= 1e-5);
        prop_assert_eq!(sae.reconstruct(&x).unwrap(), sae.decode(&f).unwrap());
    }

    #[test]
    fn at_most_k_nonzeros(seed in any::<u64>(), k in 1usize..12) {
        let sae = random_sae(6, 12, k, seed);
        let x = random_matrix(4, 6, &mut Rng::new(seed));
        let f = sae.encode(&x).unwrap();
        for r in 0..4 {
            prop_assert!(f.row(r).iter().filter(|&&v| v != 0.0).count() <= k);
        }
    }
}

#[test]
fn loss_special_cases() {
    let cfg = SaeConfig { a: 4, d: 4, k: 4 };
    let mut sae = TopKSae::zeros(cfg).unwrap();
    sae.w_enc = Matrix::identity(4);
    sae.w_dec = Matrix::identity(4);
    assert_eq!(sae.loss(&Matrix::identity(4)).unwrap(), 0.0);
    let zero = TopKSae::zeros(cfg).unwrap();
    let x = Matrix::from_rows(&[[0.6f32, 0.8, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]).unwrap();
    assert!((zero.loss(&x).unwrap() - 0.25).abs() < 1e-7);
}

#[test]
fn loss_matches_recomposition() {
    let mut rng = Rng::new(11);
    let sae = random_sae(6, 12, 3, 12);
    let x = random_matrix(7, 6, &mut rng);
    let xh = sae.decode(&sae.encode(&x).unwrap()).unwrap();
    let mut s = 0.0f64;
    for (a, b) in x.data().iter().zip(xh.data()) {
        s += (*a as f64 - *b as f64).powi(2);
    }
    assert!((sae.loss(&x).unwrap() - s / 42.0).abs() < 1e-9);
}

/// Loss in f64 with a given TopK mask; `None` when the mask would change.
fn oracle_loss(sae: &SaeOracle, x: &Matrix, mask: &[Vec<usize>]) -> Option<f64> {
    let (a, d) = (sae.a, sae.d);
    let mut total = 0.0;
    for r in 0..x.rows() {
        let z: Vec<f64> = (0..d)
            .map(|j| (0..a).map(|i| x.get(r, i) as f64 * sae.w_enc[i * d + j]).sum::<f64>() + sae.b_enc[j])
            .collect();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&p, &q| z[q].partial_cmp(&z[p]).unwrap().then(p.cmp(&q)));
        let mut kept = order[..sae.k].to_vec();
        kept.sort_unstable();
        if kept != mask[r] {
            return None;
        }
        for i in 0..a {
            let xh: f64 = kept.iter().map(|&j| z[j] * sae.w_dec[j * a + i]).sum::<f64>() + sae.b_dec[i];
            total += (xh - x.get(r, i) as f64).powi(2);
        }
    }
    Some(total / (x.rows() * a) as f64)
}

#[derive(Clone)]
struct SaeOracle {
    a: usize,
    d: usize,
    k: usize,
    w_enc: Vec<f64>,
    b_enc: Vec<f64>,
    w_dec: Vec<f64>,
    b_dec: Vec<f64>,
}

impl SaeOracle {
    fn from(sae: &TopKSae) -> Self {
        let up = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        Self {
            a: sae.a(),
            d: sae.d(),
            k: sae.k(),
            w_enc: up(sae.w_enc.data()),
            b_enc: up(&sae.b_enc),
            w_dec: up(sae.w_dec.data()),
            b_dec: up(&sae.b_dec),
        }
    }

    fn tensor(&mut self, t: usize) -> &mut Vec<f64> {
        match t {
            0 => &mut self.w_enc,
            1 => &mut self.b_enc,
            2 => &mut self.w_dec,
            _ => &mut self.b_dec,
        }
    }
}

#[test]
fn gradients_match_f64_central_differences() {
    let (a, d, k) = (128, 256, 16);
    let sae = random_sae(a, d, k, 21);
    let mut rng = Rng::new(22);
    let x = random_matrix(12, a, &mut rng);
    let (_, g) = sae.loss_and_grad(&x).unwrap();
    let codes = sae.encode_sparse(&x).unwrap();
    let mask: Vec<Vec<usize>> = (0..x.rows())
        .map(|r| codes.row(r).0.iter().map(|&j| j as usize).collect())
        .collect();
    let mut active: Vec<usize> = mask.concat();
    active.sort_unstable();
    active.dedup();
    let base = SaeOracle::from(&sae);
    let grads: [&[f32]; 4] = [g.w_enc.data(), &g.b_enc, g.w_dec.data(), &g.b_dec];
    let h = 1e-3;
    for (t, grad) in grads.iter().enumerate() {
        let mut checked = 0;
        let mut tries = 0;
        while checked < 100 {
            tries += 1;
            assert!(tries < 2000, "tensor {t}: TopK mask too unstable to probe");
            let feat = active[rng.below(active.len())];
            let idx = match t {
                0 => rng.below(a) * d + feat,
                1 => feat,
                2 => feat * a + rng.below(a),
                _ => rng.below(a),
            };
            let mut plus = base.clone();
            plus.tensor(t)[idx] += h;
            let mut minus = base.clone();
            minus.tensor(t)[idx] -= h;
            let (Some(lp), Some(lm)) = (oracle_loss(&plus, &x, &mask), oracle_loss(&minus, &x, &mask)) else {
                continue;
            };
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = grad[idx] as f64;
            let scale = analytic.abs().max(numeric.abs());
            assert!(
                (analytic - numeric).abs() <= 1e-3 * scale + 1e-12,
                "tensor {t} idx {idx}: analytic {analytic} numeric {numeric}"
            );
            checked += 1;
        }
    }
}

#[test]
fn zero_input_gives_zero_encoder_gradient() {
    let sae = random_sae(6, 12, 3, 30);
    let (_, g) = sae.loss_and_grad(&Matrix::zeros(4, 6)).unwrap();
    assert!(g.w_enc.data().iter().all(|&v| v == 0.0));
}

#[test]
fn duplicated_rows_keep_mean_gradient() {
    let mut rng = Rng::new(31);
    let sae = random_sae(6, 12, 3, 32);
    let x = random_matrix(1, 6, &mut rng);
    let xx = Matrix::vstack(&[x.clone(), x.clone(), x.clone()]).unwrap();
    let (l1, g1) = sae.loss_and_grad(&x).unwrap();
    let (l3, g3) = sae.loss_and_grad(&xx).unwrap();
    assert!((l1 - l3).abs() < 1e-12);
    assert!(g1.w_enc.max_abs_diff(&g3.w_enc).unwrap() < 1e-6);
    assert!(g1.w_dec.max_abs_diff(&g3.w_dec).unwrap() < 1e-6);
    for (p, q) in g1.b_dec.iter().zip(&g3.b_dec).chain(g1.b_enc.iter().zip(&g3.b_enc)) {
        assert!((p - q).abs() < 1e-6);
    }
}

fn subspace_data(rows: usize, a: usize, dim: usize, seed: u64) -> Matrix {
    let mut rng = Rng::new(seed);
    let basis = random_matrix(dim, a, &mut rng);
    let coeffs = random_matrix(rows, dim, &mut rng);
    coeffs.matmul(&basis).unwrap()
}

fn train_cfg(seed: u64, steps: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        steps,
        batch_size: 64,
        seed,
        dead_feature_window: 100,
    }
}

#[test]
fn learns_a_low_dimensional_subspace() {
    let x = subspace_data(4000, 16, 3, 40);
    let acts = store(x.clone());
    let (sae, report) = train_sae(&acts, SaeConfig { a: 16, d: 8 * 2, k: 3 }, &train_cfg(1, 1500)).unwrap();
    let ev = explained_variance(&x, &sae.reconstruct(&x).unwrap());
    assert!(ev > 0.95, "explained variance {ev}");
    assert!(report.loss_curve.last().unwrap() < &report.loss_curve[0]);
    assert_eq!(sae.dataset_tag, "synthetic");
    for r in 0..sae.d() {
        let n: f64 = sae.w_dec.row(r).iter().map(|&v| (v as f64).powi(2)).sum();
        assert!((n - 1.0).abs() < 1e-5);
    }
}

#[test]
fn training_is_deterministic_and_seed_sensitive() {
    let x = subspace_data(2000, 8, 8, 41);
    let acts = store(x);
    let cfg = SaeConfig { a: 8, d: 32, k: 4 };
    let tc = |seed| TrainConfig {
        lr: 3e-3,
        steps: 2000,
        ..train_cfg(seed, 0)
    };
    let (a, ra) = train_sae(&acts, cfg, &tc(42)).unwrap();
    let (b, _) = train_sae(&acts, cfg, &tc(42)).unwrap();
    let (c, rc) = train_sae(&acts, cfg, &tc(49)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.w_dec, c.w_dec);
    let tail = |r: &TrainReport| r.loss_curve[1800..].iter().sum::<f64>() / 200.0;
    let (la, lc) = (tail(&ra), tail(&rc));
    assert!((la - lc).abs() <= 0.2 * la.max(lc), "final losses {la} vs {lc}");
}

#[test]
fn moving_average_loss_does_not_increase() {
    let x = subspace_data(3000, 8, 4, 43);
    let (_, report) = train_sae(&store(x), SaeConfig { a: 8, d: 32, k: 4 }, &train_cfg(5, 600)).unwrap();
    let means: Vec<f64> = report
        .loss_curve
        .chunks(100)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    for w in means.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "windowed means {means:?}");
    }
}

#[test]
fn width_mismatch_is_a_config_error() {
    let acts = store(Matrix::zeros(4, 5));
    let err = train_sae(&acts, SaeConfig { a: 6, d: 12, k: 2 }, &train_cfg(0, 1)).unwrap_err();
    assert!(matches!(err, crate::Error::Config(_)));
}

#[test]
fn dead_features_are_reported() {
    let mut x = subspace_data(500, 8, 2, 44);
    x.scale(0.1);
    let (sae, report) = train_sae(&store(x), SaeConfig { a: 8, d: 64, k: 1 }, &train_cfg(7, 300)).unwrap();
    assert!(!report.dead_features.is_empty());
    assert!(report.dead_features.iter().all(|&j| j < sae.d()));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sae.json");
    let x = subspace_data(200, 8, 3, 45);
    let (sae, _) = train_sae(&store(x.clone()), SaeConfig { a: 8, d: 16, k: 3 }, &train_cfg(3, 50)).unwrap();
    sae.save(&path).unwrap();
    let back = TopKSae::load(&path).unwrap();
    assert_eq!(back, sae);
    assert_eq!(back.loss(&x).unwrap().to_bits(), sae.loss(&x).unwrap().to_bits());
}
