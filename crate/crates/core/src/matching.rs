//! Cross-SAE feature matching by decoder direction.
//!
//! Features of two autoencoders are compared through the cosine similarity of
//! their decoder rows. An optimal one-to-one assignment pairs them up; pairs at
//! or above `tau_s` are shared, the rest orphans.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::sae::TopKSae;

/// Reduced costs within this distance of zero count as tight.
const TIGHT_TOL: f64 = 1e-9;
pub const HISTOGRAM_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    /// `values[j][k]` compares feature `j` of A with feature `k` of B.
    pub values: Matrix,
    pub sae_a_id: String,
    pub sae_b_id: String,
    /// Zero-norm decoder rows in A and B.
    pub degenerate: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLabel {
    Shared,
    Orphan,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub sae_a_id: String,
    pub sae_b_id: String,
    /// Feature `j` of A is paired with feature `assignment[j]` of B.
    pub assignment: Vec<usize>,
    pub matched_similarities: Vec<f64>,
    pub labels: Vec<FeatureLabel>,
    pub sfr: f64,
    pub tau_s: f64,
}

/// Serialized form of a [`MatchResult`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchSummary {
    pub sae_a_id: String,
    pub sae_b_id: String,
    pub tau_s: f64,
    pub sfr: f64,
    /// Counts of matched similarities in 20 equal bins over `[-1, 1]`.
    pub histogram: Vec<usize>,
    pub orphans: Vec<usize>,
}

impl MatchResult {
    pub fn shared_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == FeatureLabel::Shared).count()
    }

    pub fn orphans(&self) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&j| self.labels[j] == FeatureLabel::Orphan)
            .collect()
    }

    pub fn summary(&self) -> MatchSummary {
        MatchSummary {
            sae_a_id: self.sae_a_id.clone(),
            sae_b_id: self.sae_b_id.clone(),
            tau_s: self.tau_s,
            sfr: self.sfr,
            histogram: histogram(&self.matched_similarities),
            orphans: self.orphans(),
        }
    }
}

pub fn histogram(values: &[f64]) -> Vec<usize> {
    let mut bins = vec![0; HISTOGRAM_BINS];
    for &v in values {
        let b = ((v + 1.0) / 2.0 * HISTOGRAM_BINS as f64).floor();
        bins[(b.max(0.0) as usize).min(HISTOGRAM_BINS - 1)] += 1;
    }
    bins
}

fn unit_rows(m: &Matrix) -> (Vec<Vec<f64>>, usize) {
    let mut zero = 0;
    let rows = m
        .iter_rows()
        .map(|r| {
            let n = r.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            if n == 0.0 {
                zero += 1;
                vec![0.0; r.len()]
            } else {
                r.iter().map(|&x| x as f64 / n).collect()
            }
        })
        .collect();
    (rows, zero)
}

fn check_compatible(a: &TopKSae, b: &TopKSae) -> Result<()> {
    if a.a() != b.a() || a.d() != b.d() {
        return Err(Error::Config(format!(
            "cannot match SAEs of shapes (A={}, D={}) and (A={}, D={})",
            a.a(),
            a.d(),
            b.a(),
            b.d()
        )));
    }
    Ok(())
}

/// Cosine similarity of every pair of decoder rows; zero rows score 0.
pub fn similarity_matrix(a: &TopKSae, b: &TopKSae) -> Result<SimilarityMatrix> {
    check_compatible(a, b)?;
    let (ua, za) = unit_rows(&a.w_dec);
    let (ub, zb) = unit_rows(&b.w_dec);
    let d = a.d();
    let data: Vec<f32> = ua
        .par_iter()
        .flat_map_iter(|ra| {
            ub.iter().map(move |rb| {
                let c: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                c.clamp(-1.0, 1.0) as f32
            })
        })
        .collect();
    Ok(SimilarityMatrix {
        values: Matrix::from_vec(d, d, data)?,
        sae_a_id: a.id(),
        sae_b_id: b.id(),
        degenerate: (za, zb),
    })
}

/// Best similarity of each feature of A against all of B.
pub fn mmcs(a: &TopKSae, b: &TopKSae) -> Result<Vec<f64>> {
    let s = similarity_matrix(a, b)?;
    Ok(s.values
        .iter_rows()
        .map(|r| r.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64)))
        .collect())
}

/// Assignment maximizing `Σ_j S[j][π(j)]`; among optimal assignments the
/// lexicographically smallest is returned.
pub fn hungarian(s: &Matrix) -> Result<Vec<usize>> {
    let n = s.rows();
    if s.cols() != n {
        return Err(Error::shape("hungarian", s.shape(), (n, n)));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let cost = |i: usize, j: usize| -(s.get(i, j) as f64);

    // Shortest augmenting paths with potentials, 1-based with a virtual
    // column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }

    // Optimal assignments are exactly the perfect matchings on tight edges.
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| (cost(i, j) - u[i + 1] - v[j + 1]).abs() <= TIGHT_TOL)
                .collect()
        })
        .collect();
    lexicographic_refine(&tight, &mut row_to_col);
    Ok(row_to_col)
}

/// Rewrites a perfect matching on `tight` into the lexicographically smallest
/// one, fixing rows in order.
fn lexicographic_refine(tight: &[Vec<usize>], row_to_col: &mut [usize]) {
    let n = row_to_col.len();
    let mut col_to_row = vec![0usize; n];
    for (i, &j) in row_to_col.iter().enumerate() {
        col_to_row[j] = i;
    }
    for i in 0..n {
        let current = row_to_col[i];
        for &j in tight[i].iter().take_while(|&&j| j < current) {
            let displaced = col_to_row[j];
            if displaced < i {
                continue;
            }
            // Re-seat `displaced` (a later row) so that `current` is freed.
            if let Some(path) = alternating_path(tight, row_to_col, &col_to_row, i, displaced, j, current) {
                for (r, c) in path {
                    row_to_col[r] = c;
                    col_to_row[c] = r;
                }
                row_to_col[i] = j;
                col_to_row[j] = i;
                break;
            }
        }
    }
}

/// Breadth-first search for an alternating path that moves `start` off
/// `blocked` and ends on `target`, using only rows after `fixed`. Returns the
/// new (row, column) pairs.
fn alternating_path(
    tight: &[Vec<usize>],
    row_to_col: &[usize],
    col_to_row: &[usize],
    fixed: usize,
    start: usize,
    blocked: usize,
    target: usize,
) -> Option<Vec<(usize, usize)>> {
    let n = row_to_col.len();
    let mut parent_col: Vec<Option<(usize, usize)>> = vec![None; n];
    let mut seen_row = vec![false; n];
    seen_row[start] = true;
    let mut queue = std::collections::VecDeque::from([start]);
    while let Some(r) = queue.pop_front() {
        for &c in &tight[r] {
            if c == blocked || c == row_to_col[r] || parent_col[c].is_some() {
                continue;
            }
            if c == target {
                let mut path = vec![(r, c)];
                let mut row = r;
                while row != start {
                    let (prev_row, col) = parent_col[row_to_col[row]].expect("path is connected");
                    debug_assert_eq!(col, row_to_col[row]);
                    path.push((prev_row, col));
                    row = prev_row;
                }
                return Some(path);
            }
            let next = col_to_row[c];
            if next <= fixed || seen_row[next] {
                continue;
            }
            parent_col[c] = Some((r, c));
            seen_row[next] = true;
            queue.push_back(next);
        }
    }
    None
}

/// Matches features, labels them against `tau_s` and computes the shared ratio.
pub fn shared_feature_ratio(a: &TopKSae, b: &TopKSae, tau_s: f64) -> Result<MatchResult> {
    if !(-1.0..=1.0).contains(&tau_s) {
        return Err(Error::Param(format!("tau_s {tau_s} outside [-1, 1]")));
    }
    let s = similarity_matrix(a, b)?;
    let assignment = hungarian(&s.values)?;
    let matched: Vec<f64> = assignment
        .iter()
        .enumerate()
        .map(|(j, &k)| s.values.get(j, k) as f64)
        .collect();
    Ok(classify(s.sae_a_id, s.sae_b_id, assignment, matched, tau_s))
}

pub(crate) fn classify(
    sae_a_id: String,
    sae_b_id: String,
    assignment: Vec<usize>,
    matched_similarities: Vec<f64>,
    tau_s: f64,
) -> MatchResult {
    let labels: Vec<FeatureLabel> = matched_similarities
        .iter()
        .map(|&m| if m >= tau_s { FeatureLabel::Shared } else { FeatureLabel::Orphan })
        .collect();
    let shared = labels.iter().filter(|&&l| l == FeatureLabel::Shared).count();
    let sfr = shared as f64 / labels.len().max(1) as f64;
    MatchResult {
        sae_a_id,
        sae_b_id,
        assignment,
        matched_similarities,
        labels,
        sfr,
        tau_s,
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::math::{cosine, Rng};
    use crate::sae::SaeConfig;

    fn sae_with_decoder(rows: &[&[f32]]) -> TopKSae {
        let d = rows.len();
        let a = rows[0].len();
        let mut sae = TopKSae::zeros(SaeConfig { a, d, k: 1 }).unwrap();
        sae.w_dec = Matrix::from_rows(rows).unwrap();
        sae
    }

    fn random_sae(a: usize, d: usize, seed: u64) -> TopKSae {
        TopKSae::new(SaeConfig { a, d, k: 1 }, seed).unwrap()
    }

    fn permute_features(sae: &TopKSae, perm: &[usize]) -> TopKSae {
        let mut out = sae.clone();
        out.w_dec = sae.w_dec.select_rows(perm);
        out
    }

    fn total(s: &Matrix, pi: &[usize]) -> f64 {
        pi.iter().enumerate().map(|(j, &k)| s.get(j, k) as f64).sum()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for first in 0..n {
            for rest in permutations(n - 1) {
                let mut p = vec![first];
                p.extend(rest.into_iter().map(|x| if x >= first { x + 1 } else { x }));
                out.push(p);
            }
        }
        out
    }

    /// Lexicographically first permutation with the largest total.
    fn brute_force(s: &Matrix) -> (Vec<usize>, f64) {
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        for p in permutations(s.rows()) {
            let t = total(s, &p);
            if t > best.1 {
                best = (p, t);
            }
        }
        best
    }

    fn random_square(n: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_vec(n, n, (0..n * n).map(|_| rng.uniform_f32(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn hand_examples() {
        let s = sae_with_decoder(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let t = sae_with_decoder(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let m = similarity_matrix(&s, &t).unwrap();
        assert_eq!(m.values.data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(mmcs(&s, &t).unwrap(), vec![1.0, 1.0]);
        assert_eq!(hungarian(&m.values).unwrap(), vec![1, 0]);

        let s = Matrix::from_rows(&[[0.9f32, 0.1, 0.2], [0.3, 0.8, 0.1], [0.2, 0.4, 0.7]]).unwrap();
        let pi = hungarian(&s).unwrap();
        assert_eq!(pi, vec![0, 1, 2]);
        assert!((total(&s, &pi) - 2.4).abs() < 1e-6);
    }

    #[test]
    fn self_similarity_and_permutation() {
        let a = random_sae(6, 12, 1);
        let s = similarity_matrix(&a, &a).unwrap();
        for j in 0..12 {
            assert!((s.values.get(j, j) - 1.0).abs() < 1e-6);
        }
        let perm = [3, 0, 7, 1, 2, 11, 4, 5, 6, 8, 10, 9];
        let b = permute_features(&a, &perm);
        let sb = similarity_matrix(&a, &b).unwrap();
        for j in 0..12 {
            for (k, &p) in perm.iter().enumerate() {
                assert_eq!(sb.values.get(j, k), s.values.get(j, p));
            }
        }
        let pi = hungarian(&sb.values).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            assert_eq!(pi[p], k);
        }
    }

    #[test]
    fn matches_pairwise_cosine() {
        let a = random_sae(5, 5, 2);
        let b = random_sae(5, 5, 3);
        let s = similarity_matrix(&a, &b).unwrap();
        let m = mmcs(&a, &b).unwrap();
        for j in 0..5 {
            let mut best = f64::NEG_INFINITY;
            for k in 0..5 {
                let c = cosine(a.w_dec.row(j), b.w_dec.row(k)).unwrap().value;
                assert!((s.values.get(j, k) as f64 - c).abs() < 1e-6);
                best = best.max(s.values.get(j, k) as f64);
            }
            assert_eq!(m[j], best);
        }
    }

    #[test]
    fn hungarian_equals_brute_force_on_random_7x7() {
        let mut rng = Rng::new(11);
        for _ in 0..100 {
            let s = random_square(7, &mut rng);
            let pi = hungarian(&s).unwrap();
            let (best, best_total) = brute_force(&s);
            assert_eq!(total(&s, &pi), best_total);
            assert_eq!(pi, best);
        }
    }

    #[test]
    fn ties_resolve_to_lexicographic_smallest() {
        let s = Matrix::from_vec(3, 3, vec![1.0; 9]).unwrap();
        assert_eq!(hungarian(&s).unwrap(), vec![0, 1, 2]);
        let s = Matrix::from_rows(&[[0.5f32, 0.5, 0.0], [0.5, 0.5, 0.0], [0.0, 0.0, 0.5]]).unwrap();
        assert_eq!(hungarian(&s).unwrap(), vec![0, 1, 2]);
        let s = Matrix::zeros(4, 4);
        assert_eq!(hungarian(&s).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn hungarian_rejects_non_square() {
        assert!(hungarian(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn sfr_counting_and_labels() {
        let r = classify("a".into(), "b".into(), vec![0, 1, 2], vec![0.9, 0.8, 0.65], 0.7);
        assert_eq!(r.sfr, 2.0 / 3.0);
        assert_eq!(r.orphans(), vec![2]);
        let summary = r.summary();
        assert_eq!(summary.histogram.iter().sum::<usize>(), 3);
        assert_eq!(summary.histogram[19], 1);
        assert_eq!(summary.histogram[18], 1);
        assert_eq!(summary.histogram[16], 1);
    }

    #[test]
    fn self_match_is_complete() {
        let a = random_sae(8, 32, 4);
        let r = shared_feature_ratio(&a, &a, 0.7).unwrap();
        assert_eq!(r.sfr, 1.0);
        assert_eq!(r.assignment, (0..32).collect::<Vec<_>>());
    }

    #[test]
    fn dead_rows_are_orphans() {
        let mut a = random_sae(4, 8, 5);
        a.w_dec.row_mut(3).iter_mut().for_each(|x| *x = 0.0);
        let s = similarity_matrix(&a, &a).unwrap();
        assert_eq!(s.degenerate, (1, 1));
        let r = shared_feature_ratio(&a, &a, 0.7).unwrap();
        assert_eq!(r.labels[3], FeatureLabel::Orphan);
        assert_eq!(r.sfr, 7.0 / 8.0);
    }

    #[test]
    fn incompatible_inputs() {
        let a = random_sae(4, 8, 1);
        let b = random_sae(4, 12, 1);
        assert!(matches!(similarity_matrix(&a, &b), Err(Error::Config(_))));
        assert!(matches!(shared_feature_ratio(&a, &a, 1.5), Err(Error::Param(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn matching_invariants(seed in any::<u64>()) {
            let a = random_sae(6, 16, seed);
            let b = random_sae(6, 16, seed.wrapping_add(1));
            let s = similarity_matrix(&a, &b).unwrap();
            let r = shared_feature_ratio(&a, &b, 0.3).unwrap();
            let mut sorted = r.assignment.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..16).collect::<Vec<_>>());

            let best = total(&s.values, &r.assignment);
            let mut rng = Rng::new(seed);
            for _ in 0..1000 {
                let mut p: Vec<usize> = (0..16).collect();
                rng.shuffle(&mut p);
                prop_assert!(best >= total(&s.values, &p) - 1e-9);
            }

            let m = mmcs(&a, &b).unwrap();
            for (mj, sj) in m.iter().zip(&r.matched_similarities) {
                prop_assert!(mj >= sj);
            }

            let mut last = 1.0;
            for tau in [-1.0, -0.5, 0.0, 0.3, 0.5, 0.7, 0.9, 1.0] {
                let sfr = shared_feature_ratio(&a, &b, tau).unwrap().sfr;
                prop_assert!(sfr <= last);
                last = sfr;
            }

            let mut perm: Vec<usize> = (0..16).collect();
            rng.shuffle(&mut perm);
            let pa = permute_features(&a, &perm);
            let pb = permute_features(&b, &perm);
            prop_assert_eq!(shared_feature_ratio(&pa, &pb, 0.3).unwrap().sfr, r.sfr);
        }
    }
}
