//! Vector kernels: softmax, cosine similarity, argmax.

use crate::error::{Error, Result};

/// Softmax of `logits / temperature`, computed after subtracting the max.
pub fn softmax(logits: &[f32], temperature: f32) -> Result<Vec<f32>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Param(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::Input("softmax of an empty vector".into()));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Input("softmax of non-finite logits".into()));
    }
    Ok(softmax_unchecked(logits, temperature))
}

pub(crate) fn softmax_unchecked(logits: &[f32], temperature: f32) -> Vec<f32> {
    let t = temperature as f64;
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&x| ((x as f64 - max) / t).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / sum) as f32).collect()
}

/// Natural-log softmax at temperature 1, in `f64`.
pub fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = logits
        .iter()
        .map(|&x| (x as f64 - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits.iter().map(|&x| x as f64 - lse).collect()
}

/// Cosine similarity with an explicit flag for zero-norm inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// Set when either vector has zero norm; `value` is then 0.
    pub degenerate: bool,
}

pub fn cosine(u: &[f32], v: &[f32]) -> Result<Cosine> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine", (1, u.len()), (1, v.len())));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Ok(Cosine {
            value: 0.0,
            degenerate: true,
        });
    }
    let d = super::dot(u, v);
    Ok(Cosine {
        value: (d / (nu * nv)).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Euclidean norm in `f64`.
pub fn norm(v: &[f32]) -> f64 {
    super::dot(v, v).sqrt()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_symmetric_pair() {
        assert_eq!(softmax(&[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        assert_eq!(softmax(&[1000.0, 1000.0], 1.0).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_ln3() {
        let p = softmax(&[3f32.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-6);
        assert!((p[1] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        assert!(matches!(softmax(&[1.0], 0.0), Err(Error::Param(_))));
        assert!(matches!(softmax(&[1.0], -1.0), Err(Error::Param(_))));
    }

    #[test]
    fn log_softmax_matches_softmax() {
        let l = [0.3f32, -1.2, 2.5];
        let p = softmax(&l, 1.0).unwrap();
        for (lp, p) in log_softmax(&l).iter().zip(p) {
            assert!((lp.exp() - p as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_cases() {
        let v = [0.3f32, -2.0, 1.0];
        assert!((cosine(&v, &v).unwrap().value - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap().value, 0.0);
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap().value;
        assert!((c - 0.7071).abs() < 1e-4);
    }

    #[test]
    fn cosine_zero_vector_is_flagged() {
        let c = cosine(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(c.value, 0.0);
        assert!(c.degenerate);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn argmax_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in prop::collection::vec(-50.0f32..50.0, 1..40), t in prop::sample::select(vec![0.5f32, 1.0, 2.0])) {
            let p = softmax(&logits, t).unwrap();
            let s: f64 = p.iter().map(|&x| x as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            u in prop::collection::vec(-10.0f32..10.0, 4),
            v in prop::collection::vec(-10.0f32..10.0, 4),
            alpha in 0.01f32..100.0,
        ) {
            prop_assume!(norm(&u) > 1e-3 && norm(&v) > 1e-3);
            let uv = cosine(&u, &v).unwrap().value;
            prop_assert!((uv - cosine(&v, &u).unwrap().value).abs() < 1e-12);
            let scaled: Vec<f32> = u.iter().map(|x| x * alpha).collect();
            prop_assert!((cosine(&scaled, &v).unwrap().value - uv).abs() < 1e-6);
            prop_assert!((-1.0..=1.0).contains(&uv));
        }
    }
}
