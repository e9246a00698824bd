//! Dense numeric substrate: tensors, a reverse-mode tape, vector helpers and
//! a central-difference gradient oracle.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP};
pub use tape::{Gradients, Tape, Var, ZERO_NORM};
pub use tensor::Tensor;

pub(crate) use tape::{softmax_rows_of, topk_softmax_rows_of};

use crate::error::{Error, Result};

/// Floor applied to `q` inside the logarithm of [`kl_divergence`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on the unit-sum check of [`kl_divergence`] inputs.
pub const DISTRIBUTION_TOL: f64 = 1e-6;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n <= ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na <= ZERO_NORM || nb <= ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Softmax of `v / temperature`, shifted by the maximum for stability.
pub fn softmax(v: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    let max = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = v.iter().map(|&x| ((x - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `KL(p || q) = sum p_i ln(p_i / max(q_i, PROB_FLOOR))`, with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(format!(
            "distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    for dist in [p, q] {
        let s: f64 = dist.iter().sum();
        if (s - 1.0).abs() > DISTRIBUTION_TOL || dist.iter().any(|&x| x < 0.0) {
            return Err(Error::NotADistribution(s));
        }
    }
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(PROB_FLOOR).ln()))
        .sum();
    Ok(kl.max(0.0))
}

#[cfg(test)]
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
        assert_eq!(l2_normalize(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(l2_normalize(&[0.0, 0.0]), Err(Error::ZeroVector));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((c - 0.7071).abs() < 1e-4);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector));
    }

    #[test]
    fn softmax_examples() {
        for t in [0.01, 1.0, 50.0] {
            let s = softmax(&[2.5, 2.5, 2.5], t).unwrap();
            assert!(s.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));
        }
        let s = softmax(&[2.0, 1.0], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((s[0] - e * e / (e * e + e)).abs() < 1e-12);
        assert!((s[0] - 0.7311).abs() < 1e-4 && (s[1] - 0.2689).abs() < 1e-4);
        let sharp = softmax(&[2.0, 1.0], 1e-3).unwrap();
        assert!(sharp[0] > 1.0 - 1e-12);
        assert_eq!(softmax(&[1.0], 0.0), Err(Error::NonPositiveTemperature(0.0)));
        assert!(softmax(&[1.0], -1.0).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        let a = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((a - 2f64.ln()).abs() < 1e-12);
        assert!((a - 0.6931).abs() < 1e-4);
        // 0.5 ln(0.5/0.9) + 0.5 ln(0.5/0.1)
        let b = kl_divergence(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        let by_hand = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((b - by_hand).abs() < 1e-12);
        assert!((b - 0.5108).abs() < 1e-4);
        assert!(matches!(
            kl_divergence(&[0.7, 0.7], &[0.5, 0.5]),
            Err(Error::NotADistribution(_))
        ));
    }

    #[test]
    fn kl_floor_keeps_zero_q_finite() {
        let v = kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(v.is_finite());
        assert!((v - (0.5 * 0.5f64.ln() + 0.5 * (0.5f64 / PROB_FLOOR).ln())).abs() < 1e-9);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(0.01f64..10.0, n).prop_map(|v| {
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            })
        }

        proptest! {
            #[test]
            fn softmax_sums_to_one(v in prop::collection::vec(-50.0f64..50.0, 1..12),
                                   log_t in -3.0f64..3.0) {
                let t = 10f64.powf(log_t);
                let s = softmax(&v, t).unwrap();
                prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(s.iter().all(|&x| x >= 0.0));
            }

            #[test]
            fn softmax_shift_invariant(v in prop::collection::vec(-5.0f64..5.0, 1..8), c in -100.0f64..100.0) {
                let a = softmax(&v, 1.0).unwrap();
                let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
                let b = softmax(&shifted, 1.0).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }

            #[test]
            fn gibbs_inequality((p, q) in (2usize..8).prop_flat_map(|n| (distribution(n), distribution(n)))) {
                prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
                prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
            }

            #[test]
            fn cosine_bounded(a in prop::collection::vec(-10.0f64..10.0, 4),
                              b in prop::collection::vec(-10.0f64..10.0, 4)) {
                prop_assume!(norm(&a) > 1e-6 && norm(&b) > 1e-6);
                let c = cosine_sim(&a, &b).unwrap();
                prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&c));
                prop_assert!((c - cosine_sim(&b, &a).unwrap()).abs() < 1e-15);
            }
        }
    }
}
