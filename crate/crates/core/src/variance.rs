//! Variance analysis of the importance-weighted sparsified gradient.
//!
//! Coordinates keep their value (scaled by `1/p_i`) with probability `p_i`
//! and are zeroed otherwise, which makes the estimator unbiased with second
//! moment `Σ g_i²/p_i`. With the top-`k` magnitudes kept surely and the tail
//! kept with probability `p_i = r|g_i|`, requiring the second moment to equal
//! `(1+ε) Σ g_i²` fixes
//!
//! ```text
//! r = Σ_{i>k} |g_i| / ((1+ε) Σ_i g_i² − Σ_{i≤k} g_i²)
//! ```
//!
//! and the expected number of transmitted coordinates `Σ p_i` can then be
//! compared against `k(1+ε)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;

pub const KEEP_RATIO_EQ: &str = "keep-ratio equation r = Σ_tail|g| / ((1+ε)Σg² − Σ_topk g²)";
pub const SECOND_MOMENT_EQ: &str = "second-moment formula Σ g²/p";
pub const BOUND_EQ: &str = "transmission bound Σp ≤ k(1+ε)";

/// Indices sorted by descending `|g|`, ties by ascending index.
pub fn magnitude_order(g: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..g.len()).collect();
    idx.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b)));
    idx
}

fn check_vector(g: &[f64]) -> Result<()> {
    if g.is_empty() {
        return Err(Error::Input("gradient vector is empty".into()));
    }
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::Input(format!("gradient entry {i} is not finite")));
    }
    Ok(())
}

fn top_k_flags(g: &[f64], k: usize) -> Vec<bool> {
    let mut top = vec![false; g.len()];
    for &i in magnitude_order(g).iter().take(k) {
        top[i] = true;
    }
    top
}

/// Keep probabilities in original index order: 1 for the top-`k`
/// magnitudes and for zero entries, `min(1, r|g_i|)` otherwise.
pub fn keep_probs(g: &[f64], k: usize, r: f64) -> Result<Vec<f64>> {
    check_vector(g)?;
    if k > g.len() {
        return Err(Error::Input(format!("k = {k} exceeds vector length {}", g.len())));
    }
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Input(format!("keep ratio r = {r} must be positive and finite")));
    }
    Ok(probs_unchecked(g, k, r))
}

fn probs_unchecked(g: &[f64], k: usize, r: f64) -> Vec<f64> {
    let top = top_k_flags(g, k);
    g.iter()
        .zip(top)
        .map(|(&v, is_top)| if is_top || v == 0.0 { 1.0 } else { (r * v.abs()).min(1.0) })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeepRatio {
    pub r: f64,
    /// Tail indices where `r|g_i| > 1`, i.e. the clamp in `keep_probs` is
    /// active and the closed form no longer describes the probabilities.
    pub violations: Vec<usize>,
}

impl KeepRatio {
    pub fn constraint_satisfied(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn solve_r(g: &[f64], k: usize, epsilon: f64) -> Result<KeepRatio> {
    check_vector(g)?;
    if k > g.len() {
        return Err(Error::Input(format!("k = {k} exceeds vector length {}", g.len())));
    }
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::analysis(KEEP_RATIO_EQ, format!("epsilon = {epsilon} must be positive")));
    }
    let top = top_k_flags(g, k);
    let total_sq: f64 = g.iter().map(|v| v * v).sum();
    let top_sq: f64 = g.iter().zip(&top).filter(|(_, &t)| t).map(|(v, _)| v * v).sum();
    let tail_abs: f64 = g.iter().zip(&top).filter(|(_, &t)| !t).map(|(v, _)| v.abs()).sum();
    let denom = (1.0 + epsilon) * total_sq - top_sq;
    if !(denom > 0.0) {
        return Err(Error::analysis(
            KEEP_RATIO_EQ,
            format!("denominator (1+ε)Σg² − Σ_topk g² = {denom} is not positive"),
        ));
    }
    let r = tail_abs / denom;
    let violations = g
        .iter()
        .zip(&top)
        .enumerate()
        .filter(|(_, (v, &t))| !t && r * v.abs() > 1.0)
        .map(|(i, _)| i)
        .collect();
    Ok(KeepRatio { r, violations })
}

/// `Σ g_i² / p_i`.
pub fn estimator_variance(g: &[f64], p: &[f64]) -> Result<f64> {
    if g.len() != p.len() {
        return Err(Error::analysis(SECOND_MOMENT_EQ, format!("{} gradients but {} probabilities", g.len(), p.len())));
    }
    let mut acc = 0.0;
    for (i, (&gi, &pi)) in g.iter().zip(p).enumerate() {
        if gi == 0.0 {
            continue;
        }
        if !(pi > 0.0 && pi <= 1.0) {
            return Err(Error::analysis(
                SECOND_MOMENT_EQ,
                format!("coordinate {i} has g = {gi} but keep probability {pi}"),
            ));
        }
        acc += gi * gi / pi;
    }
    Ok(acc)
}

/// One draw of the sparsified estimator: `g_i / p_i` with probability `p_i`,
/// else 0.
pub fn mc_sparsify(g: &[f64], p: &[f64], seed: u64) -> Result<Vec<f64>> {
    let mut rng = rng_from(seed);
    sparsify_with(g, p, &mut rng)
}

pub fn sparsify_with(g: &[f64], p: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
    if g.len() != p.len() {
        return Err(Error::Input(format!("{} gradients but {} probabilities", g.len(), p.len())));
    }
    Ok(g.iter()
        .zip(p)
        .map(|(&gi, &pi)| {
            if pi >= 1.0 {
                gi
            } else if rng.random::<f64>() < pi {
                gi / pi
            } else {
                0.0
            }
        })
        .collect())
}

/// Monte-Carlo estimate of `E Σ (G_s)_i²` from `samples` draws.
pub fn mc_second_moment(g: &[f64], p: &[f64], samples: usize, seed: u64) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Input("need at least one sample".into()));
    }
    let mut rng = rng_from(seed);
    let mut acc = 0.0;
    for _ in 0..samples {
        acc += sparsify_with(g, p, &mut rng)?.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(acc / samples as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub holds: bool,
    /// `Σ p_i`
    pub lhs: f64,
    /// `k(1+ε)`
    pub rhs: f64,
}

impl BoundCheck {
    pub fn slack(&self) -> f64 {
        self.rhs - self.lhs
    }
}

/// Compares `Σ p_i` with `k(1+ε)` for the probabilities induced by
/// [`solve_r`]. Reports, never asserts: the bound is only expected for
/// `k ≪ m`.
pub fn check_bound(g: &[f64], k: usize, epsilon: f64) -> Result<BoundCheck> {
    let ratio = solve_r(g, k, epsilon)?;
    // r = 0 only when every tail entry is zero, and zero entries keep p = 1
    let p = probs_unchecked(g, k, ratio.r.max(f64::MIN_POSITIVE));
    let lhs: f64 = p.iter().sum();
    let rhs = k as f64 * (1.0 + epsilon);
    Ok(BoundCheck { holds: lhs <= rhs, lhs, rhs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_kept_when_k_is_m() {
        assert_eq!(keep_probs(&[3.0, -1.0, 0.5], 3, 0.1).unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn worked_instance() {
        let g = [2.0, 1.0, 1.0, 1.0];
        let kr = solve_r(&g, 1, 0.5).unwrap();
        // 3 / (1.5 * 7 - 4)
        assert!((kr.r - 6.0 / 13.0).abs() < 1e-15);
        assert!(kr.constraint_satisfied());
        let p = keep_probs(&g, 1, kr.r).unwrap();
        assert_eq!(p[0], 1.0);
        for &pi in &p[1..] {
            assert!((pi - 6.0 / 13.0).abs() < 1e-15);
        }
        let b = check_bound(&g, 1, 0.5).unwrap();
        assert!((b.lhs - (1.0 + 18.0 / 13.0)).abs() < 1e-12);
        assert_eq!(b.rhs, 1.5);
        assert!(!b.holds);
    }

    #[test]
    fn keep_probs_in_original_order_and_clamped() {
        let p = keep_probs(&[1.0, -4.0, 0.0, 2.0], 1, 0.25).unwrap();
        assert_eq!(p, vec![0.25, 1.0, 1.0, 0.5]);
        assert_eq!(keep_probs(&[1.0, 2.0, 3.0], 0, 1e9).unwrap(), vec![1.0; 3]);
        assert!(keep_probs(&[1.0], 0, 0.0).is_err());
    }

    #[test]
    fn zero_tail_gives_zero_ratio() {
        let kr = solve_r(&[5.0, 0.0, 0.0], 1, 0.1).unwrap();
        assert_eq!(kr.r, 0.0);
        let b = check_bound(&[5.0, 0.0, 0.0], 1, 0.1).unwrap();
        assert_eq!(b.lhs, 3.0);
    }

    #[test]
    fn ratio_vanishes_for_large_epsilon() {
        let g = [3.0, 1.0, 0.5, 0.25];
        let small = solve_r(&g, 1, 1e3).unwrap().r;
        let tiny = solve_r(&g, 1, 1e9).unwrap().r;
        assert!(tiny < small && tiny < 1e-8);
    }

    #[test]
    fn nonpositive_denominator_names_equation() {
        let err = solve_r(&[1.0, 1.0], 2, 0.0).unwrap_err();
        assert!(matches!(err, Error::Analysis { .. }));
        assert!(err.to_string().contains("keep-ratio"));
    }

    #[test]
    fn second_moment_cases() {
        assert_eq!(estimator_variance(&[1.0, -2.0], &[1.0, 1.0]).unwrap(), 5.0);
        assert_eq!(estimator_variance(&[1.0], &[0.5]).unwrap(), 2.0);
        assert!(estimator_variance(&[1.0], &[0.0]).is_err());
        assert_eq!(estimator_variance(&[0.0], &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn sparsify_identity_when_all_kept() {
        let g = [1.5, -2.0, 0.0];
        assert_eq!(mc_sparsify(&g, &[1.0; 3], 4).unwrap(), g.to_vec());
    }

    #[test]
    fn two_coordinate_enumeration() {
        // p = [1, 0.5]: outcomes (g1, 2 g2) and (g1, 0), each with prob 1/2
        let g = [3.0, -1.0];
        let outcomes = [([3.0, -2.0], 0.5), ([3.0, 0.0], 0.5)];
        let mean: Vec<f64> = (0..2).map(|i| outcomes.iter().map(|(o, w)| o[i] * w).sum()).collect();
        let second: f64 = outcomes.iter().map(|(o, w)| w * (o[0] * o[0] + o[1] * o[1])).sum();
        assert_eq!(mean, g.to_vec());
        assert_eq!(second, estimator_variance(&g, &[1.0, 0.5]).unwrap());
        // every draw is one of the enumerated outcomes
        for seed in 0..20 {
            let d = mc_sparsify(&g, &[1.0, 0.5], seed).unwrap();
            assert!(outcomes.iter().any(|(o, _)| o.to_vec() == d));
        }
    }
}
