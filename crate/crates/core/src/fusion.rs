//! Hard-decision cooperative sensing with the K-out-of-N rule.
//!
//! The reporting channel from sensors to the fusion center is error-free.

use thiserror::Error;

use crate::detectors::LocalDecision;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("invalid rule {k}-out-of-{n}: need 1 <= k <= n")]
    InvalidRule { k: usize, n: usize },
    #[error("rule expects {expected} local decisions, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("probability must lie in [0, 1], got {0}")]
    BadProbability(f64),
}

pub type Result<T> = std::result::Result<T, FusionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionRule {
    k: usize,
    n: usize,
}

impl FusionRule {
    pub fn new(k: usize, n: usize) -> Result<Self> {
        if k == 0 || k > n {
            return Err(FusionError::InvalidRule { k, n });
        }
        Ok(Self { k, n })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

/// Occupied when at least `k` of the `n` local decisions are occupied. The
/// fused statistic is the vote count.
pub fn fuse_hard(decisions: &[LocalDecision], rule: FusionRule) -> Result<LocalDecision> {
    if decisions.len() != rule.n {
        return Err(FusionError::LengthMismatch {
            expected: rule.n,
            got: decisions.len(),
        });
    }
    let votes = decisions.iter().filter(|d| d.occupied).count();
    Ok(LocalDecision {
        occupied: votes >= rule.k,
        statistic: votes as f64,
        sensor_id: 0,
    })
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Exact binomial tail `sum_{j=k}^{n} C(n,j) p^j (1-p)^(n-j)` for i.i.d. sensors.
pub fn fused_probability(p_local: f64, rule: FusionRule) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_local) {
        return Err(FusionError::BadProbability(p_local));
    }
    let q = 1.0 - p_local;
    let tail: f64 = (rule.k..=rule.n)
        .map(|j| binomial(rule.n, j) * p_local.powi(j as i32) * q.powi((rule.n - j) as i32))
        .sum();
    Ok(tail.clamp(0.0, 1.0))
}

/// Local probability whose fused probability equals `fused_target`.
///
/// Used to set per-sensor false-alarm rates so that the fused decision meets a
/// system-level false-alarm budget.
pub fn local_probability_for(fused_target: f64, rule: FusionRule) -> Result<f64> {
    if !(0.0..=1.0).contains(&fused_target) {
        return Err(FusionError::BadProbability(fused_target));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if fused_probability(mid, rule)? < fused_target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
