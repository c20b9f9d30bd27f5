//! Trend test for error series.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

/// Cox-Stuart sign test for a monotone trend.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    /// Pairs with a non-zero difference.
    pub pairs: usize,
    /// Pairs where the later value is larger.
    pub increases: usize,
    /// Two-sided binomial p-value under "no trend".
    pub p_value: f64,
}

impl SignTest {
    /// No trend is rejected at level `alpha`.
    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }

    pub fn is_increasing(&self, alpha: f64) -> bool {
        self.rejects(alpha) && 2 * self.increases > self.pairs
    }
}

/// Pairs `x[i]` with `x[i + c]`, `c = ceil(n / 2)`, dropping the middle
/// value of odd-length series, and tests the sign balance of the
/// differences.
pub fn cox_stuart(xs: &[f64]) -> SignTest {
    let c = xs.len().div_ceil(2);
    let mut pairs = 0;
    let mut increases = 0;
    for i in 0..xs.len() / 2 {
        let d = xs[i + c] - xs[i];
        if d != 0.0 {
            pairs += 1;
            if d > 0.0 {
                increases += 1;
            }
        }
    }
    let p_value = if pairs == 0 {
        1.0
    } else {
        let dist = Binomial::new(0.5, pairs as u64).expect("valid binomial");
        let k = increases.min(pairs - increases) as u64;
        (2.0 * dist.cdf(k)).min(1.0)
    };
    SignTest {
        pairs,
        increases,
        p_value,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn increasing_series_is_a_trend() {
        let xs: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let t = cox_stuart(&xs);
        assert_eq!((t.pairs, t.increases), (20, 20));
        // 2 * 0.5^20
        assert!((t.p_value - 2.0 * 0.5f64.powi(20)).abs() < 1e-15);
        assert!(t.is_increasing(0.05));
    }

    #[test]
    fn oscillation_is_not_a_trend() {
        let xs: Vec<f64> = (0..120).map(|i| (i as f64 * 0.9).sin()).collect();
        assert!(!cox_stuart(&xs).rejects(0.05));
    }

    #[test]
    fn constant_series_has_unit_p_value() {
        let t = cox_stuart(&[1.0; 9]);
        assert_eq!(t.pairs, 0);
        assert_eq!(t.p_value, 1.0);
    }

    #[test]
    fn matches_binomial_table() {
        // 7 of 9 increases: P(X <= 2) = 46 / 512 for Binomial(9, 1/2).
        let mut xs = vec![0.0; 18];
        for i in 0..9 {
            xs[9 + i] = if i < 7 { 1.0 } else { -1.0 };
        }
        let t = cox_stuart(&xs);
        assert_eq!((t.pairs, t.increases), (9, 7));
        assert!((t.p_value - 2.0 * 46.0 / 512.0).abs() < 1e-12);
    }
}
