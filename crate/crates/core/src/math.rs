//! Shared numeric helpers for the win-prediction models.

/// Numerically stable logistic function.
///
/// The negative branch is written as `1 - sigmoid(-x)` so that
/// `sigmoid(x) + sigmoid(-x) == 1.0` holds bit-exactly (the subtraction
/// `1 - p` is exact for `p` in `[0.5, 1]`).
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        1.0 - 1.0 / (1.0 + x.exp())
    }
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic loss of a correctly-labeled pair at margin `x`: `-ln(sigmoid(x))`.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    softplus(-x)
}

/// Arithmetic mean; `NaN` on empty input is never produced, callers must
/// guard emptiness.
pub fn mean(values: &[f64]) -> f64 {
    debug_assert!(!values.is_empty());
    values.iter().sum::<f64>() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_midpoint_and_tails() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(40.0) > 1.0 - 1e-12);
        assert!(sigmoid(-40.0) < 1e-12);
    }

    #[test]
    fn sigmoid_antisymmetry_is_exact() {
        for &x in &[0.0, 1e-9, 0.3, 1.0, 2.5, 7.0, 40.0, 123.456] {
            assert_eq!(sigmoid(x) + sigmoid(-x), 1.0, "x = {x}");
        }
    }

    #[test]
    fn softplus_matches_naive_in_safe_range() {
        for &x in &[-20.0, -1.0, 0.0, 1.0, 20.0] {
            let naive = (1.0 + (x as f64).exp()).ln();
            assert!((softplus(x) - naive).abs() < 1e-12);
        }
        // no overflow at extremes
        assert_eq!(softplus(1000.0), 1000.0);
        assert_eq!(softplus(-1000.0), 0.0);
    }

    #[test]
    fn neg_log_sigmoid_at_zero_is_ln_two() {
        assert!((neg_log_sigmoid(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
