//! Scalar log-domain helpers shared by the numeric modules.

/// `ln(sum(exp(xs)))`, shifted by the maximum. Empty input gives `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[inline]
pub fn lse2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Shifts a length-2 log vector so that its log-sum-exp is zero.
#[inline]
pub fn log_normalize2(m: [f64; 2]) -> [f64; 2] {
    let z = lse2(m[0], m[1]);
    [m[0] - z, m[1] - z]
}

/// `x ln x` with `0 ln 0 := 0`.
#[inline]
pub fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_basics() {
        assert!((log_sum_exp(&[0.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert!((lse2(-3.0, 2.0) - log_sum_exp(&[-3.0, 2.0])).abs() < 1e-15);
    }

    #[test]
    fn normalize2() {
        let m = log_normalize2([-1.0, -1.0]);
        assert!((m[0] + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(lse2(m[0], m[1]).abs() < 1e-15);
        assert_eq!(xlogx(0.0), 0.0);
    }
}
