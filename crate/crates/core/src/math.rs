//! Scalar float helpers for `no_std` builds, backed by `libm`.

pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

pub fn round(x: f64) -> f64 {
    libm::round(x)
}

pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

pub fn max(a: f64, b: f64) -> f64 {
    if a > b {
        a
    } else {
        b
    }
}

pub fn min(a: f64, b: f64) -> f64 {
    if a < b {
        a
    } else {
        b
    }
}

/// Integer power by repeated squaring; deterministic across platforms.
pub fn powi(x: f64, n: u32) -> f64 {
    let mut base = x;
    let mut n = n;
    let mut acc = 1.0;
    while n > 0 {
        if n & 1 == 1 {
            acc *= base;
        }
        base *= base;
        n >>= 1;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn powi_matches_repeated_multiplication() {
        let mut acc = 1.0;
        for k in 0..=12u32 {
            assert!(abs(powi(1.7, k) - acc) <= 1e-12 * acc);
            acc *= 1.7;
        }
        assert_eq!(powi(-2.0, 3), -8.0);
        assert_eq!(powi(5.0, 0), 1.0);
    }

    #[test]
    fn scalar_wrappers_agree_with_std() {
        for &x in &[0.1, 1.0, 2.5, 13.0] {
            assert!(abs(sqrt(x) - f64::sqrt(x)) < 1e-15);
            assert!(abs(exp(x) - f64::exp(x)) < 1e-12 * f64::exp(x));
            assert!(abs(ln(x) - f64::ln(x)) < 1e-15);
        }
    }
}
