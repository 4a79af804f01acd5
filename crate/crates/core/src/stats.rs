//! One-pass moment accumulators and the small lookup tables used by
//! statistical assertions throughout the test suites.

use crate::math;

/// Welford-style accumulator tracking central moments up to order four.
///
/// The fourth moment feeds the standard error of a sample variance,
/// `Var(s^2) ~= (m4 - s^4 (n-3)/(n-1)) / n`, which the Monte Carlo harness
/// uses whenever a variance itself is the quantity under test.
#[derive(Clone, Debug, Default)]
pub struct RunningMoments {
    n: u64,
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl RunningMoments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        let n1 = self.n as f64;
        self.n += 1;
        let n = self.n as f64;
        let delta = x - self.mean;
        let delta_n = delta / n;
        let delta_n2 = delta_n * delta_n;
        let term1 = delta * delta_n * n1;
        self.mean += delta_n;
        self.m4 += term1 * delta_n2 * (n * n - 3.0 * n + 3.0) + 6.0 * delta_n2 * self.m2
            - 4.0 * delta_n * self.m3;
        self.m3 += term1 * delta_n * (n - 2.0) - 3.0 * delta_n * self.m2;
        self.m2 += term1;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n as f64 - 1.0)
        }
    }

    /// Standard error of the sample mean.
    pub fn se_mean(&self) -> f64 {
        if self.n < 2 {
            f64::INFINITY
        } else {
            math::sqrt(self.variance() / self.n as f64)
        }
    }

    /// Standard error of the sample variance, via the fourth central moment.
    pub fn se_of_variance(&self) -> f64 {
        if self.n < 4 {
            return f64::INFINITY;
        }
        let n = self.n as f64;
        let m2 = self.m2 / n;
        let m4 = self.m4 / n;
        let var_of_var = (m4 - m2 * m2 * (n - 3.0) / (n - 1.0)) / n;
        math::sqrt(math::max(var_of_var, 0.0))
    }
}

/// Mean/SE pair for a Bernoulli or bounded estimate, with sample count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: u64,
}

impl MeanSe {
    pub fn from_moments(m: &RunningMoments) -> Self {
        MeanSe {
            mean: m.mean(),
            se: m.se_mean(),
            n: m.count(),
        }
    }
}

/// Upper 0.1% critical values of the chi-square distribution.
pub fn chi_square_critical_001(dof: usize) -> f64 {
    const TABLE: [f64; 16] = [
        10.828, 13.816, 16.266, 18.467, 20.515, 22.458, 24.322, 26.124, 27.877, 29.588, 31.264,
        32.909, 34.528, 36.123, 37.697, 39.252,
    ];
    assert!(
        (1..=TABLE.len()).contains(&dof),
        "chi-square table covers 1..=16 degrees of freedom"
    );
    TABLE[dof - 1]
}
