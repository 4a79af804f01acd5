//! Deterministic randomness: seed mixing, per-object counter-based streams,
//! and the exact samplers used by the tree and graph generators.
//!
//! Every sampling routine in the crate draws from a [`ChaCha8Rng`] obtained
//! through [`stream_rng`], keyed by `(master seed, domain, object index)`.
//! Splitting by object index (tree node, graph block, restart number, ...)
//! makes results independent of traversal order and identical across runs
//! and platforms for a fixed master seed.

use crate::math;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Finalizer from the splitmix64 generator; bijective on `u64`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed and a tag.
pub fn mix(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// FNV-1a hash of a byte string, used to fold textual tags into seeds.
pub fn hash_tag(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// RNG for stream `index` within `domain` under `seed`.
///
/// The key depends on `(seed, domain)`; the ChaCha stream counter carries the
/// object index, so streams for different indices never overlap.
pub fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, domain));
    rng.set_stream(index);
    rng
}

/// Uniform draw from `[0, 1)` with 53-bit resolution.
pub fn uniform_f64(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

/// Unbiased uniform draw from `0..bound` (Lemire's method).
pub fn uniform_index(rng: &mut ChaCha8Rng, bound: u64) -> u64 {
    assert!(bound > 0, "uniform_index: bound must be positive");
    let mut x = rng.next_u64();
    let mut m = (x as u128) * (bound as u128);
    let mut lo = m as u64;
    if lo < bound {
        let threshold = bound.wrapping_neg() % bound;
        while lo < threshold {
            x = rng.next_u64();
            m = (x as u128) * (bound as u128);
            lo = m as u64;
        }
    }
    (m >> 64) as u64
}

/// Draws an index from a probability row (entries nonnegative, summing to 1
/// up to rounding). The final index absorbs any rounding remainder.
pub fn sample_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u = uniform_f64(rng);
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Mean threshold below which Poisson sampling uses the exact product
/// inversion; above it a transformed-rejection sampler takes over.
pub const POISSON_INVERSION_CUTOFF: f64 = 10.0;

/// Exact Poisson draw with the given mean.
pub fn sample_poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    assert!(mean >= 0.0 && mean.is_finite(), "sample_poisson: bad mean");
    if mean == 0.0 {
        0
    } else if mean <= POISSON_INVERSION_CUTOFF {
        poisson_inversion(rng, mean)
    } else {
        poisson_ptrs(rng, mean)
    }
}

/// Product-of-uniforms inversion; exact, O(mean) uniforms per draw.
fn poisson_inversion(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    let limit = math::exp(-mean);
    let mut k = 0u64;
    let mut prod = uniform_f64(rng);
    while prod > limit {
        k += 1;
        prod *= uniform_f64(rng);
    }
    k
}

/// Transformed rejection with squeeze (PTRS); exact for mean >= 10.
fn poisson_ptrs(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    let log_mean = math::ln(mean);
    let b = 0.931 + 2.53 * math::sqrt(mean);
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let v_r = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = uniform_f64(rng) - 0.5;
        let v = uniform_f64(rng);
        let u_shifted = 0.5 - math::abs(u);
        let k = math::floor((2.0 * a / u_shifted + b) * u + mean + 0.43);
        if u_shifted >= 0.07 && v <= v_r {
            return k as u64;
        }
        if k < 0.0 || (u_shifted < 0.013 && v > u_shifted) {
            continue;
        }
        let lhs = math::ln(v * inv_alpha / (a / (u_shifted * u_shifted) + b));
        let rhs = k * log_mean - mean - math::ln_gamma(k + 1.0);
        if lhs <= rhs {
            return k as u64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{chi_square_critical_001, RunningMoments};
    use alloc::vec;
    use alloc::vec::Vec;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = stream_rng(7, 1, 0);
        let mut b = stream_rng(7, 1, 0);
        let mut c = stream_rng(7, 1, 1);
        let mut d = stream_rng(7, 2, 0);
        let xa: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..8).map(|_| c.next_u64()).collect();
        let xd: Vec<u64> = (0..8).map(|_| d.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
        assert_ne!(xa, xd);
    }

    #[test]
    fn uniform_index_is_unbiased_enough() {
        let mut rng = stream_rng(11, 0, 0);
        let bound = 7u64;
        let n = 70_000u64;
        let mut counts = vec![0u64; bound as usize];
        for _ in 0..n {
            counts[uniform_index(&mut rng, bound) as usize] += 1;
        }
        let expected = n as f64 / bound as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < chi_square_critical_001(bound as usize - 1), "chi2 = {chi2}");
    }

    fn poisson_moments(mean: f64, n: u64, seed: u64) -> RunningMoments {
        let mut acc = RunningMoments::new();
        let mut rng = stream_rng(seed, 3, 0);
        for _ in 0..n {
            acc.push(sample_poisson(&mut rng, mean) as f64);
        }
        acc
    }

    #[test]
    fn poisson_mean_and_variance_match_both_regimes() {
        for &(mean, seed) in &[(3.0, 1u64), (10.0, 2), (15.0, 3)] {
            let n = 200_000;
            let acc = poisson_moments(mean, n, seed);
            let se_mean = math::sqrt(mean / n as f64);
            assert!(
                math::abs(acc.mean() - mean) < 4.0 * se_mean,
                "mean {} vs {} (se {})",
                acc.mean(),
                mean,
                se_mean
            );
            let se_var = acc.se_of_variance();
            assert!(
                math::abs(acc.variance() - mean) < 4.0 * se_var,
                "var {} vs {} (se {})",
                acc.variance(),
                mean,
                se_var
            );
        }
    }

    #[test]
    fn poisson_pmf_matches_chi_square() {
        let mean = 3.0;
        let n = 100_000u64;
        let cells = 11usize;
        let mut counts = vec![0u64; cells];
        let mut rng = stream_rng(5, 3, 1);
        for _ in 0..n {
            let k = sample_poisson(&mut rng, mean) as usize;
            counts[k.min(cells - 1)] += 1;
        }
        let mut pmf = 1.0 * math::exp(-mean);
        let mut expected = vec![0.0; cells];
        let mut cum = 0.0;
        for k in 0..cells - 1 {
            expected[k] = pmf * n as f64;
            cum += pmf;
            pmf *= mean / (k + 1) as f64;
        }
        expected[cells - 1] = (1.0 - cum) * n as f64;
        let chi2: f64 = counts
            .iter()
            .zip(&expected)
            .map(|(&c, &e)| {
                let d = c as f64 - e;
                d * d / e
            })
            .sum();
        assert!(chi2 < chi_square_critical_001(cells - 1), "chi2 = {chi2}");
    }

    #[test]
    fn categorical_respects_probabilities() {
        let probs = [0.5, 0.3, 0.2];
        let n = 100_000u64;
        let mut counts = [0u64; 3];
        let mut rng = stream_rng(9, 4, 0);
        for _ in 0..n {
            counts[sample_categorical(&mut rng, &probs)] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .zip(&probs)
            .map(|(&c, &p)| {
                let e = p * n as f64;
                let d = c as f64 - e;
                d * d / e
            })
            .sum();
        assert!(chi2 < chi_square_critical_001(2), "chi2 = {chi2}");
    }
}

/// Domain tags keeping independent sampling concerns on disjoint streams.
pub mod domains {
    pub const TREE: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const SBM_LABELS: u64 = 3;
    pub const SBM_BLOCK: u64 = 4;
    pub const SUBSET_U: u64 = 5;
    pub const UNIFORM_ASSIGN: u64 = 6;
    pub const SPECTRAL_INIT: u64 = 7;
    pub const KMEANS: u64 = 8;
    pub const TRIAL: u64 = 9;
    pub const SAMPLED_GUESS: u64 = 10;
    pub const BLACKBOX_GLOBAL: u64 = 11;
    pub const BLACKBOX_VERTEX: u64 = 12;
}
