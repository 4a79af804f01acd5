//! Block-model parameters and the spectral data of the label transition
//! matrix.
//!
//! A model is a community count `q`, a prior `pi` over communities, and a
//! symmetric nonnegative rate matrix `q_scaled` whose `(i, j)` entry, divided
//! by the graph size `n`, is the probability of an edge between a vertex in
//! community `i` and one in community `j`. Conditioning a sparse graph from
//! this family on a vertex's community turns its neighborhood into a
//! branching process: children counts are Poisson with the mean degree `d`,
//! and a child's community is drawn from row `sigma_parent` of the transition
//! matrix `p` with `p[i][j] = q_scaled[i][j] * pi[j] / d`. All estimator and
//! reconstruction code consumes the model through that transition matrix and
//! its spectrum.

use crate::linalg::{self, SquareMatrix};
use crate::math;
use alloc::vec::Vec;
use core::fmt;

/// Relative tolerance for the row-degree uniformity requirement.
pub const DEGREE_UNIFORMITY_REL_TOL: f64 = 1e-9;

/// Below this magnitude the second eigenvalue is treated as exactly zero
/// (signal-free model).
pub const LAMBDA2_ZERO_TOL: f64 = 1e-12;

/// Determinant threshold under which a noise matrix counts as singular.
pub const NOISE_SINGULARITY_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub enum ModelError {
    /// `q` below 2, prior length mismatch, nonpositive entries, or prior sum
    /// away from one.
    InvalidPrior,
    /// Rate matrix not symmetric.
    NonSymmetricQ { asymmetry: f64 },
    /// Rate matrix has a negative entry.
    NegativeEntry,
    /// Expected degree differs across rows.
    DegreeNotUniform { max_error: f64 },
    /// Detailed balance fails for the given prior.
    NotReversible { violation: f64 },
    /// A perturbation-family transition entry left `(0, 1)`.
    EntriesOutOfRange { value: f64 },
    /// A perturbation matrix row does not sum to zero.
    PerturbationRowSum { row: usize, sum: f64 },
    /// A noise-matrix row is not a probability vector.
    InvalidNoiseRow { row: usize },
    /// Mismatched dimensions between arguments.
    DimensionMismatch,
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::InvalidPrior => write!(f, "prior must be positive, length q >= 2, summing to one"),
            ModelError::NonSymmetricQ { asymmetry } => {
                write!(f, "rate matrix must be symmetric (asymmetry {asymmetry:e})")
            }
            ModelError::NegativeEntry => write!(f, "rate matrix entries must be nonnegative"),
            ModelError::DegreeNotUniform { max_error } => {
                write!(f, "expected degree varies across communities (max error {max_error:e})")
            }
            ModelError::NotReversible { violation } => {
                write!(f, "transition matrix is not reversible for the prior (violation {violation:e})")
            }
            ModelError::EntriesOutOfRange { value } => {
                write!(f, "perturbed transition entry {value} outside (0, 1)")
            }
            ModelError::PerturbationRowSum { row, sum } => {
                write!(f, "perturbation row {row} sums to {sum:e}, expected 0")
            }
            ModelError::InvalidNoiseRow { row } => {
                write!(f, "noise matrix row {row} is not a probability vector")
            }
            ModelError::DimensionMismatch => write!(f, "mismatched dimensions"),
        }
    }
}

/// Validated block-model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    q: usize,
    pi: Vec<f64>,
    q_scaled: SquareMatrix,
    n: usize,
}

impl ModelSpec {
    /// Validates and wraps raw parameters. `q_scaled` is at degree scale:
    /// edge probabilities in a size-`n` graph are `q_scaled / n`.
    pub fn new(q: usize, pi: Vec<f64>, q_scaled: SquareMatrix, n: usize) -> Result<Self, ModelError> {
        if q < 2 || pi.len() != q || n == 0 {
            return Err(ModelError::InvalidPrior);
        }
        if pi.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(ModelError::InvalidPrior);
        }
        let total: f64 = pi.iter().sum();
        if math::abs(total - 1.0) > 1e-12 {
            return Err(ModelError::InvalidPrior);
        }
        if q_scaled.dim() != q {
            return Err(ModelError::DimensionMismatch);
        }
        for i in 0..q {
            for j in 0..q {
                if q_scaled.get(i, j) < 0.0 {
                    return Err(ModelError::NegativeEntry);
                }
            }
        }
        let asym = q_scaled.asymmetry();
        if asym > 1e-12 * math::max(1.0, q_scaled.max_abs_entry()) {
            return Err(ModelError::NonSymmetricQ { asymmetry: asym });
        }
        Ok(ModelSpec { q, pi, q_scaled, n })
    }

    /// Assortative model with uniform prior: rate `a` inside a community,
    /// `b` across. For `q = 2` the second transition eigenvalue is
    /// `(a - b) / (a + b)` and the mean degree is `(a + b) / 2`.
    pub fn symmetric(q: usize, a: f64, b: f64, n: usize) -> Result<Self, ModelError> {
        let mut m = SquareMatrix::zeros(q);
        for i in 0..q {
            for j in 0..q {
                m.set(i, j, if i == j { a } else { b });
            }
        }
        let pi = alloc::vec![1.0 / q as f64; q];
        ModelSpec::new(q, pi, m, n)
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn q_scaled(&self) -> &SquareMatrix {
        &self.q_scaled
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

/// Transition matrix of the label branching process, with the mean degree at
/// both scales.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionSpec {
    /// Row-stochastic child-label matrix.
    pub p: SquareMatrix,
    /// Mean offspring count (degree scale).
    pub d: f64,
    /// Per-pair edge rate `d / n`.
    pub d_pi: f64,
}

/// Derives the child-label transition matrix `p[i][j] = q_scaled[i][j] *
/// pi[j] / d` and checks that the expected degree `d` is the same from every
/// community (relative tolerance [`DEGREE_UNIFORMITY_REL_TOL`]).
pub fn derive_transition(spec: &ModelSpec) -> Result<TransitionSpec, ModelError> {
    let q = spec.q();
    let mut degrees = Vec::with_capacity(q);
    for i in 0..q {
        let mut acc = 0.0;
        for j in 0..q {
            acc += spec.q_scaled.get(i, j) * spec.pi[j];
        }
        degrees.push(acc);
    }
    let d = degrees.iter().sum::<f64>() / q as f64;
    let max_error = degrees.iter().fold(0.0, |m, &x| math::max(m, math::abs(x - d)));
    if max_error > DEGREE_UNIFORMITY_REL_TOL * math::max(d, 1e-300) {
        return Err(ModelError::DegreeNotUniform { max_error });
    }
    let mut p = SquareMatrix::zeros(q);
    for i in 0..q {
        for j in 0..q {
            p.set(i, j, spec.q_scaled.get(i, j) * spec.pi[j] / d);
        }
    }
    Ok(TransitionSpec { p, d, d_pi: d / spec.n as f64 })
}

/// Spectral data of a reversible transition matrix.
///
/// Eigenvalues are sorted by decreasing absolute value with the unit
/// eigenvalue first (ties broken toward the positive eigenvalue, then input
/// order). `xi[k]` is the eigenvector for `eigenvalues[k]` in the
/// prior-weighted normalization: writing `u` for the orthonormal eigenvectors
/// of the symmetrized matrix, `xi[k][j] = u[k][j] / sqrt(pi[j])`, so
/// `xi[0]` is the all-ones vector and `sum_j pi[j] xi[k][j] xi[l][j]` is the
/// Kronecker delta.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub xi: Vec<Vec<f64>>,
    /// `eigenvalues[1]^2 * d`: the branching signal strength.
    pub ks_quantity: f64,
    /// `eigenvalues[q-1]^2 * d`: the same for the smallest-magnitude
    /// eigenvalue.
    pub ks_min: f64,
}

/// Diagonalizes `p` through the symmetrization `diag(sqrt(pi)) p
/// diag(1/sqrt(pi))` after verifying detailed balance `pi_i p_ij = pi_j
/// p_ji` to 1e-12.
pub fn eigendecompose(t: &TransitionSpec, pi: &[f64]) -> Result<Spectrum, ModelError> {
    let q = t.p.dim();
    if pi.len() != q {
        return Err(ModelError::DimensionMismatch);
    }
    let mut violation = 0.0;
    for i in 0..q {
        for j in i + 1..q {
            violation = math::max(
                violation,
                math::abs(pi[i] * t.p.get(i, j) - pi[j] * t.p.get(j, i)),
            );
        }
    }
    if violation > 1e-12 {
        return Err(ModelError::NotReversible { violation });
    }
    let sqrt_pi: Vec<f64> = pi.iter().map(|&x| math::sqrt(x)).collect();
    let mut sym = SquareMatrix::zeros(q);
    for i in 0..q {
        for j in 0..q {
            sym.set(i, j, sqrt_pi[i] * t.p.get(i, j) / sqrt_pi[j]);
        }
    }
    // Exact symmetrization of rounding residue keeps the Jacobi input clean.
    for i in 0..q {
        for j in i + 1..q {
            let avg = 0.5 * (sym.get(i, j) + sym.get(j, i));
            sym.set(i, j, avg);
            sym.set(j, i, avg);
        }
    }
    let (raw_values, vectors) = linalg::jacobi_eigh(&sym);
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| {
        let (ma, mb) = (math::abs(raw_values[a]), math::abs(raw_values[b]));
        mb.partial_cmp(&ma)
            .unwrap()
            .then(raw_values[b].partial_cmp(&raw_values[a]).unwrap())
            .then(a.cmp(&b))
    });
    let mut eigenvalues = Vec::with_capacity(q);
    let mut xi = Vec::with_capacity(q);
    for &k in &order {
        eigenvalues.push(raw_values[k]);
        let mut vec_k: Vec<f64> = (0..q).map(|j| vectors.get(j, k) / sqrt_pi[j]).collect();
        // Sign convention: the largest-magnitude coordinate is positive.
        let mut lead = 0;
        for j in 1..q {
            if math::abs(vec_k[j]) > math::abs(vec_k[lead]) {
                lead = j;
            }
        }
        if vec_k[lead] < 0.0 {
            for v in vec_k.iter_mut() {
                *v = -*v;
            }
        }
        xi.push(vec_k);
    }
    let ks_quantity = eigenvalues[1] * eigenvalues[1] * t.d;
    let ks_min = eigenvalues[q - 1] * eigenvalues[q - 1] * t.d;
    Ok(Spectrum { eigenvalues, xi, ks_quantity, ks_min })
}

/// Branching signal strengths `(lambda_2^2 d, lambda_q^2 d)`.
pub fn kesten_stigum(s: &Spectrum, d: f64) -> (f64, f64) {
    let l2 = s.eigenvalues[1];
    let lq = *s.eigenvalues.last().expect("spectrum is nonempty");
    (l2 * l2 * d, lq * lq * d)
}

/// Row-stochastic observation-noise matrix: entry `(i, j)` is the chance a
/// true label `i` is reported as `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseMatrix {
    delta: SquareMatrix,
}

impl NoiseMatrix {
    pub fn new(delta: SquareMatrix) -> Result<Self, ModelError> {
        let q = delta.dim();
        for i in 0..q {
            let mut total = 0.0;
            for j in 0..q {
                let v = delta.get(i, j);
                if v < 0.0 || !v.is_finite() {
                    return Err(ModelError::InvalidNoiseRow { row: i });
                }
                total += v;
            }
            if math::abs(total - 1.0) > 1e-12 {
                return Err(ModelError::InvalidNoiseRow { row: i });
            }
        }
        Ok(NoiseMatrix { delta })
    }

    pub fn identity(q: usize) -> Self {
        NoiseMatrix { delta: SquareMatrix::identity(q) }
    }

    /// `keep * I + (1 - keep) / q * ones`: keep the true label with
    /// probability `keep + (1 - keep) / q`, otherwise report uniformly.
    pub fn uniform_flip(q: usize, keep: f64) -> Result<Self, ModelError> {
        let mut m = SquareMatrix::zeros(q);
        let spread = (1.0 - keep) / q as f64;
        for i in 0..q {
            for j in 0..q {
                m.set(i, j, spread + if i == j { keep } else { 0.0 });
            }
        }
        NoiseMatrix::new(m)
    }

    pub fn q(&self) -> usize {
        self.delta.dim()
    }

    pub fn matrix(&self) -> &SquareMatrix {
        &self.delta
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.delta.get(i, j)
    }

    pub fn determinant(&self) -> f64 {
        self.delta.determinant()
    }

    pub fn is_invertible(&self) -> bool {
        math::abs(self.determinant()) > NOISE_SINGULARITY_TOL
    }
}

/// Quantitative report on the regularity conditions of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionReport {
    /// Sharpest constant with `min_{i != j} ||p_i - p_j||_1 >= delta * q *
    /// |lambda_2|`; zero when two rows coincide, infinite when `lambda_2 = 0`
    /// (signal-free, row separation vacuous).
    pub delta: f64,
    /// Minimum transition-matrix entry.
    pub xi_floor: f64,
    /// Largest absolute deviation of a community's expected degree from `d`.
    pub degree_uniformity_error: f64,
    /// Whether the supplied noise matrix is invertible; `None` when no noise
    /// matrix was given.
    pub noise_invertible: Option<bool>,
    /// Whether the second-order expansion constraint
    /// `2 sqrt(2) (max pi / min pi)^{3/2} / xi_floor^3 * |lambda_2| <
    /// delta^2 q^2 / 8` holds. Rarely satisfied outside asymptotic regimes;
    /// reported, never enforced.
    pub taylor_constraint_ok: bool,
    /// Context echoed for report rows.
    pub q: usize,
    pub d: f64,
    pub lambda2_abs: f64,
}

impl ConditionReport {
    /// Row separation: `delta` positive and finite.
    pub fn cond_row_separation(&self) -> bool {
        self.delta > 0.0 && self.delta.is_finite()
    }

    /// Degree uniformity within tolerance.
    pub fn cond_degree_uniform(&self) -> bool {
        self.degree_uniformity_error <= DEGREE_UNIFORMITY_REL_TOL * math::max(self.d, 1e-300)
    }

    /// Strictly positive transition entries.
    pub fn cond_entry_floor(&self) -> bool {
        self.xi_floor > 0.0
    }

    /// Invertible noise, vacuously true when no noise matrix was supplied.
    pub fn cond_noise_invertible(&self) -> bool {
        self.noise_invertible.unwrap_or(true)
    }

    /// All four regularity conditions.
    pub fn all_conditions_hold(&self) -> bool {
        self.cond_row_separation()
            && self.cond_degree_uniform()
            && self.cond_entry_floor()
            && self.cond_noise_invertible()
    }
}

/// Evaluates the regularity conditions for a model; `noise` participates
/// only in the invertibility entry.
pub fn check_conditions(
    spec: &ModelSpec,
    t: &TransitionSpec,
    s: &Spectrum,
    noise: Option<&NoiseMatrix>,
) -> ConditionReport {
    let q = spec.q();
    let lambda2_abs = math::abs(s.eigenvalues[1]);
    let mut min_row_gap = f64::INFINITY;
    for i in 0..q {
        for j in i + 1..q {
            min_row_gap = math::min(min_row_gap, linalg::l1_distance(t.p.row(i), t.p.row(j)));
        }
    }
    let delta = if lambda2_abs < LAMBDA2_ZERO_TOL {
        f64::INFINITY
    } else {
        min_row_gap / (q as f64 * lambda2_abs)
    };
    let mut xi_floor = f64::INFINITY;
    for i in 0..q {
        for j in 0..q {
            xi_floor = math::min(xi_floor, t.p.get(i, j));
        }
    }
    let mut degree_uniformity_error = 0.0;
    for i in 0..q {
        let mut acc = 0.0;
        for j in 0..q {
            acc += spec.q_scaled().get(i, j) * spec.pi()[j];
        }
        degree_uniformity_error = math::max(degree_uniformity_error, math::abs(acc - t.d));
    }
    let noise_invertible = noise.map(|nm| nm.is_invertible());
    let pi_max = spec.pi().iter().fold(0.0, |m, &x| math::max(m, x));
    let pi_min = spec.pi().iter().fold(f64::INFINITY, |m, &x| math::min(m, x));
    let taylor_constraint_ok = if lambda2_abs < LAMBDA2_ZERO_TOL {
        true
    } else if xi_floor <= 0.0 {
        false
    } else {
        let ratio = pi_max / pi_min;
        let lhs = 2.0 * math::sqrt(2.0) * ratio * math::sqrt(ratio)
            / (xi_floor * xi_floor * xi_floor)
            * lambda2_abs;
        let rhs = delta * delta * (q * q) as f64 / 8.0;
        lhs < rhs
    };
    ConditionReport {
        delta,
        xi_floor,
        degree_uniformity_error,
        noise_invertible,
        taylor_constraint_ok,
        q,
        d: t.d,
        lambda2_abs,
    }
}

/// Builds the model whose transition matrix is the rank-one stochastic
/// matrix plus `scale * m`: `p[i][j] = pi[j] + scale * m[i][j]`.
///
/// `m` must have zero row sums (to 1e-12) and, for the resulting rate matrix
/// to be symmetric, must satisfy `m[i][j] / pi[j] = m[j][i] / pi[i]`. The
/// rate matrix works out to `q_scaled[i][j] = d + d * scale * m[i][j] /
/// pi[j]`, so the degree-uniformity condition holds by construction.
pub fn perturbation_family(
    pi: &[f64],
    m: &SquareMatrix,
    scale: f64,
    d: f64,
    n: usize,
) -> Result<(ModelSpec, TransitionSpec), ModelError> {
    let q = pi.len();
    if m.dim() != q {
        return Err(ModelError::DimensionMismatch);
    }
    for i in 0..q {
        let sum: f64 = m.row(i).iter().sum();
        if math::abs(sum) > 1e-12 {
            return Err(ModelError::PerturbationRowSum { row: i, sum });
        }
    }
    let mut p = SquareMatrix::zeros(q);
    let mut q_scaled = SquareMatrix::zeros(q);
    for i in 0..q {
        for j in 0..q {
            let v = pi[j] + scale * m.get(i, j);
            if !(v > 0.0 && v < 1.0) {
                return Err(ModelError::EntriesOutOfRange { value: v });
            }
            p.set(i, j, v);
            q_scaled.set(i, j, d + d * scale * m.get(i, j) / pi[j]);
        }
    }
    let spec = ModelSpec::new(q, pi.to_vec(), q_scaled, n)?;
    Ok((spec, TransitionSpec { p, d, d_pi: d / n as f64 }))
}
