//! Dense linear algebra for community-count-sized matrices.
//!
//! Everything here targets `q x q` problems with `q` in the single digits,
//! so the implementations favor clarity and determinism over asymptotics:
//! Gauss-Jordan with partial pivoting for inversion, cyclic Jacobi rotations
//! for symmetric eigendecomposition.

use crate::math;
use alloc::vec;
use alloc::vec::Vec;

/// Row-major square matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareMatrix {
    q: usize,
    a: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(q: usize) -> Self {
        assert!(q > 0, "matrix dimension must be positive");
        SquareMatrix { q, a: vec![0.0; q * q] }
    }

    pub fn identity(q: usize) -> Self {
        let mut m = Self::zeros(q);
        for i in 0..q {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let q = rows.len();
        assert!(q > 0 && rows.iter().all(|r| r.len() == q), "rows must form a square matrix");
        let mut a = Vec::with_capacity(q * q);
        for r in rows {
            a.extend_from_slice(r);
        }
        SquareMatrix { q, a }
    }

    pub fn dim(&self) -> usize {
        self.q
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.q + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.q + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.a[i * self.q..(i + 1) * self.q]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.q).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> SquareMatrix {
        let mut t = Self::zeros(self.q);
        for i in 0..self.q {
            for j in 0..self.q {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.q);
        let mut y = vec![0.0; self.q];
        for i in 0..self.q {
            let row = self.row(i);
            let mut acc = 0.0;
            for j in 0..self.q {
                acc += row[j] * x[j];
            }
            y[i] = acc;
        }
        y
    }

    pub fn matmul(&self, other: &SquareMatrix) -> SquareMatrix {
        assert_eq!(self.q, other.q);
        let q = self.q;
        let mut out = Self::zeros(q);
        for i in 0..q {
            for k in 0..q {
                let aik = self.get(i, k);
                if aik == 0.0 {
                    continue;
                }
                for j in 0..q {
                    out.a[i * q + j] += aik * other.get(k, j);
                }
            }
        }
        out
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.a.iter().fold(0.0, |m, &v| math::max(m, math::abs(v)))
    }

    /// Largest absolute asymmetry `|a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0;
        for i in 0..self.q {
            for j in i + 1..self.q {
                worst = math::max(worst, math::abs(self.get(i, j) - self.get(j, i)));
            }
        }
        worst
    }

    /// Determinant via LU with partial pivoting.
    pub fn determinant(&self) -> f64 {
        let q = self.q;
        let mut lu = self.a.clone();
        let mut det = 1.0;
        for col in 0..q {
            let mut pivot = col;
            for r in col + 1..q {
                if math::abs(lu[r * q + col]) > math::abs(lu[pivot * q + col]) {
                    pivot = r;
                }
            }
            if lu[pivot * q + col] == 0.0 {
                return 0.0;
            }
            if pivot != col {
                for j in 0..q {
                    lu.swap(col * q + j, pivot * q + j);
                }
                det = -det;
            }
            det *= lu[col * q + col];
            for r in col + 1..q {
                let f = lu[r * q + col] / lu[col * q + col];
                for j in col..q {
                    lu[r * q + j] -= f * lu[col * q + j];
                }
            }
        }
        det
    }

    /// Inverse via Gauss-Jordan; `None` when a pivot collapses below 1e-12
    /// of the matrix scale.
    pub fn inverse(&self) -> Option<SquareMatrix> {
        let q = self.q;
        let scale = math::max(self.max_abs_entry(), 1.0);
        let mut work = self.a.clone();
        let mut inv = Self::identity(q);
        for col in 0..q {
            let mut pivot = col;
            for r in col + 1..q {
                if math::abs(work[r * q + col]) > math::abs(work[pivot * q + col]) {
                    pivot = r;
                }
            }
            if math::abs(work[pivot * q + col]) < 1e-12 * scale {
                return None;
            }
            if pivot != col {
                for j in 0..q {
                    work.swap(col * q + j, pivot * q + j);
                    inv.a.swap(col * q + j, pivot * q + j);
                }
            }
            let p = work[col * q + col];
            for j in 0..q {
                work[col * q + j] /= p;
                inv.a[col * q + j] /= p;
            }
            for r in 0..q {
                if r == col {
                    continue;
                }
                let f = work[r * q + col];
                if f == 0.0 {
                    continue;
                }
                for j in 0..q {
                    work[r * q + j] -= f * work[col * q + j];
                    inv.a[r * q + j] -= f * inv.a[col * q + j];
                }
            }
        }
        Some(inv)
    }

    /// Solves `A x = b`; `None` when `A` is numerically singular.
    pub fn solve(&self, b: &[f64]) -> Option<Vec<f64>> {
        self.inverse().map(|inv| inv.matvec(b))
    }

    /// Frobenius norm of the off-diagonal part.
    pub fn off_diagonal_frobenius(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.q {
            for j in 0..self.q {
                if i != j {
                    let v = self.get(i, j);
                    acc += v * v;
                }
            }
        }
        math::sqrt(acc)
    }
}

/// Tolerance the Jacobi sweep drives the off-diagonal Frobenius norm below.
pub const JACOBI_OFF_DIAGONAL_TOL: f64 = 1e-12;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, v)` with eigenvector `k` in column `k` of `v`,
/// satisfying `a = v diag(eigenvalues) v^T`. Eigenvalues arrive in sweep
/// order; callers impose their own sorting. Panics if the input is not
/// symmetric to 1e-9.
pub fn jacobi_eigh(a: &SquareMatrix) -> (Vec<f64>, SquareMatrix) {
    assert!(a.asymmetry() < 1e-9, "jacobi_eigh: matrix must be symmetric");
    let q = a.dim();
    let mut m = a.clone();
    let mut v = SquareMatrix::identity(q);
    for _sweep in 0..100 {
        if m.off_diagonal_frobenius() < JACOBI_OFF_DIAGONAL_TOL {
            break;
        }
        for p in 0..q - 1 {
            for r in p + 1..q {
                let apq = m.get(p, r);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(r, r);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if math::abs(theta) > 1e150 {
                    1.0 / (2.0 * theta)
                } else {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (math::abs(theta) + math::sqrt(theta * theta + 1.0))
                };
                let c = 1.0 / math::sqrt(t * t + 1.0);
                let s = t * c;
                m.set(p, p, app - t * apq);
                m.set(r, r, aqq + t * apq);
                m.set(p, r, 0.0);
                m.set(r, p, 0.0);
                for k in 0..q {
                    if k != p && k != r {
                        let akp = m.get(k, p);
                        let akq = m.get(k, r);
                        m.set(k, p, c * akp - s * akq);
                        m.set(p, k, c * akp - s * akq);
                        m.set(k, r, s * akp + c * akq);
                        m.set(r, k, s * akp + c * akq);
                    }
                }
                for k in 0..q {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, r);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, r, s * vkp + c * vkq);
                }
            }
        }
    }
    let eigenvalues = (0..q).map(|i| m.get(i, i)).collect();
    (eigenvalues, v)
}

/// Euclidean projection of a vector onto the probability simplex.
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    assert!(n > 0);
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("simplex projection: NaN input"));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    let mut rho = 0;
    for (j, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (1.0 - cumulative) / (j + 1) as f64;
        if u + candidate > 0.0 {
            theta = candidate;
            rho = j + 1;
        }
    }
    debug_assert!(rho > 0);
    v.iter().map(|&x| math::max(x + theta, 0.0)).collect()
}

/// `sum_j |a_j - b_j|`.
pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| math::abs(x - y)).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    math::sqrt(dot(a, a))
}
