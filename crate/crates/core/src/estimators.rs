//! Root-label estimators on broadcast trees.
//!
//! Three families are implemented, in increasing use of the model:
//!
//! * weighted majority: linear statistics of one tree level, weighted by a
//!   transition eigenvector (optionally noise-corrected weights);
//! * iterated majority: classify each root child by weighted majority on
//!   its subtree, then match the resulting label histogram against the
//!   expected child-label profiles;
//! * belief propagation: the exact posterior of the root given one level,
//!   computed by an upward message recursion, with a noisy-observation
//!   variant that differs only in the leaf initialization.
//!
//! A brute-force enumeration posterior serves as the correctness oracle for
//! the recursions, and Monte Carlo drivers estimate recovery probabilities
//! and the error matrix between coupled noisy and noise-free posteriors.

use crate::linalg::{self, SquareMatrix};
use crate::math;
use crate::model::{NoiseMatrix, Spectrum, NOISE_SINGULARITY_TOL};
use crate::rng::{self, domains};
use crate::stats::{MeanSe, RunningMoments};
use crate::tree::{sample_tree, subtree, BroadcastTree, TreeParams};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Eigen-indices whose `|lambda_i|^k` falls below this floor are dropped
/// from the majority decision statistic: their centers `lambda_i^k d^k
/// xi_i` have shrunk to numerical noise relative to `d^k` and carry no
/// usable signal at depth `k`.
pub const EIGEN_INDEX_FLOOR: f64 = 1e-6;

/// Cap on the number of label assignments the brute-force posterior will
/// enumerate.
pub const BRUTEFORCE_MAX_ASSIGNMENTS: f64 = 1e7;

#[derive(Clone, Debug, PartialEq)]
pub enum EstimatorError {
    /// Noise matrix determinant at or below the invertibility tolerance.
    SingularNoise { det: f64 },
    /// Noisy mode requested on a tree without observed labels.
    MissingNoisyLabels,
    /// Requested level exceeds the tree's sampled depth bound.
    DepthExceeded { requested: usize, max_depth: usize },
    /// Depth below the method's minimum.
    InvalidDepth { k: usize, min: usize },
    /// A message or posterior normalizer vanished exactly; only possible
    /// when the transition matrix has zero entries.
    ZeroMass,
    /// A leaf prior normalizer vanished: the observed value is unreachable
    /// under the noise matrix and prior.
    DegenerateLeafPrior { tau: usize },
    /// Brute-force enumeration would exceed the assignment cap.
    TooLarge { free_nodes: usize, q: usize },
}

impl fmt::Display for EstimatorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorError::SingularNoise { det } => {
                write!(f, "noise matrix is numerically singular (det {det})")
            }
            EstimatorError::MissingNoisyLabels => {
                write!(f, "tree has no observed labels for noisy estimation")
            }
            EstimatorError::DepthExceeded { requested, max_depth } => {
                write!(f, "depth {requested} exceeds sampled bound {max_depth}")
            }
            EstimatorError::InvalidDepth { k, min } => {
                write!(f, "depth {k} below method minimum {min}")
            }
            EstimatorError::ZeroMass => write!(f, "posterior mass vanished"),
            EstimatorError::DegenerateLeafPrior { tau } => {
                write!(f, "observed label {tau} has zero prior probability")
            }
            EstimatorError::TooLarge { free_nodes, q } => {
                write!(f, "enumeration over {q}^{free_nodes} assignments exceeds the cap")
            }
        }
    }
}

/// A probability vector over community labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorVector {
    probs: Vec<f64>,
}

impl PosteriorVector {
    /// Normalizes a nonnegative mass vector. Errors with `ZeroMass` when
    /// the total is zero or not finite.
    pub fn new(mass: Vec<f64>) -> Result<Self, EstimatorError> {
        assert!(!mass.is_empty());
        let mut total = 0.0;
        for &x in &mass {
            assert!(x >= 0.0 && x.is_finite(), "posterior mass must be finite and nonnegative");
            total += x;
        }
        if total <= 0.0 || !total.is_finite() {
            return Err(EstimatorError::ZeroMass);
        }
        let probs: Vec<f64> = mass.iter().map(|&x| x / total).collect();
        Ok(PosteriorVector { probs })
    }

    pub fn dim(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, i: usize) -> f64 {
        self.probs[i]
    }

    /// Index of the largest entry; ties go to the smaller index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..self.probs.len() {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn max(&self) -> f64 {
        self.probs[self.argmax()]
    }
}

/// Which decision rule produced an [`EstimatorOutcome`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodTag {
    /// Scores are squared normalized distances to per-label centers;
    /// `guess` is the argmin.
    WeightedMajority,
    /// Scores are L1 distances between the child-label histogram and the
    /// expected profiles; `guess` is the argmin.
    IteratedMajority,
    /// Scores are posterior probabilities; `guess` is the argmax.
    Bp,
    /// As `Bp`, from noisy observations.
    BpNoisy,
}

/// A classification decision with its per-label evidence.
///
/// When `fallback` is set the estimator saw no usable data (an extinct
/// level); `score_vector` is then the prior and `guess` its argmax.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorOutcome {
    pub guess: usize,
    pub score_vector: Vec<f64>,
    pub method: MethodTag,
    pub fallback: bool,
}

fn argmax_slice(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

fn argmin_slice(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] < v[best] {
            best = i;
        }
    }
    best
}

fn prior_fallback(pi: &[f64], method: MethodTag) -> EstimatorOutcome {
    EstimatorOutcome {
        guess: argmax_slice(pi),
        score_vector: pi.to_vec(),
        method,
        fallback: true,
    }
}

/// Turns a posterior into a decision: `guess` is the argmax, ties to the
/// smaller index.
pub fn posterior_outcome(post: &PosteriorVector, noisy: bool) -> EstimatorOutcome {
    EstimatorOutcome {
        guess: post.argmax(),
        score_vector: post.probs().to_vec(),
        method: if noisy { MethodTag::BpNoisy } else { MethodTag::Bp },
        fallback: false,
    }
}

/// Weights whose expectation under the observation noise reproduces the
/// clean eigenvector statistic: the solution `w` of `delta^T w = xi`.
pub fn noisy_weights(delta: &NoiseMatrix, xi: &[f64]) -> Result<Vec<f64>, EstimatorError> {
    let det = delta.determinant();
    if math::abs(det) <= NOISE_SINGULARITY_TOL {
        return Err(EstimatorError::SingularNoise { det });
    }
    delta
        .matrix()
        .transpose()
        .solve(xi)
        .ok_or(EstimatorError::SingularNoise { det })
}

/// Sum of per-node weights over level `k`: each node contributes the
/// weight entry of its label. Clean mode reads true labels with weights
/// `xi`; noisy mode reads observed labels with weights `delta^-T xi`, so
/// both have the same expectation. An extinct level sums to zero.
pub fn weighted_sum(
    tree: &BroadcastTree,
    k: usize,
    xi: &[f64],
    noisy: bool,
    delta: Option<&NoiseMatrix>,
) -> Result<f64, EstimatorError> {
    assert_eq!(xi.len(), tree.params().q(), "weight vector dimension mismatch");
    let level = tree
        .level(k)
        .map_err(|_| EstimatorError::DepthExceeded { requested: k, max_depth: tree.max_depth() })?;
    if noisy {
        let delta = delta.expect("noisy mode requires a noise matrix");
        let w = noisy_weights(delta, xi)?;
        let taus = tree.taus().ok_or(EstimatorError::MissingNoisyLabels)?;
        Ok(level.iter().map(|&u| w[taus[u as usize] as usize]).sum())
    } else {
        Ok(level.iter().map(|&u| xi[tree.sigma(u as usize)]).sum())
    }
}

/// Mean of the level-`k` weighted sum given the root label `c`:
/// `(lambda_i d)^k xi_i(c)`.
pub fn expected_weighted_sum(lambda_i: f64, d: f64, k: usize, xi_i_c: f64) -> f64 {
    math::powi(lambda_i * d, k as u32) * xi_i_c
}

/// Upper bound on the conditional variance of the level-`k` weighted sum:
/// `max_c pi_c * |xi_i|^2 * d^k * ((lambda_i^2 d)^k - 1) / (lambda_i^2 d - 1)`,
/// with the geometric ratio read as `k` when `lambda_i^2 d = 1`.
pub fn weighted_sum_variance_bound(lambda_i: f64, d: f64, k: usize, pi: &[f64], xi_i: &[f64]) -> f64 {
    let max_pi = pi.iter().cloned().fold(0.0, math::max);
    let norm2: f64 = xi_i.iter().map(|&x| x * x).sum();
    let r = lambda_i * lambda_i * d;
    let geometric = if math::abs(r - 1.0) < 1e-12 {
        k as f64
    } else {
        (math::powi(r, k as u32) - 1.0) / (r - 1.0)
    };
    max_pi * norm2 * math::powi(d, k as u32) * geometric
}

/// Classifies the root by which expected center each eigenvector-weighted
/// level sum is nearest.
///
/// For each candidate label `l` the score is the squared normalized
/// distance `sum_i ((S_i - lambda_i^k d^k xi_i(l)) / (lambda_i^k d^k))^2`
/// over non-principal eigen-indices with `|lambda_i|^k` above
/// [`EIGEN_INDEX_FLOOR`]; the guess is the argmin, ties to the smaller
/// label. When every index is floored (no spectral signal at this depth)
/// all scores are zero and the tie-break yields label 0. An extinct level
/// falls back to the prior argmax with `fallback` set.
pub fn majority_classify(
    tree: &BroadcastTree,
    spectrum: &Spectrum,
    k: usize,
    noisy: bool,
    delta: Option<&NoiseMatrix>,
) -> Result<EstimatorOutcome, EstimatorError> {
    if k < 1 {
        return Err(EstimatorError::InvalidDepth { k, min: 1 });
    }
    let params = tree.params();
    let q = params.q();
    assert_eq!(spectrum.eigenvalues.len(), q, "spectrum dimension mismatch");
    let level = tree
        .level(k)
        .map_err(|_| EstimatorError::DepthExceeded { requested: k, max_depth: tree.max_depth() })?;
    if level.is_empty() {
        return Ok(prior_fallback(&params.pi, MethodTag::WeightedMajority));
    }
    let dk = math::powi(params.d, k as u32);
    let mut scores = vec![0.0; q];
    for i in 1..q {
        let lam = spectrum.eigenvalues[i];
        if math::powi(math::abs(lam), k as u32) < EIGEN_INDEX_FLOOR {
            continue;
        }
        let center_scale = math::powi(lam, k as u32) * dk;
        let s = weighted_sum(tree, k, &spectrum.xi[i], noisy, delta)?;
        for (l, score) in scores.iter_mut().enumerate() {
            let dev = (s - center_scale * spectrum.xi[i][l]) / center_scale;
            *score += dev * dev;
        }
    }
    Ok(EstimatorOutcome {
        guess: argmin_slice(&scores),
        score_vector: scores,
        method: MethodTag::WeightedMajority,
        fallback: false,
    })
}

/// Matches a child-label histogram against the expected child-label
/// profiles `D * P_i` (`D` = total count): returns the L1 distances and
/// their argmin, ties to the smaller label.
pub fn histogram_classify(counts: &[f64], p: &SquareMatrix) -> (usize, Vec<f64>) {
    let q = p.dim();
    assert_eq!(counts.len(), q);
    let total: f64 = counts.iter().sum();
    let scores: Vec<f64> = (0..q)
        .map(|i| {
            let expected: Vec<f64> = p.row(i).iter().map(|&x| total * x).collect();
            linalg::l1_distance(counts, &expected)
        })
        .collect();
    (argmin_slice(&scores), scores)
}

enum ChildDraw {
    Best,
    Sampled(u64),
}

fn iterated_majority_impl(
    tree: &BroadcastTree,
    spectrum: &Spectrum,
    k: usize,
    draw: ChildDraw,
) -> Result<EstimatorOutcome, EstimatorError> {
    if k < 2 {
        return Err(EstimatorError::InvalidDepth { k, min: 2 });
    }
    if k > tree.max_depth() {
        return Err(EstimatorError::DepthExceeded { requested: k, max_depth: tree.max_depth() });
    }
    let params = tree.params();
    let q = params.q();
    let children: Vec<usize> = (1..tree.node_count()).filter(|&u| tree.parent(u) == Some(0)).collect();
    if children.is_empty() {
        return Ok(prior_fallback(&params.pi, MethodTag::IteratedMajority));
    }
    let mut counts = vec![0.0; q];
    for &c in &children {
        // The child inherits the remaining sampling budget so an extinct
        // subtree level reads as empty, not out of range.
        let sub = subtree(tree, c).padded_to_depth(k - 1);
        let outcome = majority_classify(&sub, spectrum, k - 1, false, None)?;
        let label = match draw {
            ChildDraw::Best => outcome.guess,
            ChildDraw::Sampled(seed) => {
                let mut r = rng::stream_rng(seed, domains::SAMPLED_GUESS, c as u64);
                if outcome.fallback {
                    rng::sample_categorical(&mut r, &params.pi)
                } else {
                    // Soften the squared-distance scores into a
                    // distribution, smaller distance = higher weight.
                    let weights: Vec<f64> =
                        outcome.score_vector.iter().map(|&s| math::exp(-0.5 * s)).collect();
                    let total: f64 = weights.iter().sum();
                    if total > 0.0 {
                        rng::sample_categorical(&mut r, &weights)
                    } else {
                        outcome.guess
                    }
                }
            }
        };
        counts[label] += 1.0;
    }
    let (guess, scores) = histogram_classify(&counts, &params.p);
    Ok(EstimatorOutcome {
        guess,
        score_vector: scores,
        method: MethodTag::IteratedMajority,
        fallback: false,
    })
}

/// Classifies the root in two stages: each root child is classified by
/// weighted majority on its own depth-`(k-1)` subtree level, and the root
/// guess is the label whose expected child profile `D * P_i` is nearest
/// (in L1) to the histogram of child guesses. A childless root falls back
/// to the prior argmax.
pub fn iterated_majority_classify(
    tree: &BroadcastTree,
    spectrum: &Spectrum,
    k: usize,
) -> Result<EstimatorOutcome, EstimatorError> {
    iterated_majority_impl(tree, spectrum, k, ChildDraw::Best)
}

/// As [`iterated_majority_classify`], but each child's label is drawn from
/// a softened distribution over its decision scores (weight
/// `exp(-score/2)`) instead of taking the best label deterministically.
pub fn iterated_majority_classify_sampled(
    tree: &BroadcastTree,
    spectrum: &Spectrum,
    k: usize,
    seed: u64,
) -> Result<EstimatorOutcome, EstimatorError> {
    iterated_majority_impl(tree, spectrum, k, ChildDraw::Sampled(seed))
}

/// The message a child passes to its parent: `(P D_pi^-1 x)_i = sum_c
/// P_ic x_c / pi_c`, the parent-label likelihood of the child's evidence.
pub fn child_message(p: &SquareMatrix, pi: &[f64], x: &[f64]) -> Vec<f64> {
    let q = p.dim();
    assert_eq!(pi.len(), q);
    assert_eq!(x.len(), q);
    (0..q)
        .map(|i| {
            let row = p.row(i);
            let mut acc = 0.0;
            for c in 0..q {
                acc += row[c] * x[c] / pi[c];
            }
            acc
        })
        .collect()
}

/// One fusion step of the upward recursion: combines independent child
/// messages into the node posterior `f_i = pi_i prod_j M_j(i) / Z`.
///
/// Each message is rescaled by its max entry before multiplying; the
/// result is exactly invariant to any positive per-message scaling, which
/// is what licenses the rescaling as pure underflow control.
pub fn bp_step(pi: &[f64], messages: &[Vec<f64>]) -> Result<PosteriorVector, EstimatorError> {
    let mut acc = pi.to_vec();
    for msg in messages {
        assert_eq!(msg.len(), pi.len(), "message dimension mismatch");
        let mx = msg.iter().cloned().fold(0.0, math::max);
        if mx <= 0.0 {
            return Err(EstimatorError::ZeroMass);
        }
        for (a, &m) in acc.iter_mut().zip(msg) {
            *a *= m / mx;
        }
    }
    PosteriorVector::new(acc)
}

/// Per-observed-value leaf message tables.
///
/// Clean mode: a leaf with true label `s` sends `M(i) = P_is / pi_s`
/// (one-hot evidence pushed through [`child_message`]). Noisy mode: a leaf
/// with observed label `t` carries the prior-weighted evidence `x(c) =
/// pi_c delta_ct / Z_t`, giving `M(i) = sum_c P_ic delta_ct / Z_t`. Tables
/// are max-rescaled. In noisy mode a table row for an unreachable
/// observation is left empty and only errors if some leaf actually
/// carries it.
fn leaf_message_tables(
    p: &SquareMatrix,
    pi: &[f64],
    delta: Option<&NoiseMatrix>,
) -> Vec<Vec<f64>> {
    let q = p.dim();
    let mut tables = Vec::with_capacity(q);
    for v in 0..q {
        let x: Vec<f64> = match delta {
            None => (0..q).map(|c| if c == v { 1.0 } else { 0.0 }).collect(),
            Some(dl) => {
                let z: f64 = (0..q).map(|c| pi[c] * dl.get(c, v)).sum();
                if z <= 0.0 {
                    tables.push(Vec::new());
                    continue;
                }
                (0..q).map(|c| pi[c] * dl.get(c, v) / z).collect()
            }
        };
        let mut msg = child_message(p, pi, &x);
        let mx = msg.iter().cloned().fold(0.0, math::max);
        if mx > 0.0 {
            for m in msg.iter_mut() {
                *m /= mx;
            }
        }
        tables.push(msg);
    }
    tables
}

fn leaf_prior(pi: &[f64], delta: &NoiseMatrix, tau: usize) -> Result<Vec<f64>, EstimatorError> {
    let q = pi.len();
    let mass: Vec<f64> = (0..q).map(|c| pi[c] * delta.get(c, tau)).collect();
    let z: f64 = mass.iter().sum();
    if z <= 0.0 {
        return Err(EstimatorError::DegenerateLeafPrior { tau });
    }
    Ok(mass.iter().map(|&m| m / z).collect())
}

fn bp_run(
    tree: &BroadcastTree,
    m: usize,
    delta: Option<&NoiseMatrix>,
) -> Result<PosteriorVector, EstimatorError> {
    let params = tree.params();
    let q = params.q();
    if m > tree.max_depth() {
        return Err(EstimatorError::DepthExceeded { requested: m, max_depth: tree.max_depth() });
    }
    let observed: Option<&[u8]> = if delta.is_some() {
        Some(tree.taus().ok_or(EstimatorError::MissingNoisyLabels)?)
    } else {
        None
    };
    if m == 0 {
        return match (delta, observed) {
            (Some(dl), Some(taus)) => PosteriorVector::new(leaf_prior(&params.pi, dl, taus[0] as usize)?),
            _ => PosteriorVector::new(crate::tree::one_hot(tree.sigma(0), q).expect("root label in range")),
        };
    }
    let n = tree.node_count();
    // A node contributes only if its subtree reaches depth m; extinct
    // branches marginalize out exactly and are skipped.
    let mut contributing = vec![false; n];
    for &u in tree.level(m).expect("m <= max_depth") {
        contributing[u as usize] = true;
    }
    for u in (1..n).rev() {
        if contributing[u] && tree.depth(u) <= m {
            contributing[tree.parent(u).expect("u > 0")] = true;
        }
    }
    if !contributing[0] {
        // No level-m data at all: the posterior is the prior.
        return PosteriorVector::new(params.pi.clone());
    }
    let tables = leaf_message_tables(&params.p, &params.pi, delta);
    // acc[u] carries pi * (product of processed child messages); children
    // precede parents in a reverse arena scan.
    let mut acc: Vec<Vec<f64>> = (0..n)
        .map(|u| {
            if contributing[u] && tree.depth(u) < m {
                params.pi.clone()
            } else {
                Vec::new()
            }
        })
        .collect();
    let mut scratch = vec![0.0; q];
    for u in (1..n).rev() {
        let depth = tree.depth(u);
        if depth > m || !contributing[u] {
            continue;
        }
        let parent = tree.parent(u).expect("u > 0");
        if depth == m {
            let key = match observed {
                Some(taus) => taus[u] as usize,
                None => tree.sigma(u),
            };
            let table = &tables[key];
            if table.is_empty() {
                return Err(EstimatorError::DegenerateLeafPrior { tau: key });
            }
            for (a, &t) in acc[parent].iter_mut().zip(table) {
                *a *= t;
            }
        } else {
            let own = core::mem::take(&mut acc[u]);
            let row_base = &params.p;
            let mut mx = 0.0;
            for (i, s) in scratch.iter_mut().enumerate() {
                let row = row_base.row(i);
                let mut sum = 0.0;
                for c in 0..q {
                    sum += row[c] * own[c] / params.pi[c];
                }
                *s = sum;
                mx = math::max(mx, sum);
            }
            if mx <= 0.0 {
                return Err(EstimatorError::ZeroMass);
            }
            for (a, &s) in acc[parent].iter_mut().zip(scratch.iter()) {
                *a *= s / mx;
            }
        }
    }
    PosteriorVector::new(core::mem::take(&mut acc[0]))
}

/// Exact posterior of the root label given the true labels of level `m`,
/// computed by the upward message recursion. `m = 0` conditions on the
/// root itself.
pub fn bp_posterior(tree: &BroadcastTree, m: usize) -> Result<PosteriorVector, EstimatorError> {
    bp_run(tree, m, None)
}

/// Exact posterior of the root label given the observed (noise-corrupted)
/// labels of level `m`. Identical recursion to [`bp_posterior`]; only the
/// leaf evidence changes, to the prior-weighted row `pi_c delta(c, tau)`.
/// The noise matrix need not be invertible.
pub fn bp_posterior_noisy(
    tree: &BroadcastTree,
    m: usize,
    delta: &NoiseMatrix,
) -> Result<PosteriorVector, EstimatorError> {
    assert_eq!(delta.q(), tree.params().q(), "noise matrix dimension mismatch");
    bp_run(tree, m, Some(delta))
}

/// Brute-force oracle for the root posterior: enumerates every label
/// assignment to the nodes above level `m` and sums broadcast
/// probabilities directly, marginalizing each level-`m` node's label
/// in place (clean mode pins it to the true label; noisy mode sums
/// `P(label) * delta(label, tau)`). Independent of the message recursion;
/// intended for tests and small trees only.
pub fn exact_posterior_bruteforce(
    tree: &BroadcastTree,
    m: usize,
    noisy: bool,
    delta: Option<&NoiseMatrix>,
) -> Result<PosteriorVector, EstimatorError> {
    let params = tree.params();
    let q = params.q();
    if m > tree.max_depth() {
        return Err(EstimatorError::DepthExceeded { requested: m, max_depth: tree.max_depth() });
    }
    let observed: Option<&[u8]> = if noisy {
        Some(tree.taus().ok_or(EstimatorError::MissingNoisyLabels)?)
    } else {
        None
    };
    let delta = if noisy {
        Some(delta.expect("noisy mode requires a noise matrix"))
    } else {
        None
    };
    if m == 0 {
        return match (delta, observed) {
            (Some(dl), Some(taus)) => PosteriorVector::new(leaf_prior(&params.pi, dl, taus[0] as usize)?),
            _ => PosteriorVector::new(crate::tree::one_hot(tree.sigma(0), q).expect("root label in range")),
        };
    }
    let leaves = tree.level(m).expect("m <= max_depth").to_vec();
    if leaves.is_empty() {
        return PosteriorVector::new(params.pi.clone());
    }
    let free: Vec<usize> = (0..tree.node_count()).filter(|&u| tree.depth(u) < m).collect();
    let assignments = math::powi(q as f64, free.len() as u32);
    if assignments > BRUTEFORCE_MAX_ASSIGNMENTS {
        return Err(EstimatorError::TooLarge { free_nodes: free.len(), q });
    }
    // position of each free node in the odometer
    let mut slot = vec![usize::MAX; tree.node_count()];
    for (s, &u) in free.iter().enumerate() {
        slot[u] = s;
    }
    let mut labels = vec![0usize; free.len()];
    let mut mass = vec![0.0; q];
    loop {
        let mut weight = params.pi[labels[0]];
        for (s, &u) in free.iter().enumerate().skip(1) {
            let parent_label = labels[slot[tree.parent(u).expect("u > 0")]];
            weight *= params.p.get(parent_label, labels[s]);
        }
        for &v in &leaves {
            let v = v as usize;
            let parent_label = labels[slot[tree.parent(v).expect("leaf has a parent")]];
            weight *= match (delta, observed) {
                (Some(dl), Some(taus)) => {
                    let t = taus[v] as usize;
                    (0..q).map(|c| params.p.get(parent_label, c) * dl.get(c, t)).sum()
                }
                _ => params.p.get(parent_label, tree.sigma(v)),
            };
        }
        mass[labels[0]] += weight;
        // odometer increment over the free-node labels
        let mut pos = free.len() - 1;
        loop {
            labels[pos] += 1;
            if labels[pos] < q {
                break;
            }
            labels[pos] = 0;
            if pos == 0 {
                return PosteriorVector::new(mass);
            }
            pos -= 1;
        }
    }
}

/// Mean and standard error of both Monte Carlo forms of the root recovery
/// probability at one depth, plus their per-trial difference (the two
/// forms estimate the same quantity, so the difference should be zero
/// within error bars).
#[derive(Clone, Debug)]
pub struct RecoveryEstimate {
    /// Mean of `max_i X_root(i)` over trials.
    pub max_posterior: MeanSe,
    /// Mean of the indicator that the posterior argmax equals the true
    /// root label.
    pub argmax_correct: MeanSe,
    /// Per-trial difference `max - indicator`.
    pub difference: MeanSe,
    pub depth: usize,
    pub trials: u64,
}

fn trial_seed(seed: u64, t: u64) -> u64 {
    rng::mix(rng::mix(seed, domains::TRIAL), t)
}

fn estimate_recovery_impl(
    params: &Arc<TreeParams>,
    delta: Option<&NoiseMatrix>,
    m: usize,
    trials: u64,
    seed: u64,
) -> Result<RecoveryEstimate, EstimatorError> {
    assert!(trials >= 100, "recovery estimation needs at least 100 trials");
    let mut maxp = RunningMoments::new();
    let mut correct = RunningMoments::new();
    let mut diff = RunningMoments::new();
    for t in 0..trials {
        let s = trial_seed(seed, t);
        let tree = sample_tree(params, m, s);
        let post = match delta {
            Some(dl) => bp_posterior_noisy(&crate::tree::apply_noise(&tree, dl, s), m, dl)?,
            None => bp_posterior(&tree, m)?,
        };
        let mp = post.max();
        let ind = if post.argmax() == tree.sigma(0) { 1.0 } else { 0.0 };
        maxp.push(mp);
        correct.push(ind);
        diff.push(mp - ind);
    }
    Ok(RecoveryEstimate {
        max_posterior: MeanSe::from_moments(&maxp),
        argmax_correct: MeanSe::from_moments(&correct),
        difference: MeanSe::from_moments(&diff),
        depth: m,
        trials,
    })
}

/// Monte Carlo estimate of the probability that the depth-`m` posterior
/// recovers the root label, reported both as the mean max-posterior and as
/// the argmax success frequency.
pub fn estimate_recovery(
    params: &Arc<TreeParams>,
    m: usize,
    trials: u64,
    seed: u64,
) -> Result<RecoveryEstimate, EstimatorError> {
    estimate_recovery_impl(params, None, m, trials, seed)
}

/// As [`estimate_recovery`], with observations passed through the noise
/// matrix and the noisy posterior.
pub fn estimate_recovery_noisy(
    params: &Arc<TreeParams>,
    delta: &NoiseMatrix,
    m: usize,
    trials: u64,
    seed: u64,
) -> Result<RecoveryEstimate, EstimatorError> {
    estimate_recovery_impl(params, Some(delta), m, trials, seed)
}

/// Scans depths upward until the recovery probability stops moving:
/// returns the smallest `k >= 1` whose estimate differs from depth `k-1`
/// by less than one joint standard error, together with every estimate
/// computed. Returns `max_k` when no plateau is found by the cap.
pub fn recovery_plateau_depth(
    params: &Arc<TreeParams>,
    delta: Option<&NoiseMatrix>,
    trials: u64,
    seed: u64,
    max_k: usize,
) -> Result<(usize, Vec<RecoveryEstimate>), EstimatorError> {
    let mut ests: Vec<RecoveryEstimate> = Vec::with_capacity(max_k + 1);
    for k in 0..=max_k {
        let est = estimate_recovery_impl(params, delta, k, trials, rng::mix(seed, k as u64))?;
        if k >= 1 {
            let prev = &ests[k - 1];
            let gap = math::abs(est.max_posterior.mean - prev.max_posterior.mean);
            let joint = math::sqrt(
                est.max_posterior.se * est.max_posterior.se
                    + prev.max_posterior.se * prev.max_posterior.se,
            );
            if gap < joint {
                ests.push(est);
                return Ok((k, ests));
            }
        }
        ests.push(est);
    }
    Ok((max_k, ests))
}

/// Conditional mean differences between coupled noise-free and noisy
/// posteriors at one depth: entry `(i, j)` estimates `E[X_root(j) -
/// X_noisy_root(j) | true root = i]`. Rows are the conditioned true label;
/// columns are the posterior coordinate.
#[derive(Clone, Debug)]
pub struct ErrorMatrix {
    pub e: SquareMatrix,
    pub se: SquareMatrix,
    /// Largest absolute entry of `e`.
    pub epsilon: f64,
    pub depth: usize,
    pub trials: u64,
    /// Trials observed per conditioned row.
    pub row_counts: Vec<u64>,
}

/// Monte Carlo estimate of the [`ErrorMatrix`] at depth `n`: each trial
/// samples one tree, applies coupled observation noise to the same label
/// realization, computes both posteriors, and accumulates the coordinate
/// differences under the trial's true root label.
pub fn error_matrix_mc(
    params: &Arc<TreeParams>,
    delta: &NoiseMatrix,
    n: usize,
    trials: u64,
    seed: u64,
) -> Result<ErrorMatrix, EstimatorError> {
    assert!(trials >= 1000, "error matrix estimation needs at least 1000 trials");
    let q = params.q();
    let mut cells: Vec<RunningMoments> = (0..q * q).map(|_| RunningMoments::new()).collect();
    for t in 0..trials {
        let s = trial_seed(seed, t);
        let tree = sample_tree(params, n, s);
        let noisy = crate::tree::apply_noise(&tree, delta, s);
        let x = bp_posterior(&tree, n)?;
        let xt = bp_posterior_noisy(&noisy, n, delta)?;
        let i = tree.sigma(0);
        for j in 0..q {
            cells[i * q + j].push(x.get(j) - xt.get(j));
        }
    }
    let mut e = SquareMatrix::zeros(q);
    let mut se = SquareMatrix::zeros(q);
    let mut row_counts = vec![0u64; q];
    let mut epsilon = 0.0;
    for i in 0..q {
        row_counts[i] = cells[i * q].count();
        for j in 0..q {
            let cell = &cells[i * q + j];
            e.set(i, j, cell.mean());
            se.set(i, j, cell.se_mean());
            epsilon = math::max(epsilon, math::abs(cell.mean()));
        }
    }
    Ok(ErrorMatrix { e, se, epsilon, depth: n, trials, row_counts })
}

/// Per-trial statistics of two exact moment identities tying the coupled
/// posteriors together. Both have expectation zero when the posteriors are
/// the true conditional probabilities, independent of any storage
/// convention:
///
/// * pair statistic `(i, j)`:
///   `(X(i)-Y(i)) (X(j)-Y(j)) - (X(j)-Y(j)) [root = i]`
///   (its mean recovers the covariance identity against `pi_i * E_ij`);
/// * square statistic `i`: `(X(i)-Y(i))^2 - X(i)^2 + Y(i)^2`
///   (the difference-of-squares identity).
#[derive(Clone, Debug)]
pub struct IdentityChecks {
    pub pair_mean: SquareMatrix,
    pub pair_se: SquareMatrix,
    pub square: Vec<MeanSe>,
    pub trials: u64,
}

impl IdentityChecks {
    /// True when every statistic is within `z` standard errors of zero.
    pub fn all_within(&self, z: f64) -> bool {
        let q = self.pair_mean.dim();
        for i in 0..q {
            for j in 0..q {
                if math::abs(self.pair_mean.get(i, j)) > z * self.pair_se.get(i, j) + 1e-15 {
                    return false;
                }
            }
        }
        self.square
            .iter()
            .all(|s| math::abs(s.mean) <= z * s.se + 1e-15)
    }
}

/// Monte Carlo evaluation of the [`IdentityChecks`] statistics at depth
/// `n`, with the same coupling as [`error_matrix_mc`].
pub fn identity_checks_mc(
    params: &Arc<TreeParams>,
    delta: &NoiseMatrix,
    n: usize,
    trials: u64,
    seed: u64,
) -> Result<IdentityChecks, EstimatorError> {
    assert!(trials >= 1000, "identity checks need at least 1000 trials");
    let q = params.q();
    let mut pair: Vec<RunningMoments> = (0..q * q).map(|_| RunningMoments::new()).collect();
    let mut square: Vec<RunningMoments> = (0..q).map(|_| RunningMoments::new()).collect();
    for t in 0..trials {
        let s = trial_seed(seed, t);
        let tree = sample_tree(params, n, s);
        let noisy = crate::tree::apply_noise(&tree, delta, s);
        let x = bp_posterior(&tree, n)?;
        let y = bp_posterior_noisy(&noisy, n, delta)?;
        let root = tree.sigma(0);
        for i in 0..q {
            let di = x.get(i) - y.get(i);
            square[i].push(di * di - x.get(i) * x.get(i) + y.get(i) * y.get(i));
            for j in 0..q {
                let dj = x.get(j) - y.get(j);
                let indicator = if root == i { dj } else { 0.0 };
                pair[i * q + j].push(di * dj - indicator);
            }
        }
    }
    let mut pair_mean = SquareMatrix::zeros(q);
    let mut pair_se = SquareMatrix::zeros(q);
    for i in 0..q {
        for j in 0..q {
            pair_mean.set(i, j, pair[i * q + j].mean());
            pair_se.set(i, j, pair[i * q + j].se_mean());
        }
    }
    Ok(IdentityChecks {
        pair_mean,
        pair_se,
        square: square.iter().map(MeanSe::from_moments).collect(),
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{derive_transition, eigendecompose, ModelSpec};
    use crate::tree::{apply_noise, sample_tree_with_root, BroadcastTree, NO_PARENT};

    fn model(a: f64, b: f64) -> (Arc<TreeParams>, Spectrum) {
        let spec = ModelSpec::symmetric(2, a, b, 100).unwrap();
        let t = derive_transition(&spec).unwrap();
        let s = eigendecompose(&t, spec.pi()).unwrap();
        (TreeParams::from_model(&spec, &t), s)
    }

    fn model_q3() -> (Arc<TreeParams>, Spectrum) {
        let spec = ModelSpec::new(
            3,
            vec![0.5, 0.3, 0.2],
            SquareMatrix::from_rows(&[
                vec![6.4, 4.0, 3.0],
                vec![4.0, 26.0 / 3.0, 2.0],
                vec![3.0, 2.0, 14.5],
            ]),
            100,
        )
        .unwrap();
        let t = derive_transition(&spec).unwrap();
        let s = eigendecompose(&t, spec.pi()).unwrap();
        (TreeParams::from_model(&spec, &t), s)
    }

    fn flip_noise(q: usize, keep: f64) -> NoiseMatrix {
        NoiseMatrix::uniform_flip(q, keep).unwrap()
    }

    #[test]
    fn posterior_vector_normalizes() {
        let p = PosteriorVector::new(vec![2.0, 6.0]).unwrap();
        assert_eq!(p.probs(), &[0.25, 0.75]);
        assert_eq!(p.argmax(), 1);
        assert_eq!(p.max(), 0.75);
        assert_eq!(PosteriorVector::new(vec![0.0, 0.0]), Err(EstimatorError::ZeroMass));
        // Ties break to the smaller index.
        assert_eq!(PosteriorVector::new(vec![1.0, 1.0]).unwrap().argmax(), 0);
    }

    #[test]
    fn bp_depth_zero_is_the_root_label() {
        let (params, _) = model(4.0, 2.0);
        let tree = sample_tree(&params, 2, 3);
        let post = bp_posterior(&tree, 0).unwrap();
        assert_eq!(post.get(tree.sigma(0)), 1.0);
    }

    #[test]
    fn bp_single_child_matches_hand_bayes() {
        // pi uniform, P = [[2/3,1/3],[1/3,2/3]]; child label 0 at depth 1.
        let (params, _) = model(4.0, 2.0);
        let tree = BroadcastTree::from_parts(
            Arc::clone(&params),
            vec![NO_PARENT, 0],
            vec![1, 0],
            None,
            0,
        );
        let post = bp_posterior(&tree, 1).unwrap();
        assert!(math::abs(post.get(0) - 2.0 / 3.0) < 1e-15);
        assert!(math::abs(post.get(1) - 1.0 / 3.0) < 1e-15);
        let oracle = exact_posterior_bruteforce(&tree, 1, false, None).unwrap();
        assert!(math::abs(oracle.get(0) - 2.0 / 3.0) < 1e-15);
    }

    #[test]
    fn bp_matches_bruteforce_on_small_trees() {
        let (p2, _) = model(3.0, 1.0);
        let (p3, _) = model_q3();
        let mut compared = 0;
        for (params, q) in [(&p2, 2usize), (&p3, 3usize)] {
            // Thin the process so trees stay enumerable.
            let thin = TreeParams::new(
                params.pi.clone(),
                params.p.clone(),
                1.3,
            );
            for seed in 0..400u64 {
                let tree = sample_tree(&thin, 3, seed);
                if tree.node_count() > 15 {
                    continue;
                }
                for m in 1..=3usize {
                    let bp = bp_posterior(&tree, m).unwrap();
                    let oracle = exact_posterior_bruteforce(&tree, m, false, None).unwrap();
                    for i in 0..q {
                        assert!(
                            math::abs(bp.get(i) - oracle.get(i)) < 1e-10,
                            "seed {seed} m {m} coord {i}: {} vs {}",
                            bp.get(i),
                            oracle.get(i)
                        );
                    }
                    compared += 1;
                }
            }
        }
        assert!(compared > 500, "oracle cross-check must cover enough trees ({compared})");
    }

    #[test]
    fn noisy_bp_matches_noisy_bruteforce() {
        let (p2, _) = model(3.0, 1.0);
        let (p3, _) = model_q3();
        let mut compared = 0;
        for (params, q) in [(&p2, 2usize), (&p3, 3usize)] {
            let thin = TreeParams::new(params.pi.clone(), params.p.clone(), 1.3);
            let delta = flip_noise(q, 0.7);
            for seed in 0..250u64 {
                let tree = sample_tree(&thin, 3, seed);
                if tree.node_count() > 15 {
                    continue;
                }
                let noisy = apply_noise(&tree, &delta, rng::mix(seed, 9));
                for m in 1..=3usize {
                    let bp = bp_posterior_noisy(&noisy, m, &delta).unwrap();
                    let oracle = exact_posterior_bruteforce(&noisy, m, true, Some(&delta)).unwrap();
                    for i in 0..q {
                        assert!(
                            math::abs(bp.get(i) - oracle.get(i)) < 1e-10,
                            "seed {seed} m {m} coord {i}: {} vs {}",
                            bp.get(i),
                            oracle.get(i)
                        );
                    }
                    compared += 1;
                }
            }
        }
        assert!(compared > 300, "noisy oracle cross-check must cover enough trees ({compared})");
    }

    #[test]
    fn identity_noise_reproduces_clean_posterior_exactly() {
        let (params, _) = model(4.0, 2.0);
        let delta = NoiseMatrix::identity(2);
        for seed in 0..20u64 {
            let tree = sample_tree(&params, 3, seed);
            let noisy = apply_noise(&tree, &delta, seed);
            for m in 0..=3usize {
                let clean = bp_posterior(&tree, m).unwrap();
                let noised = bp_posterior_noisy(&noisy, m, &delta).unwrap();
                assert_eq!(clean.probs(), noised.probs(), "seed {seed} m {m}");
            }
        }
    }

    #[test]
    fn information_free_noise_returns_the_prior() {
        // Identical noise rows destroy all leaf information.
        let (params, _) = model_q3();
        let delta = NoiseMatrix::new(SquareMatrix::from_rows(&[
            vec![0.2, 0.5, 0.3],
            vec![0.2, 0.5, 0.3],
            vec![0.2, 0.5, 0.3],
        ]))
        .unwrap();
        for seed in 0..10u64 {
            let tree = sample_tree(&params, 2, seed);
            let noisy = apply_noise(&tree, &delta, seed);
            for m in 1..=2usize {
                let post = bp_posterior_noisy(&noisy, m, &delta).unwrap();
                for i in 0..3 {
                    assert!(
                        math::abs(post.get(i) - params.pi[i]) < 1e-12,
                        "seed {seed} m {m}"
                    );
                }
            }
        }
    }

    #[test]
    fn bruteforce_guards_against_explosion() {
        let (params, _) = model(4.0, 2.0);
        // A 30-node path: 29 free nodes above level 29.
        let n = 30;
        let parents: Vec<u32> = (0..n).map(|i| if i == 0 { NO_PARENT } else { i - 1 }).collect();
        let sigma = vec![0u8; n as usize];
        let tree = BroadcastTree::from_parts(Arc::clone(&params), parents, sigma, None, 0);
        assert!(matches!(
            exact_posterior_bruteforce(&tree, 29, false, None),
            Err(EstimatorError::TooLarge { free_nodes: 29, q: 2 })
        ));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(96))]

        /// Rescaling any single child message by a positive scalar does
        /// not move the fused posterior.
        #[test]
        fn bp_step_is_scale_invariant(
            seed in proptest::prelude::any::<u64>(),
            scale in 1e-6f64..1e6,
            q in 2usize..5,
            n_msgs in 1usize..5,
        ) {
            let mut r = rng::stream_rng(seed, 99, 0);
            let pi: Vec<f64> = {
                let raw: Vec<f64> = (0..q).map(|_| 0.05 + rng::uniform_f64(&mut r)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|&x| x / s).collect()
            };
            let messages: Vec<Vec<f64>> = (0..n_msgs)
                .map(|_| (0..q).map(|_| 0.01 + rng::uniform_f64(&mut r)).collect())
                .collect();
            let which = rng::uniform_index(&mut r, n_msgs as u64) as usize;
            let mut rescaled = messages.clone();
            for v in rescaled[which].iter_mut() {
                *v *= scale;
            }
            let base = bp_step(&pi, &messages).unwrap();
            let moved = bp_step(&pi, &rescaled).unwrap();
            for i in 0..q {
                proptest::prop_assert!(math::abs(base.get(i) - moved.get(i)) < 1e-12);
            }
        }
    }

    #[test]
    fn weighted_sum_basics() {
        let (params, spectrum) = model(4.0, 2.0);
        // Root label 1 with three children all labeled 0.
        let tree = BroadcastTree::from_parts(
            Arc::clone(&params),
            vec![NO_PARENT, 0, 0, 0],
            vec![1, 0, 0, 0],
            None,
            0,
        );
        let xi2 = &spectrum.xi[1];
        let s = weighted_sum(&tree, 1, xi2, false, None).unwrap();
        assert!(math::abs(s - 3.0 * xi2[0]) < 1e-12, "constant level sums to count * weight");
        // Identity noise reproduces the clean sum.
        let noisy = apply_noise(&tree, &NoiseMatrix::identity(2), 0);
        let sn = weighted_sum(&noisy, 1, xi2, true, Some(&NoiseMatrix::identity(2))).unwrap();
        assert!(math::abs(sn - s) < 1e-12);
        // Missing observed labels in noisy mode is an error.
        assert_eq!(
            weighted_sum(&tree, 1, xi2, true, Some(&NoiseMatrix::identity(2))),
            Err(EstimatorError::MissingNoisyLabels)
        );
        // A singular noise matrix cannot be inverted into weights.
        let singular = NoiseMatrix::new(SquareMatrix::from_rows(&[
            vec![0.5, 0.5],
            vec![0.5, 0.5],
        ]))
        .unwrap();
        assert!(matches!(
            weighted_sum(&noisy, 1, xi2, true, Some(&singular)),
            Err(EstimatorError::SingularNoise { .. })
        ));
    }

    #[test]
    fn weighted_sum_mean_matches_closed_form() {
        // lambda_2 = 1/3, d = 6: mean of the level-3 sum given the root is
        // (lambda_2 d)^3 xi_2(root) = 8 * xi_2(root).
        let (params, spectrum) = model(8.0, 4.0);
        assert!(math::abs(spectrum.eigenvalues[1] - 1.0 / 3.0) < 1e-12);
        assert!(math::abs(params.d - 6.0) < 1e-12);
        let xi2 = spectrum.xi[1].clone();
        let delta = flip_noise(2, 0.8);
        let mut clean = RunningMoments::new();
        let mut noised = RunningMoments::new();
        for seed in 0..100_000u64 {
            let tree = sample_tree_with_root(&params, 0, 3, seed).unwrap();
            clean.push(weighted_sum(&tree, 3, &xi2, false, None).unwrap());
            let noisy = apply_noise(&tree, &delta, seed);
            noised.push(weighted_sum(&noisy, 3, &xi2, true, Some(&delta)).unwrap());
        }
        let target = expected_weighted_sum(spectrum.eigenvalues[1], params.d, 3, xi2[0]);
        assert!(math::abs(target - 8.0 * xi2[0]) < 1e-12);
        assert!(
            math::abs(clean.mean() - target) < 4.0 * clean.se_mean(),
            "clean mean {} vs {} (se {})",
            clean.mean(),
            target,
            clean.se_mean()
        );
        assert!(
            math::abs(noised.mean() - target) < 4.0 * noised.se_mean(),
            "noisy mean {} vs {} (se {})",
            noised.mean(),
            target,
            noised.se_mean()
        );
    }

    #[test]
    fn weighted_sum_grid_mean_and_variance_bound() {
        // d = 2, lambda_2 = 0.6 across depths 1..4 and both root labels.
        let (params, spectrum) = model(3.2, 0.8);
        let lam = spectrum.eigenvalues[1];
        let xi2 = spectrum.xi[1].clone();
        for root in 0..2usize {
            for k in 1..=4usize {
                let mut acc = RunningMoments::new();
                for seed in 0..20_000u64 {
                    let tree =
                        sample_tree_with_root(&params, root, k, rng::mix(seed, k as u64)).unwrap();
                    acc.push(weighted_sum(&tree, k, &xi2, false, None).unwrap());
                }
                let target = expected_weighted_sum(lam, params.d, k, xi2[root]);
                assert!(
                    math::abs(acc.mean() - target) < 4.0 * acc.se_mean(),
                    "root {root} k {k}: mean {} vs {} (se {})",
                    acc.mean(),
                    target,
                    acc.se_mean()
                );
                let bound = weighted_sum_variance_bound(lam, params.d, k, &params.pi, &xi2);
                assert!(
                    acc.variance() <= bound + 4.0 * acc.se_of_variance(),
                    "root {root} k {k}: variance {} exceeds bound {}",
                    acc.variance(),
                    bound
                );
            }
        }
    }

    #[test]
    fn majority_prefers_unanimous_leaves() {
        let (params, spectrum) = model(4.0, 2.0);
        for label in 0..2u8 {
            let tree = BroadcastTree::from_parts(
                Arc::clone(&params),
                vec![NO_PARENT, 0, 0, 0],
                vec![1 - label, label, label, label],
                None,
                0,
            );
            let out = majority_classify(&tree, &spectrum, 1, false, None).unwrap();
            assert_eq!(out.guess, label as usize);
            assert_eq!(out.method, MethodTag::WeightedMajority);
            assert!(!out.fallback);
            assert_eq!(out.guess, argmin_slice(&out.score_vector));
        }
    }

    #[test]
    fn majority_falls_back_on_extinct_level() {
        let spec = ModelSpec::new(
            2,
            vec![0.7, 0.3],
            SquareMatrix::from_rows(&[vec![0.3, 0.2], vec![0.2, 0.1 + 1.0 / 3.0]]),
            100,
        )
        .unwrap();
        let t = derive_transition(&spec).unwrap();
        let spectrum = eigendecompose(&t, spec.pi()).unwrap();
        let params = TreeParams::from_model(&spec, &t);
        let mut hit = false;
        for seed in 0..200u64 {
            let tree = sample_tree(&params, 2, seed);
            if !tree.level(2).unwrap().is_empty() {
                continue;
            }
            let out = majority_classify(&tree, &spectrum, 2, false, None).unwrap();
            assert!(out.fallback);
            assert_eq!(out.guess, 0, "prior argmax is label 0");
            assert_eq!(out.score_vector, params.pi);
            hit = true;
            break;
        }
        assert!(hit, "no extinct tree found in the seed range");
    }

    #[test]
    fn majority_without_signal_degenerates_to_tie_break() {
        // Identical transition rows: lambda_2 = 0, every eigen-index is
        // floored, all scores are zero.
        let spec = ModelSpec::symmetric(2, 4.0, 4.0, 100).unwrap();
        let t = derive_transition(&spec).unwrap();
        let spectrum = eigendecompose(&t, spec.pi()).unwrap();
        assert!(math::abs(spectrum.eigenvalues[1]) < 1e-12);
        let params = TreeParams::from_model(&spec, &t);
        let tree = sample_tree(&params, 2, 5);
        let out = majority_classify(&tree, &spectrum, 2, false, None).unwrap();
        assert_eq!(out.guess, 0);
        assert_eq!(out.score_vector, vec![0.0, 0.0]);
        assert!(!out.fallback);
    }

    #[test]
    fn majority_success_beats_chebyshev_bound() {
        // lambda_2^2 d = 8 at the plateau depth; the success probability
        // must clear 1 - 4 max(pi)^(1/2) / (delta^2 (lambda_2^2 d - 1)).
        let (params, spectrum) = model(22.5, 2.5);
        assert!(math::abs(spectrum.ks_quantity - 8.0) < 1e-12);
        let (k0, _) = recovery_plateau_depth(&params, None, 300, 11, 3).unwrap();
        let k = k0.max(1);
        let trials = 2000u64;
        let mut correct = RunningMoments::new();
        for t in 0..trials {
            let s = trial_seed(17, t);
            let tree = sample_tree(&params, k, s);
            let out = majority_classify(&tree, &spectrum, k, false, None).unwrap();
            correct.push(if out.guess == tree.sigma(0) { 1.0 } else { 0.0 });
        }
        // delta = 1 for the two-community symmetric family.
        let bound = 1.0 - 4.0 * math::sqrt(0.5) / (1.0 * (8.0 - 1.0));
        assert!(
            correct.mean() >= bound - 4.0 * correct.se_mean(),
            "success {} below bound {} at k {}",
            correct.mean(),
            bound,
            k
        );
    }

    #[test]
    fn histogram_classifier_picks_exact_proportions() {
        let (params, _) = model(4.0, 2.0);
        // Counts exactly D * P_row for each row in turn.
        for row in 0..2usize {
            let d_total = 9.0;
            let counts: Vec<f64> = params.p.row(row).iter().map(|&x| d_total * x).collect();
            let (guess, scores) = histogram_classify(&counts, &params.p);
            assert_eq!(guess, row);
            assert!(scores[row] < 1e-12);
            assert!(scores[1 - row] > 0.1, "separated rows score apart");
        }
    }

    #[test]
    fn iterated_majority_handles_extinction_and_depth() {
        let (params, spectrum) = model(4.0, 2.0);
        let tree = sample_tree(&params, 3, 1);
        assert!(matches!(
            iterated_majority_classify(&tree, &spectrum, 1),
            Err(EstimatorError::InvalidDepth { k: 1, min: 2 })
        ));
        assert!(matches!(
            iterated_majority_classify(&tree, &spectrum, 4),
            Err(EstimatorError::DepthExceeded { .. })
        ));
        // A childless root falls back to the prior.
        let spec = ModelSpec::symmetric(2, 0.3, 0.1, 100).unwrap();
        let t = derive_transition(&spec).unwrap();
        let thin = TreeParams::from_model(&spec, &t);
        let mut hit = false;
        for seed in 0..100u64 {
            let tree = sample_tree(&thin, 2, seed);
            if tree.node_count() == 1 {
                let out = iterated_majority_classify(&tree, &spectrum, 2).unwrap();
                assert!(out.fallback);
                assert_eq!(out.guess, 0);
                hit = true;
                break;
            }
        }
        assert!(hit, "no childless root found in the seed range");
    }

    #[test]
    fn iterated_majority_error_meets_exponential_bound() {
        // lambda_2^2 d = 10 exactly: d = 14.4, lambda_2 = 5/6.
        let (params, spectrum) = model(26.4, 2.4);
        assert!(math::abs(spectrum.ks_quantity - 10.0) < 1e-12);
        let (k0, _) = recovery_plateau_depth(&params, None, 200, 23, 2).unwrap();
        let k = (k0 + 2).min(3);
        let trials = 400u64;
        let mut wrong = RunningMoments::new();
        let mut wrong_sampled = RunningMoments::new();
        for t in 0..trials {
            let s = trial_seed(29, t);
            let tree = sample_tree(&params, k, s);
            let out = iterated_majority_classify(&tree, &spectrum, k).unwrap();
            wrong.push(if out.guess == tree.sigma(0) { 0.0 } else { 1.0 });
            let sampled = iterated_majority_classify_sampled(&tree, &spectrum, k, s).unwrap();
            wrong_sampled.push(if sampled.guess == tree.sigma(0) { 0.0 } else { 1.0 });
        }
        // delta = 1, q = 2: bound = 2q exp(-(delta^2 q^2 / 32) lambda_2^2 d).
        let bound = 4.0 * math::exp(-(4.0 / 32.0) * 10.0);
        assert!(
            wrong.mean() <= bound + 4.0 * wrong.se_mean(),
            "error {} above bound {}",
            wrong.mean(),
            bound
        );
        assert!(
            wrong_sampled.mean() <= bound + 4.0 * wrong_sampled.se_mean(),
            "sampled error {} above bound {}",
            wrong_sampled.mean(),
            bound
        );
    }

    #[test]
    fn recovery_at_depth_zero_is_certain() {
        let (params, _) = model(4.0, 2.0);
        let est = estimate_recovery(&params, 0, 200, 3).unwrap();
        assert_eq!(est.max_posterior.mean, 1.0);
        assert_eq!(est.argmax_correct.mean, 1.0);
        assert_eq!(est.max_posterior.se, 0.0);
    }

    #[test]
    fn recovery_without_signal_is_the_prior_mass() {
        // lambda_2 = 0 via constant rates: posterior is always the prior.
        let spec = ModelSpec::new(
            3,
            vec![0.5, 0.3, 0.2],
            SquareMatrix::from_rows(&[
                vec![6.0, 6.0, 6.0],
                vec![6.0, 6.0, 6.0],
                vec![6.0, 6.0, 6.0],
            ]),
            100,
        )
        .unwrap();
        let t = derive_transition(&spec).unwrap();
        let params = TreeParams::from_model(&spec, &t);
        let est = estimate_recovery(&params, 2, 400, 7).unwrap();
        assert!(math::abs(est.max_posterior.mean - 0.5) < 1e-12);
        assert!(est.max_posterior.se < 1e-12);
        assert!(
            math::abs(est.argmax_correct.mean - 0.5) < 4.0 * est.argmax_correct.se,
            "indicator {} vs 0.5",
            est.argmax_correct.mean
        );
    }

    #[test]
    fn recovery_forms_agree_and_plateau_is_found() {
        let (params, _) = model(14.4, 1.6);
        let (k0, ests) = recovery_plateau_depth(&params, None, 400, 41, 4).unwrap();
        assert!(k0 >= 1 && k0 <= 4);
        for est in &ests {
            assert!(
                math::abs(est.difference.mean) <= 4.0 * est.difference.se + 1e-12,
                "depth {}: forms disagree ({} vs {})",
                est.depth,
                est.max_posterior.mean,
                est.argmax_correct.mean
            );
        }
        // Noisy recovery is at most clean recovery, up to noise.
        let delta = flip_noise(2, 0.8);
        let clean = estimate_recovery(&params, 2, 600, 5).unwrap();
        let noisy = estimate_recovery_noisy(&params, &delta, 2, 600, 5).unwrap();
        let joint = math::sqrt(
            clean.max_posterior.se * clean.max_posterior.se
                + noisy.max_posterior.se * noisy.max_posterior.se,
        );
        assert!(
            noisy.max_posterior.mean <= clean.max_posterior.mean + 4.0 * joint,
            "noise cannot add information: {} vs {}",
            noisy.max_posterior.mean,
            clean.max_posterior.mean
        );
    }

    #[test]
    fn error_matrix_vanishes_under_identity_noise() {
        let (params, _) = model(4.0, 2.0);
        let em = error_matrix_mc(&params, &NoiseMatrix::identity(2), 2, 1000, 13).unwrap();
        assert_eq!(em.epsilon, 0.0);
        assert_eq!(em.trials, 1000);
        assert_eq!(em.row_counts.iter().sum::<u64>(), 1000);
    }

    #[test]
    fn error_matrix_entries_are_bounded_and_rows_hit() {
        let (params, _) = model_q3();
        let em = error_matrix_mc(&params, &flip_noise(3, 0.75), 2, 1500, 19).unwrap();
        assert!(em.epsilon <= 1.0);
        assert!(em.row_counts.iter().all(|&c| c >= 2));
        for i in 0..3 {
            for j in 0..3 {
                assert!(em.se.get(i, j) > 0.0, "cell ({i},{j}) has zero spread");
            }
        }
    }

    #[test]
    fn moment_identities_hold_for_coupled_posteriors() {
        // Asymmetric prior so that any row/column convention slip in the
        // statistics would show up as a nonzero mean.
        let (params, _) = model_q3();
        let checks = identity_checks_mc(&params, &flip_noise(3, 0.75), 2, 4000, 23).unwrap();
        assert!(checks.all_within(4.0), "pair/square identity statistics off zero");
        let (params2, _) = model(14.4, 1.6);
        let checks2 = identity_checks_mc(&params2, &flip_noise(2, 0.85), 2, 3000, 29).unwrap();
        assert!(checks2.all_within(4.0));
    }

    #[test]
    fn error_shrinks_with_depth_past_the_plateau() {
        // Strong signal: the max-entry error should not grow with depth
        // once recovery has stabilized.
        let (params, _) = model(14.4, 1.6);
        let delta = flip_noise(2, 0.85);
        let (k0, _) = recovery_plateau_depth(&params, None, 300, 31, 3).unwrap();
        let depths: Vec<usize> = (k0..=(k0 + 2).min(4)).collect();
        let ems: Vec<ErrorMatrix> = depths
            .iter()
            .map(|&n| error_matrix_mc(&params, &delta, n, 1500, 37).unwrap())
            .collect();
        for w in ems.windows(2) {
            let se_bound: f64 = 4.0
                * math::sqrt(
                    w[0].se.max_abs_entry() * w[0].se.max_abs_entry()
                        + w[1].se.max_abs_entry() * w[1].se.max_abs_entry(),
                );
            assert!(
                w[1].epsilon <= w[0].epsilon + se_bound,
                "epsilon grew past the plateau: {} -> {} (depths {} -> {})",
                w[0].epsilon,
                w[1].epsilon,
                w[0].depth,
                w[1].depth
            );
        }
    }

    #[test]
    fn posterior_outcome_tags_methods() {
        let post = PosteriorVector::new(vec![0.2, 0.8]).unwrap();
        let out = posterior_outcome(&post, false);
        assert_eq!(out.guess, 1);
        assert_eq!(out.method, MethodTag::Bp);
        assert!(!out.fallback);
        assert_eq!(posterior_outcome(&post, true).method, MethodTag::BpNoisy);
    }
}
