//! Poisson branching trees carrying broadcast community labels.
//!
//! A tree is sampled level by level: the root label comes from the prior,
//! every node independently gets a Poisson(`d`) number of children, and each
//! child's label is drawn from the transition row of its parent's label.
//! Sampling stops below `max_depth`. Nodes live in a flat arena in BFS
//! order, so children always carry larger indices than their parents and
//! each depth occupies a contiguous index range.
//!
//! Randomness is split per node: node `i` consumes only stream `i` of the
//! tree's master seed, so a tree is a pure function of `(params, max_depth,
//! seed)` regardless of traversal details. Noisy observations are an
//! overlay: [`apply_noise`] resamples observed labels `tau` without ever
//! touching the true labels `sigma`.

use crate::linalg::SquareMatrix;
use crate::math;
use crate::model::{ModelSpec, NoiseMatrix, TransitionSpec};
use crate::rng::{self, domains};
use crate::stats::RunningMoments;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::borrow::Borrow;
use core::fmt;

/// Parent marker for the root node.
pub const NO_PARENT: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq)]
pub enum TreeError {
    /// No trees supplied to an aggregate statistic.
    EmptyCollection,
    /// Requested depth exceeds the sampled depth bound.
    DepthExceeded { requested: usize, max_depth: usize },
    /// Path half-length outside `1..=k`.
    InvalidRange { ell: usize, k: usize },
    /// Label outside `0..q`.
    LabelOutOfRange { label: usize, q: usize },
}

impl fmt::Display for TreeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreeError::EmptyCollection => write!(f, "statistic over an empty tree collection"),
            TreeError::DepthExceeded { requested, max_depth } => {
                write!(f, "depth {requested} exceeds sampled bound {max_depth}")
            }
            TreeError::InvalidRange { ell, k } => {
                write!(f, "path half-length {ell} invalid for level {k}")
            }
            TreeError::LabelOutOfRange { label, q } => {
                write!(f, "label {label} outside 0..{q}")
            }
        }
    }
}

/// Branching-process parameters: prior, child-label transition matrix, and
/// mean offspring count.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeParams {
    pub pi: Vec<f64>,
    pub p: SquareMatrix,
    pub d: f64,
}

impl TreeParams {
    pub fn new(pi: Vec<f64>, p: SquareMatrix, d: f64) -> Arc<Self> {
        assert_eq!(pi.len(), p.dim(), "prior and transition dimensions differ");
        assert!(d >= 0.0 && d.is_finite());
        Arc::new(TreeParams { pi, p, d })
    }

    pub fn from_model(spec: &ModelSpec, t: &TransitionSpec) -> Arc<Self> {
        Self::new(spec.pi().to_vec(), t.p.clone(), t.d)
    }

    pub fn q(&self) -> usize {
        self.pi.len()
    }
}

/// A sampled broadcast tree in a flat BFS arena.
#[derive(Clone, Debug)]
pub struct BroadcastTree {
    params: Arc<TreeParams>,
    max_depth: usize,
    seed: u64,
    parents: Vec<u32>,
    depths: Vec<u32>,
    sigma: Vec<u8>,
    tau: Option<Vec<u8>>,
    /// `levels[k]` lists the arena indices at depth `k`; always
    /// `max_depth + 1` entries, empty once the process dies out.
    levels: Vec<Vec<u32>>,
}

impl PartialEq for BroadcastTree {
    fn eq(&self, other: &Self) -> bool {
        *self.params == *other.params
            && self.max_depth == other.max_depth
            && self.seed == other.seed
            && self.parents == other.parents
            && self.sigma == other.sigma
            && self.tau == other.tau
    }
}

impl BroadcastTree {
    pub fn params(&self) -> &Arc<TreeParams> {
        &self.params
    }

    pub fn node_count(&self) -> usize {
        self.parents.len()
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        let p = self.parents[i];
        if p == NO_PARENT {
            None
        } else {
            Some(p as usize)
        }
    }

    pub fn depth(&self, i: usize) -> usize {
        self.depths[i] as usize
    }

    pub fn sigma(&self, i: usize) -> usize {
        self.sigma[i] as usize
    }

    pub fn sigmas(&self) -> &[u8] {
        &self.sigma
    }

    /// Observed labels; present for all nodes or for none.
    pub fn taus(&self) -> Option<&[u8]> {
        self.tau.as_deref()
    }

    pub fn has_noise(&self) -> bool {
        self.tau.is_some()
    }

    pub fn levels(&self) -> &[Vec<u32>] {
        &self.levels
    }

    pub fn level(&self, k: usize) -> Result<&[u32], TreeError> {
        self.levels
            .get(k)
            .map(|v| v.as_slice())
            .ok_or(TreeError::DepthExceeded { requested: k, max_depth: self.max_depth })
    }

    /// Extends the sampling depth bound to at least `bound` by padding the
    /// level table with empty levels. Lets a structurally shallow tree
    /// (for example an extracted subtree) stand in for one sampled to a
    /// deeper bound, so deep levels read as extinct instead of out of
    /// range.
    pub fn padded_to_depth(mut self, bound: usize) -> Self {
        while self.levels.len() <= bound {
            self.levels.push(Vec::new());
        }
        self.max_depth = self.max_depth.max(bound);
        self
    }

    /// Assembles a tree from explicit structure. `parents` must be
    /// BFS-ordered (`parents[0] == NO_PARENT`, `parents[i] < i` otherwise);
    /// intended for hand-built fixtures and for reinterpreting graph
    /// neighborhoods as trees.
    pub fn from_parts(
        params: Arc<TreeParams>,
        parents: Vec<u32>,
        sigma: Vec<u8>,
        tau: Option<Vec<u8>>,
        seed: u64,
    ) -> Self {
        let n = parents.len();
        assert!(n > 0, "tree needs at least a root");
        assert_eq!(sigma.len(), n);
        if let Some(t) = &tau {
            assert_eq!(t.len(), n);
        }
        assert_eq!(parents[0], NO_PARENT, "node 0 must be the root");
        let q = params.q() as u8;
        assert!(sigma.iter().all(|&s| s < q), "sigma labels must lie in 0..q");
        if let Some(t) = &tau {
            assert!(t.iter().all(|&s| s < q), "tau labels must lie in 0..q");
        }
        let mut depths = vec![0u32; n];
        let mut max_depth = 0;
        for i in 1..n {
            let p = parents[i];
            assert!(p != NO_PARENT && (p as usize) < i, "parents must be BFS-ordered");
            depths[i] = depths[p as usize] + 1;
            assert!(depths[i] >= depths[i - 1], "depths must be nondecreasing");
            max_depth = max_depth.max(depths[i] as usize);
        }
        let mut levels = vec![Vec::new(); max_depth + 1];
        for i in 0..n {
            levels[depths[i] as usize].push(i as u32);
        }
        BroadcastTree {
            params,
            max_depth,
            seed,
            parents,
            depths,
            sigma,
            tau,
            levels,
        }
    }
}

fn sample_tree_impl(
    params: &Arc<TreeParams>,
    forced_root: Option<u8>,
    max_depth: usize,
    seed: u64,
) -> BroadcastTree {
    let q = params.q();
    let mut parents = vec![NO_PARENT];
    let mut depths = vec![0u32];
    let mut sigma = Vec::with_capacity(1);
    let mut levels = vec![Vec::new(); max_depth + 1];
    levels[0].push(0u32);
    {
        let mut rng = rng::stream_rng(seed, domains::TREE, 0);
        let drawn = rng::sample_categorical(&mut rng, &params.pi) as u8;
        sigma.push(forced_root.unwrap_or(drawn));
    }
    let mut next = 0usize;
    while next < parents.len() {
        let depth = depths[next] as usize;
        if depth >= max_depth {
            next += 1;
            continue;
        }
        let mut rng = rng::stream_rng(seed, domains::TREE, next as u64);
        if next == 0 {
            // Skip past the root-label draw so forced and free roots share
            // the rest of the stream.
            let _ = rng::sample_categorical(&mut rng, &params.pi);
        }
        let children = rng::sample_poisson(&mut rng, params.d);
        let row = params.p.row(sigma[next] as usize);
        debug_assert_eq!(row.len(), q);
        for _ in 0..children {
            let label = rng::sample_categorical(&mut rng, row) as u8;
            let idx = parents.len() as u32;
            assert!(idx != u32::MAX, "tree exceeds arena capacity");
            parents.push(next as u32);
            depths.push(depth as u32 + 1);
            sigma.push(label);
            levels[depth + 1].push(idx);
        }
        next += 1;
    }
    BroadcastTree {
        params: Arc::clone(params),
        max_depth,
        seed,
        parents,
        depths,
        sigma,
        tau: None,
        levels,
    }
}

/// Samples a broadcast tree of depth at most `max_depth`; the root label is
/// drawn from the prior.
pub fn sample_tree(params: &Arc<TreeParams>, max_depth: usize, seed: u64) -> BroadcastTree {
    sample_tree_impl(params, None, max_depth, seed)
}

/// Samples a tree conditioned on the root label. Because the root label is
/// independent of the branching structure, forcing it realizes the exact
/// conditional distribution; the rest of the randomness matches
/// [`sample_tree`] with the same seed.
pub fn sample_tree_with_root(
    params: &Arc<TreeParams>,
    root_label: usize,
    max_depth: usize,
    seed: u64,
) -> Result<BroadcastTree, TreeError> {
    if root_label >= params.q() {
        return Err(TreeError::LabelOutOfRange { label: root_label, q: params.q() });
    }
    Ok(sample_tree_impl(params, Some(root_label as u8), max_depth, seed))
}

/// Returns a copy of `tree` with observed labels `tau` drawn independently
/// per node from the noise row of that node's true label. True labels are
/// never modified; repeated applications with different seeds resample the
/// overlay only.
pub fn apply_noise(tree: &BroadcastTree, delta: &NoiseMatrix, seed: u64) -> BroadcastTree {
    assert_eq!(delta.q(), tree.params.q(), "noise matrix dimension mismatch");
    let mut tau = Vec::with_capacity(tree.node_count());
    for i in 0..tree.node_count() {
        let mut rng = rng::stream_rng(seed, domains::NOISE, i as u64);
        let row = delta.matrix().row(tree.sigma[i] as usize);
        tau.push(rng::sample_categorical(&mut rng, row) as u8);
    }
    let mut out = tree.clone();
    out.tau = Some(tau);
    out
}

/// Sample moments of the population `|L_k|` over a tree collection.
#[derive(Clone, Copy, Debug)]
pub struct LevelSummary {
    pub mean: f64,
    pub variance: f64,
    pub se_mean: f64,
    pub se_variance: f64,
    pub n: u64,
}

/// Mean and unbiased variance of the level-`k` population size, with
/// standard errors for both (the variance SE comes from fourth moments).
/// Every tree must have been sampled with `max_depth >= k`; extinct levels
/// contribute zero counts.
pub fn level_statistics<I, B>(trees: I, k: usize) -> Result<LevelSummary, TreeError>
where
    I: IntoIterator<Item = B>,
    B: Borrow<BroadcastTree>,
{
    let mut acc = RunningMoments::new();
    for tree in trees {
        let tree = tree.borrow();
        let level = tree.level(k)?;
        acc.push(level.len() as f64);
    }
    if acc.count() == 0 {
        return Err(TreeError::EmptyCollection);
    }
    Ok(LevelSummary {
        mean: acc.mean(),
        variance: acc.variance(),
        se_mean: acc.se_mean(),
        se_variance: acc.se_of_variance(),
        n: acc.count(),
    })
}

/// Number of unordered pairs of depth-`k` nodes at tree distance exactly
/// `2 * ell`, i.e. pairs whose closest common ancestor sits at depth
/// `k - ell`.
///
/// Counted by grouping: with `c(a)` the number of depth-`k` descendants of
/// `a`, the pairs meeting at depth `j` or deeper number `sum_{a in L_j}
/// C(c(a), 2)`, so the exact-depth count is that sum at `j = k - ell` minus
/// the same sum at `j = k - ell + 1`.
///
/// Each unordered pair supports two directed traversals, so the directed
/// walk count is twice this value; see [`expected_leaf_paths`] for the
/// matching closed-form mean.
pub fn count_leaf_paths(tree: &BroadcastTree, ell: usize, k: usize) -> Result<u64, TreeError> {
    if k > tree.max_depth {
        return Err(TreeError::DepthExceeded { requested: k, max_depth: tree.max_depth });
    }
    if ell < 1 || ell > k {
        return Err(TreeError::InvalidRange { ell, k });
    }
    let n = tree.node_count();
    let mut descendants = vec![0u64; n];
    for &i in &tree.levels[k] {
        descendants[i as usize] = 1;
    }
    // Push counts toward the ancestor level; BFS order makes a reverse scan
    // visit children before parents.
    let lca_depth = k - ell;
    for i in (0..n).rev() {
        let depth = tree.depths[i] as usize;
        if depth > lca_depth && depth <= k && descendants[i] > 0 {
            descendants[tree.parents[i] as usize] += descendants[i];
        }
    }
    let pairs_at = |level: usize| -> u64 {
        tree.levels[level]
            .iter()
            .map(|&i| {
                let c = descendants[i as usize];
                c * c.saturating_sub(1) / 2
            })
            .sum()
    };
    Ok(pairs_at(lca_depth) - pairs_at(lca_depth + 1))
}

/// Extracts the subtree rooted at `v` as a standalone tree, nodes
/// renumbered in BFS order, labels (and observed labels, if any) carried
/// over. The result's depth bound is its structural depth; use
/// [`BroadcastTree::padded_to_depth`] to reinstate a sampling bound.
pub fn subtree(tree: &BroadcastTree, v: usize) -> BroadcastTree {
    let n = tree.node_count();
    assert!(v < n);
    let mut children: Vec<Vec<u32>> = vec![Vec::new(); n];
    for i in 1..n {
        children[tree.parent(i).expect("i > 0")].push(i as u32);
    }
    let mut order: Vec<u32> = vec![v as u32];
    let mut parents: Vec<u32> = vec![NO_PARENT];
    let mut head = 0usize;
    while head < order.len() {
        let u = order[head] as usize;
        for &c in &children[u] {
            parents.push(head as u32);
            order.push(c);
        }
        head += 1;
    }
    let sigma: Vec<u8> = order.iter().map(|&u| tree.sigmas()[u as usize]).collect();
    let tau: Option<Vec<u8>> = tree
        .taus()
        .map(|t| order.iter().map(|&u| t[u as usize]).collect());
    BroadcastTree::from_parts(Arc::clone(tree.params()), parents, sigma, tau, tree.seed())
}

/// Standard basis vector with a one at `label`.
pub fn one_hot(label: usize, q: usize) -> Result<Vec<f64>, TreeError> {
    if label >= q {
        return Err(TreeError::LabelOutOfRange { label, q });
    }
    let mut v = vec![0.0; q];
    v[label] = 1.0;
    Ok(v)
}

/// Closed-form mean of `|L_k|`: `d^k`.
pub fn expected_level_size(d: f64, k: usize) -> f64 {
    math::powi(d, k as u32)
}

/// Closed-form variance of `|L_k|`: `sum_{i=k}^{2k-1} d^i`.
pub fn expected_level_variance(d: f64, k: usize) -> f64 {
    (k..2 * k).map(|i| math::powi(d, i as u32)).sum()
}

/// Closed-form mean of the number of directed length-`2*ell` walks between
/// distinct depth-`k` nodes: `d^(k+ell)`. This counts each unordered pair
/// once per direction, i.e. it equals twice the expected
/// [`count_leaf_paths`] value.
pub fn expected_leaf_paths(d: f64, ell: usize, k: usize) -> f64 {
    math::powi(d, (k + ell) as u32)
}
