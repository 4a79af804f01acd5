//! Block-model graphs and the amplified reconstruction pipeline.
//!
//! This module houses the graph side of the library: sparse block-model
//! sampling in expected `O(edges)` time, BFS neighborhoods, a spectral
//! stand-in for the initial global partitioner, confusion-matrix
//! estimation from high-degree vertices, label alignment between
//! partitions, and the per-vertex ball recursion that amplifies a crude
//! global partition into per-vertex posterior guesses.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand_chacha::ChaCha8Rng;

use crate::estimators;
use crate::linalg::{self, SquareMatrix};
use crate::math;
use crate::model::{
    check_conditions, ConditionReport, ModelSpec, NoiseMatrix, Spectrum, TransitionSpec,
    NOISE_SINGULARITY_TOL,
};
use crate::rng::{self, domains, sample_categorical, stream_rng, uniform_f64, uniform_index};
use crate::tree::{BroadcastTree, TreeParams, NO_PARENT};

/// Errors from graph sampling, radius selection, and reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub enum GraphError {
    /// A per-pair edge probability `rate / n` exceeded one.
    ProbabilityOverflow { rate: f64, n: usize },
    /// The radius formula needs a maximum rate above 1/2 for its
    /// logarithm to be positive.
    RateTooSmallForRadius { max_rate: f64 },
    /// The radius formula evaluated below one; the caller must supply an
    /// explicit radius.
    DegenerateRadius { raw: f64 },
    /// Reconstruction needs a ball radius of at least one.
    RadiusTooSmall { radius: usize },
    /// The transition matrix is not invertible, so confusion recovery
    /// `delta = p^{-1} f` is impossible.
    SingularTransition { det: f64 },
    /// No candidate vertex was available to represent this community.
    /// The estimator itself degrades to the identity matrix instead of
    /// returning this; the variant exists for strict callers.
    MissingCommunityRepresentative { community: usize },
    /// The model failed a regularity condition and enforcement was on.
    ConditionsNotMet { report: ConditionReport },
}

impl fmt::Display for GraphError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphError::ProbabilityOverflow { rate, n } => {
                write!(f, "edge probability {rate}/{n} exceeds one")
            }
            GraphError::RateTooSmallForRadius { max_rate } => {
                write!(f, "radius formula needs a maximum rate above 1/2, got {max_rate}")
            }
            GraphError::DegenerateRadius { raw } => {
                write!(f, "radius formula yields {raw}, below one; pass a radius explicitly")
            }
            GraphError::RadiusTooSmall { radius } => {
                write!(f, "reconstruction needs radius >= 1, got {radius}")
            }
            GraphError::SingularTransition { det } => {
                write!(f, "transition matrix is singular (det = {det})")
            }
            GraphError::MissingCommunityRepresentative { community } => {
                write!(f, "no representative vertex for community {community}")
            }
            GraphError::ConditionsNotMet { report } => {
                write!(
                    f,
                    "regularity conditions failed (delta = {}, min entry = {})",
                    report.delta, report.xi_floor
                )
            }
        }
    }
}

/// A sampled block-model graph: undirected simple adjacency lists, the
/// planted community labels, and the seed that generated it.
#[derive(Clone, Debug, PartialEq)]
pub struct SbmInstance {
    adjacency: Vec<Vec<u32>>,
    truth: Vec<u8>,
    q: usize,
    seed: u64,
}

impl SbmInstance {
    /// Wraps explicit structure, checking that neighbor lists are sorted,
    /// self-loop-free, duplicate-free, and symmetric, and that labels lie
    /// in `0..q`.
    pub fn from_parts(adjacency: Vec<Vec<u32>>, truth: Vec<u8>, q: usize, seed: u64) -> Self {
        let n = adjacency.len();
        assert_eq!(truth.len(), n, "one label per vertex");
        assert!(q >= 1 && q <= u8::MAX as usize + 1, "community count out of range");
        assert!(truth.iter().all(|&c| (c as usize) < q), "labels must lie in 0..q");
        assert!(n <= u32::MAX as usize, "vertex ids must fit in u32");
        for (v, list) in adjacency.iter().enumerate() {
            for (k, &w) in list.iter().enumerate() {
                assert!((w as usize) < n, "neighbor out of range");
                assert!(w as usize != v, "self-loops are not allowed");
                if k > 0 {
                    assert!(list[k - 1] < w, "neighbor lists must be sorted and duplicate-free");
                }
                let back = &adjacency[w as usize];
                assert!(
                    back.binary_search(&(v as u32)).is_ok(),
                    "adjacency must be symmetric"
                );
            }
        }
        SbmInstance { adjacency, truth, q, seed }
    }

    pub fn n(&self) -> usize {
        self.adjacency.len()
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn truth(&self) -> &[u8] {
        &self.truth
    }

    pub fn neighbors(&self, v: usize) -> &[u32] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(|l| l.len()).sum::<usize>() / 2
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adjacency[u].binary_search(&(v as u32)).is_ok()
    }

    /// The planted labels wrapped as a [`Partition`].
    pub fn truth_partition(&self) -> Partition {
        Partition::from_labels(self.truth.clone(), self.q, PartitionSource::Truth)
    }
}

/// Where a partition came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionSource {
    BlackBox,
    Algorithm1,
    Truth,
}

/// A community assignment for every vertex.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    labels: Vec<u8>,
    q: usize,
    source: PartitionSource,
}

impl Partition {
    pub fn from_labels(labels: Vec<u8>, q: usize, source: PartitionSource) -> Self {
        assert!(q >= 1 && q <= u8::MAX as usize + 1, "community count out of range");
        assert!(labels.iter().all(|&c| (c as usize) < q), "labels must lie in 0..q");
        Partition { labels, q, source }
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn source(&self) -> PartitionSource {
        self.source
    }
}

/// A BFS neighborhood of fixed radius: members in discovery order with
/// exact distances and parent links, the frontier at exactly the radius,
/// and whether the induced subgraph is a tree.
#[derive(Clone, Debug, PartialEq)]
pub struct Ball {
    center: u32,
    radius: usize,
    members: Vec<u32>,
    distances: Vec<u32>,
    parents: Vec<u32>,
    boundary: Vec<u32>,
    induced_edges: usize,
    is_tree_like: bool,
}

impl Ball {
    pub fn center(&self) -> u32 {
        self.center
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Member vertex ids in BFS discovery order (center first).
    pub fn members(&self) -> &[u32] {
        &self.members
    }

    /// BFS distance of each member, parallel to [`Ball::members`].
    pub fn distances(&self) -> &[u32] {
        &self.distances
    }

    /// Members at exactly the radius, in discovery order.
    pub fn boundary(&self) -> &[u32] {
        &self.boundary
    }

    /// Number of edges of the graph with both endpoints in the ball.
    pub fn induced_edges(&self) -> usize {
        self.induced_edges
    }

    /// Whether the induced subgraph is acyclic (exactly `members - 1`
    /// induced edges).
    pub fn is_tree_like(&self) -> bool {
        self.is_tree_like
    }

    /// Member-index of the BFS parent of member `idx`; `None` for the
    /// center.
    pub fn member_parent(&self, idx: usize) -> Option<usize> {
        let p = self.parents[idx];
        if p == NO_PARENT {
            None
        } else {
            Some(p as usize)
        }
    }
}

/// BFS ball of radius `radius` around `v`, with exact distances.
pub fn ball(g: &SbmInstance, v: u32, radius: usize) -> Ball {
    let n = g.n();
    assert!((v as usize) < n, "center out of range");
    let mut member_index = vec![u32::MAX; n];
    let mut members = vec![v];
    let mut distances = vec![0u32];
    let mut parents = vec![NO_PARENT];
    member_index[v as usize] = 0;
    let mut head = 0usize;
    while head < members.len() {
        let u = members[head];
        let du = distances[head];
        if (du as usize) < radius {
            for &w in g.neighbors(u as usize) {
                if member_index[w as usize] == u32::MAX {
                    member_index[w as usize] = members.len() as u32;
                    members.push(w);
                    distances.push(du + 1);
                    parents.push(head as u32);
                }
            }
        }
        head += 1;
    }
    let mut induced_edges = 0usize;
    for &u in &members {
        for &w in g.neighbors(u as usize) {
            if w > u && member_index[w as usize] != u32::MAX {
                induced_edges += 1;
            }
        }
    }
    let boundary: Vec<u32> = members
        .iter()
        .zip(&distances)
        .filter(|&(_, &d)| d as usize == radius)
        .map(|(&u, _)| u)
        .collect();
    let is_tree_like = induced_edges == members.len() - 1;
    Ball { center: v, radius, members, distances, parents, boundary, induced_edges, is_tree_like }
}

/// Cursor over the lexicographic sequence of unordered pairs `(i, j)`,
/// `i < j < m`.
struct PairCursor {
    i: u64,
    j: u64,
    m: u64,
    done: bool,
}

impl PairCursor {
    fn new(m: u64) -> Self {
        PairCursor { i: 0, j: 1, m, done: m < 2 }
    }

    /// Moves `steps` positions forward (zero keeps the current pair).
    fn advance(&mut self, mut steps: u64) {
        if self.done {
            return;
        }
        loop {
            let row_left = self.m - self.j;
            if steps < row_left {
                self.j += steps;
                return;
            }
            steps -= row_left;
            self.i += 1;
            if self.i >= self.m - 1 {
                self.done = true;
                return;
            }
            self.j = self.i + 1;
        }
    }
}

/// Geometric gap to the next success in a Bernoulli(`p`) sequence:
/// the number of failures preceding it. `None` signals the gap provably
/// exceeds `remaining` positions. `ln_miss` caches `ln(1 - p)`.
fn skip_count(r: &mut ChaCha8Rng, p: f64, ln_miss: f64, remaining: u64) -> Option<u64> {
    if p >= 1.0 {
        return Some(0);
    }
    let u = uniform_f64(r);
    let gap = math::floor(math::ln(1.0 - u) / ln_miss);
    if gap >= remaining as f64 {
        None
    } else {
        Some(gap as u64)
    }
}

/// Samples a block-model graph: labels i.i.d. from the prior, then each
/// unordered pair `{u, w}` an edge independently with probability
/// `rates[c_u][c_w] / n`. Runs in expected `O(n + edges)` time by skipping
/// geometrically within each community block.
pub fn sample_sbm(spec: &ModelSpec, seed: u64) -> Result<SbmInstance, GraphError> {
    sample_blocks(spec.q(), spec.pi(), spec.q_scaled(), spec.n(), seed)
}

fn sample_blocks(
    q: usize,
    pi: &[f64],
    rates: &SquareMatrix,
    n: usize,
    seed: u64,
) -> Result<SbmInstance, GraphError> {
    assert!(n >= 1 && n <= u32::MAX as usize, "vertex count out of range");
    let mut label_rng = stream_rng(seed, domains::SBM_LABELS, 0);
    let mut truth = Vec::with_capacity(n);
    let mut communities: Vec<Vec<u32>> = vec![Vec::new(); q];
    for v in 0..n {
        let c = sample_categorical(&mut label_rng, pi);
        truth.push(c as u8);
        communities[c].push(v as u32);
    }
    let mut adjacency: Vec<Vec<u32>> = vec![Vec::new(); n];
    for c1 in 0..q {
        for c2 in c1..q {
            let rate = rates.get(c1, c2);
            let p = rate / n as f64;
            if p > 1.0 {
                return Err(GraphError::ProbabilityOverflow { rate, n });
            }
            if !(p > 0.0) {
                continue;
            }
            let mut r = stream_rng(seed, domains::SBM_BLOCK, (c1 * q + c2) as u64);
            let ln_miss = math::ln(1.0 - p);
            if c1 == c2 {
                let m = communities[c1].len() as u64;
                if m < 2 {
                    continue;
                }
                let total = m * (m - 1) / 2;
                let mut cur = PairCursor::new(m);
                loop {
                    match skip_count(&mut r, p, ln_miss, total) {
                        None => break,
                        Some(s) => cur.advance(s),
                    }
                    if cur.done {
                        break;
                    }
                    let u = communities[c1][cur.i as usize];
                    let w = communities[c1][cur.j as usize];
                    adjacency[u as usize].push(w);
                    adjacency[w as usize].push(u);
                    cur.advance(1);
                    if cur.done {
                        break;
                    }
                }
            } else {
                let m1 = communities[c1].len() as u64;
                let m2 = communities[c2].len() as u64;
                if m1 == 0 || m2 == 0 {
                    continue;
                }
                let total = m1 * m2;
                let mut pos = 0u64;
                loop {
                    match skip_count(&mut r, p, ln_miss, total - pos) {
                        None => break,
                        Some(s) => pos += s,
                    }
                    if pos >= total {
                        break;
                    }
                    let u = communities[c1][(pos / m2) as usize];
                    let w = communities[c2][(pos % m2) as usize];
                    adjacency[u as usize].push(w);
                    adjacency[w as usize].push(u);
                    pos += 1;
                    if pos >= total {
                        break;
                    }
                }
            }
        }
    }
    for list in &mut adjacency {
        list.sort_unstable();
    }
    Ok(SbmInstance::from_parts(adjacency, truth, q, seed))
}

/// Ball radius from the graph size and the largest degree-scale rate:
/// `floor(ln n / (10 ln(2 max_rate)))`. The rate enters at degree scale
/// (order one), so the logarithm is positive only when the largest rate
/// exceeds 1/2; desk-scale `n` usually lands this at 0 or 1, so callers
/// typically pass an explicit radius instead.
pub fn coupling_radius(n: usize, rates: &SquareMatrix) -> Result<usize, GraphError> {
    assert!(n >= 2, "need at least two vertices");
    let max_rate = rates.max_abs_entry();
    if !(max_rate > 0.5) {
        return Err(GraphError::RateTooSmallForRadius { max_rate });
    }
    let raw = math::ln(n as f64) / (10.0 * math::ln(2.0 * max_rate));
    let r = math::floor(raw);
    if !(r >= 1.0) {
        return Err(GraphError::DegenerateRadius { raw });
    }
    Ok(r as usize)
}

/// A pluggable global partitioner. Implementations must label every
/// vertex outside `excluded` (excluded positions receive label 0) and be
/// deterministic in `seed`.
pub trait Partitioner {
    fn partition(
        &self,
        g: &SbmInstance,
        q: usize,
        excluded: Option<&[bool]>,
        seed: u64,
    ) -> Partition;
}

/// Spectral stand-in for the initial global partitioner: top-`q`
/// adjacency eigenvectors by power iteration with deflation, seeded
/// k-means over the eigenvector embedding, then proportion rebalancing
/// that moves lowest-margin vertices first.
#[derive(Clone, Debug)]
pub struct SpectralPartitioner {
    pub power_iterations: usize,
    pub kmeans_restarts: usize,
    pub lloyd_iterations: usize,
    /// Rebalance target; `None` means uniform proportions.
    pub target_proportions: Option<Vec<f64>>,
    pub rebalance: bool,
}

impl Default for SpectralPartitioner {
    fn default() -> Self {
        SpectralPartitioner {
            power_iterations: 60,
            kmeans_restarts: 20,
            lloyd_iterations: 50,
            target_proportions: None,
            rebalance: true,
        }
    }
}

impl SpectralPartitioner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_proportions(pi: Vec<f64>) -> Self {
        SpectralPartitioner { target_proportions: Some(pi), ..Self::default() }
    }
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for e in basis {
        let proj = linalg::dot(v, e);
        for (x, &b) in v.iter_mut().zip(e.iter()) {
            *x -= proj * b;
        }
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let nrm = linalg::norm2(v);
    if nrm > 0.0 {
        for x in v.iter_mut() {
            *x /= nrm;
        }
    }
    nrm
}

fn point_dist2(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Integer targets `t_c` with `sum t_c = total` apportioned to `props` by
/// largest remainder (ties toward smaller index).
fn apportion(props: &[f64], total: usize) -> Vec<usize> {
    let k = props.len();
    let mut base = vec![0usize; k];
    let mut rem: Vec<(f64, usize)> = Vec::with_capacity(k);
    let mut assigned = 0usize;
    for c in 0..k {
        let exact = props[c] * total as f64;
        let fl = math::floor(exact);
        base[c] = fl as usize;
        assigned += base[c];
        rem.push((exact - fl, c));
    }
    rem.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut left = total - assigned.min(total);
    for &(_, c) in &rem {
        if left == 0 {
            break;
        }
        base[c] += 1;
        left -= 1;
    }
    base
}

impl Partitioner for SpectralPartitioner {
    fn partition(
        &self,
        g: &SbmInstance,
        q: usize,
        excluded: Option<&[bool]>,
        seed: u64,
    ) -> Partition {
        assert!(q >= 2, "need at least two communities");
        assert!(q <= u8::MAX as usize, "community count out of range");
        let n = g.n();
        if let Some(m) = excluded {
            assert_eq!(m.len(), n);
        }
        let is_excluded = |v: usize| excluded.map_or(false, |m| m[v]);
        let active: Vec<u32> =
            (0..n as u32).filter(|&v| !is_excluded(v as usize)).collect();
        if active.is_empty() {
            return Partition::from_labels(vec![0; n], q, PartitionSource::BlackBox);
        }
        // Top-q eigenvectors of the (masked) adjacency operator.
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(q);
        for l in 0..q {
            let mut r = stream_rng(seed, domains::SPECTRAL_INIT, l as u64);
            let mut v = vec![0.0f64; n];
            for &u in &active {
                v[u as usize] = uniform_f64(&mut r) - 0.5;
            }
            orthogonalize(&mut v, &basis);
            normalize(&mut v);
            for _ in 0..self.power_iterations {
                let mut w = vec![0.0f64; n];
                for &u in &active {
                    let mut acc = 0.0;
                    for &x in g.neighbors(u as usize) {
                        if !is_excluded(x as usize) {
                            acc += v[x as usize];
                        }
                    }
                    w[u as usize] = acc;
                }
                orthogonalize(&mut w, &basis);
                if normalize(&mut w) < 1e-12 {
                    // Operator rank exhausted; keep the current direction.
                    break;
                }
                v = w;
            }
            basis.push(v);
        }
        // Flat row-major embedding of the active vertices; the k-means
        // loops read it hot, so no per-point allocation.
        let mut emb = vec![0.0f64; active.len() * q];
        for (idx, &u) in active.iter().enumerate() {
            for (l, b) in basis.iter().enumerate() {
                emb[idx * q + l] = b[u as usize];
            }
        }
        // Seeded k-means over the embedding, best of `kmeans_restarts`.
        let mut best_assign: Vec<u8> = vec![0; active.len()];
        let mut best_centroids: Vec<Vec<f64>> = vec![vec![0.0; q]; q];
        let mut best_obj = f64::INFINITY;
        for restart in 0..self.kmeans_restarts {
            let mut r = stream_rng(seed, domains::KMEANS, restart as u64);
            let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(q);
            let first = uniform_index(&mut r, active.len() as u64) as usize;
            centroids.push(emb[first * q..first * q + q].to_vec());
            let mut d2: Vec<f64> = (0..active.len())
                .map(|idx| point_dist2(&emb[idx * q..idx * q + q], &centroids[0]))
                .collect();
            while centroids.len() < q {
                let total: f64 = d2.iter().sum();
                let pick = if total > 0.0 {
                    let target = uniform_f64(&mut r) * total;
                    let mut acc = 0.0;
                    let mut chosen = active.len() - 1;
                    for (idx, &wgt) in d2.iter().enumerate() {
                        acc += wgt;
                        if target < acc {
                            chosen = idx;
                            break;
                        }
                    }
                    chosen
                } else {
                    uniform_index(&mut r, active.len() as u64) as usize
                };
                let c = emb[pick * q..pick * q + q].to_vec();
                for (idx, d) in d2.iter_mut().enumerate() {
                    *d = math::min(*d, point_dist2(&emb[idx * q..idx * q + q], &c));
                }
                centroids.push(c);
            }
            let mut assign: Vec<u8> = vec![0; active.len()];
            for (idx, a) in assign.iter_mut().enumerate() {
                *a = nearest_centroid(&emb[idx * q..idx * q + q], &centroids) as u8;
            }
            for _ in 0..self.lloyd_iterations {
                let mut sums = vec![vec![0.0f64; q]; q];
                let mut counts = vec![0usize; q];
                for (idx, &a) in assign.iter().enumerate() {
                    let c = a as usize;
                    counts[c] += 1;
                    for (s, &x) in sums[c].iter_mut().zip(&emb[idx * q..idx * q + q]) {
                        *s += x;
                    }
                }
                for c in 0..q {
                    if counts[c] > 0 {
                        for s in sums[c].iter_mut() {
                            *s /= counts[c] as f64;
                        }
                        centroids[c] = sums[c].clone();
                    }
                }
                let mut changed = false;
                for (idx, a) in assign.iter_mut().enumerate() {
                    let c = nearest_centroid(&emb[idx * q..idx * q + q], &centroids) as u8;
                    if c != *a {
                        *a = c;
                        changed = true;
                    }
                }
                if !changed {
                    break;
                }
            }
            let obj: f64 = (0..active.len())
                .map(|idx| {
                    point_dist2(&emb[idx * q..idx * q + q], &centroids[assign[idx] as usize])
                })
                .sum();
            if obj < best_obj {
                best_obj = obj;
                best_assign = assign;
                best_centroids = centroids;
            }
        }
        if self.rebalance {
            let uniform = vec![1.0 / q as f64; q];
            let props = self.target_proportions.as_deref().unwrap_or(&uniform);
            assert_eq!(props.len(), q, "one target proportion per community");
            let targets = apportion(props, active.len());
            rebalance_assignments(&emb, &best_centroids, &targets, &mut best_assign);
        }
        let mut labels = vec![0u8; n];
        for (idx, &u) in active.iter().enumerate() {
            labels[u as usize] = best_assign[idx];
        }
        Partition::from_labels(labels, q, PartitionSource::BlackBox)
    }
}

fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (c, cen) in centroids.iter().enumerate() {
        let d = point_dist2(point, cen);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Moves vertices from overfull to underfull clusters until counts match
/// the targets exactly, cheapest (lowest-margin) moves first.
fn rebalance_assignments(
    emb: &[f64],
    centroids: &[Vec<f64>],
    targets: &[usize],
    assign: &mut [u8],
) {
    let q = centroids.len();
    let mut counts = vec![0usize; q];
    for &a in assign.iter() {
        counts[a as usize] += 1;
    }
    // Margins against the fixed post-Lloyd centroids.
    let mut moves: Vec<(f64, usize, u8)> = Vec::new();
    for idx in 0..assign.len() {
        let p = &emb[idx * q..idx * q + q];
        let from = assign[idx] as usize;
        let d_from = point_dist2(p, &centroids[from]);
        for to in 0..q {
            if to != from {
                moves.push((point_dist2(p, &centroids[to]) - d_from, idx, to as u8));
            }
        }
    }
    moves.sort_by(|a, b| {
        a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    });
    loop {
        let mut moved = false;
        for &(_, idx, to) in &moves {
            let from = assign[idx] as usize;
            let to = to as usize;
            if from != to && counts[from] > targets[from] && counts[to] < targets[to] {
                assign[idx] = to as u8;
                counts[from] -= 1;
                counts[to] += 1;
                moved = true;
            }
        }
        let balanced = counts.iter().zip(targets).all(|(c, t)| c == t);
        if balanced || !moved {
            break;
        }
    }
}

/// The default global partitioner with uniform rebalancing proportions.
pub fn black_box_partition(g: &SbmInstance, q: usize, seed: u64) -> Partition {
    SpectralPartitioner::new().partition(g, q, None, seed)
}

/// The relabeling of `candidate` that best agrees with `reference` over
/// `restrict_to` (all vertices when `None`): returns `perm` with
/// `perm[candidate_label] = aligned_label`, maximizing agreement.
/// Exhaustive in lexicographic order for `q <= 8` (so ties resolve to the
/// lexicographically smallest permutation); Hungarian assignment above.
pub fn align_partitions(
    reference: &Partition,
    candidate: &Partition,
    restrict_to: Option<&[bool]>,
) -> Vec<u8> {
    assert_eq!(reference.n(), candidate.n(), "partitions must cover the same vertices");
    assert_eq!(reference.q(), candidate.q(), "partitions must share the community count");
    let q = reference.q();
    if let Some(m) = restrict_to {
        assert_eq!(m.len(), reference.n());
    }
    let mut counts = vec![vec![0i64; q]; q];
    for v in 0..reference.n() {
        if restrict_to.map_or(true, |m| m[v]) {
            counts[candidate.labels[v] as usize][reference.labels[v] as usize] += 1;
        }
    }
    if q <= 8 {
        best_permutation_exhaustive(&counts)
    } else {
        best_permutation_hungarian(&counts)
    }
}

fn permutation_score(counts: &[Vec<i64>], perm: &[u8]) -> i64 {
    perm.iter().enumerate().map(|(a, &b)| counts[a][b as usize]).sum()
}

fn next_permutation(p: &mut [u8]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

fn best_permutation_exhaustive(counts: &[Vec<i64>]) -> Vec<u8> {
    let q = counts.len();
    let mut perm: Vec<u8> = (0..q as u8).collect();
    let mut best = perm.clone();
    let mut best_score = permutation_score(counts, &perm);
    while next_permutation(&mut perm) {
        let s = permutation_score(counts, &perm);
        if s > best_score {
            best_score = s;
            best = perm.clone();
        }
    }
    best
}

/// Maximum-agreement assignment via the potentials form of the Hungarian
/// algorithm on the negated count matrix, `O(q^3)`.
fn best_permutation_hungarian(counts: &[Vec<i64>]) -> Vec<u8> {
    let q = counts.len();
    let max_c = counts.iter().flatten().copied().max().unwrap_or(0);
    let cost = |i: usize, j: usize| max_c - counts[i][j];
    const INF: i64 = i64::MAX / 4;
    let mut u = vec![0i64; q + 1];
    let mut v = vec![0i64; q + 1];
    let mut row_of = vec![0usize; q + 1];
    let mut way = vec![0usize; q + 1];
    for i in 1..=q {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; q + 1];
        let mut used = vec![false; q + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=q {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=q {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0u8; q];
    for j in 1..=q {
        if row_of[j] > 0 {
            perm[row_of[j] - 1] = (j - 1) as u8;
        }
    }
    perm
}

/// Fraction of vertices on which `est` matches `truth` under the best
/// label permutation.
pub fn overlap_accuracy(est: &Partition, truth: &Partition) -> f64 {
    assert_eq!(est.n(), truth.n());
    let perm = align_partitions(truth, est, None);
    let agree = est
        .labels
        .iter()
        .zip(&truth.labels)
        .filter(|&(&e, &t)| perm[e as usize] == t)
        .count();
    agree as f64 / est.n() as f64
}

/// Inputs for confusion estimation.
#[derive(Clone, Copy, Debug)]
pub struct NoiseEstimationCfg<'a> {
    /// The held-out vertex pool; drawn fresh (size `floor(sqrt n)`) from
    /// `seed` when absent.
    pub subset: Option<&'a [u32]>,
    /// Vertices without labels (masked out of the candidate pool and all
    /// frequency counts).
    pub excluded: Option<&'a [bool]>,
    pub seed: u64,
}

/// Outcome of confusion estimation, with selection diagnostics.
#[derive(Clone, Debug)]
pub struct NoiseEstimate {
    pub delta: NoiseMatrix,
    /// `p^{-1} f` before row clamping; `None` on the identity fallback.
    pub raw: Option<SquareMatrix>,
    /// Chosen representative per community.
    pub representatives: Vec<Option<u32>>,
    /// First community with no representative; when set, `delta` is the
    /// identity fallback.
    pub missing_community: Option<usize>,
    pub subset_size: usize,
    /// The degree the selection aimed for, `ln(n) / (4 ln ln n)`.
    pub degree_target: f64,
    /// Whether any candidate met the degree target.
    pub met_degree_target: bool,
}

/// Draws `floor(sqrt n)` distinct vertices by partial shuffle.
fn draw_subset(n: usize, seed: u64) -> Vec<u32> {
    let size = integer_sqrt(n);
    let mut idx: Vec<u32> = (0..n as u32).collect();
    let mut r = stream_rng(seed, domains::SUBSET_U, 0);
    for i in 0..size.min(n) {
        let j = i + uniform_index(&mut r, (n - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(size);
    idx
}

fn integer_sqrt(n: usize) -> usize {
    let mut r = math::floor(math::sqrt(n as f64)) as usize;
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    while r * r > n {
        r -= 1;
    }
    r
}

/// Estimates the confusion matrix of a partition from high-degree
/// representatives: picks, from the held-out pool, one high-degree vertex
/// per community (community read by neighborhood majority vote when the
/// vertex meets the degree target, else from its own label), forms the
/// neighbor-label frequency matrix `f`, and returns the row-wise simplex
/// clamp of `p^{-1} f`. Falls back to the identity matrix (with the
/// missing community recorded) when some community has no candidate.
pub fn estimate_noise_matrix(
    g: &SbmInstance,
    blackbox: &Partition,
    t: &TransitionSpec,
    pi: &[f64],
    cfg: &NoiseEstimationCfg<'_>,
) -> Result<NoiseEstimate, GraphError> {
    let n = g.n();
    let q = t.p.dim();
    assert_eq!(blackbox.n(), n, "partition must cover the graph");
    assert_eq!(blackbox.q(), q, "partition and transition dimensions differ");
    assert_eq!(pi.len(), q, "one prior entry per community");
    let det = t.p.determinant();
    if math::abs(det) <= NOISE_SINGULARITY_TOL {
        return Err(GraphError::SingularTransition { det });
    }
    let is_excluded = |v: usize| cfg.excluded.map_or(false, |m| m[v]);
    let owned_subset;
    let subset: &[u32] = match cfg.subset {
        Some(s) => s,
        None => {
            owned_subset = draw_subset(n, cfg.seed);
            &owned_subset
        }
    };
    let masked_degree = |v: usize| -> usize {
        if cfg.excluded.is_some() {
            g.neighbors(v).iter().filter(|&&w| !is_excluded(w as usize)).count()
        } else {
            g.degree(v)
        }
    };
    let mut candidates: Vec<(usize, u32)> = subset
        .iter()
        .filter(|&&v| !is_excluded(v as usize))
        .map(|&v| (masked_degree(v as usize), v))
        .filter(|&(d, _)| d >= 1)
        .collect();
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let ln_n = math::ln(n as f64);
    let lnln_n = math::ln(ln_n);
    let degree_target =
        if lnln_n > 0.0 { 0.25 * ln_n / lnln_n } else { f64::INFINITY };
    let met_degree_target = candidates.first().map_or(false, |&(d, _)| d as f64 >= degree_target);
    let majority_community = |v: usize| -> usize {
        let mut votes = vec![0usize; q];
        for &w in g.neighbors(v) {
            if !is_excluded(w as usize) {
                votes[blackbox.labels[w as usize] as usize] += 1;
            }
        }
        let best = votes.iter().copied().max().unwrap_or(0);
        if best == 0 {
            blackbox.labels[v] as usize
        } else {
            votes.iter().position(|&c| c == best).unwrap()
        }
    };
    let mut representatives: Vec<Option<u32>> = vec![None; q];
    for &(_, v) in candidates.iter().filter(|&&(d, _)| d as f64 >= degree_target) {
        let c = majority_community(v as usize);
        if representatives[c].is_none() {
            representatives[c] = Some(v);
        }
    }
    if representatives.iter().any(Option::is_none) {
        // Desk-scale fallback: the top few degrees, labeled by their own
        // partition entry.
        let cap = 3 * q;
        for &(_, v) in candidates.iter().filter(|&&(d, _)| (d as f64) < degree_target).take(cap) {
            let c = blackbox.labels[v as usize] as usize;
            if representatives[c].is_none() {
                representatives[c] = Some(v);
            }
        }
    }
    if let Some(missing) = representatives.iter().position(Option::is_none) {
        return Ok(NoiseEstimate {
            delta: NoiseMatrix::identity(q),
            raw: None,
            representatives,
            missing_community: Some(missing),
            subset_size: subset.len(),
            degree_target,
            met_degree_target,
        });
    }
    let mut f = SquareMatrix::zeros(q);
    for (c, rep) in representatives.iter().enumerate() {
        let v = rep.unwrap() as usize;
        let mut counts = vec![0usize; q];
        let mut total = 0usize;
        for &w in g.neighbors(v) {
            if !is_excluded(w as usize) {
                counts[blackbox.labels[w as usize] as usize] += 1;
                total += 1;
            }
        }
        for j in 0..q {
            f.set(c, j, counts[j] as f64 / total as f64);
        }
    }
    let p_inv = t.p.inverse().expect("determinant already checked");
    let raw = p_inv.matmul(&f);
    let mut clamped = SquareMatrix::zeros(q);
    for i in 0..q {
        let row = linalg::project_to_simplex(raw.row(i));
        for j in 0..q {
            clamped.set(i, j, row[j]);
        }
    }
    let delta = NoiseMatrix::new(clamped).expect("simplex rows are valid noise rows");
    Ok(NoiseEstimate {
        delta,
        raw: Some(raw),
        representatives,
        missing_community: None,
        subset_size: subset.len(),
        degree_target,
        met_degree_target,
    })
}

/// Reinterprets a ball as a broadcast tree: BFS parent links become tree
/// edges, any remaining induced edges are discarded (cycle breaking), and
/// the supplied per-vertex labels become the observed noisy layer. The
/// tree is padded so level `radius` exists even when the ball is
/// shallower. Returns the tree and the number of discarded edges.
pub fn ball_as_broadcast_tree(
    g: &SbmInstance,
    b: &Ball,
    params: &Arc<TreeParams>,
    observed: &[u8],
) -> (BroadcastTree, usize) {
    assert_eq!(observed.len(), g.n(), "one observed label per vertex");
    let q = params.q() as u8;
    let count = b.members.len();
    let sigma = vec![0u8; count];
    let tau: Vec<u8> = b
        .members
        .iter()
        .map(|&u| {
            let l = observed[u as usize];
            if l < q {
                l
            } else {
                0
            }
        })
        .collect();
    let tree =
        BroadcastTree::from_parts(Arc::clone(params), b.parents.clone(), sigma, Some(tau), g.seed())
            .padded_to_depth(b.radius);
    let discarded = b.induced_edges + 1 - count;
    (tree, discarded)
}

/// Settings for the full reconstruction pass.
#[derive(Clone, Debug)]
pub struct Algorithm1Config {
    /// Ball radius; computed from [`coupling_radius`] when absent.
    pub radius: Option<usize>,
    pub seed: u64,
    /// Reuse the single global partition for every vertex instead of
    /// re-partitioning with the ball masked (a documented deviation from
    /// the faithful per-vertex procedure).
    pub approx_blackbox: bool,
    /// Fail fast when the model misses a regularity condition.
    pub enforce_conditions: bool,
}

impl Default for Algorithm1Config {
    fn default() -> Self {
        Algorithm1Config {
            radius: None,
            seed: 0,
            approx_blackbox: false,
            enforce_conditions: true,
        }
    }
}

/// Counters and context from a reconstruction pass.
#[derive(Clone, Debug)]
pub struct Algorithm1Diagnostics {
    pub radius: usize,
    /// The held-out pool assigned uniformly at random.
    pub subset: Vec<u32>,
    /// The global reference partition every per-vertex call aligns to.
    pub reference: Partition,
    pub conditions: ConditionReport,
    pub balls_total: usize,
    pub balls_tree_like: usize,
    /// Induced non-tree edges dropped across all balls.
    pub discarded_edges: usize,
    /// Per-vertex confusion estimates that fell back to the identity.
    pub noise_fallbacks: usize,
    /// Per-vertex recursions that failed outright (vertex got the prior
    /// argmax instead).
    pub bp_failures: usize,
    /// Mean of the non-fallback confusion estimates.
    pub mean_noise: Option<NoiseMatrix>,
}

/// A reconstruction result: the partition plus its diagnostics.
#[derive(Clone, Debug)]
pub struct Algorithm1Output {
    pub partition: Partition,
    pub diagnostics: Algorithm1Diagnostics,
}

/// Full reconstruction with the default spectral partitioner, rebalanced
/// toward the model prior.
pub fn reconstruct_algorithm1(
    g: &SbmInstance,
    spec: &ModelSpec,
    t: &TransitionSpec,
    s: &Spectrum,
    cfg: &Algorithm1Config,
) -> Result<Algorithm1Output, GraphError> {
    let partitioner = SpectralPartitioner::with_proportions(spec.pi().to_vec());
    reconstruct_algorithm1_with(g, spec, t, s, cfg, &partitioner)
}

/// Full reconstruction with a caller-supplied partitioner.
///
/// For each vertex outside a held-out pool of size `floor(sqrt n)`: mask
/// the interior ball of radius `radius - 1`, re-partition the remainder,
/// align the result to the global reference partition, estimate the
/// confusion matrix from the pool's high-degree vertices, read the
/// aligned labels on the ball's boundary, run the noisy posterior
/// recursion inward over the ball (cycles broken by keeping BFS tree
/// edges), and assign the vertex its posterior argmax. Pool vertices get
/// uniformly random labels. Deterministic in the seed.
pub fn reconstruct_algorithm1_with<P: Partitioner + ?Sized>(
    g: &SbmInstance,
    spec: &ModelSpec,
    t: &TransitionSpec,
    s: &Spectrum,
    cfg: &Algorithm1Config,
    partitioner: &P,
) -> Result<Algorithm1Output, GraphError> {
    let n = g.n();
    let q = spec.q();
    assert_eq!(g.q(), q, "graph and model community counts differ");
    let radius = match cfg.radius {
        Some(r) => r,
        None => coupling_radius(n, spec.q_scaled())?,
    };
    if radius < 1 {
        return Err(GraphError::RadiusTooSmall { radius });
    }
    let conditions = check_conditions(spec, t, s, None);
    if cfg.enforce_conditions && !conditions.all_conditions_hold() {
        return Err(GraphError::ConditionsNotMet { report: conditions });
    }
    let subset = draw_subset(n, cfg.seed);
    let mut in_subset = vec![false; n];
    for &v in &subset {
        in_subset[v as usize] = true;
    }
    let reference =
        partitioner.partition(g, q, None, rng::mix(cfg.seed, domains::BLACKBOX_GLOBAL));
    let tree_params = TreeParams::new(spec.pi().to_vec(), t.p.clone(), t.d);
    let prior_guess = {
        let mut best = 0usize;
        for (c, &p) in spec.pi().iter().enumerate() {
            if p > spec.pi()[best] {
                best = c;
            }
        }
        best as u8
    };
    let mut labels = vec![0u8; n];
    let mut mask = vec![false; n];
    let mut include = vec![true; n];
    let mut balls_total = 0usize;
    let mut balls_tree_like = 0usize;
    let mut discarded_edges = 0usize;
    let mut noise_fallbacks = 0usize;
    let mut bp_failures = 0usize;
    let mut noise_sum = SquareMatrix::zeros(q);
    let mut noise_count = 0usize;
    let vertex_seed_base = rng::mix(cfg.seed, domains::BLACKBOX_VERTEX);
    for v in 0..n {
        if in_subset[v] {
            continue;
        }
        let bl = ball(g, v as u32, radius);
        balls_total += 1;
        if bl.is_tree_like {
            balls_tree_like += 1;
        }
        let mut masked: Vec<u32> = Vec::new();
        for (idx, &u) in bl.members.iter().enumerate() {
            if (bl.distances[idx] as usize) < radius {
                mask[u as usize] = true;
                include[u as usize] = false;
                masked.push(u);
            }
        }
        let noise_cfg =
            NoiseEstimationCfg { subset: Some(&subset), excluded: Some(&mask), seed: cfg.seed };
        let (aligned, estimate) = if cfg.approx_blackbox {
            let est = estimate_noise_matrix(g, &reference, t, spec.pi(), &noise_cfg)?;
            (reference.labels().to_vec(), est)
        } else {
            let part_v =
                partitioner.partition(g, q, Some(&mask), rng::mix(vertex_seed_base, v as u64));
            let perm = align_partitions(&reference, &part_v, Some(&include));
            let aligned: Vec<u8> =
                part_v.labels().iter().map(|&l| perm[l as usize]).collect();
            let aligned_part =
                Partition::from_labels(aligned.clone(), q, PartitionSource::BlackBox);
            let est = estimate_noise_matrix(g, &aligned_part, t, spec.pi(), &noise_cfg)?;
            (aligned, est)
        };
        if estimate.missing_community.is_some() {
            noise_fallbacks += 1;
        } else {
            for i in 0..q {
                for j in 0..q {
                    noise_sum.set(i, j, noise_sum.get(i, j) + estimate.delta.get(i, j));
                }
            }
            noise_count += 1;
        }
        let (ball_tree, discarded) = ball_as_broadcast_tree(g, &bl, &tree_params, &aligned);
        discarded_edges += discarded;
        labels[v] = match estimators::bp_posterior_noisy(&ball_tree, radius, &estimate.delta) {
            Ok(post) => post.argmax() as u8,
            Err(_) => {
                bp_failures += 1;
                prior_guess
            }
        };
        for &u in &masked {
            mask[u as usize] = false;
            include[u as usize] = true;
        }
    }
    for &v in &subset {
        let mut r = stream_rng(cfg.seed, domains::UNIFORM_ASSIGN, v as u64);
        labels[v as usize] = uniform_index(&mut r, q as u64) as u8;
    }
    let mean_noise = if noise_count > 0 {
        let mut m = SquareMatrix::zeros(q);
        for i in 0..q {
            let mut row: Vec<f64> =
                (0..q).map(|j| noise_sum.get(i, j) / noise_count as f64).collect();
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                for x in row.iter_mut() {
                    *x /= total;
                }
            }
            for j in 0..q {
                m.set(i, j, row[j]);
            }
        }
        NoiseMatrix::new(m).ok()
    } else {
        None
    };
    Ok(Algorithm1Output {
        partition: Partition::from_labels(labels, q, PartitionSource::Algorithm1),
        diagnostics: Algorithm1Diagnostics {
            radius,
            subset,
            reference,
            conditions,
            balls_total,
            balls_tree_like,
            discarded_edges,
            noise_fallbacks,
            bp_failures,
            mean_noise,
        },
    })
}
