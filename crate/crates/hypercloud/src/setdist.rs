//! Differentiable set-to-set distances: the Chamfer pseudo-distance and an
//! exact Earth Mover's Distance via the Hungarian method, with a factorial
//! brute-force oracle for testing.
//!
//! EMD uses the transport cost `c(x, y) = 0.5 * ||x - y||^2`; reported
//! magnitudes differ from conventions that use the unsquared norm. Chamfer
//! squares both directional terms. Nearest-neighbor and assignment ties
//! break toward the lowest index so gradients are reproducible.

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{dist_sq, PointCloud};

/// An optimal bijection between two equally sized clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// `perm[i]` is the index in the second cloud matched to point `i` of
    /// the first.
    pub perm: Vec<usize>,
    /// Total transport cost under the half-squared-distance convention.
    pub cost: f64,
}

impl Matching {
    fn is_bijection(&self, n: usize) -> bool {
        if self.perm.len() != n {
            return false;
        }
        let mut seen = vec![false; n];
        for &j in &self.perm {
            if j >= n || seen[j] {
                return false;
            }
            seen[j] = true;
        }
        true
    }
}

/// Index of the nearest point of `cloud` to `p`, ties to the lowest index.
fn nearest_index(p: &[f64; 3], cloud: &PointCloud) -> usize {
    let mut best = 0usize;
    let mut best_d = dist_sq(p, &cloud.points[0]);
    for (j, q) in cloud.iter().enumerate().skip(1) {
        let d = dist_sq(p, q);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Chamfer pseudo-distance: both directional sums of squared
/// nearest-neighbor distances. Sizes may differ.
pub fn chamfer(x1: &PointCloud, x2: &PointCloud) -> Result<f64> {
    if x1.is_empty() || x2.is_empty() {
        return Err(Error::EmptyCloud("chamfer".into()));
    }
    let term1: f64 = x1.iter().map(|p| dist_sq(p, &x2.points[nearest_index(p, x2)])).sum();
    let term2: f64 = x2.iter().map(|q| dist_sq(q, &x1.points[nearest_index(q, x1)])).sum();
    Ok(term1 + term2)
}

/// Per-point averaged Chamfer: each directional sum divided by its cloud
/// size. Unlike [`chamfer`], values are comparable across cloud sizes.
pub fn chamfer_mean(x1: &PointCloud, x2: &PointCloud) -> Result<f64> {
    if x1.is_empty() || x2.is_empty() {
        return Err(Error::EmptyCloud("chamfer_mean".into()));
    }
    let term1: f64 = x1.iter().map(|p| dist_sq(p, &x2.points[nearest_index(p, x2)])).sum();
    let term2: f64 = x2.iter().map(|q| dist_sq(q, &x1.points[nearest_index(q, x1)])).sum();
    Ok(term1 / x1.len() as f64 + term2 / x2.len() as f64)
}

/// Exact EMD between equally sized clouds by the Hungarian (Kuhn-Munkres)
/// method on the cost matrix `c[i][j] = 0.5 * ||x1[i] - x2[j]||^2`. Returns
/// the minimal total cost and one optimal bijection. O(n^3); fine for the
/// n <= 512 clouds used in training losses, and usable (with patience) for
/// n = 2048 offline metrics.
pub fn emd_exact(x1: &PointCloud, x2: &PointCloud) -> Result<(f64, Matching)> {
    let n = x1.len();
    if n == 0 {
        return Err(Error::EmptyCloud("emd_exact".into()));
    }
    if x2.len() != n {
        return Err(Error::SizeMismatch(format!(
            "emd_exact needs equally sized clouds, got {} and {}",
            n,
            x2.len()
        )));
    }
    let cost = |i: usize, j: usize| 0.5 * dist_sq(&x1.points[i], &x2.points[j]);

    // Shortest augmenting path with dual potentials, 1-indexed with a
    // sentinel row/column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched_row = vec![0usize; n + 1]; // matched_row[j] = row assigned to column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
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
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[matched_row[j] - 1] = j - 1;
    }
    let total: f64 = (0..n).map(|i| cost(i, perm[i])).sum();
    Ok((total, Matching { perm, cost: total }))
}

/// Maximum cloud size accepted by [`emd_bruteforce`].
pub const EMD_BRUTEFORCE_MAX: usize = 8;

/// Exact minimum over all n! bijections; the testing oracle for
/// [`emd_exact`]. Rejects n > 8.
pub fn emd_bruteforce(x1: &PointCloud, x2: &PointCloud) -> Result<f64> {
    let n = x1.len();
    if n == 0 {
        return Err(Error::EmptyCloud("emd_bruteforce".into()));
    }
    if x2.len() != n {
        return Err(Error::SizeMismatch(format!(
            "emd_bruteforce needs equally sized clouds, got {} and {}",
            n,
            x2.len()
        )));
    }
    if n > EMD_BRUTEFORCE_MAX {
        return Err(Error::InvalidArg(format!(
            "emd_bruteforce enumerates n! bijections; n = {} exceeds the cap of {}",
            n, EMD_BRUTEFORCE_MAX
        )));
    }
    let total = |perm: &[usize]| -> f64 {
        perm.iter()
            .enumerate()
            .map(|(i, &j)| 0.5 * dist_sq(&x1.points[i], &x2.points[j]))
            .sum()
    };

    // Heap's algorithm over the identity permutation.
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = total(&perm);
    let mut counters = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(counters[i], i);
            }
            best = best.min(total(&perm));
            counters[i] += 1;
            i = 0;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    Ok(best)
}

/// Envelope-theorem gradient of EMD w.r.t. the first cloud under a fixed
/// optimal matching: `d cost / d x1[i] = x1[i] - x2[perm[i]]`.
pub fn emd_grad(x1: &PointCloud, x2: &PointCloud, matching: &Matching) -> Result<Vec<[f64; 3]>> {
    let n = x1.len();
    if x2.len() != n {
        return Err(Error::SizeMismatch(format!(
            "emd_grad needs equally sized clouds, got {} and {}",
            n,
            x2.len()
        )));
    }
    if !matching.is_bijection(n) {
        return Err(Error::InvalidArg("emd_grad: matching is not a bijection for this pair".into()));
    }
    Ok(x1
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let q = &x2.points[matching.perm[i]];
            [p[0] - q[0], p[1] - q[1], p[2] - q[2]]
        })
        .collect())
}

/// Copy the rows of `y` (an [n,3] tape node) selected by `idx` into a new
/// [len,3] node, preserving order. Built from flat slices plus concat so the
/// backward pass scatters into the right rows.
fn gather_rows(tape: &mut Tape, y: NodeId, idx: &[usize]) -> Result<NodeId> {
    let parts: Result<Vec<NodeId>> = idx.iter().map(|&i| tape.slice(y, 3 * i, 3)).collect();
    let flat = tape.concat(&parts?)?;
    tape.reshape(flat, vec![idx.len(), 3])
}

fn cloud_node(tape: &mut Tape, pc: &PointCloud) -> NodeId {
    tape.leaf(Tensor::new(vec![pc.len(), 3], pc.flat()).expect("cloud tensor"))
}

fn node_cloud(tape: &Tape, y: NodeId) -> PointCloud {
    let t = tape.value(y);
    PointCloud::new(t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// Chamfer distance between the constant cloud `x` and the tape node `y`
/// ([m,3]), as a scalar node. Nearest-neighbor indices are taken from the
/// current value of `y` and held fixed during backward, ties to the lowest
/// index.
pub fn chamfer_on_tape(tape: &mut Tape, x: &PointCloud, y: NodeId) -> Result<NodeId> {
    if x.is_empty() {
        return Err(Error::EmptyCloud("chamfer_on_tape".into()));
    }
    let yc = node_cloud(tape, y);
    if yc.is_empty() {
        return Err(Error::EmptyCloud("chamfer_on_tape: generated cloud".into()));
    }

    // term1: for each x, its nearest generated row.
    let nn_xy: Vec<usize> = x.iter().map(|p| nearest_index(p, &yc)).collect();
    let y_near = gather_rows(tape, y, &nn_xy)?;
    let x_node = cloud_node(tape, x);
    let neg = tape.neg(y_near)?;
    let diff = tape.add(x_node, neg)?;
    let sq = tape.mul(diff, diff)?;
    let term1 = tape.sum_all(sq)?;

    // term2: for each generated row, its nearest data point (a constant).
    let x_near = PointCloud::new(yc.iter().map(|q| x.points[nearest_index(q, x)]).collect());
    let x_near_node = cloud_node(tape, &x_near);
    let neg = tape.neg(x_near_node)?;
    let diff = tape.add(y, neg)?;
    let sq = tape.mul(diff, diff)?;
    let term2 = tape.sum_all(sq)?;

    tape.add(term1, term2)
}

/// EMD between the constant cloud `x` and the equally sized tape node `y`,
/// as a scalar node. The optimal matching is solved on the current value of
/// `y` and treated as constant during backward.
pub fn emd_on_tape(tape: &mut Tape, x: &PointCloud, y: NodeId) -> Result<NodeId> {
    let yc = node_cloud(tape, y);
    let (_, matching) = emd_exact(x, &yc)?;
    // Row i of x pairs with row perm[i] of y.
    let y_matched = gather_rows(tape, y, &matching.perm)?;
    let x_node = cloud_node(tape, x);
    let neg = tape.neg(y_matched)?;
    let diff = tape.add(x_node, neg)?;
    let sq = tape.mul(diff, diff)?;
    let sum = tape.sum_all(sq)?;
    let half = tape.leaf(Tensor::scalar(0.5));
    tape.mul(half, sum)
}
