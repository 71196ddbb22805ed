//! Evaluation suite for generated-vs-reference cloud sets: Jensen-Shannon
//! divergence over pooled voxel occupancy, minimum matching distance (MMD),
//! coverage (COV), and leave-one-out 1-NN accuracy (1-NNA), each
//! parameterized by Chamfer or EMD.
//!
//! Directions follow the usual evaluation lineage: COV scans generated ->
//! reference, MMD averages the reference clouds' nearest generated
//! distances. Nearest-neighbor ties break toward the lowest index.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::setdist::{chamfer, emd_exact};

/// Cloud-to-cloud distance used by MMD/COV/1-NNA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DistKind {
    Cd,
    Emd,
}

impl DistKind {
    pub fn eval(self, a: &PointCloud, b: &PointCloud) -> Result<f64> {
        match self {
            DistKind::Cd => chamfer(a, b),
            DistKind::Emd => Ok(emd_exact(a, b)?.0),
        }
    }
}

/// Default per-axis occupancy resolution for JSD.
pub const DEFAULT_JSD_RESOLUTION: usize = 32;

/// Voxel occupancy counts over [-1,1]^3 pooled from every point of a cloud
/// set.
pub struct OccupancyGrid {
    pub resolution: usize,
    pub counts: Vec<u64>,
    pub total: u64,
    /// Points outside [-1,1]^3 that were clamped onto boundary cells.
    pub clamped: u64,
}

impl OccupancyGrid {
    pub fn from_clouds(clouds: &[PointCloud], resolution: usize) -> Result<Self> {
        if clouds.is_empty() {
            return Err(Error::EmptyCloud("occupancy grid needs at least one cloud".into()));
        }
        if resolution == 0 {
            return Err(Error::InvalidArg("occupancy resolution must be >= 1".into()));
        }
        let r = resolution;
        let mut counts = vec![0u64; r * r * r];
        let mut total = 0u64;
        let mut clamped = 0u64;
        for pc in clouds {
            for p in pc.iter() {
                let mut idx = [0usize; 3];
                let mut was_clamped = false;
                for (slot, &c) in idx.iter_mut().zip(p) {
                    let cell = ((c + 1.0) / 2.0 * r as f64).floor();
                    let clamped_cell = cell.clamp(0.0, (r - 1) as f64);
                    if cell != clamped_cell {
                        was_clamped = true;
                    }
                    *slot = clamped_cell as usize;
                }
                if was_clamped {
                    clamped += 1;
                }
                counts[(idx[0] * r + idx[1]) * r + idx[2]] += 1;
                total += 1;
            }
        }
        Ok(OccupancyGrid { resolution: r, counts, total, clamped })
    }

    fn probabilities(&self) -> Vec<f64> {
        let t = self.total as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }
}

/// JSD between two discrete distributions with natural log; cells empty in
/// both are skipped and 0*log 0 is 0. Bounded by ln 2.
pub fn jsd_from_distributions(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidArg(format!(
            "distributions have different supports: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 && qi == 0.0 {
            continue;
        }
        let m = 0.5 * (pi + qi);
        if pi > 0.0 {
            acc += 0.5 * pi * (pi / m).ln();
        }
        if qi > 0.0 {
            acc += 0.5 * qi * (qi / m).ln();
        }
    }
    Ok(acc)
}

/// JSD between the pooled occupancy histograms of two cloud sets. Points
/// outside [-1,1]^3 are clamped to boundary cells; the grids report how many.
pub fn jsd(set_a: &[PointCloud], set_b: &[PointCloud], resolution: usize) -> Result<f64> {
    let ga = OccupancyGrid::from_clouds(set_a, resolution)?;
    let gb = OccupancyGrid::from_clouds(set_b, resolution)?;
    jsd_from_distributions(&ga.probabilities(), &gb.probabilities())
}

/// All pairwise distances between two cloud lists, filled in parallel
/// (each cell is independent; values identical to a serial fill).
fn cross_distances(rows: &[PointCloud], cols: &[PointCloud], dist: DistKind) -> Result<Vec<Vec<f64>>> {
    rows.par_iter()
        .map(|a| cols.iter().map(|b| dist.eval(a, b)).collect::<Result<Vec<f64>>>())
        .collect()
}

fn check_sets(sg: &[PointCloud], sr: &[PointCloud], what: &str) -> Result<()> {
    if sg.is_empty() || sr.is_empty() {
        return Err(Error::EmptyCloud(format!("{} needs nonempty cloud sets", what)));
    }
    Ok(())
}

fn mmd_from(matrix: &[Vec<f64>]) -> f64 {
    // matrix[g][r]: for each reference column, the minimal entry.
    let n_ref = matrix[0].len();
    let mut acc = 0.0;
    for j in 0..n_ref {
        let mut best = f64::INFINITY;
        for row in matrix {
            if row[j] < best {
                best = row[j];
            }
        }
        acc += best;
    }
    acc / n_ref as f64
}

fn cov_from(matrix: &[Vec<f64>]) -> f64 {
    let n_ref = matrix[0].len();
    let mut hit = vec![false; n_ref];
    for row in matrix {
        let mut best = 0usize;
        for (j, &d) in row.iter().enumerate().skip(1) {
            if d < row[best] {
                best = j;
            }
        }
        hit[best] = true;
    }
    hit.iter().filter(|&&h| h).count() as f64 / n_ref as f64
}

/// Minimum matching distance: mean over reference clouds of the distance to
/// their nearest generated cloud.
pub fn mmd(sg: &[PointCloud], sr: &[PointCloud], dist: DistKind) -> Result<f64> {
    check_sets(sg, sr, "mmd")?;
    Ok(mmd_from(&cross_distances(sg, sr, dist)?))
}

/// Coverage: fraction of reference clouds that are the nearest neighbor of
/// at least one generated cloud.
pub fn cov(sg: &[PointCloud], sr: &[PointCloud], dist: DistKind) -> Result<f64> {
    check_sets(sg, sr, "cov")?;
    Ok(cov_from(&cross_distances(sg, sr, dist)?))
}

fn nna_from(union_matrix: &[Vec<f64>], n_gen: usize) -> f64 {
    let n = union_matrix.len();
    let mut correct = 0usize;
    for i in 0..n {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for j in 0..n {
            if j == i {
                continue;
            }
            if union_matrix[i][j] < best_d {
                best_d = union_matrix[i][j];
                best = j;
            }
        }
        let same_side = (i < n_gen) == (best < n_gen);
        if same_side {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

/// Leave-one-out 1-NN two-sample accuracy over the union of both sets;
/// 0.5 means the classifier cannot tell generated from reference.
pub fn nna_1(sg: &[PointCloud], sr: &[PointCloud], dist: DistKind) -> Result<f64> {
    if sg.len() < 2 || sr.len() < 2 {
        return Err(Error::InvalidArg(format!(
            "1-NNA needs at least 2 clouds per set, got {} and {}",
            sg.len(),
            sr.len()
        )));
    }
    let union: Vec<&PointCloud> = sg.iter().chain(sr.iter()).collect();
    let n = union.len();
    // Symmetric matrix; fill the upper triangle in parallel by row.
    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| dist.eval(union[i], union[j]).map(|d| (j, d)))
                .collect::<Result<Vec<(usize, f64)>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut matrix = vec![vec![0.0; n]; n];
    for (i, row) in rows.into_iter().enumerate() {
        for (j, d) in row {
            matrix[i][j] = d;
            matrix[j][i] = d;
        }
    }
    Ok(nna_from(&matrix, sg.len()))
}

/// One metric suite result, serialized into the CLI's JSON report.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub distance: DistKind,
    pub jsd_resolution: usize,
    pub gen_size: usize,
    pub ref_size: usize,
    pub seed: u64,
    pub jsd: f64,
    pub mmd: f64,
    pub cov: f64,
    pub nna_1: f64,
    /// Points clamped onto the [-1,1]^3 boundary while voxelizing, per set.
    pub clamped_gen: u64,
    pub clamped_ref: u64,
}

/// Run all four metrics, computing the generated x reference distance
/// matrix once and sharing it between MMD and COV.
pub fn evaluate_all(
    sg: &[PointCloud],
    sr: &[PointCloud],
    dist: DistKind,
    resolution: usize,
    seed: u64,
) -> Result<MetricReport> {
    check_sets(sg, sr, "evaluate_all")?;
    let ga = OccupancyGrid::from_clouds(sg, resolution)?;
    let gb = OccupancyGrid::from_clouds(sr, resolution)?;
    let jsd_v = jsd_from_distributions(&ga.probabilities(), &gb.probabilities())?;
    let matrix = cross_distances(sg, sr, dist)?;
    let nna = nna_1(sg, sr, dist)?;
    Ok(MetricReport {
        distance: dist,
        jsd_resolution: resolution,
        gen_size: sg.len(),
        ref_size: sr.len(),
        seed,
        jsd: jsd_v,
        mmd: mmd_from(&matrix),
        cov: cov_from(&matrix),
        nna_1: nna,
        clamped_gen: ga.clamped,
        clamped_ref: gb.clamped,
    })
}
