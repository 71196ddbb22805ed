//! Priors, shapes, and cloud plumbing: unit-ball and sphere samplers, the
//! icosphere triangulation, cloud normalization, `.xyz`/OBJ file I/O, and
//! synthetic dataset families for desk-scale training.
//!
//! All randomness flows through a seeded ChaCha8 stream ([`Rng`]), so equal
//! seeds give equal outputs on every platform this crate compiles for.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A 3D point in model units.
pub type Point3 = [f64; 3];

/// The deterministic generator used throughout the crate: ChaCha8 keyed by a
/// 64-bit seed. Identical seed, identical stream.
pub type Rng = ChaCha8Rng;

/// Build the canonical generator for a seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dot(a: &Point3, b: &Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(p: &Point3) -> f64 {
    dot(p, p).sqrt()
}

pub fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Squared Euclidean distance between two points.
pub fn dist_sq(a: &Point3, b: &Point3) -> f64 {
    let d = sub(a, b);
    dot(&d, &d)
}

/// An ordered list of 3D points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point3> {
        self.points.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|c| c.is_finite()))
    }

    /// Row-major flat coordinates, length 3N.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }
}

/// Triangle mesh: vertex positions plus index triples.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[usize; 3]>,
}

/// Draw a unit vector uniformly on the sphere: a normalized 3D standard
/// normal. The degenerate near-zero draw is rejected.
fn random_direction(rng: &mut Rng) -> Point3 {
    loop {
        let v: Point3 = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = norm(&v);
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// `n` i.i.d. points uniform on the closed unit ball. Radius is drawn by
/// inverse CDF (`u^(1/3)`), keeping the sample count per seed fixed.
pub fn sample_ball(n: usize, rng: &mut Rng) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::InvalidArg("sample_ball needs n >= 1".into()));
    }
    let points = (0..n)
        .map(|_| {
            let d = random_direction(rng);
            let r = rng.random::<f64>().cbrt();
            [d[0] * r, d[1] * r, d[2] * r]
        })
        .collect();
    Ok(PointCloud::new(points))
}

/// `n` points uniform on the sphere surface of the given radius.
pub fn sample_sphere(n: usize, radius: f64, rng: &mut Rng) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::InvalidArg("sample_sphere needs n >= 1".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidArg(format!("sphere radius must be > 0, got {}", radius)));
    }
    let points = (0..n)
        .map(|_| {
            let d = random_direction(rng);
            [d[0] * radius, d[1] * radius, d[2] * radius]
        })
        .collect();
    Ok(PointCloud::new(points))
}

/// Maximum icosphere subdivision level; level 7 is 163,842 vertices.
pub const MAX_ICOSPHERE_LEVEL: usize = 7;

/// Subdivided icosahedron with every vertex projected to the unit sphere.
/// Connectivity is deterministic for a given level: V = 10*4^level + 2,
/// F = 20*4^level.
pub fn icosphere(level: usize) -> Result<TriMesh> {
    if level > MAX_ICOSPHERE_LEVEL {
        return Err(Error::InvalidArg(format!(
            "icosphere level {} exceeds maximum {}",
            level, MAX_ICOSPHERE_LEVEL
        )));
    }
    // Icosahedron from three orthogonal golden rectangles.
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let mut vertices: Vec<Point3> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    for v in &mut vertices {
        let n = norm(v);
        *v = [v[0] / n, v[1] / n, v[2] / n];
    }
    let mut triangles: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..level {
        let mut midpoint = std::collections::HashMap::new();
        let mut next = Vec::with_capacity(triangles.len() * 4);
        for tri in &triangles {
            let mut mid = [0usize; 3];
            for e in 0..3 {
                let (a, b) = (tri[e], tri[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mid[e] = *midpoint.entry(key).or_insert_with(|| {
                    let (pa, pb) = (vertices[a], vertices[b]);
                    let m = [
                        (pa[0] + pb[0]) / 2.0,
                        (pa[1] + pb[1]) / 2.0,
                        (pa[2] + pb[2]) / 2.0,
                    ];
                    let n = norm(&m);
                    vertices.push([m[0] / n, m[1] / n, m[2] / n]);
                    vertices.len() - 1
                });
            }
            next.push([tri[0], mid[0], mid[2]]);
            next.push([tri[1], mid[1], mid[0]]);
            next.push([tri[2], mid[2], mid[1]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        triangles = next;
    }
    Ok(TriMesh { vertices, triangles })
}

/// Center a cloud on its centroid and scale it into the closed unit ball.
/// Returns the transformed cloud plus the `(centroid, scale)` needed to
/// invert it. A cloud of identical points gets scale 1.
pub fn normalize_cloud(pc: &PointCloud) -> Result<(PointCloud, Point3, f64)> {
    if pc.is_empty() {
        return Err(Error::EmptyCloud("normalize_cloud".into()));
    }
    if !pc.all_finite() {
        return Err(Error::NonFinite {
            op: "normalize_cloud",
            details: "input cloud contains a non-finite coordinate".into(),
        });
    }
    let n = pc.len() as f64;
    let mut centroid = [0.0; 3];
    for p in pc.iter() {
        for (c, v) in centroid.iter_mut().zip(p) {
            *c += v;
        }
    }
    for c in centroid.iter_mut() {
        *c /= n;
    }
    let mut scale = 0.0f64;
    for p in pc.iter() {
        scale = scale.max(norm(&sub(p, &centroid)));
    }
    if scale == 0.0 {
        scale = 1.0;
    }
    let points = pc
        .iter()
        .map(|p| {
            let d = sub(p, &centroid);
            [d[0] / scale, d[1] / scale, d[2] / scale]
        })
        .collect();
    Ok((PointCloud::new(points), centroid, scale))
}

/// Parse a `.xyz` cloud: one `x y z` line per point, `#` comments and blank
/// lines skipped. Rejects empty clouds and malformed lines (with their line
/// number).
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut points = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: format!("expected 3 numeric fields, got {}", fields.len()),
            });
        }
        let mut p = [0.0; 3];
        for (slot, field) in p.iter_mut().zip(&fields) {
            *slot = field.parse::<f64>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: format!("not a number: {:?}", field),
            })?;
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud(format!("{} has no points", path.display())));
    }
    Ok(PointCloud::new(points))
}

/// Write a `.xyz` cloud with 17 significant digits per coordinate, enough
/// for a bit-exact save -> load round trip.
pub fn save_cloud(pc: &PointCloud, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(pc.len() * 72);
    for p in pc.iter() {
        writeln!(out, "{:.16e} {:.16e} {:.16e}", p[0], p[1], p[2]).expect("string write");
    }
    fs::write(path, out).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Write a Wavefront OBJ with `v` and `f` records only (1-based indices).
pub fn save_mesh_obj(mesh: &TriMesh, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(mesh.vertices.len() * 72 + mesh.triangles.len() * 24);
    for v in &mesh.vertices {
        writeln!(out, "v {:.16e} {:.16e} {:.16e}", v[0], v[1], v[2]).expect("string write");
    }
    for t in &mesh.triangles {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).expect("string write");
    }
    fs::write(path, out).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Minimal OBJ reader for round-trip checks: `v` and `f` records, 1-based
/// indices, everything else ignored.
pub fn load_mesh_obj(path: &Path) -> Result<TriMesh> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.first() {
            Some(&"v") if fields.len() == 4 => {
                let mut p = [0.0; 3];
                for (slot, f) in p.iter_mut().zip(&fields[1..]) {
                    *slot = f.parse::<f64>().map_err(|_| Error::Parse {
                        path: path.to_path_buf(),
                        line: idx + 1,
                        msg: format!("bad vertex coordinate {:?}", f),
                    })?;
                }
                vertices.push(p);
            }
            Some(&"f") if fields.len() == 4 => {
                let mut t = [0usize; 3];
                for (slot, f) in t.iter_mut().zip(&fields[1..]) {
                    let i: usize = f.parse().map_err(|_| Error::Parse {
                        path: path.to_path_buf(),
                        line: idx + 1,
                        msg: format!("bad face index {:?}", f),
                    })?;
                    if i == 0 {
                        return Err(Error::Parse {
                            path: path.to_path_buf(),
                            line: idx + 1,
                            msg: "face indices are 1-based".into(),
                        });
                    }
                    *slot = i - 1;
                }
                triangles.push(t);
            }
            _ => {}
        }
    }
    Ok(TriMesh { vertices, triangles })
}

/// Shape family for synthetic datasets. Per-cloud parameters are drawn
/// uniformly from the stored ranges.
#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    /// Axis-aligned ellipsoid surface with semi-axes in the given ranges.
    Ellipsoid {
        a: (f64, f64),
        b: (f64, f64),
        c: (f64, f64),
    },
    /// Surface of an axis-aligned box with half-extents in the given ranges.
    Box {
        a: (f64, f64),
        b: (f64, f64),
        c: (f64, f64),
    },
    /// Two overlapping sphere surfaces centered at (+/-sep, 0, 0); points
    /// strictly inside the other lobe are rejected so only the composite
    /// boundary remains.
    TwoLobe {
        radius: (f64, f64),
        separation: (f64, f64),
    },
}

impl Family {
    /// Parse a CLI-facing family name with its default parameter ranges.
    pub fn from_name(name: &str) -> Result<Family> {
        match name {
            "ellipsoid" => Ok(Family::Ellipsoid {
                a: (0.6, 1.0),
                b: (0.4, 0.9),
                c: (0.3, 0.8),
            }),
            "box" => Ok(Family::Box {
                a: (0.4, 1.0),
                b: (0.4, 1.0),
                c: (0.4, 1.0),
            }),
            "two-lobe" => Ok(Family::TwoLobe {
                radius: (0.45, 0.65),
                separation: (0.35, 0.55),
            }),
            other => Err(Error::InvalidArg(format!(
                "unknown family {:?}; expected ellipsoid, box, or two-lobe",
                other
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Ellipsoid { .. } => "ellipsoid",
            Family::Box { .. } => "box",
            Family::TwoLobe { .. } => "two-lobe",
        }
    }
}

/// Dataset request: `count` clouds of `points` points each.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub family: Family,
    pub count: usize,
    pub points: usize,
}

/// Minimum points per synthetic cloud.
pub const MIN_SYNTH_POINTS: usize = 8;

fn range_sample(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Area-uniform point on an ellipsoid surface by rejection against the area
/// distortion of the unit-sphere map.
fn ellipsoid_point(a: f64, b: f64, c: f64, rng: &mut Rng) -> Point3 {
    let m_max = (b * c).max(a * c).max(a * b);
    loop {
        let u = random_direction(rng);
        let m = ((b * c * u[0]).powi(2) + (a * c * u[1]).powi(2) + (a * b * u[2]).powi(2)).sqrt();
        if rng.random::<f64>() * m_max <= m {
            return [a * u[0], b * u[1], c * u[2]];
        }
    }
}

/// Area-uniform point on a box surface: pick a face with probability
/// proportional to its area, then uniform within the face.
fn box_point(a: f64, b: f64, c: f64, rng: &mut Rng) -> Point3 {
    let areas = [b * c, b * c, a * c, a * c, a * b, a * b];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random::<f64>() * total;
    let mut face = 5;
    for (i, ar) in areas.iter().enumerate() {
        if pick < *ar {
            face = i;
            break;
        }
        pick -= ar;
    }
    let u = rng.random::<f64>() * 2.0 - 1.0;
    let v = rng.random::<f64>() * 2.0 - 1.0;
    match face {
        0 => [a, u * b, v * c],
        1 => [-a, u * b, v * c],
        2 => [u * a, b, v * c],
        3 => [u * a, -b, v * c],
        4 => [u * a, v * b, c],
        _ => [u * a, v * b, -c],
    }
}

fn two_lobe_point(r: f64, sep: f64, rng: &mut Rng) -> Point3 {
    // Both lobes share one radius, so either center is picked evenly.
    loop {
        let sign = if rng.random::<f64>() < 0.5 { 1.0 } else { -1.0 };
        let center = [sign * sep, 0.0, 0.0];
        let d = random_direction(rng);
        let p = [center[0] + r * d[0], center[1] + r * d[1], center[2] + r * d[2]];
        let other = [-center[0], 0.0, 0.0];
        if dist_sq(&p, &other) >= r * r {
            return p;
        }
    }
}

/// Generate `spec.count` clouds with per-cloud shape parameters drawn from
/// the family's ranges. Deterministic per seed.
pub fn synth_dataset(spec: &SynthSpec, rng: &mut Rng) -> Result<Vec<PointCloud>> {
    if spec.count == 0 {
        return Err(Error::InvalidArg("synth_dataset needs count >= 1".into()));
    }
    if spec.points < MIN_SYNTH_POINTS {
        return Err(Error::InvalidArg(format!(
            "synth_dataset needs at least {} points per cloud, got {}",
            MIN_SYNTH_POINTS, spec.points
        )));
    }
    let mut clouds = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let points: Vec<Point3> = match &spec.family {
            Family::Ellipsoid { a, b, c } => {
                let (sa, sb, sc) = (range_sample(rng, *a), range_sample(rng, *b), range_sample(rng, *c));
                (0..spec.points).map(|_| ellipsoid_point(sa, sb, sc, rng)).collect()
            }
            Family::Box { a, b, c } => {
                let (sa, sb, sc) = (range_sample(rng, *a), range_sample(rng, *b), range_sample(rng, *c));
                (0..spec.points).map(|_| box_point(sa, sb, sc, rng)).collect()
            }
            Family::TwoLobe { radius, separation } => {
                let r = range_sample(rng, *radius);
                let sep = range_sample(rng, *separation).min(r * 1.95);
                (0..spec.points).map(|_| two_lobe_point(r, sep, rng)).collect()
            }
        };
        clouds.push(PointCloud::new(points));
    }
    Ok(clouds)
}

/// Fixed-parameter ellipsoid sampler, used by tests against the analytic
/// surface equation.
pub fn ellipsoid_cloud(a: f64, b: f64, c: f64, n: usize, rng: &mut Rng) -> PointCloud {
    PointCloud::new((0..n).map(|_| ellipsoid_point(a, b, c, rng)).collect())
}
