//! Consumer-facing synthesis from a trained model: clouds of any size,
//! meshes by pushing an icosphere through the target network, and both
//! interpolation modes.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{icosphere, norm, rng_from_seed, sample_ball, sample_sphere, PointCloud, Rng, TriMesh};
use crate::model::{encode, hyper_decode, target_forward, HyperModel};

/// Draw a latent vector from the standard normal prior.
pub fn sample_latent(dim: usize, rng: &mut Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Push `n` fresh unit-ball samples through the target network for `z`.
/// `n` is arbitrary; the target network maps points one at a time.
pub fn generate_cloud(model: &HyperModel, z: &[f64], n: usize, rng: &mut Rng) -> Result<PointCloud> {
    let theta = hyper_decode(model, z)?;
    let prior = sample_ball(n, rng)?;
    target_forward(&model.target_arch, &theta, &prior)
}

/// Like [`generate_cloud`] but sampling the prior from a sphere surface of
/// the given radius instead of the ball interior (the boundary-probing
/// variant).
pub fn generate_cloud_from_sphere(
    model: &HyperModel,
    z: &[f64],
    n: usize,
    radius: f64,
    rng: &mut Rng,
) -> Result<PointCloud> {
    let theta = hyper_decode(model, z)?;
    let prior = sample_sphere(n, radius, rng)?;
    target_forward(&model.target_arch, &theta, &prior)
}

/// Mesh extraction: transform the icosphere's vertices with the target
/// network and keep its triangulation unchanged. The unit sphere is the
/// boundary of the training prior, so its image traces the shape's surface;
/// no post-hoc reconstruction step exists.
pub fn generate_mesh(model: &HyperModel, z: &[f64], level: usize) -> Result<TriMesh> {
    generate_mesh_with_radius(model, z, level, 1.0)
}

/// [`generate_mesh`] with the sphere scaled to an experimental radius.
pub fn generate_mesh_with_radius(
    model: &HyperModel,
    z: &[f64],
    level: usize,
    radius: f64,
) -> Result<TriMesh> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArg(format!("mesh sphere radius must be > 0, got {}", radius)));
    }
    let sphere = icosphere(level)?;
    let theta = hyper_decode(model, z)?;
    let scaled = PointCloud::new(
        sphere.vertices.iter().map(|v| [v[0] * radius, v[1] * radius, v[2] * radius]).collect(),
    );
    let out = target_forward(&model.target_arch, &theta, &scaled)?;
    Ok(TriMesh { vertices: out.points, triangles: sphere.triangles })
}

/// One step of a latent interpolation.
pub struct InterpStep {
    pub t: f64,
    pub z: Vec<f64>,
    pub cloud: PointCloud,
    pub mesh: TriMesh,
}

/// Interpolate between two shapes in latent space: encode both clouds
/// deterministically (z = mu), walk the straight line between the means,
/// and generate a cloud and mesh per step. One ball sample set (from `seed`)
/// is shared across steps so endpoints reproduce plain generation and the
/// motion between steps comes from the latent alone.
pub fn interpolate_latent(
    model: &HyperModel,
    cloud_a: &PointCloud,
    cloud_b: &PointCloud,
    steps: usize,
    n: usize,
    level: usize,
    seed: u64,
) -> Result<Vec<InterpStep>> {
    if steps < 2 {
        return Err(Error::InvalidArg(format!("interpolation needs steps >= 2, got {}", steps)));
    }
    let mu_a = encode(model, cloud_a)?.mu;
    let mu_b = encode(model, cloud_b)?.mu;
    let prior = sample_ball(n, &mut rng_from_seed(seed))?;
    let mut out = Vec::with_capacity(steps);
    for s in 0..steps {
        let t = s as f64 / (steps - 1) as f64;
        let z: Vec<f64> = mu_a.iter().zip(&mu_b).map(|(&a, &b)| (1.0 - t) * a + t * b).collect();
        let theta = hyper_decode(model, &z)?;
        let cloud = target_forward(&model.target_arch, &theta, &prior)?;
        let mesh = generate_mesh(model, &z, level)?;
        out.push(InterpStep { t, z, cloud, mesh });
    }
    Ok(out)
}

/// Interpolate between two prior points through one frozen target network:
/// encode the cloud deterministically, decode theta once, and map the
/// straight segment from `p_a` to `p_b` (inside the ball by convexity) point
/// by point onto the shape.
pub fn interpolate_surface(
    model: &HyperModel,
    cloud: &PointCloud,
    p_a: [f64; 3],
    p_b: [f64; 3],
    steps: usize,
) -> Result<Vec<[f64; 3]>> {
    if steps < 2 {
        return Err(Error::InvalidArg(format!("interpolation needs steps >= 2, got {}", steps)));
    }
    for (name, p) in [("p_a", &p_a), ("p_b", &p_b)] {
        if norm(p) > 1.0 + 1e-12 {
            return Err(Error::InvalidArg(format!(
                "{} has norm {} > 1; prior points live in the unit ball",
                name,
                norm(p)
            )));
        }
    }
    let code = encode(model, cloud)?;
    let theta = hyper_decode(model, &code.mu)?;
    let segment: Vec<[f64; 3]> = (0..steps)
        .map(|s| {
            let t = s as f64 / (steps - 1) as f64;
            [
                (1.0 - t) * p_a[0] + t * p_b[0],
                (1.0 - t) * p_a[1] + t * p_b[1],
                (1.0 - t) * p_a[2] + t * p_b[2],
            ]
        })
        .collect();
    debug_assert!(segment.iter().all(|p| norm(p) <= 1.0 + 1e-9));
    let out = target_forward(&model.target_arch, &theta, &PointCloud::new(segment))?;
    Ok(out.points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LossKind, TrainConfig};

    fn small_model(seed: u64) -> HyperModel {
        let mut c = TrainConfig::new(LossKind::Chamfer, 0.0, 1, 0);
        c.latent_dim = 4;
        c.encoder_widths = vec![3, 8, 16];
        c.encoder_head = 8;
        c.decoder_hidden = vec![16];
        c.target_widths = vec![3, 8, 3];
        let mut rng = rng_from_seed(seed);
        HyperModel::init(&c, &mut rng).unwrap()
    }

    #[test]
    fn generate_counts_and_determinism() {
        let model = small_model(1);
        let z = vec![0.2, -0.4, 0.1, 0.7];
        for &n in &[100usize, 1000, 5000] {
            let pc = generate_cloud(&model, &z, n, &mut rng_from_seed(3)).unwrap();
            assert_eq!(pc.len(), n);
            assert!(pc.all_finite());
        }
        let a = generate_cloud(&model, &z, 64, &mut rng_from_seed(9)).unwrap();
        let b = generate_cloud(&model, &z, 64, &mut rng_from_seed(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_theta_collapses_to_origin() {
        let mut model = small_model(2);
        for l in model.decoder.iter_mut() {
            l.w.iter_mut().for_each(|v| *v = 0.0);
            l.b.iter_mut().for_each(|v| *v = 0.0);
        }
        let pc = generate_cloud(&model, &[0.1; 4], 50, &mut rng_from_seed(0)).unwrap();
        assert!(pc.iter().all(|p| *p == [0.0, 0.0, 0.0]));

        let mesh = generate_mesh(&model, &[0.1; 4], 2).unwrap();
        assert_eq!(mesh.vertices.len(), 162);
        assert_eq!(mesh.triangles.len(), 320);
        assert!(mesh.vertices.iter().all(|v| *v == [0.0, 0.0, 0.0]));
    }

    #[test]
    fn mesh_counts_and_connectivity() {
        let model = small_model(3);
        let mesh = generate_mesh(&model, &[0.3, 0.0, -0.2, 0.5], 3).unwrap();
        assert_eq!(mesh.vertices.len(), 642);
        assert_eq!(mesh.triangles.len(), 1280);
        assert_eq!(mesh.triangles, icosphere(3).unwrap().triangles);

        // Connectivity does not depend on z.
        let other = generate_mesh(&model, &[-0.8, 0.1, 0.9, 0.0], 3).unwrap();
        assert_eq!(mesh.triangles, other.triangles);
    }

    #[test]
    fn latent_interpolation_endpoints_match_generation() {
        let model = small_model(4);
        let mut rng = rng_from_seed(5);
        let a = sample_ball(30, &mut rng).unwrap();
        let b = sample_ball(30, &mut rng).unwrap();
        let steps = interpolate_latent(&model, &a, &b, 5, 40, 1, 77).unwrap();
        assert_eq!(steps.len(), 5);

        let mu_a = encode(&model, &a).unwrap().mu;
        let theta = hyper_decode(&model, &mu_a).unwrap();
        let prior = sample_ball(40, &mut rng_from_seed(77)).unwrap();
        let direct = target_forward(&model.target_arch, &theta, &prior).unwrap();
        assert_eq!(steps[0].cloud, direct);
        assert_eq!(steps[0].t, 0.0);
        assert_eq!(steps[4].t, 1.0);
        let mu_b = encode(&model, &b).unwrap().mu;
        assert_eq!(steps[4].z, mu_b);

        let two = interpolate_latent(&model, &a, &b, 2, 16, 0, 1).unwrap();
        assert_eq!(two[0].t, 0.0);
        assert_eq!(two[1].t, 1.0);
        assert!(interpolate_latent(&model, &a, &b, 1, 16, 0, 1).is_err());
    }

    #[test]
    fn surface_interpolation_cases() {
        let model = small_model(6);
        let mut rng = rng_from_seed(7);
        let cloud = sample_ball(25, &mut rng).unwrap();
        let pa = [0.5, 0.0, 0.0];
        let pb = [0.0, -0.5, 0.5];
        let path = interpolate_surface(&model, &cloud, pa, pb, 7).unwrap();
        assert_eq!(path.len(), 7);

        let code = encode(&model, &cloud).unwrap();
        let theta = hyper_decode(&model, &code.mu).unwrap();
        let ends = target_forward(&model.target_arch, &theta, &PointCloud::new(vec![pa, pb])).unwrap();
        assert_eq!(path[0], ends.points[0]);
        assert_eq!(path[6], ends.points[1]);

        let constant = interpolate_surface(&model, &cloud, pa, pa, 4).unwrap();
        assert!(constant.iter().all(|p| *p == constant[0]));

        let outside = [1.5, 0.0, 0.0];
        assert!(interpolate_surface(&model, &cloud, outside, pb, 4).is_err());
    }
}
