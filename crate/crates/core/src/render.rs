//! Depth-projection point cloud renderer.
//!
//! Samples points on the mesh surface (area-weighted, uniform barycentric)
//! and keeps those visible from a pinhole camera: a sample survives if no
//! other surface lies more than a small tolerance closer along its viewing
//! ray. Occlusion regions model a demonstrator's hand: points inside the
//! region are removed no matter what the camera sees.

use nalgebra::{Point3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::mesh::{DeformableMesh, MeshError, PointCloud};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("mesh has no faces to sample")]
    NoFaces,
    #[error("mesh has no surface area")]
    ZeroArea,
    #[error("no sample survived visibility culling")]
    NothingVisible,
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Pinhole camera: only the position matters for visibility.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Camera {
    pub position: [f64; 3],
}

impl Camera {
    pub fn at(x: f64, y: f64, z: f64) -> Self {
        Self {
            position: [x, y, z],
        }
    }

    pub fn point(&self) -> Point3<f64> {
        Point3::new(self.position[0], self.position[1], self.position[2])
    }
}

/// Region in which observations are suppressed (a hand over the cloth).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OcclusionSpec {
    None,
    Sphere { center: [f64; 3], radius: f64 },
    /// Occludes points with `normal . p > offset`.
    HalfSpace { normal: [f64; 3], offset: f64 },
}

impl OcclusionSpec {
    pub fn occludes(&self, p: &Point3<f64>) -> bool {
        match self {
            OcclusionSpec::None => false,
            OcclusionSpec::Sphere { center, radius } => {
                let c = Point3::new(center[0], center[1], center[2]);
                (p - c).norm() <= *radius
            }
            OcclusionSpec::HalfSpace { normal, offset } => {
                let n = Vector3::new(normal[0], normal[1], normal[2]);
                n.dot(&p.coords) > *offset
            }
        }
    }
}

/// Visibility slack along the viewing ray: surfaces this close to the
/// sample (e.g. coincident folded layers) do not occlude it.
pub const VISIBILITY_EPS: f64 = 1e-4;

/// Moller-Trumbore ray/triangle intersection; returns the ray parameter.
fn ray_triangle(
    orig: &Point3<f64>,
    dir: &Vector3<f64>,
    v0: &Point3<f64>,
    v1: &Point3<f64>,
    v2: &Point3<f64>,
) -> Option<f64> {
    let e1 = v1 - v0;
    let e2 = v2 - v0;
    let h = dir.cross(&e2);
    let a = e1.dot(&h);
    if a.abs() < 1e-14 {
        return None;
    }
    let f = 1.0 / a;
    let s = orig - v0;
    let u = f * s.dot(&h);
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = f * dir.dot(&q);
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = f * e2.dot(&q);
    (t > 1e-9).then_some(t)
}

/// Sample `count` surface points (area-weighted faces, uniform barycentric
/// coordinates). Draws from `rng` sequentially, so results are reproducible.
pub fn sample_surface(
    mesh: &DeformableMesh,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Point3<f64>>, RenderError> {
    if mesh.faces().is_empty() {
        return Err(RenderError::NoFaces);
    }
    let mut cumulative = Vec::with_capacity(mesh.faces().len());
    let mut total = 0.0;
    for f in 0..mesh.faces().len() {
        total += mesh.oriented_face_area_normal(f).norm();
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(RenderError::ZeroArea);
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let pick = rng.gen_range(0.0..total);
        let face = cumulative.partition_point(|&c| c <= pick);
        let [i, j, k] = mesh.faces()[face.min(mesh.faces().len() - 1)];
        let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
        let su = r1.sqrt();
        let (b0, b1, b2) = (1.0 - su, su * (1.0 - r2), su * r2);
        let p = mesh.vertices()[i].coords * b0
            + mesh.vertices()[j].coords * b1
            + mesh.vertices()[k].coords * b2;
        out.push(Point3::from(p));
    }
    Ok(out)
}

/// True when nothing blocks the camera's view of `p` by more than
/// [`VISIBILITY_EPS`] along the ray.
pub fn is_visible(mesh: &DeformableMesh, camera: &Camera, p: &Point3<f64>) -> bool {
    let orig = camera.point();
    let dir = p - orig;
    let dist = dir.norm();
    if dist < 1e-12 {
        return true;
    }
    let dir = dir / dist;
    for f in mesh.faces() {
        if let Some(t) = ray_triangle(
            &orig,
            &dir,
            &mesh.vertices()[f[0]],
            &mesh.vertices()[f[1]],
            &mesh.vertices()[f[2]],
        ) {
            if t < dist - VISIBILITY_EPS {
                return false;
            }
        }
    }
    true
}

/// Render a point cloud: sample the surface, cull hidden samples, then
/// drop anything inside the occlusion region.
pub fn render_cloud(
    mesh: &DeformableMesh,
    camera: &Camera,
    occlusion: &OcclusionSpec,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<PointCloud, RenderError> {
    let candidates = sample_surface(mesh, samples, rng)?;
    let keep = exec::map_slice(&candidates, |p| {
        is_visible(mesh, camera, p) && !occlusion.occludes(p)
    });
    let points: Vec<Point3<f64>> = candidates
        .into_iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(p, _)| p)
        .collect();
    if points.is_empty() {
        return Err(RenderError::NothingVisible);
    }
    Ok(PointCloud::new(points)?)
}
