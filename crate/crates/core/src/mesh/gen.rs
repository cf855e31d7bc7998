//! Procedural strip meshes used by scenarios and tests.

use nalgebra::Point3;

use super::{DeformableMesh, MeshError};

/// Rectangular strip in the z=0 plane, `nx` by `ny` vertices, length along
/// +x and centered on y. Faces are wound so the positive surface side faces
/// +z at rest; the midline is the central vertex row (`ny` must be odd).
pub fn strip(length: f64, width: f64, nx: usize, ny: usize) -> Result<DeformableMesh, MeshError> {
    if nx < 2 || ny < 3 || ny % 2 == 0 {
        return Err(MeshError::InvalidStripSpec { nx, ny });
    }
    let dx = length / (nx - 1) as f64;
    let dy = width / (ny - 1) as f64;
    let mut vertices = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            let y = (iy as f64 - (ny - 1) as f64 / 2.0) * dy;
            vertices.push(Point3::new(ix as f64 * dx, y, 0.0));
        }
    }
    let at = |ix: usize, iy: usize| iy * nx + ix;
    let mut faces = Vec::with_capacity(2 * (nx - 1) * (ny - 1));
    for iy in 0..ny - 1 {
        for ix in 0..nx - 1 {
            // CCW viewed from +z: winding normal points toward the positive side.
            faces.push([at(ix, iy), at(ix + 1, iy), at(ix + 1, iy + 1)]);
            faces.push([at(ix, iy), at(ix + 1, iy + 1), at(ix, iy + 1)]);
        }
    }
    let side_flags = vec![1i8; faces.len()];
    let mid_row = (ny - 1) / 2;
    let midline = (0..nx).map(|ix| at(ix, mid_row)).collect();
    DeformableMesh::new(vertices, faces, midline, side_flags)
}

/// `k` indices evenly spaced along a midline of `n` vertices, endpoints
/// included.
pub fn evenly_spaced_midline_indices(n: usize, k: usize) -> Vec<usize> {
    assert!(k >= 1 && n >= k, "need n >= k >= 1, got n={n} k={k}");
    if k == 1 {
        return vec![0];
    }
    (0..k)
        .map(|i| ((i as f64) * (n - 1) as f64 / (k - 1) as f64).round() as usize)
        .collect()
}
