//! Keypoint heatmap codec.
//!
//! Encoding turns keypoint annotations into per-point probability columns
//! via the geodesic Gaussian `p = exp(-d^2 / (2 sigma^2))`, where `d` is the
//! geodesic distance from a cloud point's nearest mesh vertex to the key
//! vertex. Decoding keeps the top 5% of each column as inliers, renormalizes,
//! and takes the probability-weighted mean position; direction fields are
//! averaged in a neighborhood and assembled into right-handed orthonormal
//! frames (x along the midline, z the surface normal, y = z cross x).

use nalgebra::{Matrix3, Point3, Vector3};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::mesh::{nearest_vertices, DeformableMesh, MeshError, PointCloud};

#[derive(Debug, Error)]
pub enum HeatmapError {
    #[error("keypoint annotation is empty")]
    NoKeypoints,
    #[error("key vertex {vertex} out of range ({count} vertices)")]
    KeyVertexOutOfRange { vertex: usize, count: usize },
    #[error("duplicate key vertex {vertex}")]
    DuplicateKeyVertex { vertex: usize },
    #[error("sigma must be positive, got {sigma}")]
    BadSigma { sigma: f64 },
    #[error("probability {value} at ({row}, {col}) outside [0, 1]")]
    ProbOutOfRange { row: usize, col: usize, value: f64 },
    #[error("decoding needs at least 20 points, got {got}")]
    TooFewPoints { got: usize },
    #[error("heatmap has {rows} rows but cloud has {points} points")]
    SizeMismatch { rows: usize, points: usize },
    #[error("column {keypoint} is all zero after inlier selection")]
    ZeroColumn { keypoint: usize },
    #[error("keypoint {keypoint} has no neighbors within radius {radius}")]
    NoNeighbors { keypoint: usize, radius: f64 },
    #[error("keypoint {keypoint} direction field degenerate (cancelling {what})")]
    DegenerateDirection { keypoint: usize, what: &'static str },
    #[error("keypoint {keypoint}: midline direction parallel to normal")]
    MidlineParallelToNormal { keypoint: usize },
    #[error("direction field length {got} does not match cloud size {expected}")]
    FieldLengthMismatch { got: usize, expected: usize },
    #[error("keypoint sets have different sizes: {a} vs {b}")]
    CountMismatch { a: usize, b: usize },
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Ordered key vertices plus the Gaussian width used for encoding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeypointAnnotation {
    pub key_vertices: Vec<usize>,
    /// Geodesic Gaussian width in meters.
    pub sigma: f64,
}

impl KeypointAnnotation {
    pub fn new(key_vertices: Vec<usize>, sigma: f64) -> Result<Self, HeatmapError> {
        if key_vertices.is_empty() {
            return Err(HeatmapError::NoKeypoints);
        }
        if sigma <= 0.0 {
            return Err(HeatmapError::BadSigma { sigma });
        }
        let mut seen = std::collections::BTreeSet::new();
        for &v in &key_vertices {
            if !seen.insert(v) {
                return Err(HeatmapError::DuplicateKeyVertex { vertex: v });
            }
        }
        Ok(Self {
            key_vertices,
            sigma,
        })
    }

    pub fn len(&self) -> usize {
        self.key_vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.key_vertices.is_empty()
    }
}

/// N x K per-point keypoint probabilities, entries in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    probs: Array2<f64>,
}

impl Heatmap {
    pub fn new(probs: Array2<f64>) -> Result<Self, HeatmapError> {
        for ((r, c), &v) in probs.indexed_iter() {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(HeatmapError::ProbOutOfRange {
                    row: r,
                    col: c,
                    value: v,
                });
            }
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn points(&self) -> usize {
        self.probs.nrows()
    }

    pub fn keypoints(&self) -> usize {
        self.probs.ncols()
    }
}

/// The geodesic Gaussian.
pub fn dist_to_prob(d: f64, sigma: f64) -> f64 {
    if d.is_infinite() {
        return 0.0;
    }
    (-d * d / (2.0 * sigma * sigma)).exp()
}

/// Number of inliers kept per column: ceil(5% of N), at least one.
pub fn inlier_count(n: usize) -> usize {
    ((0.05 * n as f64).ceil() as usize).max(1)
}

/// Encode keypoint annotations as a heatmap over `cloud`. Each point takes
/// the geodesic distance of its nearest mesh vertex to every key vertex;
/// unreachable vertices encode as probability zero.
pub fn encode(
    mesh: &DeformableMesh,
    cloud: &PointCloud,
    ann: &KeypointAnnotation,
) -> Result<Heatmap, HeatmapError> {
    let k = ann.len();
    let n = cloud.len();
    for &v in &ann.key_vertices {
        if v >= mesh.vertex_count() {
            return Err(HeatmapError::KeyVertexOutOfRange {
                vertex: v,
                count: mesh.vertex_count(),
            });
        }
    }
    // One geodesic field per key vertex; intrinsic, so reusable across any
    // deformation of the same topology.
    let fields: Vec<Vec<f64>> = ann
        .key_vertices
        .iter()
        .map(|&v| mesh.geodesic_distances(v))
        .collect::<Result<_, _>>()?;
    let nearest = nearest_vertices(mesh, cloud);
    let rows = exec::map_indexed(n, |i| {
        let mut row = vec![0.0; k];
        for (j, field) in fields.iter().enumerate() {
            row[j] = dist_to_prob(field[nearest[i]], ann.sigma);
        }
        row
    });
    let mut probs = Array2::zeros((n, k));
    for (i, row) in rows.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            probs[(i, j)] = p;
        }
    }
    Heatmap::new(probs)
}

/// Decode keypoint positions: per column keep the top-5% entries, zero the
/// rest, renormalize to sum one, and return the weighted mean position.
pub fn decode_positions(
    heatmap: &Heatmap,
    cloud: &PointCloud,
) -> Result<Vec<Point3<f64>>, HeatmapError> {
    let n = cloud.len();
    if n < 20 {
        return Err(HeatmapError::TooFewPoints { got: n });
    }
    if heatmap.points() != n {
        return Err(HeatmapError::SizeMismatch {
            rows: heatmap.points(),
            points: n,
        });
    }
    let keep = inlier_count(n);
    let mut out = Vec::with_capacity(heatmap.keypoints());
    for kcol in 0..heatmap.keypoints() {
        let col = heatmap.probs.column(kcol);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
        let inliers = &order[..keep];
        let total: f64 = inliers.iter().map(|&i| col[i]).sum();
        if total <= 0.0 {
            return Err(HeatmapError::ZeroColumn { keypoint: kcol });
        }
        let mut pos = Vector3::zeros();
        for &i in inliers {
            pos += (col[i] / total) * cloud.points[i].coords;
        }
        out.push(Point3::from(pos));
    }
    Ok(out)
}

/// A keypoint with its right-handed orthonormal frame, columns (x, y, z):
/// x along the midline, z the positive-to-negative surface normal.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientedKeypoint {
    pub position: Point3<f64>,
    pub frame: Matrix3<f64>,
}

impl OrientedKeypoint {
    pub fn x_axis(&self) -> Vector3<f64> {
        self.frame.column(0).into()
    }

    pub fn y_axis(&self) -> Vector3<f64> {
        self.frame.column(1).into()
    }

    pub fn z_axis(&self) -> Vector3<f64> {
        self.frame.column(2).into()
    }

    /// Orthonormality within 1e-6 and det = +1.
    pub fn is_valid_frame(&self) -> bool {
        let f = &self.frame;
        let gram = f.transpose() * f;
        (gram - Matrix3::identity()).norm() < 1e-6 && (f.determinant() - 1.0).abs() < 1e-6
    }
}

/// Keypoints in annotation order.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientedKeypointSet {
    pub keypoints: Vec<OrientedKeypoint>,
}

impl OrientedKeypointSet {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn positions(&self) -> Vec<Point3<f64>> {
        self.keypoints.iter().map(|k| k.position).collect()
    }
}

fn mean_direction(
    indices: &[usize],
    field: &[Vector3<f64>],
    keypoint: usize,
    what: &'static str,
) -> Result<Vector3<f64>, HeatmapError> {
    let mut sum = Vector3::zeros();
    for &i in indices {
        sum += field[i];
    }
    let norm = sum.norm();
    if norm < 1e-12 {
        return Err(HeatmapError::DegenerateDirection { keypoint, what });
    }
    Ok(sum / norm)
}

/// Assemble oriented frames at decoded positions from per-point normal and
/// midline direction fields: z is the neighborhood-mean normal, x the
/// neighborhood-mean midline direction orthogonalized against z, y = z
/// cross x.
pub fn decode_frames(
    positions: &[Point3<f64>],
    cloud: &PointCloud,
    normals: &[Vector3<f64>],
    midlines: &[Vector3<f64>],
    radius: f64,
) -> Result<OrientedKeypointSet, HeatmapError> {
    if normals.len() != cloud.len() {
        return Err(HeatmapError::FieldLengthMismatch {
            got: normals.len(),
            expected: cloud.len(),
        });
    }
    if midlines.len() != cloud.len() {
        return Err(HeatmapError::FieldLengthMismatch {
            got: midlines.len(),
            expected: cloud.len(),
        });
    }
    let mut keypoints = Vec::with_capacity(positions.len());
    for (k, p) in positions.iter().enumerate() {
        let neighbors: Vec<usize> = cloud
            .points
            .iter()
            .enumerate()
            .filter(|(_, q)| (*q - p).norm() <= radius)
            .map(|(i, _)| i)
            .collect();
        if neighbors.is_empty() {
            return Err(HeatmapError::NoNeighbors {
                keypoint: k,
                radius,
            });
        }
        let z = mean_direction(&neighbors, normals, k, "normals")?;
        let x_raw = mean_direction(&neighbors, midlines, k, "midline directions")?;
        let proj = x_raw - x_raw.dot(&z) * z;
        if proj.norm() < 1e-6 {
            return Err(HeatmapError::MidlineParallelToNormal { keypoint: k });
        }
        let x = proj.normalize();
        let y = z.cross(&x);
        keypoints.push(OrientedKeypoint {
            position: *p,
            frame: Matrix3::from_columns(&[x, y, z]),
        });
    }
    Ok(OrientedKeypointSet { keypoints })
}

/// Mean position error (meters) and mean absolute z- and x-axis angular
/// errors (degrees) between two keypoint sets of the same size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularError {
    pub position_m: f64,
    pub z_deg: f64,
    pub x_deg: f64,
}

pub fn angular_error(
    pred: &OrientedKeypointSet,
    truth: &OrientedKeypointSet,
) -> Result<AngularError, HeatmapError> {
    if pred.len() != truth.len() {
        return Err(HeatmapError::CountMismatch {
            a: pred.len(),
            b: truth.len(),
        });
    }
    let k = pred.len() as f64;
    let mut pos = 0.0;
    let mut z = 0.0;
    let mut x = 0.0;
    for (p, t) in pred.keypoints.iter().zip(&truth.keypoints) {
        pos += (p.position - t.position).norm();
        z += p.z_axis().dot(&t.z_axis()).clamp(-1.0, 1.0).acos();
        x += p.x_axis().dot(&t.x_axis()).clamp(-1.0, 1.0).acos();
    }
    Ok(AngularError {
        position_m: pos / k,
        z_deg: (z / k).to_degrees(),
        x_deg: (x / k).to_degrees(),
    })
}

// ------------------------------------------------------------ serialization

#[derive(Debug, Serialize, Deserialize)]
struct KeypointJson {
    position: [f64; 3],
    /// Column-major: x axis, y axis, z axis.
    frame: [f64; 9],
}

/// Write a keypoint set as JSON (position plus nine frame entries each).
pub fn write_keypoints_json(
    set: &OrientedKeypointSet,
    path: &std::path::Path,
) -> Result<(), crate::mesh::io::IoError> {
    let rows: Vec<KeypointJson> = set
        .keypoints
        .iter()
        .map(|kp| {
            let mut frame = [0.0; 9];
            frame.copy_from_slice(kp.frame.as_slice());
            KeypointJson {
                position: [kp.position.x, kp.position.y, kp.position.z],
                frame,
            }
        })
        .collect();
    std::fs::write(path, serde_json::to_string_pretty(&rows)?)?;
    Ok(())
}

/// Read a keypoint set written by [`write_keypoints_json`].
pub fn read_keypoints_json(
    path: &std::path::Path,
) -> Result<OrientedKeypointSet, crate::mesh::io::IoError> {
    let rows: Vec<KeypointJson> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let keypoints = rows
        .into_iter()
        .map(|r| OrientedKeypoint {
            position: Point3::new(r.position[0], r.position[1], r.position[2]),
            frame: Matrix3::from_column_slice(&r.frame),
        })
        .collect();
    Ok(OrientedKeypointSet { keypoints })
}

/// Write a heatmap as CSV rows `(point_id, k, prob)`.
pub fn write_heatmap_csv(
    heatmap: &Heatmap,
    path: &std::path::Path,
) -> Result<(), crate::mesh::io::IoError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["point_id", "k", "prob"])?;
    for ((i, k), &p) in heatmap.probs.indexed_iter() {
        w.write_record([i.to_string(), k.to_string(), p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
