//! Mesh geometry: geodesic distances, oriented normals, midline direction
//! fields, and chamfer / L2 set distances.
//!
//! A [`DeformableMesh`] owns current vertex positions plus rest metrics
//! (per-edge rest lengths frozen at construction). Geodesics run over the
//! edge graph with rest-length weights, so they are intrinsic and stay valid
//! while the cloth deforms. All operations here are pure functions of their
//! inputs and safe to call from multiple threads on shared meshes.

pub mod gen;
pub mod io;

use std::collections::BinaryHeap;

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;

/// Degenerate-face area cutoff (square meters).
const MIN_FACE_AREA: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("face {face} references vertex {vertex}, but mesh has {count} vertices")]
    FaceIndexOutOfRange {
        face: usize,
        vertex: usize,
        count: usize,
    },
    #[error("edge ({a}, {b}) has non-positive rest length {length}")]
    ZeroLengthEdge { a: usize, b: usize, length: f64 },
    #[error("side flag count {flags} does not match face count {faces}")]
    SideFlagCount { flags: usize, faces: usize },
    #[error("side flag for face {face} must be +1 or -1, got {value}")]
    SideFlagValue { face: usize, value: i8 },
    #[error("midline contains duplicate vertex {vertex}")]
    MidlineDuplicate { vertex: usize },
    #[error("midline vertices {a} and {b} are consecutive but share no edge")]
    MidlineNotPath { a: usize, b: usize },
    #[error("midline index {vertex} out of range ({count} vertices)")]
    MidlineIndexOutOfRange { vertex: usize, count: usize },
    #[error("mesh is not a single connected component ({reachable} of {count} vertices reachable)")]
    Disconnected { reachable: usize, count: usize },
    #[error("source vertex {vertex} out of range ({count} vertices)")]
    SourceOutOfRange { vertex: usize, count: usize },
    #[error("all faces around vertex {vertex} are degenerate; normal undefined")]
    AllDegenerateNeighborhood { vertex: usize },
    #[error("midline needs at least 2 vertices, got {got}")]
    MidlineTooShort { got: usize },
    #[error("vertex counts differ: {a} vs {b}")]
    VertexCountMismatch { a: usize, b: usize },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("visibility mask length {mask} does not match point count {points}")]
    MaskLengthMismatch { mask: usize, points: usize },
    #[error("position count {got} does not match vertex count {expected}")]
    PositionCountMismatch { got: usize, expected: usize },
    #[error("strip grid needs nx >= 2 and odd ny >= 3, got {nx}x{ny}")]
    InvalidStripSpec { nx: usize, ny: usize },
}

/// Undirected mesh edge with its rest length in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub rest_length: f64,
}

/// Triangle mesh of a deformable strip: current vertex positions, faces,
/// derived rest-length edges, ordered midline, and per-face side flags.
///
/// A side flag of `+1` means the face's winding normal points toward the
/// positive surface side; oriented normals always point from the positive
/// side to the negative side.
#[derive(Debug, Clone)]
pub struct DeformableMesh {
    vertices: Vec<Point3<f64>>,
    faces: Vec<[usize; 3]>,
    edges: Vec<Edge>,
    midline: Vec<usize>,
    side_flags: Vec<i8>,
    /// Per-vertex adjacency: (neighbor, rest length).
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl DeformableMesh {
    /// Build a mesh from vertices, faces, a midline ordering, and per-face
    /// side flags. Edges and their rest lengths are derived from the faces
    /// using the given positions as the rest configuration.
    pub fn new(
        vertices: Vec<Point3<f64>>,
        faces: Vec<[usize; 3]>,
        midline: Vec<usize>,
        side_flags: Vec<i8>,
    ) -> Result<Self, MeshError> {
        let n = vertices.len();
        if side_flags.len() != faces.len() {
            return Err(MeshError::SideFlagCount {
                flags: side_flags.len(),
                faces: faces.len(),
            });
        }
        for (fi, flag) in side_flags.iter().enumerate() {
            if *flag != 1 && *flag != -1 {
                return Err(MeshError::SideFlagValue {
                    face: fi,
                    value: *flag,
                });
            }
        }
        let mut pairs = std::collections::BTreeSet::new();
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if v >= n {
                    return Err(MeshError::FaceIndexOutOfRange {
                        face: fi,
                        vertex: v,
                        count: n,
                    });
                }
            }
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                pairs.insert((a.min(b), a.max(b)));
            }
        }
        let edges = pairs
            .into_iter()
            .map(|(a, b)| Edge {
                a,
                b,
                rest_length: (vertices[a] - vertices[b]).norm(),
            })
            .collect();
        Self::from_parts(vertices, faces, edges, midline, side_flags)
    }

    /// Build a mesh from an explicit edge graph. Rest lengths come from the
    /// given positions. Faces may be empty, in which case only graph and
    /// distance operations are available.
    pub fn from_edge_graph(
        vertices: Vec<Point3<f64>>,
        edge_pairs: &[(usize, usize)],
        midline: Vec<usize>,
    ) -> Result<Self, MeshError> {
        let edges = edge_pairs
            .iter()
            .map(|&(a, b)| Edge {
                a: a.min(b),
                b: a.max(b),
                rest_length: (vertices[a] - vertices[b]).norm(),
            })
            .collect();
        Self::from_parts(vertices, Vec::new(), edges, midline, Vec::new())
    }

    fn from_parts(
        vertices: Vec<Point3<f64>>,
        faces: Vec<[usize; 3]>,
        edges: Vec<Edge>,
        midline: Vec<usize>,
        side_flags: Vec<i8>,
    ) -> Result<Self, MeshError> {
        let n = vertices.len();
        let mut adjacency = vec![Vec::new(); n];
        for e in &edges {
            if e.rest_length <= 0.0 {
                return Err(MeshError::ZeroLengthEdge {
                    a: e.a,
                    b: e.b,
                    length: e.rest_length,
                });
            }
            adjacency[e.a].push((e.b, e.rest_length));
            adjacency[e.b].push((e.a, e.rest_length));
        }

        let mut seen = vec![false; midline.len().max(n)];
        for &v in &midline {
            if v >= n {
                return Err(MeshError::MidlineIndexOutOfRange { vertex: v, count: n });
            }
            if seen[v] {
                return Err(MeshError::MidlineDuplicate { vertex: v });
            }
            seen[v] = true;
        }
        for w in midline.windows(2) {
            if !adjacency[w[0]].iter().any(|&(nb, _)| nb == w[1]) {
                return Err(MeshError::MidlineNotPath { a: w[0], b: w[1] });
            }
        }

        if n > 0 {
            let mut visited = vec![false; n];
            let mut stack = vec![0usize];
            visited[0] = true;
            let mut reachable = 1;
            while let Some(v) = stack.pop() {
                for &(nb, _) in &adjacency[v] {
                    if !visited[nb] {
                        visited[nb] = true;
                        reachable += 1;
                        stack.push(nb);
                    }
                }
            }
            if reachable != n {
                return Err(MeshError::Disconnected { reachable, count: n });
            }
        }

        Ok(Self {
            vertices,
            faces,
            edges,
            midline,
            side_flags,
            adjacency,
        })
    }

    /// Same topology and rest metrics, new current positions.
    pub fn with_positions(&self, positions: Vec<Point3<f64>>) -> Result<Self, MeshError> {
        if positions.len() != self.vertices.len() {
            return Err(MeshError::PositionCountMismatch {
                got: positions.len(),
                expected: self.vertices.len(),
            });
        }
        let mut mesh = self.clone();
        mesh.vertices = positions;
        Ok(mesh)
    }

    pub fn vertices(&self) -> &[Point3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn midline(&self) -> &[usize] {
        &self.midline
    }

    pub fn side_flags(&self) -> &[i8] {
        &self.side_flags
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    /// Neighbors of `v` in the edge graph.
    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency[v].iter().map(|&(nb, _)| nb)
    }

    pub fn mean_edge_length(&self) -> f64 {
        if self.edges.is_empty() {
            return 0.0;
        }
        self.edges.iter().map(|e| e.rest_length).sum::<f64>() / self.edges.len() as f64
    }

    /// Shortest-path distance from `source` to every vertex over the edge
    /// graph with rest-length weights. Unreachable vertices report
    /// `f64::INFINITY`.
    pub fn geodesic_distances(&self, source: usize) -> Result<Vec<f64>, MeshError> {
        let n = self.vertices.len();
        if source >= n {
            return Err(MeshError::SourceOutOfRange {
                vertex: source,
                count: n,
            });
        }
        let mut dist = vec![f64::INFINITY; n];
        dist[source] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(HeapEntry {
            dist: 0.0,
            vertex: source,
        });
        while let Some(HeapEntry { dist: d, vertex: v }) = heap.pop() {
            if d > dist[v] {
                continue;
            }
            for &(nb, w) in &self.adjacency[v] {
                let cand = d + w;
                if cand < dist[nb] {
                    dist[nb] = cand;
                    heap.push(HeapEntry {
                        dist: cand,
                        vertex: nb,
                    });
                }
            }
        }
        Ok(dist)
    }

    /// Oriented area-weighted normal of face `f` (positive side toward
    /// negative side), with magnitude equal to the face area. Zero for
    /// degenerate faces.
    pub fn oriented_face_area_normal(&self, f: usize) -> Vector3<f64> {
        let [i, j, k] = self.faces[f];
        let winding = (self.vertices[j] - self.vertices[i])
            .cross(&(self.vertices[k] - self.vertices[i]))
            * 0.5;
        -(self.side_flags[f] as f64) * winding
    }

    /// Per-vertex unit normals: area-weighted average of incident oriented
    /// face normals, pointing from the positive surface side to the negative
    /// side. Degenerate faces are dropped with a warning; a vertex whose
    /// entire neighborhood is degenerate is an error.
    pub fn vertex_normals(&self) -> Result<Vec<Vector3<f64>>, MeshError> {
        let n = self.vertices.len();
        let mut sums = vec![Vector3::zeros(); n];
        for f in 0..self.faces.len() {
            let area_normal = self.oriented_face_area_normal(f);
            if area_normal.norm() < MIN_FACE_AREA {
                log::warn!("dropping degenerate face {f} from normal averaging");
                continue;
            }
            for &v in &self.faces[f] {
                sums[v] += area_normal;
            }
        }
        let mut normals = Vec::with_capacity(n);
        for (v, s) in sums.iter().enumerate() {
            let norm = s.norm();
            if norm < MIN_FACE_AREA {
                return Err(MeshError::AllDegenerateNeighborhood { vertex: v });
            }
            normals.push(s / norm);
        }
        Ok(normals)
    }

    /// Unit tangents of the midline at each midline vertex: central
    /// differences in midline order, one-sided at the endpoints.
    pub fn midline_tangents(&self) -> Result<Vec<Vector3<f64>>, MeshError> {
        let m = self.midline.len();
        if m < 2 {
            return Err(MeshError::MidlineTooShort { got: m });
        }
        let p = |i: usize| self.vertices[self.midline[i]];
        let mut tangents = Vec::with_capacity(m);
        for i in 0..m {
            let d = if i == 0 {
                p(1) - p(0)
            } else if i == m - 1 {
                p(m - 1) - p(m - 2)
            } else {
                p(i + 1) - p(i - 1)
            };
            tangents.push(d.normalize());
        }
        Ok(tangents)
    }

    /// Per-vertex midline direction: the unit tangent at the nearest midline
    /// vertex (Euclidean in current positions, ties to the earlier midline
    /// index).
    pub fn midline_directions(&self) -> Result<Vec<Vector3<f64>>, MeshError> {
        let tangents = self.midline_tangents()?;
        let out = exec::map_indexed(self.vertices.len(), |v| {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (mi, &mv) in self.midline.iter().enumerate() {
                let d = (self.vertices[v] - self.vertices[mv]).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = mi;
                }
            }
            tangents[best]
        });
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
struct HeapEntry {
    dist: f64,
    vertex: usize,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Min-heap on distance, vertex index as deterministic tiebreak.
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}

/// 3D point set observation, optionally with a per-point visibility mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
    pub visible: Option<Vec<bool>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Result<Self, MeshError> {
        if points.is_empty() {
            return Err(MeshError::EmptyCloud);
        }
        Ok(Self {
            points,
            visible: None,
        })
    }

    pub fn with_visibility(points: Vec<Point3<f64>>, visible: Vec<bool>) -> Result<Self, MeshError> {
        if points.is_empty() {
            return Err(MeshError::EmptyCloud);
        }
        if visible.len() != points.len() {
            return Err(MeshError::MaskLengthMismatch {
                mask: visible.len(),
                points: points.len(),
            });
        }
        Ok(Self {
            points,
            visible: Some(visible),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points with their mask bit set (all points when no mask).
    pub fn visible_points(&self) -> Vec<Point3<f64>> {
        match &self.visible {
            None => self.points.clone(),
            Some(mask) => self
                .points
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(p, _)| *p)
                .collect(),
        }
    }

    /// Index of the point nearest to `q` (ties to the lower index).
    pub fn nearest(&self, q: &Point3<f64>) -> usize {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (p - q).norm_squared();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

fn nearest_distance(p: &Point3<f64>, cloud: &[Point3<f64>]) -> f64 {
    cloud
        .iter()
        .map(|q| (p - q).norm())
        .fold(f64::INFINITY, f64::min)
}

/// Symmetric chamfer distance: mean nearest distance from `a` into `b` plus
/// mean nearest distance from `b` into `a`.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    let da = exec::map_slice(&a.points, |p| nearest_distance(p, &b.points));
    let db = exec::map_slice(&b.points, |p| nearest_distance(p, &a.points));
    let mean_a = da.iter().sum::<f64>() / da.len() as f64;
    let mean_b = db.iter().sum::<f64>() / db.len() as f64;
    mean_a + mean_b
}

/// Mean Euclidean distance over corresponding vertices of two vertex-aligned
/// meshes.
pub fn vertex_l2(a: &DeformableMesh, b: &DeformableMesh) -> Result<f64, MeshError> {
    if a.vertex_count() != b.vertex_count() {
        return Err(MeshError::VertexCountMismatch {
            a: a.vertex_count(),
            b: b.vertex_count(),
        });
    }
    let n = a.vertex_count();
    let sum: f64 = (0..n)
        .map(|i| (a.vertices[i] - b.vertices[i]).norm())
        .sum();
    Ok(sum / n as f64)
}

/// Nearest mesh vertex to each cloud point (ties to the lower vertex index).
pub fn nearest_vertices(mesh: &DeformableMesh, cloud: &PointCloud) -> Vec<usize> {
    exec::map_slice(&cloud.points, |p| {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (v, q) in mesh.vertices.iter().enumerate() {
            let d = (p - q).norm_squared();
            if d < best_d {
                best_d = d;
                best = v;
            }
        }
        best
    })
}

#[cfg(test)]
mod tests;
